#include "gpssm/model.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

void validate(const GpssmModel& model) {
    validate(model.gp);
    validate(model.recognition);
    const Eigen::Index d = model.state_dim(), o = model.obs_dim(), p = model.action_dim();
    if (o < 1) throw InputError("GpssmModel: need at least one observed channel");
    if (model.emission.W.cols() != d)
        throw InputError("GpssmModel: emission width does not match the state dimension");
    if (model.emission.b.size() != o)
        throw InputError("GpssmModel: emission offset does not match the observation dimension");
    if (!(model.emission.sigma_g2 > 0.0) || !std::isfinite(model.emission.sigma_g2))
        throw InputError("GpssmModel: observation-noise variance must be positive");
    if (model.recognition.state_dim != d)
        throw InputError("GpssmModel: recognition state dimension does not match the GP");
    if (model.recognition.input_dim != o + p)
        throw InputError("GpssmModel: recognition input must be observation plus action width");
}

EmissionModel coordinate_emission(Eigen::Index obs_dim, Eigen::Index state_dim, double sigma_g2,
                                  bool learned) {
    if (obs_dim < 1 || state_dim < 1)
        throw InputError("coordinate_emission: dimensions must be positive");
    if (obs_dim > state_dim)
        throw InputError("coordinate_emission: cannot observe more coordinates than states");
    EmissionModel em;
    em.W = Matrix::Zero(obs_dim, state_dim);
    for (Eigen::Index i = 0; i < obs_dim; ++i) em.W(i, i) = 1.0;
    em.b = Vector::Zero(obs_dim);
    em.sigma_g2 = sigma_g2;
    em.learned = learned;
    return em;
}

Matrix init_inducing(const std::vector<Episode>& episodes, const EmissionModel& emission,
                     Eigen::Index num_inducing, Eigen::Index action_dim, Rng& rng) {
    if (episodes.empty()) throw InputError("init_inducing: need at least one episode");
    if (num_inducing < 1) throw InputError("init_inducing: need at least one inducing input");
    const Eigen::Index d = emission.W.cols();

    auto cod = emission.W.completeOrthogonalDecomposition();
    Vector lo = Vector::Constant(d + action_dim, std::numeric_limits<double>::infinity());
    Vector hi = -lo;
    for (const Episode& ep : episodes) {
        Matrix centered = ep.Y.transpose().colwise() - emission.b;  // O x T
        Matrix states = cod.solve(centered).transpose();            // T x D
        for (Eigen::Index j = 0; j < d; ++j) {
            lo(j) = std::min(lo(j), states.col(j).minCoeff());
            hi(j) = std::max(hi(j), states.col(j).maxCoeff());
        }
        for (Eigen::Index j = 0; j < action_dim; ++j) {
            lo(d + j) = std::min(lo(d + j), ep.A.col(j).minCoeff());
            hi(d + j) = std::max(hi(d + j), ep.A.col(j).maxCoeff());
        }
    }

    Matrix Z(num_inducing, d + action_dim);
    for (Eigen::Index j = 0; j < d + action_dim; ++j) {
        const double range = hi(j) - lo(j);
        const double pad = range > 1e-6 ? 0.1 * range : 0.5;
        for (Eigen::Index i = 0; i < num_inducing; ++i)
            Z(i, j) = rng.uniform(lo(j) - pad, hi(j) + pad);
    }
    return Z;
}

GpssmModel init_model(const ModelInit& init, const std::vector<Episode>& episodes,
                      Eigen::Index obs_dim, Eigen::Index action_dim, Rng& rng) {
    GpssmModel model;
    model.emission =
        coordinate_emission(obs_dim, init.state_dim, init.sigma_g2, init.learn_emission);
    Matrix Z = init_inducing(episodes, model.emission, init.num_inducing, action_dim, rng);
    model.gp = init_sparse_gp(init.kernel, Z, init.state_dim, init.sigma_f2, init.learn_gp_noise);
    model.recognition =
        init_recognition(obs_dim + action_dim, init.hidden_dim, init.state_dim, rng);
    validate(model);
    return model;
}

std::vector<std::pair<std::string, Matrix>> model_raw_params(const GpssmModel& model) {
    auto out = sparse_gp_raw_params(model.gp, "gp.");
    if (model.emission.learned) {
        out.emplace_back("emission.W", model.emission.W);
        out.emplace_back("emission.b", Matrix(model.emission.b));
        out.emplace_back("emission.sigma_g2_raw",
                         Matrix::Constant(1, 1, ad::softplus_inverse(model.emission.sigma_g2)));
    }
    auto rec = recognition_raw_params(model.recognition, "recognition.");
    out.insert(out.end(), rec.begin(), rec.end());
    return out;
}

ModelVars bind_model(ad::Tape& tape, const GpssmModel& model, const RawParamFn& lookup) {
    ModelVars out;
    out.gp = bind_sparse_gp(tape, model.gp, "gp.", lookup);
    if (model.emission.learned) {
        out.emission.W = lookup("emission.W");
        out.emission.b = lookup("emission.b");
        out.emission.sigma_g2 = ad::cwise_softplus(lookup("emission.sigma_g2_raw"));
    } else {
        out.emission.W = tape.constant(model.emission.W);
        out.emission.b = tape.constant(Matrix(model.emission.b));
        out.emission.sigma_g2 = tape.constant(Matrix::Constant(1, 1, model.emission.sigma_g2));
    }
    out.recognition = bind_recognition(tape, model.recognition, "recognition.", lookup);
    return out;
}

GpssmModel model_from_raw(const GpssmModel& structure,
                          const std::function<Matrix(const std::string&)>& raw) {
    GpssmModel out = structure;
    out.gp = sparse_gp_from_raw(structure.gp, "gp.", raw);
    if (structure.emission.learned) {
        out.emission.W = raw("emission.W");
        out.emission.b = raw("emission.b");
        out.emission.sigma_g2 = ad::softplus(raw("emission.sigma_g2_raw")(0, 0));
    }
    out.recognition = recognition_from_raw(structure.recognition, "recognition.", raw);
    return out;
}

}  // namespace gpssm
