#include <Eigen/Dense>
#include <cmath>

#include "vct/backbone.hpp"

namespace vct {

void Backbone::check_inputs(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v) const {
    if (z_t.shape() != latent_shape()) {
        throw ValidationError(kind() + ": latent shape " + shape_str(z_t.shape()) + " != expected " +
                              shape_str(latent_shape()));
    }
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw ValidationError(kind() + ": noise level alpha_bar must lie in (0, 1], got " + std::to_string(alpha_bar));
    }
    v.validate();
    if (v.embed_dim() != embed_dim()) {
        throw ValidationError(kind() + ": embedding dim " + std::to_string(v.embed_dim()) + " != " +
                              std::to_string(embed_dim()));
    }
}

GaussianOracleBackbone::GaussianOracleBackbone(Tensor mean, Tensor variance, Tensor conditioning, int embed_dim)
    : mean_(std::move(mean)), variance_(std::move(variance)), conditioning_(std::move(conditioning)),
      embed_dim_(embed_dim) {
    require_same_shape(mean_, variance_, "gaussian oracle mean/variance");
    for (double s2 : variance_.values()) {
        if (!(s2 > 0.0)) throw ValidationError("gaussian oracle variance entries must be > 0");
    }
    if (embed_dim_ < 1) throw ValidationError("gaussian oracle embed_dim must be >= 1");
    if (!conditioning_.empty()) {
        if (conditioning_.rank() != 2 || conditioning_.dim(0) != static_cast<std::int64_t>(mean_.size()) ||
            conditioning_.dim(1) % embed_dim_ != 0) {
            throw ValidationError("gaussian oracle conditioning matrix has shape " +
                                  shape_str(conditioning_.shape()));
        }
    }
}

Tensor GaussianOracleBackbone::conditional_mean(const ConceptEmbedding& v) const {
    Tensor m = mean_;
    if (conditioning_.empty()) return m;
    if (static_cast<std::int64_t>(v.matrix.size()) != conditioning_.dim(1)) {
        throw ValidationError("gaussian oracle expects " + std::to_string(conditioning_.dim(1) / embed_dim_) +
                              " conditioning tokens, got " + std::to_string(v.num_tokens()));
    }
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> w(conditioning_.data(), conditioning_.dim(0), conditioning_.dim(1));
    Eigen::Map<const Eigen::VectorXd> vf(v.matrix.data(), static_cast<Eigen::Index>(v.matrix.size()));
    Eigen::Map<Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size())) += w * vf;
    return m;
}

Tensor GaussianOracleBackbone::score(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v) const {
    check_inputs(z_t, alpha_bar, v);
    const Tensor m = conditional_mean(v);
    const double sa = std::sqrt(alpha_bar);
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = -(z_t[i] - sa * m[i]) / (alpha_bar * variance_[i] + 1.0 - alpha_bar);
    }
    return out;
}

EvalResult GaussianOracleBackbone::evaluate(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                            const AttentionOverride* override_maps) const {
    check_inputs(z_t, alpha_bar, v);
    if (override_maps) validate_override(*override_maps, {});
    const Tensor m = conditional_mean(v);
    const double sa = std::sqrt(alpha_bar);
    const double sn = std::sqrt(1.0 - alpha_bar);
    Tensor eps(z_t.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i] = sn * (z_t[i] - sa * m[i]) / (alpha_bar * variance_[i] + 1.0 - alpha_bar);
    }
    return {std::move(eps), {}};
}

EmbeddingGradResult GaussianOracleBackbone::evaluate_with_embedding_grad(const Tensor& z_t, double alpha_bar,
                                                                         const ConceptEmbedding& v,
                                                                         const AttentionOverride* override_maps,
                                                                         const LossSeed& seed) const {
    auto fwd = evaluate(z_t, alpha_bar, v, override_maps);
    const Tensor g = seed(fwd.eps);
    require_same_shape(g, fwd.eps, "loss seed");
    Tensor grad_v(v.matrix.shape());
    if (!conditioning_.empty()) {
        // d eps_i / d m_i = -sqrt(ab) sqrt(1-ab) / (ab var_i + 1 - ab); m = mu + W vec(v)
        const double c = -std::sqrt(alpha_bar) * std::sqrt(1.0 - alpha_bar);
        Eigen::VectorXd gm(static_cast<Eigen::Index>(g.size()));
        for (std::size_t i = 0; i < g.size(); ++i) {
            gm[static_cast<Eigen::Index>(i)] = c * g[i] / (alpha_bar * variance_[i] + 1.0 - alpha_bar);
        }
        using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const RowMat> w(conditioning_.data(), conditioning_.dim(0), conditioning_.dim(1));
        Eigen::Map<Eigen::VectorXd>(grad_v.data(), static_cast<Eigen::Index>(grad_v.size())) = w.transpose() * gm;
    }
    return {std::move(fwd.eps), {}, std::move(grad_v)};
}

Tensor oracle_epsilon(const GaussianOracleBackbone& b, const Tensor& z_t, int t, const ConceptEmbedding& v,
                      const NoiseSchedule& s) {
    return b.evaluate(z_t, s.alpha_bar(t), v).eps;
}

}  // namespace vct
