#include "vct/guidance.hpp"

#include <cmath>

namespace vct {

namespace {

void check_w(double w, bool cfg_range) {
    if (!std::isfinite(w)) throw ValidationError("guidance scale must be finite");
    if (w < 0.0) throw ValidationError("guidance scale must be >= 0, got " + std::to_string(w));
    if (cfg_range && w < 1.0) throw ValidationError("guidance scale must be >= 1, got " + std::to_string(w));
}

}  // namespace

void GuidanceConfig::validate(bool require_cfg_range) const { check_w(w, require_cfg_range); }

Tensor fuse_epsilon(const Tensor& eps_a, const Tensor& eps_b, double w) {
    require_same_shape(eps_a, eps_b, "fuse_epsilon");
    if (!std::isfinite(w)) throw ValidationError("fuse_epsilon: non-finite guidance scale");
    Tensor out(eps_a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * eps_a[i] + (1.0 - w) * eps_b[i];
    return out;
}

Tensor cfg_epsilon(const Backbone& b, const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                   const ConceptEmbedding& v_null, double w) {
    check_w(w, true);
    return fuse_epsilon(b.evaluate(z_t, alpha_bar, v).eps, b.evaluate(z_t, alpha_bar, v_null).eps, w);
}

GuidedPrediction guided_epsilon_pair(const Backbone& b, const Tensor& z_t, double alpha_bar,
                                     const ConceptEmbedding& v_src, const ConceptEmbedding& v_other, double w,
                                     const AttentionOverride* override_maps) {
    check_w(w, true);
    auto src = b.evaluate(z_t, alpha_bar, v_src, override_maps);
    auto other = b.evaluate(z_t, alpha_bar, v_other, override_maps);
    return {fuse_epsilon(src.eps, other.eps, w), std::move(src.record)};
}

}  // namespace vct
