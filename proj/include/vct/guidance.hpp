#pragma once

#include "vct/backbone.hpp"

namespace vct {

struct GuidanceConfig {
    double w = 7.5;

    // w finite and >= 0; `require_cfg_range` additionally demands w >= 1.
    void validate(bool require_cfg_range = true) const;
};

// w * eps_a + (1 - w) * eps_b
Tensor fuse_epsilon(const Tensor& eps_a, const Tensor& eps_b, double w);

// Classifier-free guidance: fuse_epsilon(eps(v), eps(v_null), w), w >= 1.
Tensor cfg_epsilon(const Backbone& b, const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                   const ConceptEmbedding& v_null, double w);

struct GuidedPrediction {
    Tensor eps;
    // Maps of the v_src-conditioned pass.
    AttentionRecord record;
};

// Evaluates eps(v_src) and eps(v_other) and fuses them with weight w on the
// source term. `override_maps`, when given, is installed in both passes.
GuidedPrediction guided_epsilon_pair(const Backbone& b, const Tensor& z_t, double alpha_bar,
                                     const ConceptEmbedding& v_src, const ConceptEmbedding& v_other, double w,
                                     const AttentionOverride* override_maps = nullptr);

}  // namespace vct
