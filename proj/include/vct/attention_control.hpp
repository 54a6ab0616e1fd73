#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "vct/guidance.hpp"

namespace vct {

// Which end of the denoising trajectory receives the content branch's maps.
// `early` replaces during the first (noisiest) steps; `late` applies the
// literal "t < tau" gate to the decreasing step index.
enum class InjectionWindow { early, late };

InjectionWindow parse_injection_window(std::string_view name);
std::string_view to_string(InjectionWindow window);

struct AttentionControlConfig {
    double cross_ratio = 0.2;
    double self_ratio = 0.6;
    InjectionWindow window = InjectionWindow::early;
    // Layers eligible for replacement; empty means every instrumented layer.
    std::vector<std::string> layer_mask;

    void validate() const;
    double ratio_for(AttentionKind kind) const {
        return kind == AttentionKind::self_attention ? self_ratio : cross_ratio;
    }
};

// round(ratio * total_steps)
int replaced_step_count(double ratio, int total_steps);

// Whether step t (1..total_steps, denoising runs t = total_steps .. 1) is inside
// the replacement window.
bool replaces_at(double ratio, int t, int total_steps, InjectionWindow window);

// Per slot: the content map where the replacement condition holds; elsewhere
// the slot stays disengaged, i.e. the main branch keeps its own map M_t.
AttentionOverride soft_attention_control(const AttentionRecord& m_main, const AttentionRecord& m_content, int t,
                                         int total_steps, const AttentionControlConfig& cfg);

// The full map set an override resolves to against the main branch's record.
AttentionRecord materialize(const AttentionOverride& ov, const AttentionRecord& m_main);

struct ControlledPrediction {
    Tensor eps;
    AttentionRecord record;       // maps used by the v_src-conditioned pass
    AttentionOverride applied;
};

// Main-branch prediction with attention control: computes (M_t, eps) with
// guided_epsilon_pair, derives the override from M_t and the content maps,
// and re-runs the guided pair with the override installed.
ControlledPrediction apply_control(const Backbone& b, const Tensor& z_t_main, double alpha_bar, int t,
                                   int total_steps, const ConceptEmbedding& v_src, const ConceptEmbedding& v_ref,
                                   double w, const AttentionRecord& m_content, const AttentionControlConfig& cfg);

}  // namespace vct
