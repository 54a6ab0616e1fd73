#include "vct/attention_control.hpp"

#include <algorithm>
#include <cmath>

namespace vct {

InjectionWindow parse_injection_window(std::string_view name) {
    if (name == "early") return InjectionWindow::early;
    if (name == "late") return InjectionWindow::late;
    throw ValidationError("unknown injection window '" + std::string(name) + "' (expected early|late)");
}

std::string_view to_string(InjectionWindow window) { return window == InjectionWindow::early ? "early" : "late"; }

void AttentionControlConfig::validate() const {
    for (double r : {cross_ratio, self_ratio}) {
        if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("attention injection ratios must lie in [0, 1]");
    }
}

int replaced_step_count(double ratio, int total_steps) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("injection ratio must lie in [0, 1]");
    return static_cast<int>(std::lround(ratio * total_steps));
}

bool replaces_at(double ratio, int t, int total_steps, InjectionWindow window) {
    if (t < 1 || t > total_steps) {
        throw ValidationError("attention control step " + std::to_string(t) + " outside [1, " +
                              std::to_string(total_steps) + "]");
    }
    const int n = replaced_step_count(ratio, total_steps);
    return window == InjectionWindow::early ? t > total_steps - n : t <= n;
}

AttentionOverride soft_attention_control(const AttentionRecord& m_main, const AttentionRecord& m_content, int t,
                                         int total_steps, const AttentionControlConfig& cfg) {
    cfg.validate();
    if (!m_main.congruent_with(m_content)) {
        throw ValidationError("soft_attention_control: main and content attention records are not congruent");
    }
    AttentionOverride ov;
    for (const auto& m : m_content.maps) {
        const bool eligible = cfg.layer_mask.empty() ||
                              std::find(cfg.layer_mask.begin(), cfg.layer_mask.end(), m.layer) != cfg.layer_mask.end();
        if (eligible && replaces_at(cfg.ratio_for(m.kind), t, total_steps, cfg.window)) {
            ov.maps.emplace_back(m.probs);
        } else {
            ov.maps.emplace_back(std::nullopt);
        }
    }
    return ov;
}

AttentionRecord materialize(const AttentionOverride& ov, const AttentionRecord& m_main) {
    if (ov.maps.empty()) return m_main;
    if (ov.maps.size() != m_main.maps.size()) throw ValidationError("materialize: override/record slot mismatch");
    AttentionRecord out = m_main;
    for (std::size_t i = 0; i < ov.maps.size(); ++i) {
        if (ov.maps[i]) out.maps[i].probs = *ov.maps[i];
    }
    return out;
}

ControlledPrediction apply_control(const Backbone& b, const Tensor& z_t_main, double alpha_bar, int t,
                                   int total_steps, const ConceptEmbedding& v_src, const ConceptEmbedding& v_ref,
                                   double w, const AttentionRecord& m_content, const AttentionControlConfig& cfg) {
    auto plain = guided_epsilon_pair(b, z_t_main, alpha_bar, v_src, v_ref, w);
    auto ov = soft_attention_control(plain.record, m_content, t, total_steps, cfg);
    if (ov.empty()) return {std::move(plain.eps), std::move(plain.record), std::move(ov)};
    auto controlled = guided_epsilon_pair(b, z_t_main, alpha_bar, v_src, v_ref, w, &ov);
    return {std::move(controlled.eps), std::move(controlled.record), std::move(ov)};
}

}  // namespace vct
