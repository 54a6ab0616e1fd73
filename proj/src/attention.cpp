#include "vct/attention.hpp"

#include <algorithm>
#include <cmath>

namespace vct {

std::string_view to_string(AttentionKind kind) {
    return kind == AttentionKind::self_attention ? "self" : "cross";
}

bool AttentionRecord::congruent_with(const AttentionRecord& other) const {
    if (maps.size() != other.maps.size()) return false;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].layer != other.maps[i].layer || maps[i].kind != other.maps[i].kind ||
            !maps[i].probs.same_shape(other.maps[i].probs)) {
            return false;
        }
    }
    return true;
}

bool AttentionRecord::operator==(const AttentionRecord& other) const {
    if (!congruent_with(other)) return false;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (!(maps[i].probs == other.maps[i].probs)) return false;
    }
    return true;
}

bool AttentionOverride::empty() const { return engaged_count() == 0; }

std::size_t AttentionOverride::engaged_count() const {
    return static_cast<std::size_t>(std::count_if(maps.begin(), maps.end(), [](const auto& m) { return m.has_value(); }));
}

AttentionOverride AttentionOverride::from_record(const AttentionRecord& record) {
    AttentionOverride ov;
    for (const auto& m : record.maps) ov.maps.emplace_back(m.probs);
    return ov;
}

bool rows_are_distributions(const Tensor& probs, double tol) {
    if (probs.rank() < 1 || probs.empty()) return false;
    const auto cols = static_cast<std::size_t>(probs.shape().back());
    for (std::size_t r = 0; r < probs.size() / cols; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double p = probs[r * cols + c];
            if (!(p >= -tol && p <= 1.0 + tol)) return false;
            sum += p;
        }
        if (std::abs(sum - 1.0) > tol) return false;
    }
    return true;
}

void validate_override(const AttentionOverride& ov, const std::vector<AttentionSlot>& layout) {
    if (ov.maps.empty()) return;
    if (ov.maps.size() != layout.size()) {
        throw ValidationError("attention override has " + std::to_string(ov.maps.size()) + " slots, backbone has " +
                              std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (!ov.maps[i]) continue;
        if (ov.maps[i]->shape() != layout[i].map_shape) {
            throw ValidationError("attention override for " + layout[i].layer + " has shape " +
                                  shape_str(ov.maps[i]->shape()) + ", expected " + shape_str(layout[i].map_shape));
        }
        if (!rows_are_distributions(*ov.maps[i])) {
            throw ValidationError("attention override for " + layout[i].layer + " has rows that are not distributions");
        }
    }
}

}  // namespace vct
