#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

enum class AttentionKind { self_attention, cross_attention };

std::string_view to_string(AttentionKind kind);

// One instrumented attention block of a backbone. Map shapes are
// (heads, positions, positions) for self and (heads, positions, tokens) for cross.
struct AttentionSlot {
    std::string layer;
    AttentionKind kind;
    Shape map_shape;
};

struct AttentionMap {
    std::string layer;
    AttentionKind kind;
    Tensor probs;
};

// Maps captured (or injected) during one evaluation, in backbone slot order.
struct AttentionRecord {
    std::vector<AttentionMap> maps;

    bool empty() const { return maps.empty(); }
    bool congruent_with(const AttentionRecord& other) const;
    bool operator==(const AttentionRecord& other) const;
};

// Per-slot optional replacement maps. An empty `maps` vector means no override;
// otherwise it is aligned with the backbone's slots and a disengaged entry
// keeps the map the evaluation computes itself.
struct AttentionOverride {
    std::vector<std::optional<Tensor>> maps;

    bool empty() const;
    std::size_t engaged_count() const;

    // Injects every map of `record`.
    static AttentionOverride from_record(const AttentionRecord& record);
};

// Checks entries in [0, 1] and rows summing to 1 within `tol`.
bool rows_are_distributions(const Tensor& probs, double tol = 1e-4);

// Throws ValidationError unless `ov` is empty or matches `layout` slot for slot.
void validate_override(const AttentionOverride& ov, const std::vector<AttentionSlot>& layout);

}  // namespace vct
