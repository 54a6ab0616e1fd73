#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vct/backbone.hpp"

namespace vct {

namespace ad {
class Tape;
}

struct NamedTensor {
    std::string name;
    Tensor value;
};

using ParameterSet = std::vector<NamedTensor>;

const Tensor& find_tensor(const ParameterSet& set, const std::string& name);
Tensor& find_tensor(ParameterSet& set, const std::string& name);

// Three resolution levels (R, R/2, R/4) with widths (w, w, 2w); one self- and one
// cross-attention block at R/4. Timestep conditioning is a sinusoidal encoding of
// log-SNR fed through a two-layer MLP and added per channel in every block.
struct TinyDenoiserConfig {
    int in_channels = 3;
    int resolution = 32;
    int base_width = 32;
    int heads = 4;
    int embed_dim = 64;
    int time_dim = 64;
    // Context length used when padding prompts and concept embeddings.
    int context_tokens = 3;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const TinyDenoiserConfig&) const = default;
};

void to_json(nlohmann::json& j, const TinyDenoiserConfig& c);
void from_json(const nlohmann::json& j, TinyDenoiserConfig& c);

struct ParamGradResult {
    Tensor eps;
    ParameterSet grads;  // aligned with parameters()
};

class TinyDenoiser final : public Backbone {
public:
    // Seeded random initialisation; every entry lies on the float grid.
    explicit TinyDenoiser(TinyDenoiserConfig config);
    // Restores trained parameters; names and shapes must match the architecture.
    TinyDenoiser(TinyDenoiserConfig config, ParameterSet params);

    std::string kind() const override { return "tiny_denoiser"; }
    Shape latent_shape() const override;
    int embed_dim() const override { return config_.embed_dim; }
    std::vector<AttentionSlot> attention_layout(int num_tokens) const override;

    EvalResult evaluate(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                        const AttentionOverride* override_maps = nullptr) const override;
    EmbeddingGradResult evaluate_with_embedding_grad(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                                     const AttentionOverride* override_maps,
                                                     const LossSeed& seed) const override;
    using Backbone::evaluate;

    ParamGradResult evaluate_with_param_grads(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                              const LossSeed& seed) const;

    const TinyDenoiserConfig& config() const { return config_; }
    const ParameterSet& parameters() const { return params_; }
    ParameterSet& mutable_parameters() { return params_; }
    std::size_t parameter_count() const;

private:
    struct Forward;
    Forward build(ad::Tape& tape, const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                  const AttentionOverride* override_maps, bool param_grads, bool embed_grad) const;

    TinyDenoiserConfig config_;
    ParameterSet params_;
};

// Sinusoidal features of log(alpha_bar / (1 - alpha_bar)), clamped to [-20, 20],
// followed by sqrt(alpha_bar) and sqrt(1 - alpha_bar). Length 32.
std::vector<double> noise_level_encoding(double alpha_bar);

}  // namespace vct
