#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vct/attention.hpp"
#include "vct/embedding.hpp"
#include "vct/schedule.hpp"

namespace vct {

struct EvalResult {
    Tensor eps;
    AttentionRecord record;
};

struct EmbeddingGradResult {
    Tensor eps;
    AttentionRecord record;
    Tensor grad_embedding;  // (num_tokens, embed_dim)
};

// Given the forward output eps, returns dLoss/deps for the backward pass.
using LossSeed = std::function<Tensor(const Tensor& eps)>;

// The noise predictor eps_theta(z_t, t, v). The timestep enters as its
// noise level alpha_bar so one backbone serves any sampling sub-grid.
// Implementations are immutable during evaluation and safe to share across threads.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string kind() const = 0;
    virtual Shape latent_shape() const = 0;
    virtual int embed_dim() const = 0;
    virtual std::vector<AttentionSlot> attention_layout(int num_tokens) const = 0;

    virtual EvalResult evaluate(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                const AttentionOverride* override_maps = nullptr) const = 0;

    // One forward pass, then back-propagation of seed(eps) into the embedding rows.
    virtual EmbeddingGradResult evaluate_with_embedding_grad(const Tensor& z_t, double alpha_bar,
                                                             const ConceptEmbedding& v,
                                                             const AttentionOverride* override_maps,
                                                             const LossSeed& seed) const = 0;

    EvalResult evaluate(const Tensor& z_t, int t, const NoiseSchedule& s, const ConceptEmbedding& v,
                        const AttentionOverride* override_maps = nullptr) const {
        return evaluate(z_t, s.alpha_bar(t), v, override_maps);
    }

protected:
    void check_inputs(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v) const;
};

// Exact minimiser of the noise-prediction objective for data
// z0 ~ N(mu + W vec(v), diag(var)). Has no attention blocks.
class GaussianOracleBackbone final : public Backbone {
public:
    // `conditioning` is (numel(mu), num_tokens * embed_dim), or empty for an
    // unconditional oracle that accepts any embedding of `embed_dim` columns.
    GaussianOracleBackbone(Tensor mean, Tensor variance, Tensor conditioning, int embed_dim);

    std::string kind() const override { return "gaussian_oracle"; }
    Shape latent_shape() const override { return mean_.shape(); }
    int embed_dim() const override { return embed_dim_; }
    std::vector<AttentionSlot> attention_layout(int) const override { return {}; }

    EvalResult evaluate(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                        const AttentionOverride* override_maps = nullptr) const override;
    EmbeddingGradResult evaluate_with_embedding_grad(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                                     const AttentionOverride* override_maps,
                                                     const LossSeed& seed) const override;
    using Backbone::evaluate;

    // mu + W vec(v)
    Tensor conditional_mean(const ConceptEmbedding& v) const;
    // grad_z log p_t(z) of the noised marginal at level alpha_bar.
    Tensor score(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v) const;

    const Tensor& mean() const { return mean_; }
    const Tensor& variance() const { return variance_; }
    const Tensor& conditioning() const { return conditioning_; }

private:
    Tensor mean_;
    Tensor variance_;
    Tensor conditioning_;
    int embed_dim_;
};

Tensor oracle_epsilon(const GaussianOracleBackbone& b, const Tensor& z_t, int t, const ConceptEmbedding& v,
                      const NoiseSchedule& s);

}  // namespace vct
