#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "vct/guidance.hpp"

namespace vct {

// 1e-2 * s / 5000 for the global PTI step counter s >= 1.
double pti_learning_rate(long s);

struct InversionHyperparams {
    int mci_steps = 200;            // S_m
    double mci_lr = 5e-4;
    int concept_tokens = 3;         // K
    double lambda_rec = 1.0;
    double mci_init_std = 0.02;
    int pti_total_steps = 1000;     // split evenly over the sampling steps
    int pti_inner_override = -1;    // >= 0 replaces the budgeted per-step count
    // Mirror the learning-rate ramp so it falls instead of rising with s.
    bool pti_lr_decay = false;
    // Keep one Adam state across timesteps instead of restarting it at each t.
    bool pti_shared_optimizer = true;
    // Replaces the built-in rate; arguments are (global step s, inner step i), both 1-based.
    std::function<double(long, int)> pti_lr_override;

    void validate() const;
    int pti_inner_steps(int sampling_steps) const;
    double pti_lr(long s, int inner, long total) const;
    nlohmann::json to_json() const;
    // Digest of the fields that influence results.
    std::string hash() const;
};

// Unconditional DDIM inversion z_0 -> z_T; trajectory[t] = z_t.
std::vector<Tensor> ddim_invert_full(const Backbone& b, const Tensor& z_src, const ConceptEmbedding& v_null,
                                     const NoiseSchedule& s);

struct PerStepEmbeddings {
    std::vector<ConceptEmbedding> by_step;  // by_step[t - 1] holds v_t, t = 1..T
    std::vector<Tensor> trajectory;         // z_0..z_T; empty when loaded from disk
    double w = 7.5;
    std::string schedule_hash;
    std::vector<double> initial_loss;       // indexed t - 1
    std::vector<double> final_loss;

    int steps() const { return static_cast<int>(by_step.size()); }
    const ConceptEmbedding& at(int t) const;
};

struct PtiLossGrad {
    double loss = 0.0;
    Tensor grad;          // d loss / d v
    Tensor guided_eps;
};

// || z_src - z0_hat(z_t, w eps(v) + (1 - w) eps_null) ||^2 and its gradient in v.
PtiLossGrad pti_loss_and_grad(const Backbone& b, const Tensor& z_src, const Tensor& z_t, int t, const NoiseSchedule& s,
                              const ConceptEmbedding& v, const Tensor& eps_null, double w);

using PtiProgress = std::function<void(int t, double initial_loss, double final_loss)>;

// Optimizes v_t for t = T..1 starting from z_T, each v_t warm-started from
// v_{t+1} (v_T from v_init), then advances the trajectory with the guided
// prediction of the optimized v_t.
PerStepEmbeddings pivotal_tuning_inversion(const Backbone& b, const Tensor& z_src, const Tensor& z_T,
                                           const NoiseSchedule& s, double w, const InversionHyperparams& hp,
                                           const ConceptEmbedding& v_null, const ConceptEmbedding& v_init,
                                           const PtiProgress& progress = {});

// Content-branch replay of stored embeddings from z_T: z_0..z_T.
std::vector<Tensor> replay_content_branch(const Backbone& b, const Tensor& z_T, const PerStepEmbeddings& per_step,
                                          const NoiseSchedule& s, const ConceptEmbedding& v_null);

struct MciLossGrad {
    double loss = 0.0;
    double ldm = 0.0;
    double rec = 0.0;
    Tensor grad;  // rows of the learned tokens only
};

// Mean-squared L_ldm + lambda_rec * L_rec at one (t, eps) draw. `v` holds the
// learned rows; it is padded with zero rows to `context_tokens` before evaluation.
MciLossGrad mci_loss_and_grad(const Backbone& b, const Tensor& z_ref, const Tensor& eps, int t,
                              const NoiseSchedule& s, const ConceptEmbedding& v, int context_tokens,
                              double lambda_rec);

struct MciLog {
    std::vector<double> losses;
};

// Learns K rows for the reference latent with the backbone frozen.
ConceptEmbedding multi_concept_inversion(const Backbone& b, const Tensor& z_ref, const NoiseSchedule& s,
                                         const InversionHyperparams& hp, int context_tokens, std::uint64_t seed,
                                         MciLog* log = nullptr);

// Seeded N(0, std^2) start for MCI, on the float grid.
ConceptEmbedding mci_initialization(int tokens, int embed_dim, double std, std::uint64_t seed);

struct EmbeddingFileInfo {
    std::string kind;  // "per_step" or "reference"
    std::string schedule_hash;
    nlohmann::json metadata;
};

void save_per_step_embeddings(const std::filesystem::path& path, const PerStepEmbeddings& e, std::uint64_t seed,
                              const nlohmann::json& extra = {});
void save_reference_embedding(const std::filesystem::path& path, const ConceptEmbedding& v,
                              const std::string& schedule_hash, std::uint64_t seed,
                              const std::vector<double>& loss_tail, const nlohmann::json& extra = {});

EmbeddingFileInfo read_embedding_info(const std::filesystem::path& path);
// Both loaders refuse files whose schedule hash differs from `expected_schedule_hash`.
PerStepEmbeddings load_per_step_embeddings(const std::filesystem::path& path,
                                           const std::string& expected_schedule_hash);
ConceptEmbedding load_reference_embedding(const std::filesystem::path& path,
                                          const std::string& expected_schedule_hash);

}  // namespace vct
