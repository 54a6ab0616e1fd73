#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vct/attention_control.hpp"
#include "vct/codec.hpp"
#include "vct/inversion.hpp"
#include "vct/metrics.hpp"
#include "vct/training.hpp"

namespace vct {

struct TranslationConfig {
    double w = 7.5;
    // Guidance scale requested for the content branch; must equal w when set.
    std::optional<double> content_w;
    int steps = 50;
    AttentionControlConfig attention;
    InversionHyperparams hp;
    std::uint64_t seed = 0;
    CodecKind codec = CodecKind::identity;
    // Non-empty: use these vocabulary tokens as v_ref instead of running MCI.
    std::vector<std::string> reference_tokens;

    void validate() const;
    nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown keys are rejected.
    static TranslationConfig from_json(const nlohmann::json& j);
};

// Everything a translation needs besides the images.
struct ModelContext {
    std::shared_ptr<const Backbone> backbone;
    std::shared_ptr<const LatentCodec> codec;
    NoiseSchedule train_schedule;
    int context_tokens = 1;
    std::optional<EmbeddingTable> table;
    // Content hash of the weights; part of every cache key.
    std::string identity;

    ConceptEmbedding null_embedding() const;
    NoiseSchedule sampling_schedule(int steps) const;

    static ModelContext from_checkpoint(const Checkpoint& ckpt);
    static ModelContext from_checkpoint_file(const std::filesystem::path& path);
};

struct StepDiagnostics {
    int t = 0;
    double pti_initial_loss = 0.0;
    double pti_final_loss = 0.0;
    int overrides_engaged = 0;
};

struct DualStreamResult {
    Tensor z_tgt;
    Tensor z_rec;
    std::vector<StepDiagnostics> steps;  // in denoising order, t = T..1
};

// Both streams start from z_T. The content branch runs the guided pair
// (v_t, v_null) and publishes its source-pass maps; the main branch runs
// (v_t, v_ref) under soft attention control. `w_main`, `w_content` and the
// inversion's w must agree.
DualStreamResult run_dual_stream(const Backbone& b, const Tensor& z_T, const PerStepEmbeddings& per_step,
                                 const ConceptEmbedding& v_ref, const ConceptEmbedding& v_null,
                                 const NoiseSchedule& s, double w_main, double w_content,
                                 const AttentionControlConfig& attention);

struct TranslationResult {
    Tensor x_tgt;
    Tensor x_rec;
    Tensor z_T;
    ConceptEmbedding v_ref;
    PerStepEmbeddings per_step;
    std::vector<StepDiagnostics> steps;
    MetricBlock target;          // x_tgt against x_src (texture against x_ref)
    MetricBlock reconstruction;  // x_rec against x_src
};

struct RunOptions {
    // Stage cache for v_ref and per-step embeddings; disabled when empty.
    std::filesystem::path cache_dir;
    std::function<void(const std::string& stage, const std::string& message)> log;
};

// v_ref for a reference latent: MCI, or raw tokens when configured. Padded to
// the backbone's context length.
ConceptEmbedding reference_embedding(const ModelContext& ctx, const Tensor& z_ref, const TranslationConfig& cfg,
                                     const RunOptions& opts = {});

// Unconditional DDIM inversion of z_src followed by PTI.
PerStepEmbeddings content_inversion(const ModelContext& ctx, const Tensor& z_src, const TranslationConfig& cfg,
                                    Tensor* z_T_out = nullptr, const RunOptions& opts = {});

TranslationResult translate(const ModelContext& ctx, const Tensor& x_src, const Tensor& x_ref,
                            const TranslationConfig& cfg, const RunOptions& opts = {});

struct ReconstructionResult {
    Tensor x_rec;
    double psnr = 0.0;
    PerStepEmbeddings per_step;
};

ReconstructionResult reconstruct(const ModelContext& ctx, const Tensor& x_src, const TranslationConfig& cfg,
                                 const RunOptions& opts = {});

// Unconditional invert-then-sample round trip of an image.
Tensor unconditional_round_trip(const ModelContext& ctx, const Tensor& x_src, int steps);

std::string tensor_hash(const Tensor& t);

// Output directory with a manifest.json listing every recorded file's SHA-256.
class RunDirectory {
public:
    explicit RunDirectory(std::filesystem::path root);
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path path(const std::string& name) const { return root_ / name; }
    // Hashes an already-written file into the manifest.
    void record(const std::string& name);
    void write_json(const std::string& name, const nlohmann::json& j);
    void set_info(const std::string& key, const nlohmann::json& value) { info_[key] = value; }
    void write_manifest() const;

private:
    std::filesystem::path root_;
    nlohmann::json files_ = nlohmann::json::array();
    nlohmann::json info_ = nlohmann::json::object();
};

}  // namespace vct
