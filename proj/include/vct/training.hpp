#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "vct/codec.hpp"
#include "vct/embedding.hpp"
#include "vct/schedule.hpp"
#include "vct/tiny_denoiser.hpp"

namespace vct {

struct TrainingExample {
    Tensor latent;
    ConceptEmbedding condition;
};

struct TrainOptions {
    int steps = 2000;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    int batch_size = 1;
    // Probability of swapping the condition for the null embedding, so the
    // same network also learns the unconditional prediction.
    double condition_dropout = 0.1;
    double grad_clip = 1.0;
    int warmup_steps = 50;
};

// Parameters plus everything needed to rebuild the backbone and its schedule.
struct Checkpoint {
    TinyDenoiserConfig config;
    ParameterSet params;
    EmbeddingTable table;
    ScheduleKind schedule_kind = ScheduleKind::linear;
    int schedule_steps = 1000;
    std::uint64_t train_seed = 0;
    int trained_steps = 0;
    std::vector<double> loss_tail;
    // Codec whose latents the backbone was trained on.
    nlohmann::json codec = {{"kind", "identity"}};
    ParameterSet codec_arrays;

    NoiseSchedule schedule() const { return make_schedule(schedule_steps, schedule_kind); }
    TinyDenoiser backbone() const { return TinyDenoiser(config, params); }
    std::shared_ptr<LatentCodec> latent_codec() const { return make_codec(codec, codec_arrays); }
};

struct TrainingLog {
    std::vector<double> step_losses;
};

// Mean squared noise-prediction error for one (z0, eps, t) draw.
double denoising_loss(const Backbone& b, const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& s,
                      const ConceptEmbedding& v);

// Adam on the noise-prediction objective with t ~ U(1, T) and eps ~ N(0, I).
// Parameters stay on the float grid. Throws NumericalError on a non-finite loss.
Checkpoint train_backbone(TinyDenoiser& backbone, const EmbeddingTable& table,
                          const std::vector<TrainingExample>& dataset, const NoiseSchedule& schedule,
                          const TrainOptions& options, TrainingLog* log = nullptr);

// Toy training set: `count` random shapes with their [color, shape, texture]
// captions padded to the backbone's context length.
std::vector<TrainingExample> make_toy_dataset(const EmbeddingTable& table, const TinyDenoiserConfig& config,
                                              int count, std::uint64_t seed);

// Settings of the reference toy backbone.
struct ToyTrainingSpec {
    TrainOptions options{3000, 2e-3, 3, 4};
    std::uint64_t seed = 7;        // weight initialization
    std::uint64_t table_seed = 11;
    std::uint64_t data_seed = 5;
    int dataset_size = 4000;
    int schedule_steps = 1000;
    ScheduleKind schedule = ScheduleKind::linear;
    CodecKind codec = CodecKind::identity;
    double codec_scale = 0.5;
    int codec_components = 10;    // tiny_autoencoder latent channels (of 12 per 2x2 patch)
};

// Builds the dataset (encoded through the requested codec), trains a fresh
// backbone on it and returns the checkpoint with the codec attached.
Checkpoint train_toy_backbone(const ToyTrainingSpec& spec, TrainingLog* log = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vct
