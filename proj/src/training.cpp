#include "vct/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "vct/io.hpp"
#include "vct/optim.hpp"
#include "vct/toy_data.hpp"

namespace vct {

namespace {

constexpr std::size_t kLossTail = 20;

Tensor gaussian_like(const Shape& shape, std::mt19937_64& rng) {
    Tensor t(shape);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& x : t.values()) x = normal(rng);
    return t;
}

double learning_rate(const TrainOptions& o, int step) {
    const double warm = o.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / o.warmup_steps) : 1.0;
    const double progress = o.steps > 1 ? static_cast<double>(step - 1) / (o.steps - 1) : 0.0;
    // cosine decay to 10% of the base rate
    const double decay = 0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress));
    return o.lr * warm * decay;
}

}  // namespace

double denoising_loss(const Backbone& b, const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& s,
                      const ConceptEmbedding& v) {
    const Tensor z_t = add_noise(z0, eps, t, s);
    const Tensor pred = b.evaluate(z_t, t, s, v).eps;
    return squared_norm(pred - eps) / static_cast<double>(eps.size());
}

Checkpoint train_backbone(TinyDenoiser& backbone, const EmbeddingTable& table,
                          const std::vector<TrainingExample>& dataset, const NoiseSchedule& schedule,
                          const TrainOptions& options, TrainingLog* log) {
    if (dataset.empty()) throw ValidationError("train_backbone: empty dataset");
    if (!(options.lr > 0.0)) throw ValidationError("train_backbone: learning rate must be > 0");
    if (options.steps < 0 || options.batch_size < 1) throw ValidationError("train_backbone: bad step/batch count");
    if (table.embed_dim() != backbone.embed_dim()) {
        throw ValidationError("train_backbone: embedding table width does not match backbone");
    }
    for (const auto& ex : dataset) {
        if (ex.latent.shape() != backbone.latent_shape()) {
            throw ValidationError("train_backbone: example latent shape " + shape_str(ex.latent.shape()) +
                                  " does not match backbone " + shape_str(backbone.latent_shape()));
        }
    }

    auto& params = backbone.mutable_parameters();
    std::vector<Shape> shapes;
    for (const auto& p : params) shapes.push_back(p.value.shape());
    Adam adam(shapes);
    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule.steps());
    std::bernoulli_distribution drop(options.condition_dropout);

    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(options.steps));
    ParameterSet grads;
    for (int step = 1; step <= options.steps; ++step) {
        grads.clear();
        for (const auto& p : params) grads.push_back({p.name, Tensor(p.value.shape())});
        double loss = 0.0;
        for (int b = 0; b < options.batch_size; ++b) {
            const auto& ex = dataset[pick(rng)];
            const int t = pick_t(rng);
            const Tensor eps = gaussian_like(ex.latent.shape(), rng);
            const Tensor z_t = add_noise(ex.latent, eps, t, schedule);
            const ConceptEmbedding cond =
                drop(rng) ? table.null_embedding(ex.condition.num_tokens()) : ex.condition;
            const double norm = 1.0 / (static_cast<double>(eps.size()) * options.batch_size);
            auto r = backbone.evaluate_with_param_grads(z_t, schedule.alpha_bar(t), cond, [&](const Tensor& pred) {
                Tensor g = pred - eps;
                loss += squared_norm(g) * norm;
                return (2.0 * norm) * g;
            });
            for (std::size_t i = 0; i < grads.size(); ++i) grads[i].value += r.grads[i].value;
        }
        if (!std::isfinite(loss)) {
            throw NumericalError("train_backbone: loss became non-finite at step " + std::to_string(step));
        }
        double gnorm2 = 0.0;
        for (const auto& g : grads) gnorm2 += squared_norm(g.value);
        const double gnorm = std::sqrt(gnorm2);
        if (!std::isfinite(gnorm)) {
            throw NumericalError("train_backbone: gradient became non-finite at step " + std::to_string(step));
        }
        if (options.grad_clip > 0.0 && gnorm > options.grad_clip) {
            for (auto& g : grads) g.value *= options.grad_clip / gnorm;
        }
        std::vector<Tensor*> ps;
        std::vector<const Tensor*> gs;
        for (std::size_t i = 0; i < params.size(); ++i) {
            ps.push_back(&params[i].value);
            gs.push_back(&grads[i].value);
        }
        adam.step(ps, gs, learning_rate(options, step));
        for (auto& p : params) round_to_float(p.value);
        losses.push_back(loss);
    }

    Checkpoint ckpt{backbone.config(), backbone.parameters(), table, schedule.kind(), schedule.steps(),
                    options.seed, options.steps, {}, nlohmann::json{{"kind", "identity"}}, {}};
    const std::size_t tail = std::min(kLossTail, losses.size());
    ckpt.loss_tail.assign(losses.end() - static_cast<std::ptrdiff_t>(tail), losses.end());
    if (log) log->step_losses = std::move(losses);
    if (make_schedule(ckpt.schedule_steps, ckpt.schedule_kind) != schedule) {
        throw ValidationError("train_backbone: schedule is not reproducible from (kind, steps)");
    }
    return ckpt;
}

std::vector<TrainingExample> make_toy_dataset(const EmbeddingTable& table, const TinyDenoiserConfig& config,
                                              int count, std::uint64_t seed) {
    if (config.in_channels != 3) throw ValidationError("toy dataset renders RGB; backbone expects 3 channels");
    std::mt19937_64 rng(seed);
    std::vector<TrainingExample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto spec = random_toy_spec(rng, config.resolution);
        out.push_back({quantize_image(render_toy(spec, config.resolution)),
                       pad_to(table.embed(spec.caption()), config.context_tokens)});
    }
    return out;
}

Checkpoint train_toy_backbone(const ToyTrainingSpec& spec, TrainingLog* log) {
    TinyDenoiserConfig cfg;
    cfg.seed = spec.seed;
    auto table = EmbeddingTable::make_toy(cfg.embed_dim, spec.table_seed);
    auto data = make_toy_dataset(table, cfg, spec.dataset_size, spec.data_seed);
    std::shared_ptr<LatentCodec> codec;
    switch (spec.codec) {
        case CodecKind::identity: codec = std::make_shared<IdentityCodec>(); break;
        case CodecKind::scaled_identity: codec = std::make_shared<ScaledIdentityCodec>(spec.codec_scale); break;
        case CodecKind::tiny_autoencoder: {
            std::vector<Tensor> images;
            images.reserve(data.size());
            for (const auto& ex : data) images.push_back(ex.latent);
            codec = std::make_shared<PatchPcaCodec>(PatchPcaCodec::fit(images, 2, spec.codec_components));
            break;
        }
    }
    if (spec.codec != CodecKind::identity) {
        for (auto& ex : data) ex.latent = codec->encode(ex.latent);
        const Shape ls = data.front().latent.shape();
        cfg.in_channels = static_cast<int>(ls[0]);
        cfg.resolution = static_cast<int>(ls[1]);
    }
    TinyDenoiser net(cfg);
    auto ckpt = train_backbone(net, table, data, make_schedule(spec.schedule_steps, spec.schedule), spec.options, log);
    ckpt.codec = codec->describe();
    ckpt.codec_arrays = codec->arrays();
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    ArrayContainer c;
    c.metadata = {
        {"format", "vct-checkpoint"},
        {"architecture", ckpt.config},
        {"schedule", {{"kind", std::string(to_string(ckpt.schedule_kind))},
                      {"steps", ckpt.schedule_steps},
                      {"hash", ckpt.schedule().hash()}}},
        {"train_seed", ckpt.train_seed},
        {"trained_steps", ckpt.trained_steps},
        {"loss_tail", ckpt.loss_tail},
        {"vocabulary", ckpt.table.vocabulary()},
        {"codec", ckpt.codec},
    };
    c.blocks = ckpt.params;
    for (const auto& a : ckpt.codec_arrays) c.blocks.push_back(a);
    c.blocks.push_back({"token_table", ckpt.table.weights()});
    write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    auto c = read_container(path);
    try {
        if (c.metadata.at("format") != "vct-checkpoint") {
            throw ValidationError(path.string() + " is not a backbone checkpoint");
        }
        Tensor table_weights;
        ParameterSet params;
        ParameterSet codec_arrays;
        for (auto& b : c.blocks) {
            if (b.name == "token_table") {
                table_weights = std::move(b.value);
            } else if (b.name.rfind("codec.", 0) == 0) {
                codec_arrays.push_back(std::move(b));
            } else {
                params.push_back(std::move(b));
            }
        }
        EmbeddingTable table(c.metadata.at("vocabulary").get<std::vector<std::string>>(), std::move(table_weights));
        const auto& sched = c.metadata.at("schedule");
        Checkpoint ckpt{c.metadata.at("architecture").get<TinyDenoiserConfig>(),
                        std::move(params),
                        std::move(table),
                        parse_schedule_kind(sched.at("kind").get<std::string>()),
                        sched.at("steps").get<int>(),
                        c.metadata.at("train_seed").get<std::uint64_t>(),
                        c.metadata.at("trained_steps").get<int>(),
                        c.metadata.at("loss_tail").get<std::vector<double>>(),
                        c.metadata.value("codec", nlohmann::json{{"kind", "identity"}}),
                        std::move(codec_arrays)};
        if (ckpt.schedule().hash() != sched.at("hash").get<std::string>()) {
            throw ValidationError("checkpoint schedule hash mismatch in " + path.string());
        }
        // validates names and shapes
        (void)ckpt.backbone();
        (void)ckpt.latent_codec();
        return ckpt;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed checkpoint metadata in " + path.string() + ": " + e.what());
    }
}

}  // namespace vct
