#include "vct/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vct/hashing.hpp"

namespace vct {

namespace {

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "w",          "content_w",     "steps",          "seed",         "codec",           "reference_tokens",
        "cross_ratio", "self_ratio",   "window",         "layer_mask",   "mci_steps",       "mci_lr",
        "concept_tokens", "lambda_rec", "mci_init_std",  "pti_total_steps", "pti_inner_steps", "pti_lr_decay",
        "pti_shared_optimizer"};
    return keys;
}

void log_stage(const RunOptions& opts, const std::string& stage, const std::string& msg) {
    if (opts.log) opts.log(stage, msg);
}

std::string short_key(const nlohmann::json& j) { return sha256_hex(j.dump()).substr(0, 24); }

void check_latent(const ModelContext& ctx, const Tensor& z, const char* what) {
    if (z.shape() != ctx.backbone->latent_shape()) {
        throw ValidationError(std::string(what) + " latent " + shape_str(z.shape()) +
                              " does not match the backbone's " + shape_str(ctx.backbone->latent_shape()));
    }
    if (!z.all_finite()) throw ValidationError(std::string(what) + " latent is not finite");
}

}  // namespace

void TranslationConfig::validate() const {
    GuidanceConfig{w}.validate(true);
    if (content_w && *content_w != w) {
        throw ValidationError("both streams must share one guidance scale (main " + std::to_string(w) +
                              ", content " + std::to_string(*content_w) + ")");
    }
    if (steps < 2) throw ValidationError("step count must be >= 2, got " + std::to_string(steps));
    attention.validate();
    hp.validate();
}

nlohmann::json TranslationConfig::to_json() const {
    nlohmann::json j = {{"w", w},
                        {"steps", steps},
                        {"seed", seed},
                        {"codec", std::string(to_string(codec))},
                        {"reference_tokens", reference_tokens},
                        {"cross_ratio", attention.cross_ratio},
                        {"self_ratio", attention.self_ratio},
                        {"window", std::string(to_string(attention.window))},
                        {"layer_mask", attention.layer_mask},
                        {"mci_steps", hp.mci_steps},
                        {"mci_lr", hp.mci_lr},
                        {"concept_tokens", hp.concept_tokens},
                        {"lambda_rec", hp.lambda_rec},
                        {"mci_init_std", hp.mci_init_std},
                        {"pti_total_steps", hp.pti_total_steps},
                        {"pti_inner_steps", hp.pti_inner_override},
                        {"pti_lr_decay", hp.pti_lr_decay},
                        {"pti_shared_optimizer", hp.pti_shared_optimizer}};
    if (content_w) j["content_w"] = *content_w;
    return j;
}

TranslationConfig TranslationConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("translation config must be an object");
    const auto& keys = config_keys();
    for (const auto& [k, _] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
            throw ValidationError("unknown config key '" + k + "'");
        }
    }
    TranslationConfig c;
    try {
        if (j.contains("w")) c.w = j.at("w").get<double>();
        if (j.contains("content_w")) c.content_w = j.at("content_w").get<double>();
        if (j.contains("steps")) c.steps = j.at("steps").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("codec")) c.codec = parse_codec_kind(j.at("codec").get<std::string>());
        if (j.contains("reference_tokens")) c.reference_tokens = j.at("reference_tokens").get<std::vector<std::string>>();
        if (j.contains("cross_ratio")) c.attention.cross_ratio = j.at("cross_ratio").get<double>();
        if (j.contains("self_ratio")) c.attention.self_ratio = j.at("self_ratio").get<double>();
        if (j.contains("window")) c.attention.window = parse_injection_window(j.at("window").get<std::string>());
        if (j.contains("layer_mask")) c.attention.layer_mask = j.at("layer_mask").get<std::vector<std::string>>();
        if (j.contains("mci_steps")) c.hp.mci_steps = j.at("mci_steps").get<int>();
        if (j.contains("mci_lr")) c.hp.mci_lr = j.at("mci_lr").get<double>();
        if (j.contains("concept_tokens")) c.hp.concept_tokens = j.at("concept_tokens").get<int>();
        if (j.contains("lambda_rec")) c.hp.lambda_rec = j.at("lambda_rec").get<double>();
        if (j.contains("mci_init_std")) c.hp.mci_init_std = j.at("mci_init_std").get<double>();
        if (j.contains("pti_total_steps")) c.hp.pti_total_steps = j.at("pti_total_steps").get<int>();
        if (j.contains("pti_inner_steps")) c.hp.pti_inner_override = j.at("pti_inner_steps").get<int>();
        if (j.contains("pti_lr_decay")) c.hp.pti_lr_decay = j.at("pti_lr_decay").get<bool>();
        if (j.contains("pti_shared_optimizer")) {
            c.hp.pti_shared_optimizer = j.at("pti_shared_optimizer").get<bool>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad translation config value: ") + e.what());
    }
    c.validate();
    return c;
}

ConceptEmbedding ModelContext::null_embedding() const {
    return {Tensor({context_tokens, backbone->embed_dim()}), "v_null"};
}

NoiseSchedule ModelContext::sampling_schedule(int steps) const {
    if (steps < 2) throw ValidationError("step count must be >= 2");
    if (steps == train_schedule.steps()) return train_schedule;
    if (steps > train_schedule.steps() || train_schedule.steps() % steps != 0) {
        throw ValidationError("step count " + std::to_string(steps) + " does not divide the training schedule's " +
                              std::to_string(train_schedule.steps()));
    }
    return train_schedule.strided(steps);
}

ModelContext ModelContext::from_checkpoint(const Checkpoint& ckpt) {
    ModelContext ctx{std::make_shared<TinyDenoiser>(ckpt.backbone()), ckpt.latent_codec(), ckpt.schedule(),
                     ckpt.config.context_tokens, ckpt.table, {}};
    nlohmann::json id = {{"architecture", ckpt.config}, {"codec", ckpt.codec}, {"schedule", ckpt.schedule().hash()}};
    for (const auto& p : ckpt.params) id["params"].push_back(tensor_hash(p.value));
    for (const auto& p : ckpt.codec_arrays) id["codec_arrays"].push_back(tensor_hash(p.value));
    id["table"] = tensor_hash(ckpt.table.weights());
    ctx.identity = sha256_hex(id.dump());
    return ctx;
}

ModelContext ModelContext::from_checkpoint_file(const std::filesystem::path& path) {
    return from_checkpoint(load_checkpoint(path));
}

DualStreamResult run_dual_stream(const Backbone& b, const Tensor& z_T, const PerStepEmbeddings& per_step,
                                 const ConceptEmbedding& v_ref, const ConceptEmbedding& v_null,
                                 const NoiseSchedule& s, double w_main, double w_content,
                                 const AttentionControlConfig& attention) {
    if (w_main != w_content || w_main != per_step.w) {
        throw ValidationError("shared guidance scale violated: main " + std::to_string(w_main) + ", content " +
                              std::to_string(w_content) + ", inversion " + std::to_string(per_step.w));
    }
    const int T = s.steps();
    if (per_step.steps() != T) {
        throw ValidationError("per-step embeddings cover " + std::to_string(per_step.steps()) +
                              " steps but the schedule has " + std::to_string(T));
    }
    if (!per_step.schedule_hash.empty() && per_step.schedule_hash != s.hash()) {
        throw ValidationError("per-step embeddings were produced on a different schedule");
    }
    attention.validate();
    DualStreamResult out;
    out.steps.reserve(static_cast<std::size_t>(T));
    Tensor z_main = z_T;
    Tensor z_content = z_T;
    for (int t = T; t >= 1; --t) {
        const double ab = s.alpha_bar(t);
        const ConceptEmbedding& v_t = per_step.at(t);
        auto content = guided_epsilon_pair(b, z_content, ab, v_t, v_null, w_content);
        auto main = apply_control(b, z_main, ab, t, T, v_t, v_ref, w_main, content.record, attention);
        z_content = ddim_step(z_content, content.eps, t, t - 1, s);
        z_main = ddim_step(z_main, main.eps, t, t - 1, s);
        if (!z_content.all_finite() || !z_main.all_finite()) {
            throw NumericalError("dual-stream denoising produced a non-finite latent at t=" + std::to_string(t));
        }
        StepDiagnostics d;
        d.t = t;
        const auto i = static_cast<std::size_t>(t) - 1;
        if (i < per_step.initial_loss.size()) d.pti_initial_loss = per_step.initial_loss[i];
        if (i < per_step.final_loss.size()) d.pti_final_loss = per_step.final_loss[i];
        d.overrides_engaged = main.applied.engaged_count();
        out.steps.push_back(d);
    }
    out.z_tgt = std::move(z_main);
    out.z_rec = std::move(z_content);
    return out;
}

ConceptEmbedding reference_embedding(const ModelContext& ctx, const Tensor& z_ref, const TranslationConfig& cfg,
                                     const RunOptions& opts) {
    check_latent(ctx, z_ref, "reference");
    if (!cfg.reference_tokens.empty()) {
        if (!ctx.table) throw ValidationError("raw reference tokens need a backbone with a token table");
        auto v = ctx.table->embed(cfg.reference_tokens);
        log_stage(opts, "mci", "skipped; using raw tokens");
        return pad_to(v, ctx.context_tokens, "v_ref");
    }
    const nlohmann::json key = {{"stage", "mci"},
                                {"latent", tensor_hash(z_ref)},
                                {"model", ctx.identity},
                                {"schedule", ctx.train_schedule.hash()},
                                {"mci_steps", cfg.hp.mci_steps},
                                {"mci_lr", cfg.hp.mci_lr},
                                {"concept_tokens", cfg.hp.concept_tokens},
                                {"lambda_rec", cfg.hp.lambda_rec},
                                {"mci_init_std", cfg.hp.mci_init_std},
                                {"seed", cfg.seed},
                                {"context_tokens", ctx.context_tokens}};
    std::filesystem::path cached;
    if (!opts.cache_dir.empty()) {
        cached = opts.cache_dir / ("mci-" + short_key(key) + ".emb");
        if (std::filesystem::exists(cached)) {
            log_stage(opts, "mci", "cache hit " + cached.filename().string());
            return pad_to(load_reference_embedding(cached, ctx.train_schedule.hash()), ctx.context_tokens, "v_ref");
        }
    }
    MciLog mlog;
    auto v = multi_concept_inversion(*ctx.backbone, z_ref, ctx.train_schedule, cfg.hp, ctx.context_tokens, cfg.seed,
                                     &mlog);
    if (!mlog.losses.empty()) {
        log_stage(opts, "mci", std::to_string(cfg.hp.mci_steps) + " steps, last loss " +
                                   std::to_string(mlog.losses.back()));
    }
    if (!cached.empty()) {
        std::filesystem::create_directories(opts.cache_dir);
        const auto n = std::min<std::size_t>(20, mlog.losses.size());
        save_reference_embedding(cached, v, ctx.train_schedule.hash(), cfg.seed,
                                 std::vector<double>(mlog.losses.end() - static_cast<std::ptrdiff_t>(n),
                                                     mlog.losses.end()),
                                 {{"key", key}});
    }
    return pad_to(v, ctx.context_tokens, "v_ref");
}

PerStepEmbeddings content_inversion(const ModelContext& ctx, const Tensor& z_src, const TranslationConfig& cfg,
                                    Tensor* z_T_out, const RunOptions& opts) {
    check_latent(ctx, z_src, "source");
    const NoiseSchedule s = ctx.sampling_schedule(cfg.steps);
    const ConceptEmbedding v_null = ctx.null_embedding();
    const auto traj = ddim_invert_full(*ctx.backbone, z_src, v_null, s);
    if (z_T_out) *z_T_out = traj.back();
    const nlohmann::json key = {{"stage", "pti"},
                                {"latent", tensor_hash(z_src)},
                                {"model", ctx.identity},
                                {"schedule", s.hash()},
                                {"w", cfg.w},
                                {"pti_total_steps", cfg.hp.pti_total_steps},
                                {"pti_inner_steps", cfg.hp.pti_inner_override},
                                {"pti_lr_decay", cfg.hp.pti_lr_decay},
                                {"pti_shared_optimizer", cfg.hp.pti_shared_optimizer}};
    std::filesystem::path cached;
    if (!opts.cache_dir.empty() && !cfg.hp.pti_lr_override) {
        cached = opts.cache_dir / ("pti-" + short_key(key) + ".emb");
        if (std::filesystem::exists(cached)) {
            log_stage(opts, "pti", "cache hit " + cached.filename().string());
            return load_per_step_embeddings(cached, s.hash());
        }
    }
    auto per_step = pivotal_tuning_inversion(
        *ctx.backbone, z_src, traj.back(), s, cfg.w, cfg.hp, v_null, v_null, [&](int t, double l0, double l1) {
            if (t % 10 == 0 || t == 1) {
                log_stage(opts, "pti", "t=" + std::to_string(t) + " loss " + std::to_string(l0) + " -> " +
                                           std::to_string(l1));
            }
        });
    if (!cached.empty()) {
        std::filesystem::create_directories(opts.cache_dir);
        save_per_step_embeddings(cached, per_step, cfg.seed, {{"key", key}});
    }
    return per_step;
}

TranslationResult translate(const ModelContext& ctx, const Tensor& x_src, const Tensor& x_ref,
                            const TranslationConfig& cfg, const RunOptions& opts) {
    TranslationResult r;
    Tensor z_src, z_ref;
    try {
        cfg.validate();
        if (cfg.codec != ctx.codec->kind()) {
            throw ValidationError("config requests codec " + std::string(to_string(cfg.codec)) +
                                  " but the backbone was trained with " + std::string(to_string(ctx.codec->kind())));
        }
        require_same_shape(x_src, x_ref, "translate: source and reference images");
        z_src = ctx.codec->encode(x_src);
        z_ref = ctx.codec->encode(x_ref);
        check_latent(ctx, z_src, "source");
        check_latent(ctx, z_ref, "reference");
    } catch (...) {
        rethrow_with_stage("encode");
    }
    try {
        r.v_ref = reference_embedding(ctx, z_ref, cfg, opts);
    } catch (...) {
        rethrow_with_stage("mci");
    }
    try {
        r.per_step = content_inversion(ctx, z_src, cfg, &r.z_T, opts);
    } catch (...) {
        rethrow_with_stage("pti");
    }
    DualStreamResult ds;
    try {
        log_stage(opts, "dual_stream", "denoising " + std::to_string(cfg.steps) + " steps");
        ds = run_dual_stream(*ctx.backbone, r.z_T, r.per_step, r.v_ref, ctx.null_embedding(),
                             ctx.sampling_schedule(cfg.steps), cfg.w, cfg.content_w.value_or(cfg.w), cfg.attention);
    } catch (...) {
        rethrow_with_stage("dual_stream");
    }
    try {
        r.x_tgt = ctx.codec->decode(ds.z_tgt);
        r.x_rec = ctx.codec->decode(ds.z_rec);
    } catch (...) {
        rethrow_with_stage("decode");
    }
    r.steps = std::move(ds.steps);
    r.target = evaluate_metrics(r.x_tgt, x_src, &x_ref);
    r.reconstruction = evaluate_metrics(r.x_rec, x_src);
    return r;
}

ReconstructionResult reconstruct(const ModelContext& ctx, const Tensor& x_src, const TranslationConfig& cfg,
                                 const RunOptions& opts) {
    Tensor z_src;
    try {
        cfg.validate();
        z_src = ctx.codec->encode(x_src);
        check_latent(ctx, z_src, "source");
    } catch (...) {
        rethrow_with_stage("encode");
    }
    ReconstructionResult r;
    Tensor z_T;
    try {
        r.per_step = content_inversion(ctx, z_src, cfg, &z_T, opts);
    } catch (...) {
        rethrow_with_stage("pti");
    }
    try {
        const auto traj = replay_content_branch(*ctx.backbone, z_T, r.per_step, ctx.sampling_schedule(cfg.steps),
                                                ctx.null_embedding());
        r.x_rec = ctx.codec->decode(traj.front());
    } catch (...) {
        rethrow_with_stage("content_branch");
    }
    r.psnr = image_psnr(r.x_rec, x_src);
    return r;
}

Tensor unconditional_round_trip(const ModelContext& ctx, const Tensor& x_src, int steps) {
    const NoiseSchedule s = ctx.sampling_schedule(steps);
    const ConceptEmbedding v_null = ctx.null_embedding();
    const Tensor z_src = ctx.codec->encode(x_src);
    check_latent(ctx, z_src, "source");
    const auto traj = ddim_invert_full(*ctx.backbone, z_src, v_null, s);
    PerStepEmbeddings plain;
    plain.w = 1.0;
    plain.by_step.assign(static_cast<std::size_t>(s.steps()), v_null);
    return ctx.codec->decode(replay_content_branch(*ctx.backbone, traj.back(), plain, s, v_null).front());
}

std::string tensor_hash(const Tensor& t) {
    std::string buf;
    for (auto d : t.shape()) buf += std::to_string(d) + ",";
    buf += ";";
    buf.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    return sha256_hex(std::string_view(buf));
}

RunDirectory::RunDirectory(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec || !std::filesystem::is_directory(root_)) {
        throw ValidationError("cannot create run directory " + root_.string());
    }
}

void RunDirectory::record(const std::string& name) {
    const auto p = path(name);
    if (!std::filesystem::is_regular_file(p)) throw ValidationError("cannot record missing file " + p.string());
    nlohmann::json entry = {{"name", name}, {"sha256", sha256_file(p)}, {"bytes", std::filesystem::file_size(p)}};
    for (auto& f : files_) {
        if (f.at("name") == name) {
            f = entry;
            return;
        }
    }
    files_.push_back(entry);
}

void RunDirectory::write_json(const std::string& name, const nlohmann::json& j) {
    std::ofstream out(path(name));
    if (!out) throw ValidationError("cannot write " + path(name).string());
    out << j.dump(2) << '\n';
    out.close();
    record(name);
}

void RunDirectory::write_manifest() const {
    std::ofstream out(path("manifest.json"));
    if (!out) throw ValidationError("cannot write manifest in " + root_.string());
    out << nlohmann::json{{"info", info_}, {"files", files_}}.dump(2) << '\n';
}

}  // namespace vct
