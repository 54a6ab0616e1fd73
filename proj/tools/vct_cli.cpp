#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vct/hashing.hpp"
#include "vct/io.hpp"
#include "vct/pipeline.hpp"
#include "vct/toy_data.hpp"

namespace fs = std::filesystem;
using namespace vct;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

void note(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << '\n'; }

RunOptions run_options(const std::string& cache_dir) {
    RunOptions o;
    if (!cache_dir.empty()) o.cache_dir = cache_dir;
    o.log = note;
    return o;
}

// Flags mirroring TranslationConfig, bound onto `cfg`.
void add_translation_flags(CLI::App* cmd, TranslationConfig& cfg, std::string& window, std::string& codec) {
    cmd->add_option("--w", cfg.w, "Guidance scale shared by both streams")->capture_default_str();
    cmd->add_option("--steps", cfg.steps, "DDIM sampling steps")->capture_default_str();
    cmd->add_option("--cross-ratio", cfg.attention.cross_ratio, "Fraction of steps with cross-attention replacement")
        ->capture_default_str();
    cmd->add_option("--self-ratio", cfg.attention.self_ratio, "Fraction of steps with self-attention replacement")
        ->capture_default_str();
    cmd->add_option("--window", window, "Replacement window: early|late")->capture_default_str();
    cmd->add_option("--layer-mask", cfg.attention.layer_mask, "Attention layers eligible for replacement");
    cmd->add_option("--mci-steps", cfg.hp.mci_steps, "Multi-concept inversion steps")->capture_default_str();
    cmd->add_option("--mci-lr", cfg.hp.mci_lr, "Multi-concept inversion learning rate")->capture_default_str();
    cmd->add_option("--concept-tokens", cfg.hp.concept_tokens, "Learned reference tokens K")->capture_default_str();
    cmd->add_option("--lambda-rec", cfg.hp.lambda_rec, "Weight of the latent reconstruction loss")
        ->capture_default_str();
    cmd->add_option("--pti-total-steps", cfg.hp.pti_total_steps, "PTI step budget over all timesteps")
        ->capture_default_str();
    cmd->add_option("--pti-inner-steps", cfg.hp.pti_inner_override, "PTI steps per timestep (overrides the budget)");
    cmd->add_flag("--pti-lr-decay", cfg.hp.pti_lr_decay, "Mirror the PTI learning-rate ramp");
    cmd->add_flag("--pti-reset-optimizer{false}", cfg.hp.pti_shared_optimizer,
                  "Restart the PTI optimizer at every timestep");
    cmd->add_option("--reference-tokens", cfg.reference_tokens, "Use raw vocabulary tokens instead of MCI");
    cmd->add_option("--codec", codec, "Latent codec: identity|scaled_identity|tiny_autoencoder")
        ->capture_default_str();
}

void finish_config(TranslationConfig& cfg, const std::string& window, const std::string& codec) {
    cfg.attention.window = parse_injection_window(window);
    cfg.codec = parse_codec_kind(codec);
    cfg.validate();
}

void write_embedding_manifest(RunDirectory& run, const std::string& command, const TranslationConfig& cfg,
                              const ModelContext& ctx) {
    run.set_info("command", command);
    run.set_info("model", ctx.identity);
    run.write_json("config.json", cfg.to_json());
    run.write_manifest();
}

nlohmann::json metrics_json(const MetricBlock& m) {
    nlohmann::json j = {{"mse", m.mse},
                        {"psnr", std::isinf(m.psnr) ? nlohmann::json("inf") : nlohmann::json(m.psnr)},
                        {"structure", m.structure}};
    if (!std::isnan(m.texture)) j["texture"] = m.texture;
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Visual concept translation at toy scale"};
    app.set_config("--config", "", "TOML/INI file supplying any flag");
    app.require_subcommand(1);

    // train-backbone
    auto* train = app.add_subcommand("train-backbone", "Train the tiny denoiser on the synthetic shape dataset");
    std::string train_dir;
    ToyTrainingSpec spec;
    std::string schedule_kind = "linear", train_codec = "identity";
    train->add_option("--run-dir", train_dir, "Output run directory")->required();
    train->add_option("--steps", spec.options.steps, "Optimizer steps")->capture_default_str();
    train->add_option("--batch", spec.options.batch_size, "Examples per step")->capture_default_str();
    train->add_option("--lr", spec.options.lr, "Peak learning rate")->capture_default_str();
    train->add_option("--seed", spec.seed, "Weight initialization seed")->capture_default_str();
    train->add_option("--sample-seed", spec.options.seed, "Seed for example, timestep and noise draws")
        ->capture_default_str();
    train->add_option("--table-seed", spec.table_seed, "Token table seed")->capture_default_str();
    train->add_option("--dataset-size", spec.dataset_size, "Synthetic images")->capture_default_str();
    train->add_option("--data-seed", spec.data_seed, "Dataset seed")->capture_default_str();
    train->add_option("--schedule-steps", spec.schedule_steps, "Training schedule length T")->capture_default_str();
    train->add_option("--schedule", schedule_kind, "linear|cosine")->capture_default_str();
    train->add_option("--codec", train_codec, "identity|scaled_identity|tiny_autoencoder")->capture_default_str();
    train->add_option("--codec-scale", spec.codec_scale, "Scale for scaled_identity")->capture_default_str();
    train->add_option("--codec-components", spec.codec_components, "Latent channels for tiny_autoencoder")
        ->capture_default_str();

    // shared options for model-using commands
    std::string checkpoint, source, reference, run_dir, cache_dir, v_ref_file, per_step_file, output;
    std::optional<std::uint64_t> seed;
    bool no_strict = false;
    TranslationConfig cfg;
    std::string window = "early", codec = "identity";

    auto* concept_cmd = app.add_subcommand("invert-concept", "Multi-concept inversion of a reference image");
    auto* content_cmd = app.add_subcommand("invert-content", "DDIM inversion plus pivotal tuning of a source image");
    auto* translate_cmd = app.add_subcommand("translate", "Translate a source image towards a reference concept");
    auto* reconstruct_cmd = app.add_subcommand("reconstruct", "Content-branch reconstruction of a source image");
    for (auto* cmd : {concept_cmd, content_cmd, translate_cmd, reconstruct_cmd}) {
        cmd->add_option("--checkpoint", checkpoint, "Backbone checkpoint")->required()->check(CLI::ExistingFile);
        cmd->add_option("--run-dir", run_dir, "Output run directory")->required();
        cmd->add_option("--cache-dir", cache_dir, "Stage cache for inverted embeddings");
        cmd->add_option("--seed", seed, "Seed for every stochastic stage");
        add_translation_flags(cmd, cfg, window, codec);
    }
    concept_cmd->add_option("--reference", reference, "Reference image (PPM)")->required()->check(CLI::ExistingFile);
    for (auto* cmd : {content_cmd, reconstruct_cmd, translate_cmd}) {
        cmd->add_option("--source", source, "Source image (PPM)")->required()->check(CLI::ExistingFile);
    }
    translate_cmd->add_option("--reference", reference, "Reference image (PPM)")->required()->check(CLI::ExistingFile);
    translate_cmd->add_option("--v-ref", v_ref_file, "Precomputed reference embedding")->check(CLI::ExistingFile);
    translate_cmd->add_option("--per-step", per_step_file, "Precomputed per-step source embeddings")
        ->check(CLI::ExistingFile);
    translate_cmd->add_flag("--no-strict", no_strict, "Allow a missing --seed (defaults to 0)");

    auto* eval_cmd = app.add_subcommand("eval", "Metrics of an output image against source and reference");
    eval_cmd->add_option("--output", output, "Image to score")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--source", source, "Source image")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--reference", reference, "Reference image")->check(CLI::ExistingFile);

    auto* demo_cmd = app.add_subcommand("demo", "Generate the toy pair, train if needed, translate and ablate");
    std::string demo_dir, demo_ckpt;
    demo_cmd->add_option("--run-dir", demo_dir, "Output run directory")->required();
    demo_cmd->add_option("--checkpoint", demo_ckpt, "Reuse a trained checkpoint")->check(CLI::ExistingFile);
    demo_cmd->add_option("--train-steps", spec.options.steps, "Training steps when no checkpoint is given")
        ->capture_default_str();
    demo_cmd->add_option("--seed", seed, "Translation seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (train->parsed()) {
            RunDirectory run(train_dir);
            TrainingLog log;
            const auto t0 = std::chrono::steady_clock::now();
            spec.schedule = parse_schedule_kind(schedule_kind);
            spec.codec = parse_codec_kind(train_codec);
            auto ckpt = train_toy_backbone(spec, &log);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            save_checkpoint(run.path("checkpoint.vct"), ckpt);
            run.record("checkpoint.vct");
            run.write_json("training_log.json", {{"step_losses", log.step_losses}, {"seconds", secs}});
            run.set_info("command", "train-backbone");
            run.set_info("seed", spec.seed);
            run.write_manifest();
            std::printf("trained %d steps in %.1fs, final loss %.5f\n", spec.options.steps, secs,
                        log.step_losses.empty() ? 0.0 : log.step_losses.back());
            return 0;
        }
        if (eval_cmd->parsed()) {
            const Tensor x_out = read_image(output);
            const Tensor x_src = read_image(source);
            std::optional<Tensor> x_ref;
            if (!reference.empty()) x_ref = read_image(reference);
            const auto m = evaluate_metrics(x_out, x_src, x_ref ? &*x_ref : nullptr);
            std::cout << metrics_json(m).dump(2) << '\n';
            return 0;
        }
        if (demo_cmd->parsed()) {
            RunDirectory run(demo_dir);
            const Tensor x_src = render_toy(toy_source_spec());
            const Tensor x_ref = render_toy(toy_reference_spec());
            write_image(run.path("source.ppm"), x_src);
            write_image(run.path("reference.ppm"), x_ref);
            run.record("source.ppm");
            run.record("reference.ppm");
            fs::path ckpt_path = demo_ckpt;
            if (ckpt_path.empty()) {
                note("train", "training backbone for " + std::to_string(spec.options.steps) + " steps");
                auto ckpt = train_toy_backbone(spec);
                ckpt_path = run.path("checkpoint.vct");
                save_checkpoint(ckpt_path, ckpt);
                run.record("checkpoint.vct");
            }
            const auto ctx = ModelContext::from_checkpoint_file(ckpt_path);
            TranslationConfig base;
            base.seed = seed.value_or(0);
            const auto opts = run_options((run.root() / "cache").string());
            nlohmann::json summary;
            auto run_variant = [&](const std::string& name, const TranslationConfig& c) {
                note("demo", "variant " + name);
                auto r = translate(ctx, x_src, x_ref, c, opts);
                write_image(run.path(name + "_target.ppm"), r.x_tgt);
                write_image(run.path(name + "_reconstruction.ppm"), r.x_rec);
                run.record(name + "_target.ppm");
                run.record(name + "_reconstruction.ppm");
                summary[name] = {{"target", metrics_json(r.target)}, {"reconstruction", metrics_json(r.reconstruction)}};
                return r;
            };
            const auto full = run_variant("full", base);
            TranslationConfig no_pti = base;
            no_pti.hp.pti_inner_override = 0;
            const auto a = run_variant("no_pti", no_pti);
            TranslationConfig no_ac = base;
            no_ac.attention.cross_ratio = no_ac.attention.self_ratio = 0.0;
            const auto b = run_variant("no_attention_control", no_ac);
            TranslationConfig no_mci = base;
            no_mci.reference_tokens = {"object"};
            const auto c = run_variant("no_mci", no_mci);
            run.write_json("metrics.json", summary);
            run.set_info("command", "demo");
            run.write_manifest();
            std::printf("content PSNR %.2f dB (no PTI %.2f)\n", full.reconstruction.psnr, a.reconstruction.psnr);
            std::printf("structure %.3f (no attention control %.3f)\n", full.target.structure, b.target.structure);
            std::printf("texture distance %.4f (no MCI %.4f)\n", full.target.texture, c.target.texture);
            return 0;
        }

        // model-using subcommands
        if (translate_cmd->parsed() && !seed && !no_strict) {
            throw ValidationError("translate requires --seed (pass --no-strict to default it to 0)");
        }
        cfg.seed = seed.value_or(0);
        finish_config(cfg, window, codec);
        const auto ctx = ModelContext::from_checkpoint_file(checkpoint);
        RunDirectory run(run_dir);
        const auto opts = run_options(cache_dir);

        if (concept_cmd->parsed()) {
            const Tensor z_ref = ctx.codec->encode(read_image(reference));
            auto v = reference_embedding(ctx, z_ref, cfg, opts);
            save_reference_embedding(run.path("v_ref.emb"), v, ctx.train_schedule.hash(), cfg.seed, {},
                                     {{"source_image", sha256_file(reference)}});
            run.record("v_ref.emb");
            write_embedding_manifest(run, "invert-concept", cfg, ctx);
            return 0;
        }
        if (content_cmd->parsed()) {
            const Tensor z_src = ctx.codec->encode(read_image(source));
            auto per_step = content_inversion(ctx, z_src, cfg, nullptr, opts);
            save_per_step_embeddings(run.path("per_step.emb"), per_step, cfg.seed,
                                     {{"source_image", sha256_file(source)}});
            run.record("per_step.emb");
            write_embedding_manifest(run, "invert-content", cfg, ctx);
            return 0;
        }
        if (reconstruct_cmd->parsed()) {
            const Tensor x_src = read_image(source);
            auto r = reconstruct(ctx, x_src, cfg, opts);
            write_image(run.path("reconstruction.ppm"), r.x_rec);
            run.record("reconstruction.ppm");
            run.write_json("metrics.json", {{"reconstruction", metrics_json(evaluate_metrics(r.x_rec, x_src))}});
            write_embedding_manifest(run, "reconstruct", cfg, ctx);
            std::printf("reconstruction PSNR %.2f dB\n", r.psnr);
            return 0;
        }
        if (translate_cmd->parsed()) {
            const Tensor x_src = read_image(source);
            const Tensor x_ref = read_image(reference);
            TranslationResult r;
            if (!v_ref_file.empty() || !per_step_file.empty()) {
                if (v_ref_file.empty() || per_step_file.empty()) {
                    throw ValidationError("--v-ref and --per-step must be given together");
                }
                const NoiseSchedule s = ctx.sampling_schedule(cfg.steps);
                r.v_ref = pad_to(load_reference_embedding(v_ref_file, ctx.train_schedule.hash()), ctx.context_tokens,
                                 "v_ref");
                r.per_step = load_per_step_embeddings(per_step_file, s.hash());
                const Tensor z_src = ctx.codec->encode(x_src);
                r.z_T = ddim_invert_full(*ctx.backbone, z_src, ctx.null_embedding(), s).back();
                auto ds = run_dual_stream(*ctx.backbone, r.z_T, r.per_step, r.v_ref, ctx.null_embedding(), s, cfg.w,
                                          cfg.content_w.value_or(cfg.w), cfg.attention);
                r.x_tgt = ctx.codec->decode(ds.z_tgt);
                r.x_rec = ctx.codec->decode(ds.z_rec);
                r.steps = std::move(ds.steps);
                r.target = evaluate_metrics(r.x_tgt, x_src, &x_ref);
                r.reconstruction = evaluate_metrics(r.x_rec, x_src);
            } else {
                r = translate(ctx, x_src, x_ref, cfg, opts);
            }
            write_image(run.path("target.ppm"), r.x_tgt);
            write_image(run.path("reconstruction.ppm"), r.x_rec);
            run.record("target.ppm");
            run.record("reconstruction.ppm");
            save_reference_embedding(run.path("v_ref.emb"), r.v_ref, ctx.train_schedule.hash(), cfg.seed, {});
            run.record("v_ref.emb");
            save_per_step_embeddings(run.path("per_step.emb"), r.per_step, cfg.seed);
            run.record("per_step.emb");
            nlohmann::json diag = nlohmann::json::array();
            for (const auto& d : r.steps) {
                diag.push_back({{"t", d.t},
                                {"pti_initial_loss", d.pti_initial_loss},
                                {"pti_final_loss", d.pti_final_loss},
                                {"overrides_engaged", d.overrides_engaged}});
            }
            run.write_json("diagnostics.json", diag);
            run.write_json("metrics.json",
                           {{"target", metrics_json(r.target)}, {"reconstruction", metrics_json(r.reconstruction)}});
            write_embedding_manifest(run, "translate", cfg, ctx);
            std::printf("target: structure %.3f texture %.4f | reconstruction PSNR %.2f dB\n", r.target.structure,
                        r.target.texture, r.reconstruction.psnr);
            return 0;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
