#include "vct/inversion.hpp"

#include <cmath>
#include <random>

#include "vct/hashing.hpp"
#include "vct/io.hpp"
#include "vct/optim.hpp"

namespace vct {

namespace {

constexpr std::size_t kLossTail = 20;

void require_finite(double x, const std::string& what) {
    if (!std::isfinite(x)) throw NumericalError(what);
}

std::string step_name(int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "v_t/%04d", t);
    return buf;
}

}  // namespace

double pti_learning_rate(long s) { return 1e-2 * static_cast<double>(s) / 5000.0; }

void InversionHyperparams::validate() const {
    if (mci_steps < 0) throw ValidationError("MCI step count must be >= 0");
    if (!(mci_lr > 0.0) || !std::isfinite(mci_lr)) throw ValidationError("MCI learning rate must be > 0");
    if (concept_tokens < 1) throw ValidationError("concept token count K must be >= 1");
    if (!(lambda_rec >= 0.0) || !std::isfinite(lambda_rec)) throw ValidationError("lambda_rec must be >= 0");
    if (!(mci_init_std >= 0.0) || !std::isfinite(mci_init_std)) throw ValidationError("MCI init std must be >= 0");
    if (pti_total_steps < 0) throw ValidationError("PTI step budget must be >= 0");
}

int InversionHyperparams::pti_inner_steps(int sampling_steps) const {
    if (pti_inner_override >= 0) return pti_inner_override;
    if (sampling_steps < 1) throw ValidationError("PTI needs at least one sampling step");
    return pti_total_steps / sampling_steps;
}

double InversionHyperparams::pti_lr(long s, int inner, long total) const {
    if (pti_lr_override) return pti_lr_override(s, inner);
    return pti_lr_decay ? pti_learning_rate(total + 1 - s) : pti_learning_rate(s);
}

nlohmann::json InversionHyperparams::to_json() const {
    return {{"mci_steps", mci_steps},
            {"mci_lr", mci_lr},
            {"concept_tokens", concept_tokens},
            {"lambda_rec", lambda_rec},
            {"mci_init_std", mci_init_std},
            {"pti_total_steps", pti_total_steps},
            {"pti_inner_override", pti_inner_override},
            {"pti_lr_decay", pti_lr_decay},
            {"pti_shared_optimizer", pti_shared_optimizer},
            {"pti_lr_custom", static_cast<bool>(pti_lr_override)}};
}

std::string InversionHyperparams::hash() const { return sha256_hex(to_json().dump()); }

std::vector<Tensor> ddim_invert_full(const Backbone& b, const Tensor& z_src, const ConceptEmbedding& v_null,
                                     const NoiseSchedule& s) {
    const int T = s.steps();
    if (T < 1) throw ValidationError("ddim_invert_full: schedule has no steps");
    std::vector<Tensor> traj;
    traj.reserve(static_cast<std::size_t>(T) + 1);
    traj.push_back(z_src);
    for (int t = 0; t < T; ++t) {
        const Tensor eps = b.evaluate(traj.back(), s.alpha_bar(t), v_null).eps;
        traj.push_back(ddim_invert_step(traj.back(), eps, t, t + 1, s));
        if (!traj.back().all_finite()) {
            throw NumericalError("DDIM inversion produced a non-finite latent at t=" + std::to_string(t + 1));
        }
    }
    return traj;
}

const ConceptEmbedding& PerStepEmbeddings::at(int t) const {
    if (t < 1 || t > steps()) throw ValidationError("no per-step embedding for t=" + std::to_string(t));
    return by_step[static_cast<std::size_t>(t) - 1];
}

PtiLossGrad pti_loss_and_grad(const Backbone& b, const Tensor& z_src, const Tensor& z_t, int t, const NoiseSchedule& s,
                              const ConceptEmbedding& v, const Tensor& eps_null, double w) {
    const double ab = s.alpha_bar(t);
    const double k = std::sqrt(1.0 - ab) / std::sqrt(ab);
    PtiLossGrad out;
    auto r = b.evaluate_with_embedding_grad(z_t, ab, v, nullptr, [&](const Tensor& eps_c) {
        out.guided_eps = fuse_epsilon(eps_c, eps_null, w);
        const Tensor resid = z_src - predict_z0(z_t, out.guided_eps, t, s);
        out.loss = squared_norm(resid);
        return (2.0 * w * k) * resid;
    });
    out.grad = std::move(r.grad_embedding);
    return out;
}

PerStepEmbeddings pivotal_tuning_inversion(const Backbone& b, const Tensor& z_src, const Tensor& z_T,
                                           const NoiseSchedule& s, double w, const InversionHyperparams& hp,
                                           const ConceptEmbedding& v_null, const ConceptEmbedding& v_init,
                                           const PtiProgress& progress) {
    hp.validate();
    GuidanceConfig{w}.validate();
    v_init.validate();
    require_same_shape(z_src, z_T, "pivotal_tuning_inversion");
    if (v_init.matrix.shape() != v_null.matrix.shape()) {
        throw ValidationError("PTI initial embedding must have the null embedding's shape");
    }
    const int T = s.steps();
    const int inner = hp.pti_inner_steps(T);
    const long total = static_cast<long>(inner) * T;

    PerStepEmbeddings out;
    out.w = w;
    out.schedule_hash = s.hash();
    out.by_step.resize(static_cast<std::size_t>(T));
    out.initial_loss.assign(static_cast<std::size_t>(T), 0.0);
    out.final_loss.assign(static_cast<std::size_t>(T), 0.0);
    out.trajectory.assign(static_cast<std::size_t>(T) + 1, Tensor());
    out.trajectory[static_cast<std::size_t>(T)] = z_T;

    ConceptEmbedding v = v_init;
    long global = 0;
    Adam shared({v.matrix.shape()});
    for (int t = T; t >= 1; --t) {
        const Tensor& z_t = out.trajectory[static_cast<std::size_t>(t)];
        const double ab = s.alpha_bar(t);
        const Tensor eps_null = b.evaluate(z_t, ab, v_null).eps;
        Adam fresh({v.matrix.shape()});
        Adam& adam = hp.pti_shared_optimizer ? shared : fresh;
        for (int i = 1; i <= inner; ++i) {
            ++global;
            auto lg = pti_loss_and_grad(b, z_src, z_t, t, s, v, eps_null, w);
            require_finite(lg.loss, "PTI loss became non-finite at t=" + std::to_string(t));
            if (!lg.grad.all_finite()) throw NumericalError("PTI gradient became non-finite at t=" + std::to_string(t));
            if (i == 1) out.initial_loss[static_cast<std::size_t>(t) - 1] = lg.loss;
            adam.step(v.matrix, lg.grad, hp.pti_lr(global, i, total));
            round_to_float(v.matrix);
            if (!v.matrix.all_finite()) throw NumericalError("PTI embedding diverged at t=" + std::to_string(t));
        }
        const Tensor guided = fuse_epsilon(b.evaluate(z_t, ab, v).eps, eps_null, w);
        const double final_loss = squared_norm(z_src - predict_z0(z_t, guided, t, s));
        require_finite(final_loss, "PTI loss became non-finite at t=" + std::to_string(t));
        if (inner == 0) out.initial_loss[static_cast<std::size_t>(t) - 1] = final_loss;
        out.final_loss[static_cast<std::size_t>(t) - 1] = final_loss;
        v.label = "v_src@" + std::to_string(t);
        out.by_step[static_cast<std::size_t>(t) - 1] = v;
        out.trajectory[static_cast<std::size_t>(t) - 1] = ddim_step(z_t, guided, t, t - 1, s);
        if (!out.trajectory[static_cast<std::size_t>(t) - 1].all_finite()) {
            throw NumericalError("PTI trajectory became non-finite at t=" + std::to_string(t));
        }
        if (progress) progress(t, out.initial_loss[static_cast<std::size_t>(t) - 1], final_loss);
    }
    return out;
}

std::vector<Tensor> replay_content_branch(const Backbone& b, const Tensor& z_T, const PerStepEmbeddings& per_step,
                                          const NoiseSchedule& s, const ConceptEmbedding& v_null) {
    const int T = s.steps();
    if (per_step.steps() != T) {
        throw ValidationError("per-step embeddings cover " + std::to_string(per_step.steps()) +
                              " steps but the schedule has " + std::to_string(T));
    }
    std::vector<Tensor> traj(static_cast<std::size_t>(T) + 1);
    traj[static_cast<std::size_t>(T)] = z_T;
    for (int t = T; t >= 1; --t) {
        const Tensor& z = traj[static_cast<std::size_t>(t)];
        auto g = guided_epsilon_pair(b, z, s.alpha_bar(t), per_step.at(t), v_null, per_step.w);
        traj[static_cast<std::size_t>(t) - 1] = ddim_step(z, g.eps, t, t - 1, s);
    }
    return traj;
}

MciLossGrad mci_loss_and_grad(const Backbone& b, const Tensor& z_ref, const Tensor& eps, int t,
                              const NoiseSchedule& s, const ConceptEmbedding& v, int context_tokens,
                              double lambda_rec) {
    if (t < 1) throw ValidationError("MCI timestep must be >= 1");
    const int K = v.num_tokens();
    const ConceptEmbedding padded = pad_to(v, context_tokens, v.label);
    const Tensor z_t = add_noise(z_ref, eps, t, s);
    const double ab = s.alpha_bar(t);
    const double k = std::sqrt(1.0 - ab) / std::sqrt(ab);
    const double n = static_cast<double>(eps.size());
    MciLossGrad out;
    auto r = b.evaluate_with_embedding_grad(z_t, ab, padded, nullptr, [&](const Tensor& pred) {
        const Tensor d = pred - eps;
        const Tensor rec = z_ref - predict_z0(z_t, pred, t, s);
        out.ldm = squared_norm(d) / n;
        out.rec = squared_norm(rec) / n;
        out.loss = out.ldm + lambda_rec * out.rec;
        // d rec / d pred = +k on the residual
        Tensor g = (2.0 / n) * d;
        g.axpy(2.0 * lambda_rec * k / n, rec);
        return g;
    });
    const int D = v.embed_dim();
    out.grad = Tensor({K, D});
    for (int i = 0; i < K * D; ++i) out.grad[static_cast<std::size_t>(i)] = r.grad_embedding[static_cast<std::size_t>(i)];
    return out;
}

ConceptEmbedding mci_initialization(int tokens, int embed_dim, double std, std::uint64_t seed) {
    if (tokens < 1 || embed_dim < 1) throw ValidationError("MCI initialization needs positive dimensions");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor m({tokens, embed_dim});
    for (auto& x : m.values()) x = std * normal(rng);
    round_to_float(m);
    return {std::move(m), "v_ref"};
}

ConceptEmbedding multi_concept_inversion(const Backbone& b, const Tensor& z_ref, const NoiseSchedule& s,
                                         const InversionHyperparams& hp, int context_tokens, std::uint64_t seed,
                                         MciLog* log) {
    hp.validate();
    if (z_ref.shape() != b.latent_shape()) throw ValidationError("MCI reference latent does not match backbone");
    if (context_tokens < hp.concept_tokens) {
        throw ValidationError("MCI learns " + std::to_string(hp.concept_tokens) +
                              " tokens but the backbone context holds only " + std::to_string(context_tokens));
    }
    ConceptEmbedding v = mci_initialization(hp.concept_tokens, b.embed_dim(), hp.mci_init_std, seed);
    // separate stream for (t, eps) draws so the initialization stays fixed per seed
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<int> pick_t(1, s.steps());
    std::normal_distribution<double> normal(0.0, 1.0);
    Adam adam({v.matrix.shape()});
    for (int step = 1; step <= hp.mci_steps; ++step) {
        const int t = pick_t(rng);
        Tensor eps(z_ref.shape());
        for (auto& x : eps.values()) x = normal(rng);
        auto lg = mci_loss_and_grad(b, z_ref, eps, t, s, v, context_tokens, hp.lambda_rec);
        require_finite(lg.loss, "MCI loss became non-finite at step " + std::to_string(step));
        if (!lg.grad.all_finite()) throw NumericalError("MCI gradient became non-finite at step " + std::to_string(step));
        adam.step(v.matrix, lg.grad, hp.mci_lr);
        round_to_float(v.matrix);
        if (log) log->losses.push_back(lg.loss);
    }
    return v;
}

void save_per_step_embeddings(const std::filesystem::path& path, const PerStepEmbeddings& e, std::uint64_t seed,
                              const nlohmann::json& extra) {
    ArrayContainer c;
    std::vector<double> tail;
    for (int t = std::min<int>(e.steps(), static_cast<int>(kLossTail)); t >= 1; --t) {
        tail.push_back(e.final_loss.empty() ? 0.0 : e.final_loss[static_cast<std::size_t>(t) - 1]);
    }
    c.metadata = {{"format", "vct-embedding"},
                  {"kind", "per_step"},
                  {"steps", e.steps()},
                  {"w", e.w},
                  {"seed", seed},
                  {"schedule_hash", e.schedule_hash},
                  {"initial_loss", e.initial_loss},
                  {"final_loss", e.final_loss},
                  {"loss_tail", tail},
                  {"extra", extra}};
    if (e.steps() > 0) {
        c.metadata["shape"] = e.by_step.front().matrix.shape();
    }
    for (int t = 1; t <= e.steps(); ++t) c.blocks.push_back({step_name(t), e.at(t).matrix});
    write_container(path, c);
}

void save_reference_embedding(const std::filesystem::path& path, const ConceptEmbedding& v,
                              const std::string& schedule_hash, std::uint64_t seed,
                              const std::vector<double>& loss_tail, const nlohmann::json& extra) {
    ArrayContainer c;
    c.metadata = {{"format", "vct-embedding"}, {"kind", "reference"},      {"shape", v.matrix.shape()},
                  {"seed", seed},              {"schedule_hash", schedule_hash}, {"label", v.label},
                  {"loss_tail", loss_tail},    {"extra", extra}};
    c.blocks.push_back({"v_ref", v.matrix});
    write_container(path, c);
}

namespace {

ArrayContainer read_embedding_container(const std::filesystem::path& path, const std::string& kind,
                                        const std::string& expected_hash) {
    auto c = read_container(path);
    try {
        if (c.metadata.at("format") != "vct-embedding") {
            throw ValidationError(path.string() + " is not an embedding file");
        }
        if (c.metadata.at("kind") != kind) {
            throw ValidationError(path.string() + " holds a " + c.metadata.at("kind").get<std::string>() +
                                  " embedding, expected " + kind);
        }
        if (c.metadata.at("schedule_hash").get<std::string>() != expected_hash) {
            throw ValidationError("schedule hash in " + path.string() + " does not match the loaded backbone");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed embedding metadata in " + path.string() + ": " + e.what());
    }
    return c;
}

}  // namespace

EmbeddingFileInfo read_embedding_info(const std::filesystem::path& path) {
    auto c = read_container(path);
    try {
        return {c.metadata.at("kind").get<std::string>(), c.metadata.at("schedule_hash").get<std::string>(),
                c.metadata};
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed embedding metadata in " + path.string() + ": " + e.what());
    }
}

PerStepEmbeddings load_per_step_embeddings(const std::filesystem::path& path,
                                           const std::string& expected_schedule_hash) {
    auto c = read_embedding_container(path, "per_step", expected_schedule_hash);
    PerStepEmbeddings e;
    try {
        const int steps = c.metadata.at("steps").get<int>();
        e.w = c.metadata.at("w").get<double>();
        e.schedule_hash = expected_schedule_hash;
        e.initial_loss = c.metadata.at("initial_loss").get<std::vector<double>>();
        e.final_loss = c.metadata.at("final_loss").get<std::vector<double>>();
        if (static_cast<int>(c.blocks.size()) != steps) {
            throw ValidationError(path.string() + ": expected " + std::to_string(steps) + " embedding blocks");
        }
        for (int t = 1; t <= steps; ++t) {
            const auto& blk = c.blocks[static_cast<std::size_t>(t) - 1];
            if (blk.name != step_name(t)) throw ValidationError(path.string() + ": unexpected block " + blk.name);
            ConceptEmbedding v(blk.value, "v_src@" + std::to_string(t));
            v.validate();
            e.by_step.push_back(std::move(v));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError("malformed embedding metadata in " + path.string() + ": " + ex.what());
    }
    return e;
}

ConceptEmbedding load_reference_embedding(const std::filesystem::path& path,
                                          const std::string& expected_schedule_hash) {
    auto c = read_embedding_container(path, "reference", expected_schedule_hash);
    if (c.blocks.size() != 1 || c.blocks[0].name != "v_ref") {
        throw ValidationError(path.string() + ": expected a single v_ref block");
    }
    ConceptEmbedding v(std::move(c.blocks[0].value), c.metadata.value("label", std::string("v_ref")));
    v.validate();
    return v;
}

}  // namespace vct
