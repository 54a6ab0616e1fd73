#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "support.hpp"
#include "vct/errors.hpp"
#include "vct/guidance.hpp"
#include "vct/hashing.hpp"
#include "vct/inversion.hpp"

using namespace vct;
using namespace vct::testing;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "vct_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

// Predicts NaN everywhere; used to exercise the numerical-failure paths.
class NanBackbone final : public Backbone {
public:
    std::string kind() const override { return "nan"; }
    Shape latent_shape() const override { return {4}; }
    int embed_dim() const override { return 2; }
    std::vector<AttentionSlot> attention_layout(int) const override { return {}; }
    EvalResult evaluate(const Tensor& z, double, const ConceptEmbedding&, const AttentionOverride*) const override {
        return {Tensor(z.shape(), std::numeric_limits<double>::quiet_NaN()), {}};
    }
    EmbeddingGradResult evaluate_with_embedding_grad(const Tensor& z, double ab, const ConceptEmbedding& v,
                                                     const AttentionOverride* ov, const LossSeed& seed) const override {
        Tensor eps = evaluate(z, ab, v, ov).eps;
        seed(eps);
        return {eps, {}, Tensor(v.matrix.shape())};
    }
    using Backbone::evaluate;
};

// Embedding that makes the guided prediction hit z_src exactly at step t.
Tensor closed_form_embedding(const GaussianOracleBackbone& b, const Tensor& z_src, const Tensor& z_t, double ab,
                             const Tensor& eps_null, double w, const Shape& v_shape) {
    const auto n = static_cast<Eigen::Index>(z_src.size());
    // oracle: eps(v) = c0 - sqrt(ab (1 - ab)) D^-1 W v with D = ab var + 1 - ab
    const ConceptEmbedding zero(Tensor(v_shape), "0");
    const Tensor c0 = b.evaluate(z_t, ab, zero).eps;
    Tensor target = (1.0 / std::sqrt(1.0 - ab)) * (z_t - std::sqrt(ab) * z_src);  // required guided eps
    target.axpy(-(1.0 - w), eps_null);
    target *= 1.0 / w;
    Eigen::MatrixXd A(n, b.conditioning().dim(1));
    Eigen::VectorXd rhs(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double d = ab * b.variance()[static_cast<std::size_t>(i)] + 1.0 - ab;
        for (Eigen::Index j = 0; j < A.cols(); ++j) {
            A(i, j) = -std::sqrt(ab * (1.0 - ab)) / d * b.conditioning()[static_cast<std::size_t>(i * A.cols() + j)];
        }
        rhs(i) = target[static_cast<std::size_t>(i)] - c0[static_cast<std::size_t>(i)];
    }
    const Eigen::VectorXd v = A.partialPivLu().solve(rhs);
    Tensor out(v_shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v(static_cast<Eigen::Index>(i));
    return out;
}

}  // namespace

TEST_CASE("hyperparameter defaults") {
    const InversionHyperparams hp;
    CHECK(hp.mci_steps == 200);
    CHECK(hp.mci_lr == 5e-4);
    CHECK(hp.concept_tokens == 3);
    CHECK(hp.lambda_rec == 1.0);
    CHECK(hp.pti_total_steps == 1000);
    CHECK(hp.pti_inner_steps(50) == 20);
    CHECK(hp.pti_inner_steps(1000) == 1);
    CHECK_FALSE(hp.pti_lr_decay);
    CHECK(hp.pti_shared_optimizer);
    CHECK_NOTHROW(hp.validate());
    InversionHyperparams bad;
    bad.concept_tokens = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = InversionHyperparams{};
    bad.mci_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("PTI learning-rate formula") {
    CHECK(pti_learning_rate(5000) == doctest::Approx(1e-2).epsilon(1e-15));
    CHECK(pti_learning_rate(500) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(pti_learning_rate(1) == doctest::Approx(2e-6).epsilon(1e-15));
    InversionHyperparams hp;
    CHECK(hp.pti_lr(7, 1, 1000) == pti_learning_rate(7));
    hp.pti_lr_decay = true;
    CHECK(hp.pti_lr(1, 1, 1000) == pti_learning_rate(1000));
    CHECK(hp.pti_lr(1000, 20, 1000) == pti_learning_rate(1));
    hp.pti_lr_override = [](long s, int i) { return 0.5 * static_cast<double>(s + i); };
    CHECK(hp.pti_lr(3, 2, 1000) == 2.5);
    CHECK(hp.hash() != InversionHyperparams{}.hash());
}

TEST_CASE("PTI loss gradient matches finite differences") {
    const TinyDenoiser net(small_config(11));
    const auto s = make_schedule(1000, ScheduleKind::linear).strided(50);
    std::mt19937_64 rng(1);
    const Tensor z_src = randn(net.latent_shape(), rng, 0.5);
    const Tensor z_t = randn(net.latent_shape(), rng);
    const ConceptEmbedding v(randn({3, 8}, rng, 0.3), "v");
    const ConceptEmbedding v_null(Tensor({3, 8}), "null");
    for (int t : {3, 30}) {
        const Tensor eps_null = net.evaluate(z_t, t, s, v_null).eps;
        const auto lg = pti_loss_and_grad(net, z_src, z_t, t, s, v, eps_null, 7.5);
        const Tensor guided = fuse_epsilon(net.evaluate(z_t, t, s, v).eps, eps_null, 7.5);
        CHECK(lg.loss == doctest::Approx(squared_norm(z_src - predict_z0(z_t, guided, t, s))).epsilon(1e-12));
        auto loss = [&](const Tensor& m) {
            return pti_loss_and_grad(net, z_src, z_t, t, s, ConceptEmbedding(m, "v"), eps_null, 7.5).loss;
        };
        CHECK(check_gradient(loss, v.matrix, lg.grad, 12, rng, 1e-4).worst <= 1e-3);
    }
}

TEST_CASE("PTI with no budget replays classifier-free sampling") {
    std::mt19937_64 rng(2);
    const Shape latent{6};
    const auto b = linear_oracle(2, 3, rng, latent);
    const auto s = make_schedule(1000, ScheduleKind::linear).strided(20);
    const ConceptEmbedding v_null(Tensor({2, 3}), "null");
    const ConceptEmbedding v_init(randn({2, 3}, rng, 0.3), "init");
    InversionHyperparams hp;
    hp.pti_total_steps = 0;
    const Tensor z_src = randn(latent, rng);
    const Tensor z_T = randn(latent, rng);
    const auto out = pivotal_tuning_inversion(b, z_src, z_T, s, 3.0, hp, v_null, v_init);
    REQUIRE(out.steps() == 20);
    Tensor z = z_T;
    for (int t = 20; t >= 1; --t) {
        CHECK(out.at(t).matrix == v_init.matrix);
        z = ddim_step(z, cfg_epsilon(b, z, s.alpha_bar(t), v_init, v_null, 3.0), t, t - 1, s);
        CHECK(out.trajectory[static_cast<std::size_t>(t) - 1] == z);
        CHECK(out.initial_loss[static_cast<std::size_t>(t) - 1] == out.final_loss[static_cast<std::size_t>(t) - 1]);
    }
}

TEST_CASE("PTI solves the convex oracle case exactly") {
    std::mt19937_64 rng(3);
    const Shape latent{12};
    const auto b = linear_oracle(3, 4, rng, latent);  // square 12 x 12 conditioning
    const auto s = make_schedule(1000, ScheduleKind::linear).strided(10);
    const ConceptEmbedding v_null(Tensor({3, 4}), "null");
    const double w = 7.5;
    const Tensor z_src = b.mean() + randn(latent, rng, 0.5);
    const Tensor z_T = ddim_invert_full(b, z_src, v_null, s).back();

    InversionHyperparams hp;
    hp.pti_inner_override = 400;
    hp.pti_lr_override = [](long, int i) { return 0.05 * std::pow(0.98, i); };
    hp.pti_shared_optimizer = false;  // each timestep is its own convex problem
    const auto out = pivotal_tuning_inversion(b, z_src, z_T, s, w, hp, v_null, v_null);

    double worst_loss = 0.0, worst_v = 0.0;
    for (int t = 1; t <= s.steps(); ++t) {
        const auto& z_t = out.trajectory[static_cast<std::size_t>(t)];
        const double ab = s.alpha_bar(t);
        const Tensor eps_null = b.evaluate(z_t, ab, v_null).eps;
        const Tensor v_star = closed_form_embedding(b, z_src, z_t, ab, eps_null, w, {3, 4});
        worst_v = std::max(worst_v, relative_error(out.at(t).matrix, v_star));
        worst_loss = std::max(worst_loss, out.final_loss[static_cast<std::size_t>(t) - 1]);
        CHECK(out.final_loss[static_cast<std::size_t>(t) - 1] <= out.initial_loss[static_cast<std::size_t>(t) - 1]);
    }
    MESSAGE("worst step residual " << worst_loss << ", worst embedding error " << worst_v);
    CHECK(worst_loss <= 1e-6);
    CHECK(worst_v <= 1e-4);
    CHECK(relative_error(out.trajectory.front(), z_src) <= 1e-3);
}

TEST_CASE("stored embeddings replay the PTI trajectory bitwise") {
    const TinyDenoiser net(small_config(12));
    const auto s = make_schedule(1000, ScheduleKind::linear).strided(5);
    std::mt19937_64 rng(4);
    const Tensor z_src = randn(net.latent_shape(), rng, 0.5);
    const ConceptEmbedding v_null(Tensor({3, 8}), "null");
    const Tensor z_T = ddim_invert_full(net, z_src, v_null, s).back();
    InversionHyperparams hp;
    hp.pti_inner_override = 3;
    const auto out = pivotal_tuning_inversion(net, z_src, z_T, s, 7.5, hp, v_null, v_null);
    const auto replay = replay_content_branch(net, z_T, out, s, v_null);
    for (std::size_t i = 0; i < replay.size(); ++i) CHECK(replay[i] == out.trajectory[i]);

    SUBCASE("and survive a save/load round trip") {
        const auto path = temp_path("per_step.emb");
        save_per_step_embeddings(path, out, 9);
        CHECK(read_embedding_info(path).kind == "per_step");
        const auto loaded = load_per_step_embeddings(path, s.hash());
        REQUIRE(loaded.steps() == out.steps());
        CHECK(loaded.w == out.w);
        for (int t = 1; t <= s.steps(); ++t) CHECK(loaded.at(t).matrix == out.at(t).matrix);
        const auto again = replay_content_branch(net, z_T, loaded, s, v_null);
        CHECK(again.front() == replay.front());
        CHECK_THROWS_AS(load_per_step_embeddings(path, make_schedule(1000, ScheduleKind::linear).strided(10).hash()),
                        ValidationError);
        CHECK_THROWS_AS(load_reference_embedding(path, s.hash()), ValidationError);
    }
}

TEST_CASE("non-finite predictions surface as numerical errors") {
    const NanBackbone b;
    const auto s = make_schedule(1000, ScheduleKind::linear).strided(10);
    const ConceptEmbedding v_null(Tensor({1, 2}), "null");
    const Tensor z({4}, 0.1);
    CHECK_THROWS_AS(ddim_invert_full(b, z, v_null, s), NumericalError);
    InversionHyperparams hp;
    hp.pti_inner_override = 2;
    try {
        pivotal_tuning_inversion(b, z, z, s, 7.5, hp, v_null, v_null);
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("t=10") != std::string::npos);
    }
    hp.mci_steps = 2;
    hp.concept_tokens = 1;
    CHECK_THROWS_AS(multi_concept_inversion(b, z, s, hp, 1, 0), NumericalError);
}

TEST_CASE("MCI loss and gradient") {
    const TinyDenoiser net(small_config(13));
    const auto s = make_schedule(1000, ScheduleKind::linear);
    std::mt19937_64 rng(5);
    const Tensor z_ref = randn(net.latent_shape(), rng, 0.5);
    const Tensor eps = randn(net.latent_shape(), rng);
    const ConceptEmbedding v(randn({2, 8}, rng, 0.3), "v");  // K = 2 of 3 context rows

    for (int t : {5, 400}) {
        const auto lg = mci_loss_and_grad(net, z_ref, eps, t, s, v, 3, 1.0);
        CHECK(lg.grad.shape() == Shape{2, 8});
        const Tensor pred = net.evaluate(add_noise(z_ref, eps, t, s), t, s, pad_to(v, 3)).eps;
        const double n = static_cast<double>(eps.size());
        CHECK(lg.ldm == doctest::Approx(squared_norm(pred - eps) / n).epsilon(1e-12));
        CHECK(lg.rec == doctest::Approx(squared_norm(z_ref - predict_z0(add_noise(z_ref, eps, t, s), pred, t, s)) / n)
                            .epsilon(1e-12));
        CHECK(lg.loss == doctest::Approx(lg.ldm + lg.rec).epsilon(1e-12));
        auto loss = [&](const Tensor& m) {
            return mci_loss_and_grad(net, z_ref, eps, t, s, ConceptEmbedding(m, "v"), 3, 1.0).loss;
        };
        CHECK(check_gradient(loss, v.matrix, lg.grad, 12, rng, 1e-4).worst <= 1e-3);
    }
    CHECK_THROWS_AS(mci_loss_and_grad(net, z_ref, eps, 0, s, v, 3, 1.0), ValidationError);
}

TEST_CASE("MCI reconstruction term vanishes for the true noise") {
    std::mt19937_64 rng(6);
    const Shape latent{5};
    const Tensor z_ref = randn(latent, rng);
    // Degenerate data at z_ref: the oracle's prediction is the true noise.
    const GaussianOracleBackbone b(z_ref, Tensor(latent, 1e-14), Tensor(), 2);
    const auto s = make_schedule(1000, ScheduleKind::linear);
    const auto lg = mci_loss_and_grad(b, z_ref, randn(latent, rng), 1, s, ConceptEmbedding(Tensor({1, 2}), "v"), 1, 1.0);
    CHECK(lg.rec < 1e-20);
    CHECK(lg.ldm < 1e-10);
}

TEST_CASE("MCI optimizes only the embedding") {
    const TinyDenoiser net(small_config(14));
    const auto s = make_schedule(1000, ScheduleKind::linear);
    std::mt19937_64 rng(7);
    const Tensor z_ref = randn(net.latent_shape(), rng, 0.5);
    auto param_digest = [&] {
        std::string all;
        for (const auto& p : net.parameters()) {
            all += sha256_hex(std::span(reinterpret_cast<const std::byte*>(p.value.data()), p.value.size() * sizeof(double)));
        }
        return all;
    };
    const std::string before = param_digest();

    InversionHyperparams hp;
    hp.mci_steps = 0;
    CHECK(multi_concept_inversion(net, z_ref, s, hp, 3, 42).matrix == mci_initialization(3, 8, 0.02, 42).matrix);

    hp.mci_steps = 5;
    MciLog log;
    const auto v = multi_concept_inversion(net, z_ref, s, hp, 3, 42, &log);
    CHECK(log.losses.size() == 5);
    CHECK(v.num_tokens() == 3);
    CHECK_FALSE(v.matrix == mci_initialization(3, 8, 0.02, 42).matrix);
    CHECK(multi_concept_inversion(net, z_ref, s, hp, 3, 42).matrix == v.matrix);
    CHECK(param_digest() == before);

    hp.concept_tokens = 4;
    CHECK_THROWS_AS(multi_concept_inversion(net, z_ref, s, hp, 3, 42), ValidationError);
}

TEST_CASE("MCI pulls the oracle's conditional mean toward the reference") {
    std::mt19937_64 rng(8);
    const Shape latent{6};
    const auto b = linear_oracle(2, 3, rng, latent);
    const Tensor z_ref = b.mean() + randn(latent, rng, 0.8);
    InversionHyperparams hp;
    hp.concept_tokens = 2;
    hp.mci_steps = 600;
    hp.mci_lr = 1e-2;
    const auto s = make_schedule(1000, ScheduleKind::linear);
    const auto init = mci_initialization(2, 3, hp.mci_init_std, 1);
    const auto v = multi_concept_inversion(b, z_ref, s, hp, 2, 1);
    const double before = l2_norm(b.conditional_mean(init) - z_ref);
    const double after = l2_norm(b.conditional_mean(v) - z_ref);
    MESSAGE("conditional-mean distance " << before << " -> " << after);
    CHECK(after < 0.5 * before);
}

TEST_CASE("reference embedding files") {
    const auto s = make_schedule(1000, ScheduleKind::linear);
    const auto v = mci_initialization(3, 8, 0.02, 5);
    const auto path = temp_path("ref.emb");
    save_reference_embedding(path, v, s.hash(), 5, {0.3, 0.2});
    const auto info = read_embedding_info(path);
    CHECK(info.kind == "reference");
    CHECK(info.schedule_hash == s.hash());
    CHECK(load_reference_embedding(path, s.hash()).matrix == v.matrix);
    CHECK_THROWS_AS(load_reference_embedding(path, s.strided(50).hash()), ValidationError);
    CHECK_THROWS_AS(load_per_step_embeddings(path, s.hash()), ValidationError);
}
