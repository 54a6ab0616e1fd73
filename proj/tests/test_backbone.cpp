#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "support.hpp"
#include "vct/errors.hpp"
#include "vct/io.hpp"
#include "vct/toy_data.hpp"
#include "vct/training.hpp"

using namespace vct;
using namespace vct::testing;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "vct_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("token embedding lookup") {
    const auto table = EmbeddingTable::make_toy(8, 11);
    const auto v = embed_tokens(table, {"red", "circle"});
    REQUIRE(v.num_tokens() == 2);
    for (int r = 0; r < 2; ++r) {
        const int row = table.index_of(r == 0 ? "red" : "circle");
        for (int c = 0; c < 8; ++c) CHECK(v.matrix[r * 8 + c] == table.weights()[row * 8 + c]);
    }
    const auto null = table.null_embedding(3);
    CHECK(squared_norm(null.matrix) == 0.0);
    CHECK(null.num_tokens() == 3);
    CHECK_THROWS_AS(embed_tokens(table, {"platypus"}), ValidationError);
    CHECK_THROWS_AS(pad_to(v, 1), ValidationError);
    CHECK(pad_to(v, 4).num_tokens() == 4);
}

TEST_CASE("Gaussian oracle closed forms") {
    std::mt19937_64 rng(5);
    const Shape latent{6};
    const auto s = make_schedule(50, ScheduleKind::linear);
    const ConceptEmbedding v(randn({2, 3}, rng), "v");

    SUBCASE("vanishing variance predicts the exact noise") {
        const Tensor mean = randn(latent, rng);
        const GaussianOracleBackbone b(mean, Tensor(latent, 1e-12), Tensor(), 3);
        const Tensor e = randn(latent, rng);
        const Tensor zt = add_noise(mean, e, 20, s);
        CHECK(max_abs_diff(oracle_epsilon(b, zt, 20, v, s), e) < 1e-5);
    }
    SUBCASE("standard normal data gives sqrt(1 - ab) z") {
        const GaussianOracleBackbone b(Tensor(latent), Tensor(latent, 1.0), Tensor(), 3);
        const Tensor z = randn(latent, rng);
        const double ab = s.alpha_bar(13);
        CHECK(max_abs_diff(b.evaluate(z, ab, v).eps, std::sqrt(1.0 - ab) * z) < 1e-12);
    }
    SUBCASE("no conditioning means the embedding is ignored") {
        const GaussianOracleBackbone b(randn(latent, rng), uniform(latent, rng, 0.5, 1.0), Tensor(), 3);
        const Tensor z = randn(latent, rng);
        const ConceptEmbedding other(randn({2, 3}, rng), "other");
        CHECK(b.evaluate(z, 0.3, v).eps == b.evaluate(z, 0.3, other).eps);
    }
    SUBCASE("score equals the analytic Gaussian score") {
        const auto b = linear_oracle(2, 3, rng, latent);
        const Tensor z = randn(latent, rng);
        const double ab = 0.4;
        const Tensor m = b.conditional_mean(v);
        Tensor expected(latent);
        for (std::size_t i = 0; i < z.size(); ++i) {
            expected[i] = -(z[i] - std::sqrt(ab) * m[i]) / (ab * b.variance()[i] + 1.0 - ab);
        }
        CHECK(max_abs_diff(b.score(z, ab, v), expected) < 1e-12);
        CHECK(max_abs_diff(b.evaluate(z, ab, v).eps, (-std::sqrt(1.0 - ab)) * b.score(z, ab, v)) < 1e-12);
    }
}

TEST_CASE("Gaussian oracle matches a Monte-Carlo posterior mean") {
    // For jointly Gaussian (eps, z_t) the posterior mean is linear; estimate
    // its slope and intercept by least squares on samples.
    std::mt19937_64 rng(6);
    const double mu = 0.7, var = 0.4, ab = 0.35;
    const GaussianOracleBackbone b(Tensor({1}, {mu}), Tensor({1}, {var}), Tensor(), 1);
    const ConceptEmbedding v(Tensor({1, 1}), "v");
    std::normal_distribution<double> n(0.0, 1.0);
    const int N = 400000;
    double sz = 0, se = 0, szz = 0, sze = 0;
    for (int i = 0; i < N; ++i) {
        const double z0 = mu + std::sqrt(var) * n(rng);
        const double e = n(rng);
        const double z = std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * e;
        sz += z;
        se += e;
        szz += z * z;
        sze += z * e;
    }
    const double slope = (sze / N - (sz / N) * (se / N)) / (szz / N - (sz / N) * (sz / N));
    const double intercept = se / N - slope * sz / N;
    for (double z : {-1.0, 0.0, 0.5, 2.0}) {
        const double mc = intercept + slope * z;
        const double exact = b.evaluate(Tensor({1}, {z}), ab, v).eps[0];
        CHECK(std::abs(mc - exact) < 1e-2);
    }
}

TEST_CASE("Gaussian oracle embedding gradient matches finite differences") {
    std::mt19937_64 rng(7);
    const Shape latent{6};
    const auto b = linear_oracle(2, 3, rng, latent);
    const Tensor z = randn(latent, rng);
    const Tensor target = randn(latent, rng);
    const ConceptEmbedding v(randn({2, 3}, rng), "v");
    auto loss = [&](const Tensor& m) {
        const Tensor eps = b.evaluate(z, 0.3, ConceptEmbedding(m, "v")).eps;
        return squared_norm(eps - target);
    };
    const auto res = b.evaluate_with_embedding_grad(z, 0.3, v, nullptr,
                                                    [&](const Tensor& eps) { return 2.0 * (eps - target); });
    const auto gc = check_gradient(loss, v.matrix, res.grad_embedding, 6, rng);
    CHECK(gc.worst <= 1e-3);
}

TEST_CASE("tiny denoiser basics") {
    const TinyDenoiser net(small_config());
    std::mt19937_64 rng(8);
    const Tensor z = randn(net.latent_shape(), rng);
    const ConceptEmbedding v(randn({3, 8}, rng, 0.3), "v");

    SUBCASE("evaluation is bitwise deterministic") {
        const auto a = net.evaluate(z, 0.5, v);
        const auto b = net.evaluate(z, 0.5, v);
        CHECK(a.eps == b.eps);
        CHECK(a.record == b.record);
        const TinyDenoiser twin(small_config());
        CHECK(twin.evaluate(z, 0.5, v).eps == a.eps);
    }
    SUBCASE("attention maps are distributions laid out as declared") {
        const auto r = net.evaluate(z, 0.5, v);
        const auto layout = net.attention_layout(3);
        REQUIRE(r.record.maps.size() == layout.size());
        bool saw_self = false, saw_cross = false;
        for (std::size_t i = 0; i < layout.size(); ++i) {
            CHECK(r.record.maps[i].probs.shape() == layout[i].map_shape);
            CHECK(rows_are_distributions(r.record.maps[i].probs, 1e-9));
            saw_self |= layout[i].kind == AttentionKind::self_attention;
            saw_cross |= layout[i].kind == AttentionKind::cross_attention;
        }
        CHECK(saw_self);
        CHECK(saw_cross);
    }
    SUBCASE("injecting the maps it would compute changes nothing") {
        const auto r = net.evaluate(z, 0.5, v);
        const auto ov = AttentionOverride::from_record(r.record);
        const auto again = net.evaluate(z, 0.5, v, &ov);
        CHECK(again.eps == r.eps);
        CHECK(again.record == r.record);
    }
    SUBCASE("cross maps from another embedding change the output") {
        const ConceptEmbedding other(randn({3, 8}, rng, 0.3), "other");
        const auto foreign = net.evaluate(z, 0.5, other).record;
        const auto layout = net.attention_layout(3);
        AttentionOverride ov;
        for (std::size_t i = 0; i < layout.size(); ++i) {
            if (layout[i].kind == AttentionKind::cross_attention) ov.maps.emplace_back(foreign.maps[i].probs);
            else ov.maps.emplace_back(std::nullopt);
        }
        const auto plain = net.evaluate(z, 0.5, v);
        const auto swapped = net.evaluate(z, 0.5, v, &ov);
        CHECK(l2_norm(swapped.eps - plain.eps) > 0.0);
    }
    SUBCASE("malformed inputs are rejected") {
        CHECK_THROWS_AS(net.evaluate(Tensor({3, 4, 4}), 0.5, v), ValidationError);
        CHECK_THROWS_AS(net.evaluate(z, 0.0, v), ValidationError);
        CHECK_THROWS_AS(net.evaluate(z, 0.5, ConceptEmbedding(Tensor({2, 8}), "short")), ValidationError);
        CHECK_THROWS_AS(net.evaluate(z, 0.5, ConceptEmbedding(Tensor({3, 5}), "narrow")), ValidationError);
        AttentionOverride bad;
        bad.maps.emplace_back(Tensor({1, 1, 1}, 1.0));
        CHECK_THROWS_AS(net.evaluate(z, 0.5, v, &bad), ValidationError);
    }
}

TEST_CASE("tiny denoiser embedding gradient matches finite differences") {
    const TinyDenoiser net(small_config(2));
    std::mt19937_64 rng(9);
    const Tensor z = randn(net.latent_shape(), rng);
    const Tensor target = randn(net.latent_shape(), rng);
    const ConceptEmbedding v(randn({3, 8}, rng, 0.5), "v");
    auto seed = [&](const Tensor& eps) { return 2.0 * (eps - target); };
    auto loss = [&](const Tensor& m) {
        return squared_norm(net.evaluate(z, 0.4, ConceptEmbedding(m, "v")).eps - target);
    };
    const auto res = net.evaluate_with_embedding_grad(z, 0.4, v, nullptr, seed);
    CHECK(res.eps == net.evaluate(z, 0.4, v).eps);
    const auto gc = check_gradient(loss, v.matrix, res.grad_embedding, 12, rng);
    CHECK(gc.worst <= 1e-3);

    SUBCASE("and under an injected self-attention map") {
        const auto rec = net.evaluate(z, 0.4, ConceptEmbedding(randn({3, 8}, rng, 0.5), "o")).record;
        AttentionOverride ov;
        for (const auto& m : rec.maps) {
            if (m.kind == AttentionKind::self_attention) ov.maps.emplace_back(m.probs);
            else ov.maps.emplace_back(std::nullopt);
        }
        auto loss_ov = [&](const Tensor& m) {
            return squared_norm(net.evaluate(z, 0.4, ConceptEmbedding(m, "v"), &ov).eps - target);
        };
        const auto r2 = net.evaluate_with_embedding_grad(z, 0.4, v, &ov, seed);
        CHECK(check_gradient(loss_ov, v.matrix, r2.grad_embedding, 12, rng).worst <= 1e-3);
    }
}

TEST_CASE("tiny denoiser parameter gradients match finite differences") {
    TinyDenoiser net(small_config(3));
    std::mt19937_64 rng(10);
    const Tensor z = randn(net.latent_shape(), rng);
    const Tensor target = randn(net.latent_shape(), rng);
    const ConceptEmbedding v(randn({3, 8}, rng, 0.5), "v");
    const auto res = net.evaluate_with_param_grads(z, 0.6, v, [&](const Tensor& eps) { return 2.0 * (eps - target); });
    REQUIRE(res.grads.size() == net.parameters().size());
    double worst = 0.0;
    for (std::size_t p = 0; p < net.parameters().size(); ++p) {
        const std::string name = net.parameters()[p].name;
        auto loss = [&](const Tensor& value) {
            TinyDenoiser probe = net;
            find_tensor(probe.mutable_parameters(), name) = value;
            return squared_norm(probe.evaluate(z, 0.6, v).eps - target);
        };
        const auto gc = check_gradient(loss, net.parameters()[p].value, res.grads[p].value, 2, rng, 1e-3);
        worst = std::max(worst, gc.worst);
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("training with zero steps leaves the weights alone") {
    TinyDenoiser net(small_config(4));
    const auto before = net.parameters();
    const auto table = EmbeddingTable::make_toy(8, 11);
    const auto data = make_toy_dataset(table, net.config(), 4, 1);
    TrainOptions opts;
    opts.steps = 0;
    const auto ckpt = train_backbone(net, table, data, make_schedule(100, ScheduleKind::linear), opts);
    REQUIRE(ckpt.params.size() == before.size());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(ckpt.params[i].value == before[i].value);
}

TEST_CASE("training overfits a single example") {
    auto cfg = small_config(5);
    cfg.base_width = 8;
    TinyDenoiser net(cfg);
    const auto table = EmbeddingTable::make_toy(8, 11);
    const auto data = make_toy_dataset(table, net.config(), 1, 2);
    const auto s = make_schedule(1000, ScheduleKind::linear);

    std::mt19937_64 rng(11);
    std::vector<std::pair<int, Tensor>> draws;
    for (int i = 0; i < 64; ++i) draws.emplace_back(1 + static_cast<int>(rng() % 1000), randn(net.latent_shape(), rng));
    auto mean_loss = [&](const Backbone& b) {
        double total = 0.0;
        for (const auto& [t, e] : draws) total += denoising_loss(b, data[0].latent, e, t, s, data[0].condition);
        return total / static_cast<double>(draws.size());
    };

    const double initial = mean_loss(net);
    TrainOptions opts;
    opts.steps = 2000;
    opts.lr = 3e-3;
    opts.seed = 1;
    opts.condition_dropout = 0.0;
    const auto ckpt = train_backbone(net, table, data, s, opts);
    const double final_loss = mean_loss(ckpt.backbone());
    MESSAGE("single-example loss " << initial << " -> " << final_loss);
    CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    TinyDenoiser net(small_config(6));
    const auto table = EmbeddingTable::make_toy(8, 11);
    const auto data = make_toy_dataset(table, net.config(), 4, 3);
    TrainOptions opts;
    opts.steps = 5;
    const auto ckpt = train_backbone(net, table, data, make_schedule(100, ScheduleKind::linear), opts);
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, ckpt);
    const auto loaded = load_checkpoint(path);
    REQUIRE(loaded.params.size() == ckpt.params.size());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        CHECK(loaded.params[i].name == ckpt.params[i].name);
        CHECK(loaded.params[i].value == ckpt.params[i].value);
    }
    CHECK(loaded.table.weights() == ckpt.table.weights());
    CHECK(loaded.config == ckpt.config);
    CHECK(loaded.schedule() == ckpt.schedule());

    std::mt19937_64 rng(12);
    const Tensor z = randn(net.latent_shape(), rng);
    const auto v = pad_to(embed_tokens(table, {"red", "square"}), 3);
    CHECK(loaded.backbone().evaluate(z, 0.5, v).eps == ckpt.backbone().evaluate(z, 0.5, v).eps);
}

TEST_CASE("malformed containers are refused") {
    const auto path = temp_path("garbage.ckpt");
    {
        std::ofstream out(path, std::ios::binary);
        out << "not a container at all";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), ValidationError);

    // A valid container whose parameters do not fit the architecture.
    TinyDenoiser net(small_config(7));
    Checkpoint ckpt{net.config(), net.parameters(), EmbeddingTable::make_toy(8, 11)};
    ckpt.params.pop_back();
    const auto bad = temp_path("truncated.ckpt");
    save_checkpoint(bad, ckpt);
    CHECK_THROWS_AS(load_checkpoint(bad), ValidationError);
}
