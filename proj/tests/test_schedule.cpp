#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "vct/errors.hpp"
#include "vct/inversion.hpp"
#include "vct/schedule.hpp"

using namespace vct;
using vct::testing::randn;

TEST_CASE("linear schedule endpoint matches the direct beta product") {
    const auto s = make_schedule(1000, ScheduleKind::linear);
    REQUIRE(s.steps() == 1000);
    double prod = 1.0;
    for (int i = 0; i < 1000; ++i) {
        const double beta = 1e-4 + (2e-2 - 1e-4) * i / 999.0;
        prod *= 1.0 - beta;
        CHECK(s.alpha_bar(i + 1) == doctest::Approx(prod).epsilon(1e-12));
    }
    CHECK(s.alpha_bar(1000) == doctest::Approx(4.0e-5).epsilon(0.03));
    CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("schedule invariants hold for both kinds and several lengths") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        for (int T : {2, 10, 50, 200, 1000}) {
            const auto s = make_schedule(T, kind);
            CHECK(s.alpha_bar(0) == 1.0);
            for (int t = 1; t <= T; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
            CHECK(s.alpha_bar(T) > 0.0);
            CHECK(s.alpha_bar(T) < 0.05);
        }
    }
}

TEST_CASE("schedule construction rejects broken curves") {
    CHECK_THROWS_AS(NoiseSchedule({1.0}), ValidationError);
    CHECK_THROWS_AS(NoiseSchedule({0.9, 0.5, 0.01}), ValidationError);
    CHECK_THROWS_AS(NoiseSchedule({1.0, 0.5, 0.6, 0.01}), ValidationError);
    CHECK_THROWS_AS(NoiseSchedule({1.0, 0.5, 0.1}), ValidationError);
    CHECK_THROWS_AS(NoiseSchedule({1.0, 0.5, 0.0}), ValidationError);
    CHECK_THROWS_AS(make_schedule(0, ScheduleKind::linear), ValidationError);
    CHECK_THROWS_AS(parse_schedule_kind("quadratic"), ValidationError);
    const auto s = make_schedule(10, ScheduleKind::linear);
    CHECK_THROWS_AS(s.alpha_bar(11), ValidationError);
    CHECK_THROWS_AS(s.alpha_bar(-1), ValidationError);
}

TEST_CASE("strided schedule samples the same curve") {
    const auto s = make_schedule(1000, ScheduleKind::linear);
    const auto sub = s.strided(50);
    REQUIRE(sub.steps() == 50);
    for (int k = 0; k <= 50; ++k) CHECK(sub.alpha_bar(k) == s.alpha_bar(20 * k));
    CHECK_THROWS_AS(s.strided(7), ValidationError);
    CHECK(s.strided(1000) == s);
    CHECK(sub.hash() != s.hash());
    CHECK(sub.hash() == s.strided(50).hash());
}

TEST_CASE("forward noising example") {
    const NoiseSchedule s({1.0, 0.25, 0.01});
    const Tensor z0({2}, {1.0, 0.0});
    const Tensor eps({2}, {0.0, 1.0});
    const Tensor zt = add_noise(z0, eps, 1, s);
    CHECK(zt[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(zt[1] == doctest::Approx(std::sqrt(0.75)).epsilon(1e-12));
    const Tensor back = predict_z0(zt, eps, 1, s);
    CHECK(max_abs_diff(back, z0) < 1e-12);
    CHECK_THROWS_AS(predict_z0(zt, eps, 0, s), ValidationError);
}

TEST_CASE("clean-latent estimate inverts noising at every step") {
    std::mt19937_64 rng(1);
    const auto s = make_schedule(1000, ScheduleKind::linear);
    for (int t : {1, 10, 250, 500, 999, 1000}) {
        const Tensor z0 = randn({3, 4, 4}, rng);
        const Tensor eps = randn({3, 4, 4}, rng);
        CHECK(max_abs_diff(predict_z0(add_noise(z0, eps, t, s), eps, t, s), z0) < 1e-9);
    }
}

TEST_CASE("DDIM step limits and closed forms") {
    std::mt19937_64 rng(2);
    const auto s = make_schedule(50, ScheduleKind::linear);
    const Tensor z = randn({6}, rng);
    const Tensor e = randn({6}, rng);

    SUBCASE("a step to t_prev = 0 returns the clean estimate") {
        CHECK(max_abs_diff(ddim_step(z, e, 7, 0, s), predict_z0(z, e, 7, s)) < 1e-12);
    }
    SUBCASE("true noise keeps the trajectory on the noising path") {
        const Tensor z0 = randn({6}, rng);
        const Tensor zt = add_noise(z0, e, 30, s);
        CHECK(max_abs_diff(ddim_step(zt, e, 30, 29, s), add_noise(z0, e, 29, s)) < 1e-12);
    }
    SUBCASE("constant noise telescopes to a closed form") {
        // z_0 = z_T / sqrt(ab_T) - c sqrt((1 - ab_T) / ab_T)
        Tensor cur = z;
        for (int t = s.steps(); t >= 1; --t) cur = ddim_step(cur, e, t, t - 1, s);
        const double abT = s.alpha_bar(s.steps());
        Tensor expected = (1.0 / std::sqrt(abT)) * z;
        expected.axpy(-std::sqrt((1.0 - abT) / abT), e);
        CHECK(relative_error(cur, expected) < 1e-10);
    }
    SUBCASE("inversion from t = 0 with zero noise just rescales") {
        const Tensor zero({6});
        CHECK(max_abs_diff(ddim_invert_step(z, zero, 0, 1, s), std::sqrt(s.alpha_bar(1)) * z) < 1e-12);
    }
    SUBCASE("index order is enforced") {
        CHECK_THROWS_AS(ddim_step(z, e, 3, 3, s), ValidationError);
        CHECK_THROWS_AS(ddim_step(z, e, 3, 4, s), ValidationError);
        CHECK_THROWS_AS(ddim_invert_step(z, e, 4, 3, s), ValidationError);
        CHECK_THROWS_AS(ddim_step(z, Tensor({5}), 3, 2, s), ValidationError);
    }
}

TEST_CASE("inverse step undoes the forward step for a fixed prediction") {
    std::mt19937_64 rng(3);
    const auto s = make_schedule(50, ScheduleKind::linear);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const int t = 1 + static_cast<int>(rng() % 50);
        const Tensor z = randn({8}, rng);
        const Tensor e = randn({8}, rng);
        const Tensor up = ddim_invert_step(ddim_step(z, e, t, t - 1, s), e, t - 1, t, s);
        worst = std::max(worst, max_abs_diff(up, z));
    }
    CHECK(worst <= 1e-6);
}

namespace {

double oracle_round_trip_error(const GaussianOracleBackbone& oracle, const Tensor& z_src, const NoiseSchedule& s) {
    const ConceptEmbedding v_null(Tensor({1, oracle.embed_dim()}), "null");
    const auto traj = ddim_invert_full(oracle, z_src, v_null, s);
    Tensor z = traj.back();
    for (int t = s.steps(); t >= 1; --t) z = ddim_step(z, oracle.evaluate(z, t, s, v_null).eps, t, t - 1, s);
    return relative_error(z, z_src);
}

}  // namespace

TEST_CASE("round-trip error on the Gaussian oracle shrinks with more steps") {
    std::mt19937_64 rng(4);
    const Shape latent{16};
    const Tensor mean = randn(latent, rng, 0.5);
    const Tensor var = vct::testing::uniform(latent, rng, 0.3, 1.5);
    const GaussianOracleBackbone oracle(mean, var, Tensor(), 4);
    Tensor z_src = mean;
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < z_src.size(); ++i) z_src[i] += std::sqrt(var[i]) * n(rng);
    const auto base = make_schedule(1000, ScheduleKind::linear);
    double previous = 1e9;
    for (int T : {25, 50, 100, 200}) {
        const double err = oracle_round_trip_error(oracle, z_src, base.strided(T));
        MESSAGE("T=" << T << " relative error " << err);
        CHECK(err < previous);
        previous = err;
    }
}

TEST_CASE("unit-variance oracle round trip contracts by the closed-form factor") {
    // eps = sqrt(1 - ab) z, so each invert or sample step between levels a and b
    // scales z by sqrt(a b) + sqrt((1 - a)(1 - b)).
    std::mt19937_64 rng(5);
    const Shape latent{8};
    const GaussianOracleBackbone oracle(Tensor(latent), Tensor(latent, 1.0), Tensor(), 4);
    const Tensor z_src = randn(latent, rng);
    for (int T : {25, 200}) {
        const auto s = make_schedule(1000, ScheduleKind::linear).strided(T);
        double factor = 1.0;
        for (int t = 0; t < T; ++t) {
            const double a = s.alpha_bar(t), b = s.alpha_bar(t + 1);
            const double c = std::sqrt(a * b) + std::sqrt((1.0 - a) * (1.0 - b));
            factor *= c * c;
        }
        CHECK(oracle_round_trip_error(oracle, z_src, s) == doctest::Approx(1.0 - factor).epsilon(1e-9));
    }
}
