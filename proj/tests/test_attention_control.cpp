#include <doctest.h>

#include <random>

#include "support.hpp"
#include "vct/attention_control.hpp"
#include "vct/errors.hpp"
#include "vct/guidance.hpp"

using namespace vct;
using namespace vct::testing;

namespace {

struct Fixture {
    TinyDenoiser net{small_config(8)};
    std::mt19937_64 rng{21};
    Tensor z = randn(net.latent_shape(), rng);
    ConceptEmbedding v_src{randn({3, 8}, rng, 0.4), "src"};
    ConceptEmbedding v_ref{randn({3, 8}, rng, 0.4), "ref"};
    ConceptEmbedding v_null{Tensor({3, 8}), "null"};
    // Maps from a different latent, standing in for the content branch.
    AttentionRecord m_content = net.evaluate(randn(net.latent_shape(), rng), 0.4, v_src).record;
    AttentionRecord m_main = net.evaluate(z, 0.4, v_src).record;
};

AttentionControlConfig ratios(double cross, double self) {
    AttentionControlConfig c;
    c.cross_ratio = cross;
    c.self_ratio = self;
    return c;
}

}  // namespace

TEST_CASE("defaults") {
    const AttentionControlConfig c;
    CHECK(c.cross_ratio == 0.2);
    CHECK(c.self_ratio == 0.6);
    CHECK(c.window == InjectionWindow::early);
    CHECK(c.layer_mask.empty());
    CHECK(parse_injection_window("late") == InjectionWindow::late);
    CHECK_THROWS_AS(parse_injection_window("middle"), ValidationError);
}

TEST_CASE("replacement window covers round(ratio * T) steps") {
    CHECK(replaced_step_count(0.2, 50) == 10);
    CHECK(replaced_step_count(0.6, 50) == 30);
    CHECK(replaced_step_count(0.25, 50) == 13);
    CHECK(replaced_step_count(0.0, 50) == 0);
    CHECK(replaced_step_count(1.0, 50) == 50);
    CHECK_THROWS_AS(replaced_step_count(1.5, 50), ValidationError);
    CHECK_THROWS_AS(replaces_at(0.5, 0, 50, InjectionWindow::early), ValidationError);

    for (int T : {7, 50, 51}) {
        for (int k = 0; k <= 20; ++k) {
            const double r = k / 20.0;
            const int n = replaced_step_count(r, T);
            int early = 0, late = 0;
            for (int t = 1; t <= T; ++t) {
                const bool e = replaces_at(r, t, T, InjectionWindow::early);
                const bool l = replaces_at(r, t, T, InjectionWindow::late);
                early += e;
                late += l;
                CHECK(e == (t > T - n));  // the first n denoising steps
                CHECK(l == (t <= n));     // the last n
            }
            CHECK(early == n);
            CHECK(late == n);
        }
    }
}

TEST_CASE("soft control reductions") {
    Fixture f;
    const int T = 50;

    SUBCASE("zero ratios leave the main maps in place") {
        for (int t = 1; t <= T; ++t) {
            const auto ov = soft_attention_control(f.m_main, f.m_content, t, T, ratios(0, 0));
            CHECK(ov.empty());
            CHECK(materialize(ov, f.m_main) == f.m_main);
        }
    }
    SUBCASE("unit ratios hand over every map at every step") {
        for (auto window : {InjectionWindow::early, InjectionWindow::late}) {
            auto cfg = ratios(1, 1);
            cfg.window = window;
            for (int t = 1; t <= T; ++t) {
                CHECK(materialize(soft_attention_control(f.m_main, f.m_content, t, T, cfg), f.m_main) == f.m_content);
            }
        }
    }
    SUBCASE("identical records are a fixed point") {
        for (int t : {1, 25, 50}) {
            CHECK(materialize(soft_attention_control(f.m_main, f.m_main, t, T, AttentionControlConfig{}), f.m_main) ==
                  f.m_main);
        }
    }
    SUBCASE("self and cross maps follow their own ratios") {
        const AttentionControlConfig cfg;  // cross 0.2 -> 10 steps, self 0.6 -> 30 steps
        auto engaged = [&](int t, AttentionKind kind) {
            const auto ov = soft_attention_control(f.m_main, f.m_content, t, T, cfg);
            bool any = false;
            for (std::size_t i = 0; i < ov.maps.size(); ++i) {
                if (f.m_main.maps[i].kind == kind) any |= ov.maps[i].has_value();
            }
            return any;
        };
        CHECK(engaged(50, AttentionKind::cross_attention));
        CHECK(engaged(41, AttentionKind::cross_attention));
        CHECK_FALSE(engaged(40, AttentionKind::cross_attention));
        CHECK(engaged(40, AttentionKind::self_attention));
        CHECK(engaged(21, AttentionKind::self_attention));
        CHECK_FALSE(engaged(20, AttentionKind::self_attention));
        CHECK_FALSE(engaged(1, AttentionKind::cross_attention));
    }
    SUBCASE("layer mask restricts replacement") {
        auto cfg = ratios(1, 1);
        cfg.layer_mask = {f.m_main.maps.front().layer};
        const auto ov = soft_attention_control(f.m_main, f.m_content, 30, T, cfg);
        CHECK(ov.engaged_count() == 1);
        CHECK(ov.maps.front().has_value());
    }
    SUBCASE("malformed inputs") {
        AttentionRecord shorter = f.m_content;
        shorter.maps.pop_back();
        CHECK_THROWS_AS(soft_attention_control(f.m_main, shorter, 10, T, AttentionControlConfig{}), ValidationError);
        CHECK_THROWS_AS(soft_attention_control(f.m_main, f.m_content, 10, T, ratios(-0.1, 0)), ValidationError);
        CHECK_THROWS_AS(soft_attention_control(f.m_main, f.m_content, 51, T, AttentionControlConfig{}),
                        ValidationError);
    }
}

TEST_CASE("controlled prediction") {
    Fixture f;
    const int T = 50;
    const double ab = 0.4;

    SUBCASE("disabled control is the plain guided pair, bitwise") {
        const auto plain = guided_epsilon_pair(f.net, f.z, ab, f.v_src, f.v_ref, 7.5);
        for (int t : {1, 30, 50}) {
            const auto c = apply_control(f.net, f.z, ab, t, T, f.v_src, f.v_ref, 7.5, f.m_content, ratios(0, 0));
            CHECK(c.eps == plain.eps);
            CHECK(c.record == plain.record);
            CHECK(c.applied.empty());
        }
    }
    SUBCASE("re-applying the applied override reproduces the output") {
        const auto c = apply_control(f.net, f.z, ab, 50, T, f.v_src, f.v_ref, 7.5, f.m_content, ratios(1, 1));
        CHECK(c.record == f.m_content);
        const auto again = guided_epsilon_pair(f.net, f.z, ab, f.v_src, f.v_ref, 7.5, &c.applied);
        CHECK(again.eps == c.eps);
    }
    SUBCASE("active control changes the prediction") {
        const auto plain = guided_epsilon_pair(f.net, f.z, ab, f.v_src, f.v_ref, 7.5);
        const auto c = apply_control(f.net, f.z, ab, 50, T, f.v_src, f.v_ref, 7.5, f.m_content, AttentionControlConfig{});
        CHECK(c.applied.engaged_count() > 0);
        CHECK(l2_norm(c.eps - plain.eps) > 0.0);
    }
    SUBCASE("at w = 1 with v_ref = v_src and the branch's own maps, the streams agree") {
        const auto content = guided_epsilon_pair(f.net, f.z, ab, f.v_src, f.v_null, 1.0);
        const auto c = apply_control(f.net, f.z, ab, 50, T, f.v_src, f.v_src, 1.0, content.record, ratios(1, 1));
        CHECK(c.eps == content.eps);
    }
}
