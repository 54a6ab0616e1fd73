#include "vct/tiny_denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vct/autograd.hpp"

namespace vct {

namespace {

constexpr int kEncodingFrequencies = 15;
constexpr int kEncodingDim = 2 * kEncodingFrequencies + 2;

struct ParamSpec {
    std::string name;
    Shape shape;
    double gain;  // weights ~ N(0, gain^2 / fan_in); gain 0 means zeros
};

std::vector<ParamSpec> architecture(const TinyDenoiserConfig& c) {
    const std::int64_t w1 = c.base_width;
    const std::int64_t w2 = c.base_width;
    const std::int64_t w3 = 2 * c.base_width;
    const std::int64_t td = c.time_dim;
    const std::int64_t cin = c.in_channels;
    std::vector<ParamSpec> specs = {
        {"time.0.w", {td, kEncodingDim}, 1.0},
        {"time.0.b", {td}, 0.0},
        {"time.1.w", {td, td}, 1.0},
        {"time.1.b", {td}, 0.0},
        {"conv_in.w", {w1, cin, 3, 3}, 1.0},
        {"conv_in.b", {w1}, 0.0},
    };
    auto block = [&](const std::string& name, std::int64_t in, std::int64_t out) {
        specs.push_back({name + ".temb.w", {in, td}, 1.0});
        specs.push_back({name + ".temb.b", {in}, 0.0});
        specs.push_back({name + ".conv.w", {out, in, 3, 3}, 1.0});
        specs.push_back({name + ".conv.b", {out}, 0.0});
    };
    block("block1", w1, w1);
    block("block2", w2, w2);
    block("block3", w2, w3);
    specs.push_back({"self.q.w", {w3, w3}, 1.0});
    specs.push_back({"self.k.w", {w3, w3}, 1.0});
    specs.push_back({"self.v.w", {w3, w3}, 1.0});
    specs.push_back({"self.o.w", {w3, w3}, 0.1});
    specs.push_back({"self.o.b", {w3}, 0.0});
    specs.push_back({"ctx.pos", {c.context_tokens, c.embed_dim}, 0.8});
    specs.push_back({"cross.q.w", {w3, w3}, 1.0});
    specs.push_back({"cross.k.w", {w3, c.embed_dim}, 5.0});
    specs.push_back({"cross.v.w", {w3, c.embed_dim}, 5.0});
    specs.push_back({"cross.o.w", {w3, w3}, 0.1});
    specs.push_back({"cross.o.b", {w3}, 0.0});
    block("block4", w3, w3);
    specs.push_back({"up2.conv.w", {w2, w3 + w2, 3, 3}, 1.0});
    specs.push_back({"up2.conv.b", {w2}, 0.0});
    specs.push_back({"up1.conv.w", {w1, w2, 3, 3}, 1.0});
    specs.push_back({"up1.conv.b", {w1}, 0.0});
    specs.push_back({"conv_out.w", {cin, w1, 3, 3}, 0.1});
    specs.push_back({"conv_out.b", {cin}, 0.0});
    return specs;
}

std::int64_t fan_in(const Shape& shape) {
    std::int64_t f = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) f *= shape[i];
    return f;
}

}  // namespace

const Tensor& find_tensor(const ParameterSet& set, const std::string& name) {
    for (const auto& p : set) {
        if (p.name == name) return p.value;
    }
    throw ValidationError("no tensor named '" + name + "'");
}

Tensor& find_tensor(ParameterSet& set, const std::string& name) {
    return const_cast<Tensor&>(find_tensor(static_cast<const ParameterSet&>(set), name));
}

void TinyDenoiserConfig::validate() const {
    if (in_channels < 1 || base_width < 1 || heads < 1 || embed_dim < 1 || time_dim < 1 || context_tokens < 1) {
        throw ValidationError("tiny denoiser config: sizes must be positive");
    }
    if (resolution < 4 || resolution % 4 != 0) {
        throw ValidationError("tiny denoiser config: resolution must be a positive multiple of 4");
    }
    if ((2 * base_width) % heads != 0) {
        throw ValidationError("tiny denoiser config: attention width must divide evenly into heads");
    }
}

void to_json(nlohmann::json& j, const TinyDenoiserConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels}, {"resolution", c.resolution},   {"base_width", c.base_width},
                       {"heads", c.heads},             {"embed_dim", c.embed_dim},     {"time_dim", c.time_dim},
                       {"context_tokens", c.context_tokens}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TinyDenoiserConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("resolution").get_to(c.resolution);
    j.at("base_width").get_to(c.base_width);
    j.at("heads").get_to(c.heads);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("time_dim").get_to(c.time_dim);
    j.at("context_tokens").get_to(c.context_tokens);
    j.at("seed").get_to(c.seed);
}

std::vector<double> noise_level_encoding(double alpha_bar) {
    const double logsnr = alpha_bar >= 1.0 ? 20.0 : std::clamp(std::log(alpha_bar / (1.0 - alpha_bar)), -20.0, 20.0);
    std::vector<double> enc;
    enc.reserve(kEncodingDim);
    for (int i = 0; i < kEncodingFrequencies; ++i) {
        const double freq = 0.05 * std::pow(100.0, static_cast<double>(i) / (kEncodingFrequencies - 1));
        enc.push_back(std::sin(freq * logsnr));
        enc.push_back(std::cos(freq * logsnr));
    }
    enc.push_back(std::sqrt(alpha_bar));
    enc.push_back(std::sqrt(std::max(0.0, 1.0 - alpha_bar)));
    return enc;
}

TinyDenoiser::TinyDenoiser(TinyDenoiserConfig config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    for (const auto& spec : architecture(config_)) {
        Tensor t(spec.shape);
        if (spec.gain != 0.0) {
            std::normal_distribution<double> normal(0.0, spec.gain / std::sqrt(static_cast<double>(fan_in(spec.shape))));
            for (auto& x : t.values()) x = normal(rng);
            round_to_float(t);
        }
        params_.push_back({spec.name, std::move(t)});
    }
}

TinyDenoiser::TinyDenoiser(TinyDenoiserConfig config, ParameterSet params) : config_(config) {
    config_.validate();
    const auto specs = architecture(config_);
    if (params.size() != specs.size()) {
        throw ValidationError("tiny denoiser expects " + std::to_string(specs.size()) + " parameter arrays, got " +
                              std::to_string(params.size()));
    }
    for (const auto& spec : specs) {
        auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == spec.name; });
        if (it == params.end()) throw ValidationError("missing parameter '" + spec.name + "'");
        if (it->value.shape() != spec.shape) {
            throw ValidationError("parameter '" + spec.name + "' has shape " + shape_str(it->value.shape()) +
                                  ", expected " + shape_str(spec.shape));
        }
        if (!it->value.all_finite()) throw NumericalError("parameter '" + spec.name + "' is not finite");
        params_.push_back({spec.name, it->value});
    }
}

std::size_t TinyDenoiser::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

Shape TinyDenoiser::latent_shape() const {
    return {config_.in_channels, config_.resolution, config_.resolution};
}

std::vector<AttentionSlot> TinyDenoiser::attention_layout(int num_tokens) const {
    const std::int64_t positions = static_cast<std::int64_t>(config_.resolution / 4) * (config_.resolution / 4);
    return {
        {"mid.self", AttentionKind::self_attention, {config_.heads, positions, positions}},
        {"mid.cross", AttentionKind::cross_attention, {config_.heads, positions, num_tokens}},
    };
}

struct TinyDenoiser::Forward {
    ad::Var eps;
    ad::Var embedding;
    std::vector<ad::Var> params;
    AttentionRecord record;
};

TinyDenoiser::Forward TinyDenoiser::build(ad::Tape& tape, const Tensor& z_t, double alpha_bar,
                                          const ConceptEmbedding& v, const AttentionOverride* override_maps,
                                          bool param_grads, bool embed_grad) const {
    check_inputs(z_t, alpha_bar, v);
    if (v.num_tokens() != config_.context_tokens) {
        throw ValidationError("tiny denoiser expects " + std::to_string(config_.context_tokens) +
                              " context tokens, got " + std::to_string(v.num_tokens()));
    }
    const auto layout = attention_layout(v.num_tokens());
    const Tensor* self_override = nullptr;
    const Tensor* cross_override = nullptr;
    if (override_maps && !override_maps->maps.empty()) {
        validate_override(*override_maps, layout);
        if (override_maps->maps[0]) self_override = &*override_maps->maps[0];
        if (override_maps->maps[1]) cross_override = &*override_maps->maps[1];
    }

    Forward f;
    f.params.reserve(params_.size());
    for (const auto& p : params_) f.params.push_back(param_grads ? tape.leaf(p.value) : tape.constant(p.value));
    auto P = [&](const std::string& name) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name == name) return f.params[i];
        }
        throw ValidationError("tiny denoiser: unknown parameter " + name);
    };

    using namespace ad;
    const int heads = config_.heads;
    const int coarse = config_.resolution / 4;

    Var x = tape.constant(z_t);
    f.embedding = embed_grad ? tape.leaf(v.matrix) : tape.constant(v.matrix);
    // learned per-slot offsets keep identical rows (e.g. null padding) distinguishable
    Var ctx = add(f.embedding, P("ctx.pos"));

    Var enc = tape.constant(Tensor(Shape{kEncodingDim}, noise_level_encoding(alpha_bar)));
    Var temb = silu(linear(silu(linear(enc, P("time.0.w"), P("time.0.b"))), P("time.1.w"), P("time.1.b")));
    auto conditioned = [&](Var h, const std::string& blk) {
        Var bias = linear(temb, P(blk + ".temb.w"), P(blk + ".temb.b"));
        return conv2d(silu(add_channel_bias(h, bias)), P(blk + ".conv.w"), P(blk + ".conv.b"));
    };

    Var h0 = conv2d(x, P("conv_in.w"), P("conv_in.b"));
    Var h1 = add(h0, conditioned(h0, "block1"));
    Var d2 = avg_pool2(h1);
    Var h2 = add(d2, conditioned(d2, "block2"));
    Var d3 = avg_pool2(h2);
    Var h3 = conditioned(d3, "block3");

    Tensor self_map;
    Tensor cross_map;
    Var tok = to_tokens(h3);
    Var sa = attention(linear_nobias(tok, P("self.q.w")), linear_nobias(tok, P("self.k.w")),
                       linear_nobias(tok, P("self.v.w")), heads, self_override, &self_map);
    tok = add(tok, linear(sa, P("self.o.w"), P("self.o.b")));
    Var ca = attention(linear_nobias(tok, P("cross.q.w")), linear_nobias(ctx, P("cross.k.w")),
                       linear_nobias(ctx, P("cross.v.w")), heads, cross_override, &cross_map);
    tok = add(tok, linear(ca, P("cross.o.w"), P("cross.o.b")));
    Var mid = from_tokens(tok, coarse, coarse);
    Var h4 = add(mid, conditioned(mid, "block4"));

    Var u2 = conv2d(silu(concat_channels(upsample2(h4), h2)), P("up2.conv.w"), P("up2.conv.b"));
    Var u1 = conv2d(silu(add(upsample2(u2), h1)), P("up1.conv.w"), P("up1.conv.b"));
    f.eps = conv2d(silu(u1), P("conv_out.w"), P("conv_out.b"));

    f.record.maps.push_back({layout[0].layer, layout[0].kind, std::move(self_map)});
    f.record.maps.push_back({layout[1].layer, layout[1].kind, std::move(cross_map)});
    return f;
}

EvalResult TinyDenoiser::evaluate(const Tensor& z_t, double alpha_bar, const ConceptEmbedding& v,
                                  const AttentionOverride* override_maps) const {
    ad::Tape tape(false);
    auto f = build(tape, z_t, alpha_bar, v, override_maps, false, false);
    return {f.eps.value(), std::move(f.record)};
}

EmbeddingGradResult TinyDenoiser::evaluate_with_embedding_grad(const Tensor& z_t, double alpha_bar,
                                                               const ConceptEmbedding& v,
                                                               const AttentionOverride* override_maps,
                                                               const LossSeed& seed) const {
    ad::Tape tape(true);
    auto f = build(tape, z_t, alpha_bar, v, override_maps, false, true);
    Tensor eps = f.eps.value();
    tape.backward(f.eps, seed(eps));
    return {std::move(eps), std::move(f.record), tape.grad(f.embedding)};
}

ParamGradResult TinyDenoiser::evaluate_with_param_grads(const Tensor& z_t, double alpha_bar,
                                                        const ConceptEmbedding& v, const LossSeed& seed) const {
    ad::Tape tape(true);
    auto f = build(tape, z_t, alpha_bar, v, nullptr, true, false);
    Tensor eps = f.eps.value();
    tape.backward(f.eps, seed(eps));
    ParamGradResult out{std::move(eps), {}};
    out.grads.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) out.grads.push_back({params_[i].name, tape.grad(f.params[i])});
    return out;
}

}  // namespace vct
