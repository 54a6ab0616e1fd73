#pragma once

#include <deque>
#include <functional>

#include "vct/tensor.hpp"

// Minimal reverse-mode tape for the tiny denoiser. Single-sample layout:
// feature maps are (C, H, W), token sequences are (N, D).
namespace vct::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    // A leaf whose gradient is accumulated by backward().
    Var leaf(Tensor value);

    const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    // Gradient of the last backward() seed w.r.t. `v`; zeros if nothing reached it.
    Tensor grad(Var v) const;

    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    void backward(Var out, const Tensor& seed);

    // Op plumbing.
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;
    Var push(Tensor value, bool requires_grad, Backward backward);
    // Accumulation buffer for `v`, allocated on first touch.
    Tensor& grad_buffer(Var v);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };
    std::deque<Node> nodes_;
    bool grad_enabled_;
};

Var add(Var a, Var b);
Var scale(Var a, double s);
Var silu(Var a);

// x: (C, H, W), w: (O, C, k, k), b: (O). Stride 1, zero padding k/2.
Var conv2d(Var x, Var w, Var b);
Var avg_pool2(Var x);
Var upsample2(Var x);
Var concat_channels(Var a, Var b);
// x: (C, H, W) + bias: (C) broadcast over space.
Var add_channel_bias(Var x, Var bias);

// x: (N, in) or (in); w: (out, in); b: (out).
Var linear(Var x, Var w, Var b);
Var linear_nobias(Var x, Var w);

Var to_tokens(Var x);                   // (C, H, W) -> (H*W, C)
Var from_tokens(Var t, int h, int w);   // (H*W, C) -> (C, H, W)

// Multi-head scaled dot-product attention. q: (N, D), k, v: (M, D).
// When `override_probs` is non-null it replaces softmax(q k^T / sqrt(d)) and no
// gradient flows into q or k. `probs_out` receives the (heads, N, M) map used.
Var attention(Var q, Var k, Var v, int heads, const Tensor* override_probs, Tensor* probs_out);

}  // namespace vct::ad
