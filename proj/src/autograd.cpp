#include "vct/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace vct::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

CMatMap cmat(const Tensor& t, Eigen::Index rows, Eigen::Index cols) { return CMatMap(t.data(), rows, cols); }
MatMap mat(Tensor& t, Eigen::Index rows, Eigen::Index cols) { return MatMap(t.data(), rows, cols); }

bool any_grad(std::initializer_list<Var> vars) {
    for (const auto& v : vars) {
        if (v.tape->requires_grad(v)) return true;
    }
    return false;
}

void check_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                              shape_str(t.shape()));
    }
}

// (C, H, W) -> (C*k*k, H*W), zero padding k/2.
void im2col(const double* x, int c, int h, int w, int k, double* cols) {
    const int pad = k / 2;
    const int hw = h * w;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + static_cast<std::ptrdiff_t>((ci * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    double* dst = row + y * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::ptrdiff_t>(ci) * h + sy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        dst[xx] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, int c, int h, int w, int k, double* x) {
    const int pad = k / 2;
    const int hw = h * w;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + static_cast<std::ptrdiff_t>((ci * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    double* dst = x + (static_cast<std::ptrdiff_t>(ci) * h + sy) * w;
                    const double* src = row + y * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        if (sx >= 0 && sx < w) dst[sx] += src[xx];
                    }
                }
            }
        }
    }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor{}, grad_enabled_, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Tensor value, bool requires_grad, Backward backward) {
    const bool rg = grad_enabled_ && requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, rg ? std::move(backward) : Backward{}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::grad(Var v) const {
    const auto& node = nodes_.at(static_cast<std::size_t>(v.id));
    return node.grad.empty() ? Tensor::zeros_like(node.value) : node.grad;
}

Tensor& Tape::grad_buffer(Var v) {
    auto& node = nodes_.at(static_cast<std::size_t>(v.id));
    if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
    return node.grad;
}

void Tape::backward(Var out, const Tensor& seed) {
    if (!grad_enabled_) throw ValidationError("backward on a tape with gradients disabled");
    require_same_shape(value(out), seed, "backward seed");
    for (auto& node : nodes_) node.grad = Tensor{};
    nodes_.at(static_cast<std::size_t>(out.id)).grad = seed;
    for (int id = out.id; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
        node.backward(*this, node.grad);
    }
}

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "ad::add");
    Tensor out = a.value() + b.value();
    return a.tape->push(std::move(out), any_grad({a, b}), [a, b](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(a)) tape.grad_buffer(a) += g;
        if (tape.requires_grad(b)) tape.grad_buffer(b) += g;
    });
}

Var scale(Var a, double s) {
    Tensor out = s * a.value();
    return a.tape->push(std::move(out), any_grad({a}), [a, s](Tape& tape, const Tensor& g) {
        tape.grad_buffer(a).axpy(s, g);
    });
}

Var silu(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return a.tape->push(std::move(out), any_grad({a}), [a](Tape& tape, const Tensor& g) {
        const Tensor& x = tape.value(a);
        Tensor& ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-x[i]));
            ga[i] += g[i] * sig * (1.0 + x[i] * (1.0 - sig));
        }
    });
}

Var conv2d(Var x, Var w, Var b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    check_rank(xv, 3, "conv2d input");
    check_rank(wv, 4, "conv2d weight");
    const int c = static_cast<int>(xv.dim(0));
    const int h = static_cast<int>(xv.dim(1));
    const int wd = static_cast<int>(xv.dim(2));
    const int o = static_cast<int>(wv.dim(0));
    const int k = static_cast<int>(wv.dim(2));
    if (wv.dim(1) != c || wv.dim(3) != k || b.value().size() != static_cast<std::size_t>(o)) {
        throw ValidationError("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " +
                              shape_str(xv.shape()));
    }
    const int ckk = c * k * k;
    const int hw = h * wd;
    Tensor cols(Shape{ckk, hw});
    im2col(xv.data(), c, h, wd, k, cols.data());
    Tensor out(Shape{o, h, wd});
    auto om = mat(out, o, hw);
    om.noalias() = cmat(wv, o, ckk) * cmat(cols, ckk, hw);
    om.colwise() += CVecMap(b.value().data(), o);
    const bool rg = any_grad({x, w, b});
    return x.tape->push(std::move(out), rg,
                        [x, w, b, c, h, wd, o, k, ckk, hw, cols = std::move(cols)](Tape& tape, const Tensor& g) {
                            auto gm = cmat(g, o, hw);
                            if (tape.requires_grad(w)) {
                                mat(tape.grad_buffer(w), o, ckk).noalias() += gm * cmat(cols, ckk, hw).transpose();
                            }
                            if (tape.requires_grad(b)) {
                                VecMap(tape.grad_buffer(b).data(), o) += gm.rowwise().sum();
                            }
                            if (tape.requires_grad(x)) {
                                Tensor dcols(Shape{ckk, hw});
                                mat(dcols, ckk, hw).noalias() = cmat(tape.value(w), o, ckk).transpose() * gm;
                                col2im(dcols.data(), c, h, wd, k, tape.grad_buffer(x).data());
                            }
                        });
}

Var avg_pool2(Var x) {
    const Tensor& xv = x.value();
    check_rank(xv, 3, "avg_pool2");
    const int c = static_cast<int>(xv.dim(0));
    const int h = static_cast<int>(xv.dim(1));
    const int w = static_cast<int>(xv.dim(2));
    if (h % 2 || w % 2) throw ValidationError("avg_pool2: odd spatial size " + shape_str(xv.shape()));
    const int ho = h / 2;
    const int wo = w / 2;
    Tensor out(Shape{c, ho, wo});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < ho; ++y) {
            for (int xx = 0; xx < wo; ++xx) {
                const double* p = xv.data() + (static_cast<std::ptrdiff_t>(ci) * h + 2 * y) * w + 2 * xx;
                out[(static_cast<std::size_t>(ci) * ho + y) * wo + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
        }
    }
    return x.tape->push(std::move(out), any_grad({x}), [x, c, h, w, ho, wo](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad_buffer(x);
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < ho; ++y) {
                for (int xx = 0; xx < wo; ++xx) {
                    const double v = 0.25 * g[(static_cast<std::size_t>(ci) * ho + y) * wo + xx];
                    double* p = gx.data() + (static_cast<std::ptrdiff_t>(ci) * h + 2 * y) * w + 2 * xx;
                    p[0] += v;
                    p[1] += v;
                    p[w] += v;
                    p[w + 1] += v;
                }
            }
        }
    });
}

Var upsample2(Var x) {
    const Tensor& xv = x.value();
    check_rank(xv, 3, "upsample2");
    const int c = static_cast<int>(xv.dim(0));
    const int h = static_cast<int>(xv.dim(1));
    const int w = static_cast<int>(xv.dim(2));
    const int ho = 2 * h;
    const int wo = 2 * w;
    Tensor out(Shape{c, ho, wo});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < ho; ++y) {
            for (int xx = 0; xx < wo; ++xx) {
                out[(static_cast<std::size_t>(ci) * ho + y) * wo + xx] =
                    xv[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
            }
        }
    }
    return x.tape->push(std::move(out), any_grad({x}), [x, c, h, w, ho, wo](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad_buffer(x);
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < ho; ++y) {
                for (int xx = 0; xx < wo; ++xx) {
                    gx[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
                        g[(static_cast<std::size_t>(ci) * ho + y) * wo + xx];
                }
            }
        }
    });
}

Var concat_channels(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check_rank(av, 3, "concat_channels");
    check_rank(bv, 3, "concat_channels");
    if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
        throw ValidationError("concat_channels: spatial mismatch " + shape_str(av.shape()) + " vs " +
                              shape_str(bv.shape()));
    }
    Tensor out(Shape{av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
    std::copy(av.data(), av.data() + av.size(), out.data());
    std::copy(bv.data(), bv.data() + bv.size(), out.data() + av.size());
    const std::size_t na = av.size();
    return a.tape->push(std::move(out), any_grad({a, b}), [a, b, na](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(a)) {
            Tensor& ga = tape.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (tape.requires_grad(b)) {
            Tensor& gb = tape.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
    });
}

Var add_channel_bias(Var x, Var bias) {
    const Tensor& xv = x.value();
    check_rank(xv, 3, "add_channel_bias");
    const auto c = xv.dim(0);
    if (static_cast<std::int64_t>(bias.value().size()) != c) {
        throw ValidationError("add_channel_bias: bias size does not match channels");
    }
    const auto hw = xv.dim(1) * xv.dim(2);
    Tensor out = xv;
    mat(out, c, hw).colwise() += CVecMap(bias.value().data(), c);
    return x.tape->push(std::move(out), any_grad({x, bias}), [x, bias, c, hw](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(x)) tape.grad_buffer(x) += g;
        if (tape.requires_grad(bias)) VecMap(tape.grad_buffer(bias).data(), c) += cmat(g, c, hw).rowwise().sum();
    });
}

namespace {

Var linear_impl(Var x, Var w, const Var* b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    check_rank(wv, 2, "linear weight");
    const auto out_dim = wv.dim(0);
    const auto in_dim = wv.dim(1);
    const bool vector_input = xv.rank() == 1;
    const auto n = vector_input ? 1 : xv.dim(0);
    if ((vector_input ? xv.dim(0) : xv.dim(1)) != in_dim || xv.rank() > 2) {
        throw ValidationError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                              shape_str(wv.shape()));
    }
    Tensor out(vector_input ? Shape{out_dim} : Shape{n, out_dim});
    auto om = mat(out, n, out_dim);
    om.noalias() = cmat(xv, n, in_dim) * cmat(wv, out_dim, in_dim).transpose();
    if (b) om.rowwise() += CVecMap(b->value().data(), out_dim).transpose();
    const Var bias = b ? *b : Var{};
    const bool rg = b ? any_grad({x, w, *b}) : any_grad({x, w});
    return x.tape->push(std::move(out), rg, [x, w, bias, n, in_dim, out_dim](Tape& tape, const Tensor& g) {
        auto gm = cmat(g, n, out_dim);
        if (tape.requires_grad(w)) {
            mat(tape.grad_buffer(w), out_dim, in_dim).noalias() += gm.transpose() * cmat(tape.value(x), n, in_dim);
        }
        if (bias.tape && tape.requires_grad(bias)) {
            VecMap(tape.grad_buffer(bias).data(), out_dim) += gm.colwise().sum().transpose();
        }
        if (tape.requires_grad(x)) {
            mat(tape.grad_buffer(x), n, in_dim).noalias() += gm * cmat(tape.value(w), out_dim, in_dim);
        }
    });
}

}  // namespace

Var linear(Var x, Var w, Var b) { return linear_impl(x, w, &b); }
Var linear_nobias(Var x, Var w) { return linear_impl(x, w, nullptr); }

Var to_tokens(Var x) {
    const Tensor& xv = x.value();
    check_rank(xv, 3, "to_tokens");
    const auto c = xv.dim(0);
    const auto hw = xv.dim(1) * xv.dim(2);
    Tensor out(Shape{hw, c});
    mat(out, hw, c) = cmat(xv, c, hw).transpose();
    return x.tape->push(std::move(out), any_grad({x}), [x, c, hw](Tape& tape, const Tensor& g) {
        mat(tape.grad_buffer(x), c, hw) += cmat(g, hw, c).transpose();
    });
}

Var from_tokens(Var t, int h, int w) {
    const Tensor& tv = t.value();
    check_rank(tv, 2, "from_tokens");
    const auto hw = tv.dim(0);
    const auto c = tv.dim(1);
    if (hw != static_cast<std::int64_t>(h) * w) throw ValidationError("from_tokens: token count mismatch");
    Tensor out(Shape{c, h, w});
    mat(out, c, hw) = cmat(tv, hw, c).transpose();
    return t.tape->push(std::move(out), any_grad({t}), [t, c, hw](Tape& tape, const Tensor& g) {
        mat(tape.grad_buffer(t), hw, c) += cmat(g, c, hw).transpose();
    });
}

Var attention(Var q, Var k, Var v, int heads, const Tensor* override_probs, Tensor* probs_out) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    check_rank(qv, 2, "attention q");
    check_rank(kv, 2, "attention k");
    check_rank(vv, 2, "attention v");
    const auto n = qv.dim(0);
    const auto m = kv.dim(0);
    const auto d = qv.dim(1);
    if (kv.dim(1) != d || vv.dim(1) != d || vv.dim(0) != m || heads < 1 || d % heads != 0) {
        throw ValidationError("attention: incompatible q/k/v shapes");
    }
    const auto dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Shape map_shape{heads, n, m};
    if (override_probs && override_probs->shape() != map_shape) {
        throw ValidationError("attention override shape " + shape_str(override_probs->shape()) + " != expected " +
                              shape_str(map_shape));
    }

    Tensor probs(map_shape);
    Tensor out(Shape{n, d});
    // Per-head column blocks of the (N, D) row-major matrices.
    auto qm = cmat(qv, n, d);
    auto km = cmat(kv, m, d);
    auto vm = cmat(vv, m, d);
    auto om = mat(out, n, d);
    for (int hd = 0; hd < heads; ++hd) {
        auto pm = MatMap(probs.data() + static_cast<std::ptrdiff_t>(hd) * n * m, n, m);
        if (override_probs) {
            pm = CMatMap(override_probs->data() + static_cast<std::ptrdiff_t>(hd) * n * m, n, m);
        } else {
            pm.noalias() = qm.middleCols(hd * dh, dh) * km.middleCols(hd * dh, dh).transpose();
            pm *= inv_sqrt;
            for (Eigen::Index r = 0; r < n; ++r) {
                const double mx = pm.row(r).maxCoeff();
                pm.row(r) = (pm.row(r).array() - mx).exp();
                pm.row(r) /= pm.row(r).sum();
            }
        }
        om.middleCols(hd * dh, dh).noalias() = pm * vm.middleCols(hd * dh, dh);
    }
    if (probs_out) *probs_out = probs;

    const bool overridden = override_probs != nullptr;
    const bool rg = overridden ? any_grad({v}) : any_grad({q, k, v});
    return q.tape->push(
        std::move(out), rg,
        [q, k, v, heads, n, m, d, dh, inv_sqrt, overridden, probs = std::move(probs)](Tape& tape, const Tensor& g) {
            auto gm = cmat(g, n, d);
            auto qm = cmat(tape.value(q), n, d);
            auto km = cmat(tape.value(k), m, d);
            auto vm = cmat(tape.value(v), m, d);
            const bool need_q = !overridden && tape.requires_grad(q);
            const bool need_k = !overridden && tape.requires_grad(k);
            const bool need_v = tape.requires_grad(v);
            RowMat dp(n, m);
            for (int hd = 0; hd < heads; ++hd) {
                auto pm = CMatMap(probs.data() + static_cast<std::ptrdiff_t>(hd) * n * m, n, m);
                auto gh = gm.middleCols(hd * dh, dh);
                if (need_v) {
                    mat(tape.grad_buffer(v), m, d).middleCols(hd * dh, dh).noalias() += pm.transpose() * gh;
                }
                if (!need_q && !need_k) continue;
                dp.noalias() = gh * vm.middleCols(hd * dh, dh).transpose();
                // softmax backward: dlogits = P * (dP - rowsum(dP * P))
                for (Eigen::Index r = 0; r < n; ++r) {
                    const double s = dp.row(r).dot(pm.row(r));
                    dp.row(r) = (pm.row(r).array() * (dp.row(r).array() - s)).matrix();
                }
                dp *= inv_sqrt;
                if (need_q) {
                    mat(tape.grad_buffer(q), n, d).middleCols(hd * dh, dh).noalias() += dp * km.middleCols(hd * dh, dh);
                }
                if (need_k) {
                    mat(tape.grad_buffer(k), m, d).middleCols(hd * dh, dh).noalias() +=
                        dp.transpose() * qm.middleCols(hd * dh, dh);
                }
            }
        });
}

}  // namespace vct::ad
