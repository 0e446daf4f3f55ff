#include "spatseg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace spatseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Operands are copied into Eigen-owned storage first: Eigen picks its
// vectorized paths from pointer alignment, so products over raw buffers
// could round differently from one allocation to the next.
RowMat matmul(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b, std::size_t br,
              std::size_t bc, bool tb) {
    const RowMat am = ConstMatMap(a, ar, ac);
    const RowMat bm = ConstMatMap(b, br, bc);
    RowMat c;
    if (ta && tb) {
        c.noalias() = am.transpose() * bm.transpose();
    } else if (ta) {
        c.noalias() = am.transpose() * bm;
    } else if (tb) {
        c.noalias() = am * bm.transpose();
    } else {
        c.noalias() = am * bm;
    }
    return c;
}

void add_into(double* dst, const RowMat& m) {
    const double* src = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

void copy_into(double* dst, const RowMat& m) { std::copy(m.data(), m.data() + m.size(), dst); }

std::string dims3(const Shape& s) { return shape_str(s); }

void require_rank(const Var& v, std::size_t rank, const char* op, const char* what) {
    if (v.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(v.shape()));
    }
}

void require_same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

}  // namespace

// ---- Var / Tape ---------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

Var Tape::push(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad});
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }
Var Tape::variable(Tensor value) { return push(std::move(value), true); }

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) {
        if (&in.tape() != this) throw std::invalid_argument(op + ": input from a different tape");
        needs = needs || in.requires_grad();
    }
    Var out = push(std::move(value), needs && backward);
    if (needs && backward) {
        Record rec{std::move(op), {}, out.id(), std::move(backward)};
        rec.inputs.reserve(inputs.size());
        for (const Var& in : inputs) rec.inputs.push_back(in.id());
        records_.push_back(std::move(rec));
    }
    return out;
}

void Tape::backward(Var root) {
    if (!root.valid() || &root.tape() != this) throw BackwardError("backward: root is not on this tape");
    if (backward_done_) throw BackwardError("backward: already run on this tape; gradients would double count");
    if (root.value().numel() != 1) {
        throw BackwardError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    }
    backward_done_ = true;
    Node& r = nodes_[root.id()];
    if (!r.requires_grad) return;
    r.grad = Tensor(r.value.shape(), 1.0);

    std::vector<Tensor*> in_grads;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        const Node& out = nodes_[it->output];
        if (out.grad.numel() == 0) continue;  // not on a path to the root
        in_grads.clear();
        for (std::size_t id : it->inputs) {
            Node& in = nodes_[id];
            if (!in.requires_grad) {
                in_grads.push_back(nullptr);
                continue;
            }
            if (in.grad.numel() != in.value.numel()) in.grad = Tensor(in.value.shape(), 0.0);
            in_grads.push_back(&in.grad);
        }
        it->backward(out.grad, in_grads);
    }
}

// ---- elementwise ------------------------------------------------------------------

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return a.tape().record("add", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor*> gi) {
        for (Tensor* t : gi)
            if (t)
                for (std::size_t i = 0; i < g.numel(); ++i) (*t)[i] += g[i];
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b, "mul");
    if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    const Tensor av = a.value();
    const Tensor bv = b.value();
    return a.tape().record("mul", std::move(out), {a, b}, [av, bv](const Tensor& g, std::span<Tensor*> gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * bv[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[i] += g[i] * av[i];
    });
}

Var scale(Var a, double s) {
    Tensor out = a.value();
    for (double& v : out.values()) v *= s;
    return a.tape().record("scale", std::move(out), {a}, [s](const Tensor& g, std::span<Tensor*> gi) {
        for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += s * g[i];
    });
}

Var sum(Var a) {
    double total = 0.0;
    for (double v : a.value().values()) total += v;
    return a.tape().record("sum", Tensor({1}, {total}), {a}, [](const Tensor& g, std::span<Tensor*> gi) {
        for (double& v : gi[0]->values()) v += g[0];
    });
}

// ---- conv2d -------------------------------------------------------------------------

namespace {

struct ConvGeom {
    std::size_t cin, h, w, cout, kh, kw, pad_y, pad_x, ho, wo;
};

// col[(c*kh + ky)*kw + kx][oy*wo + ox] = in[c][oy+ky-pad_y][ox+kx-pad_x] (zero outside).
void im2col(const ConvGeom& g, const double* in, double* col) {
    const std::size_t hw = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((c * g.kh + ky) * g.kw + kx) * hw;
                const long dx = static_cast<long>(kx) - static_cast<long>(g.pad_x);
                const long x_lo = std::max(0L, -dx);
                const long x_hi = std::min(static_cast<long>(g.wo), static_cast<long>(g.w) - dx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    double* dst = row + oy * g.wo;
                    const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_y);
                    if (iy < 0 || iy >= static_cast<long>(g.h) || x_lo >= x_hi) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    std::fill(dst, dst + x_lo, 0.0);
                    for (long ox = x_lo; ox < x_hi; ++ox) dst[ox] = src[ox + dx];
                    std::fill(dst + x_hi, dst + g.wo, 0.0);
                }
            }
}

void col2im_add(const ConvGeom& g, const double* col, double* in) {
    const std::size_t hw = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((c * g.kh + ky) * g.kw + kx) * hw;
                const long dx = static_cast<long>(kx) - static_cast<long>(g.pad_x);
                const long x_lo = std::max(0L, -dx);
                const long x_hi = std::min(static_cast<long>(g.wo), static_cast<long>(g.w) - dx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_y);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    double* dst = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const double* src = row + oy * g.wo;
                    for (long ox = x_lo; ox < x_hi; ++ox) dst[ox + dx] += src[ox];
                }
            }
}

Var conv2d_impl(Var input, Var kernel, const Var* bias, Padding padding) {
    require_rank(input, 3, "conv2d", "input");
    require_rank(kernel, 4, "conv2d", "kernel");
    require_same_tape(input, kernel, "conv2d");
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    ConvGeom g{};
    g.cin = is[0];
    g.h = is[1];
    g.w = is[2];
    g.cout = ks[0];
    g.kh = ks[2];
    g.kw = ks[3];
    if (ks[1] != g.cin) {
        throw ShapeError("conv2d: kernel C_in=" + std::to_string(ks[1]) + " but input C_in=" + std::to_string(g.cin) +
                         " (input " + dims3(is) + ", kernel " + shape_str(ks) + ")");
    }
    if (bias) {
        require_same_tape(input, *bias, "conv2d");
        if (bias->shape() != Shape{g.cout}) {
            throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " but C_out=" + std::to_string(g.cout));
        }
    }
    if (padding == Padding::Same) {
        if (g.kh % 2 == 0 || g.kw % 2 == 0) {
            throw ShapeError("conv2d: same padding needs odd kernel, got kh=" + std::to_string(g.kh) +
                             " kw=" + std::to_string(g.kw));
        }
        g.pad_y = g.kh / 2;
        g.pad_x = g.kw / 2;
        g.ho = g.h;
        g.wo = g.w;
    } else {
        if (g.kh > g.h || g.kw > g.w) {
            throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than input " + dims3(is));
        }
        g.pad_y = g.pad_x = 0;
        g.ho = g.h - g.kh + 1;
        g.wo = g.w - g.kw + 1;
    }

    const std::size_t kdim = g.cin * g.kh * g.kw;
    const std::size_t hw = g.ho * g.wo;
    std::vector<double> col(kdim * hw);
    im2col(g, input.value().data(), col.data());

    Tensor out({g.cout, g.ho, g.wo});
    copy_into(out.data(), matmul(kernel.value().data(), g.cout, kdim, false, col.data(), kdim, hw, false));
    if (bias) {
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t p = 0; p < hw; ++p) out[co * hw + p] += bias->value()[co];
    }

    std::vector<Var> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    const Tensor kval = kernel.value();
    return input.tape().record(
        "conv2d", std::move(out), std::move(inputs),
        [g, kdim, hw, kval, col = std::move(col)](const Tensor& grad, std::span<Tensor*> gi) {
            if (gi[1]) add_into(gi[1]->data(), matmul(grad.data(), g.cout, hw, false, col.data(), kdim, hw, true));
            if (gi.size() > 2 && gi[2]) {
                for (std::size_t co = 0; co < g.cout; ++co) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < hw; ++p) s += grad[co * hw + p];
                    (*gi[2])[co] += s;
                }
            }
            if (gi[0]) {
                const RowMat dcol = matmul(kval.data(), g.cout, kdim, true, grad.data(), g.cout, hw, false);
                col2im_add(g, dcol.data(), gi[0]->data());
            }
        });
}

}  // namespace

Var conv2d(Var input, Var kernel, Var bias, Padding padding) { return conv2d_impl(input, kernel, &bias, padding); }
Var conv2d(Var input, Var kernel, Padding padding) { return conv2d_impl(input, kernel, nullptr, padding); }

// ---- pooling / upsampling ------------------------------------------------------------

MaxPoolResult maxpool_2x2(Var input) {
    require_rank(input, 3, "maxpool_2x2", "input");
    const std::size_t c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    if (h % 2 || w % 2) {
        throw ShapeError("maxpool_2x2: H and W must be even, got H=" + std::to_string(h) + " W=" + std::to_string(w));
    }
    const std::size_t ho = h / 2, wo = w / 2;
    const Tensor& x = input.value();
    Tensor out({c, ho, wo});
    std::vector<std::size_t> argmax(out.numel());
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t base = (ch * h + 2 * oy) * w + 2 * ox;
                const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int k = 1; k < 4; ++k)
                    if (x[cand[k]] > x[best]) best = cand[k];
                double runner = -std::numeric_limits<double>::infinity();
                for (std::size_t k : cand)
                    if (k != best) runner = std::max(runner, x[k]);
                // Exact zero ties come from ReLU or dropout and stay put under
                // small perturbations, so they are not decision points.
                if (!(x[best] == 0.0 && runner == 0.0)) margin = std::min(margin, x[best] - runner);
                const std::size_t o = (ch * ho + oy) * wo + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
    input.tape().note_decision_margin(margin);
    Var result = input.tape().record("maxpool_2x2", std::move(out), {input},
                                     [argmax](const Tensor& g, std::span<Tensor*> gi) {
                                         for (std::size_t o = 0; o < g.numel(); ++o) (*gi[0])[argmax[o]] += g[o];
                                     });
    return {result, std::move(argmax)};
}

Var upconv_2x2(Var input, Var kernel, Var bias) {
    require_rank(input, 3, "upconv_2x2", "input");
    require_rank(kernel, 4, "upconv_2x2", "kernel");
    require_same_tape(input, kernel, "upconv_2x2");
    require_same_tape(input, bias, "upconv_2x2");
    const std::size_t cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const Shape& ks = kernel.shape();
    if (ks[0] != cin || ks[2] != 2 || ks[3] != 2) {
        throw ShapeError("upconv_2x2: kernel " + shape_str(ks) + " incompatible with input " + shape_str(input.shape()) +
                         " (want [" + std::to_string(cin) + ",C_out,2,2])");
    }
    const std::size_t cout = ks[1];
    if (bias.shape() != Shape{cout}) {
        throw ShapeError("upconv_2x2: bias shape " + shape_str(bias.shape()) + " but C_out=" + std::to_string(cout));
    }
    const std::size_t hw = h * w, rows = cout * 4;
    // tmp[(co*2+dy)*2+dx][p] = sum_ci K[ci][(co,dy,dx)] * in[ci][p]
    const RowMat tmp = matmul(kernel.value().data(), cin, rows, true, input.value().data(), cin, hw, false);
    Tensor out({cout, 2 * h, 2 * w});
    const std::size_t w2 = 2 * w;
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
                const double* src = tmp.data() + ((co * 2 + dy) * 2 + dx) * hw;
                const double b = bias.value()[co];
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x)
                        out[(co * 2 * h + 2 * y + dy) * w2 + 2 * x + dx] = src[y * w + x] + b;
            }
    const Tensor kval = kernel.value();
    const Tensor ival = input.value();
    return input.tape().record(
        "upconv_2x2", std::move(out), {input, kernel, bias},
        [cin, cout, h, w, hw, rows, w2, kval, ival](const Tensor& g, std::span<Tensor*> gi) {
            RowMat dtmp(rows, hw);
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        double* dst = dtmp.data() + ((co * 2 + dy) * 2 + dx) * hw;
                        for (std::size_t y = 0; y < h; ++y)
                            for (std::size_t x = 0; x < w; ++x)
                                dst[y * w + x] = g[(co * 2 * h + 2 * y + dy) * w2 + 2 * x + dx];
                    }
            if (gi[0]) add_into(gi[0]->data(), matmul(kval.data(), cin, rows, false, dtmp.data(), rows, hw, false));
            if (gi[1]) add_into(gi[1]->data(), matmul(ival.data(), cin, hw, false, dtmp.data(), rows, hw, true));
            if (gi[2]) {
                for (std::size_t co = 0; co < cout; ++co) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < 4 * hw; ++k) s += dtmp.data()[co * 4 * hw + k];
                    (*gi[2])[co] += s;
                }
            }
        });
}

// ---- activations ----------------------------------------------------------------------

Var relu(Var input) {
    Tensor out = input.value();
    double margin = std::numeric_limits<double>::infinity();
    for (double& v : out.values()) {
        margin = std::min(margin, std::abs(v));
        if (!(v > 0.0)) v = 0.0;
    }
    input.tape().note_relu_margin(margin);
    const Tensor x = input.value();
    return input.tape().record("relu", std::move(out), {input}, [x](const Tensor& g, std::span<Tensor*> gi) {
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (x[i] > 0.0) (*gi[0])[i] += g[i];
    });
}

Var softmax_channels(Var logits) {
    require_rank(logits, 3, "softmax_channels", "logits");
    const std::size_t k = logits.shape()[0], hw = logits.shape()[1] * logits.shape()[2];
    if (k < 2) throw ShapeError("softmax_channels: need K >= 2 channels, got " + shape_str(logits.shape()));
    const Tensor& z = logits.value();
    Tensor p(z.shape());
    for (std::size_t i = 0; i < hw; ++i) {
        double m = z[i];
        for (std::size_t c = 1; c < k; ++c) m = std::max(m, z[c * hw + i]);
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += (p[c * hw + i] = std::exp(z[c * hw + i] - m));
        for (std::size_t c = 0; c < k; ++c) p[c * hw + i] /= s;
    }
    const Tensor pv = p;
    return logits.tape().record("softmax_channels", std::move(p), {logits},
                                [k, hw, pv](const Tensor& g, std::span<Tensor*> gi) {
                                    for (std::size_t i = 0; i < hw; ++i) {
                                        double dot = 0.0;
                                        for (std::size_t c = 0; c < k; ++c) dot += g[c * hw + i] * pv[c * hw + i];
                                        for (std::size_t c = 0; c < k; ++c)
                                            (*gi[0])[c * hw + i] += pv[c * hw + i] * (g[c * hw + i] - dot);
                                    }
                                });
}

Var concat_channels(Var a, Var b) {
    require_rank(a, 3, "concat_channels", "first operand");
    require_rank(b, 3, "concat_channels", "second operand");
    require_same_tape(a, b, "concat_channels");
    if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2]) {
        throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t na = a.value().numel();
    Tensor out({a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]});
    std::copy(a.value().values().begin(), a.value().values().end(), out.data());
    std::copy(b.value().values().begin(), b.value().values().end(), out.data() + na);
    return a.tape().record("concat_channels", std::move(out), {a, b}, [na](const Tensor& g, std::span<Tensor*> gi) {
        if (gi[0])
            for (std::size_t i = 0; i < na; ++i) (*gi[0])[i] += g[i];
        if (gi[1])
            for (std::size_t i = 0; i < gi[1]->numel(); ++i) (*gi[1])[i] += g[na + i];
    });
}

// ---- regularizers ------------------------------------------------------------------------

Var dropout(Var input, double rate, Mode mode) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (mode == Mode::Eval || rate == 0.0) return input;
    auto& rng = input.tape().rng();
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(input.value().numel());
    for (double& m : mask) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        m = u < rate ? 0.0 : keep_scale;
    }
    Tensor out = input.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return input.tape().record("dropout", std::move(out), {input},
                               [mask = std::move(mask)](const Tensor& g, std::span<Tensor*> gi) {
                                   for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * mask[i];
                               });
}

Var batchnorm(Var input, Var gamma, Var beta, Mode mode, const Tensor& running_mean, const Tensor& running_var,
              BatchNormStats* batch_stats) {
    require_rank(input, 3, "batchnorm", "input");
    require_same_tape(input, gamma, "batchnorm");
    require_same_tape(input, beta, "batchnorm");
    const std::size_t c = input.shape()[0], n = input.shape()[1] * input.shape()[2];
    const Shape cs{c};
    if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs) {
        throw ShapeError("batchnorm: per-channel parameters must have shape " + shape_str(cs));
    }
    if (mode == Mode::Train && n < 2) {
        throw ShapeError("batchnorm: train mode needs >= 2 spatial elements per channel, got " +
                         shape_str(input.shape()));
    }
    const Tensor& x = input.value();
    std::vector<double> mean(c), inv_std(c), var(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (mode == Mode::Train) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += x[ch * n + i];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i) v += (x[ch * n + i] - m) * (x[ch * n + i] - m);
            v /= static_cast<double>(n);
            mean[ch] = m;
            var[ch] = v;
        } else {
            mean[ch] = running_mean[ch];
            var[ch] = running_var[ch];
        }
        inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBatchNormEps);
    }
    if (batch_stats && mode == Mode::Train) *batch_stats = BatchNormStats{mean, var};

    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = ch * n + i;
            xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
            out[k] = gamma.value()[ch] * xhat[k] + beta.value()[ch];
        }
    const Tensor gval = gamma.value();
    const bool train = mode == Mode::Train;
    return input.tape().record(
        "batchnorm", std::move(out), {input, gamma, beta},
        [c, n, train, gval, inv_std, xhat = std::move(xhat)](const Tensor& g, std::span<Tensor*> gi) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sg = 0.0, sgx = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sg += g[ch * n + i];
                    sgx += g[ch * n + i] * xhat[ch * n + i];
                }
                if (gi[1]) (*gi[1])[ch] += sgx;
                if (gi[2]) (*gi[2])[ch] += sg;
                if (!gi[0]) continue;
                const double scale = gval[ch] * inv_std[ch];
                if (train) {
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t k = ch * n + i;
                        (*gi[0])[k] += scale * (g[k] - inv_n * sg - xhat[k] * inv_n * sgx);
                    }
                } else {
                    for (std::size_t i = 0; i < n; ++i) (*gi[0])[ch * n + i] += scale * g[ch * n + i];
                }
            }
        });
}

void update_running_stats(Tensor& running_mean, Tensor& running_var, const BatchNormStats& batch) {
    if (batch.mean.size() != running_mean.numel() || batch.var.size() != running_var.numel()) {
        throw ShapeError("update_running_stats: channel count mismatch");
    }
    for (std::size_t ch = 0; ch < batch.mean.size(); ++ch) {
        running_mean[ch] = kBatchNormMomentum * running_mean[ch] + (1.0 - kBatchNormMomentum) * batch.mean[ch];
        running_var[ch] = kBatchNormMomentum * running_var[ch] + (1.0 - kBatchNormMomentum) * batch.var[ch];
    }
}

// ---- classification -----------------------------------------------------------------------

namespace {

void check_labels(const Var& probs, const LabelMap& labels, const char* op) {
    require_rank(probs, 3, op, "probs");
    const Shape& s = probs.shape();
    if (labels.height != s[1] || labels.width != s[2]) {
        throw ShapeError(std::string(op) + ": labels " + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width) + " vs probs " + shape_str(s));
    }
    for (std::uint8_t l : labels.labels) {
        if (l >= s[0]) {
            throw std::out_of_range(std::string(op) + ": class id " + std::to_string(l) + " >= K=" + std::to_string(s[0]));
        }
    }
}

}  // namespace

Var cross_entropy_mean(Var probs, const LabelMap& target) {
    check_labels(probs, target, "cross_entropy_mean");
    const std::size_t hw = target.size();
    const Tensor& p = probs.value();
    double total = 0.0;
    for (std::size_t i = 0; i < hw; ++i) total -= std::log(std::max(p[target.labels[i] * hw + i], kProbabilityFloor));
    const double inv_n = 1.0 / static_cast<double>(hw);
    return probs.tape().record("cross_entropy_mean", Tensor({1}, {total * inv_n}), {probs},
                               [hw, inv_n, target, p](const Tensor& g, std::span<Tensor*> gi) {
                                   for (std::size_t i = 0; i < hw; ++i) {
                                       const std::size_t k = target.labels[i] * hw + i;
                                       if (p[k] > kProbabilityFloor) (*gi[0])[k] -= g[0] * inv_n / p[k];
                                   }
                               });
}

LabelMap argmax_channels(const Tensor& probs) {
    if (probs.rank() != 3) throw ShapeError("argmax_channels: need [K,H,W], got " + shape_str(probs.shape()));
    const std::size_t k = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    LabelMap out(probs.dim(1), probs.dim(2));
    for (std::size_t i = 0; i < hw; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (probs[c * hw + i] > probs[best * hw + i]) best = c;
        out.labels[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Var select_channels(Var probs, const LabelMap& labels) {
    check_labels(probs, labels, "select_channels");
    const std::size_t hw = labels.size();
    Tensor out({labels.height, labels.width});
    for (std::size_t i = 0; i < hw; ++i) out[i] = probs.value()[labels.labels[i] * hw + i];
    return probs.tape().record("select_channels", std::move(out), {probs},
                               [hw, labels](const Tensor& g, std::span<Tensor*> gi) {
                                   for (std::size_t i = 0; i < hw; ++i) (*gi[0])[labels.labels[i] * hw + i] += g[i];
                               });
}

// ---- grad check -----------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& point, double h, std::uint64_t tape_seed) {
    Tensor analytic;
    {
        Tape tape(tape_seed);
        Var x = tape.variable(point);
        Var y = f(tape, x);
        tape.backward(y);
        analytic = x.grad().numel() == point.numel() ? x.grad() : Tensor(point.shape(), 0.0);
    }
    auto eval = [&](const Tensor& at) {
        Tape tape(tape_seed);
        return f(tape, tape.constant(at)).value()[0];
    };
    GradCheckReport report;
    report.max_rel_error = -1.0;
    Tensor probe = point;
    for (std::size_t k = 0; k < point.numel(); ++k) {
        probe[k] = point[k] + h;
        const double fp = eval(probe);
        probe[k] = point[k] - h;
        const double fm = eval(probe);
        probe[k] = point[k];
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = relative_error(analytic[k], numeric);
        if (err > report.max_rel_error) report = {err, k, analytic[k], numeric};
    }
    if (report.max_rel_error < 0.0) report.max_rel_error = 0.0;
    return report;
}

}  // namespace spatseg
