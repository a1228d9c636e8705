#include "pr2r/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

namespace pr2r {

using detail::Node;

namespace {

thread_local bool t_grad_enabled = true;

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

Var make_node(std::string op, Tensor value, std::vector<Var> inputs,
              std::function<std::vector<Var>(const Var&)> vjp) {
    if (!value.all_finite()) fail("non-finite values produced by op '" + op + "'");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = std::move(op);
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs)
            if (in.requires_grad()) {
                needs = true;
                break;
            }
    }
    n->requires_grad = needs;
    if (needs) {
        n->inputs = std::move(inputs);
        n->vjp = std::move(vjp);
    }
    return Var(std::move(n));
}

Var ones_const(Shape shape) { return make_const(Tensor::full(std::move(shape), 1.0)); }

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

GradMode::GradMode(bool on) : prev_(t_grad_enabled) { t_grad_enabled = on; }
GradMode::~GradMode() { t_grad_enabled = prev_; }

const Tensor& Var::value() const {
    if (!node_) fail("use of undefined Var");
    return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const std::string& Var::name() const {
    if (!node_) fail("use of undefined Var");
    return node_->leaf_name;
}

Var make_leaf(Tensor value, std::string name, bool requires_grad) {
    if (!value.all_finite()) fail("non-finite values in leaf '" + name + "'");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "leaf";
    n->leaf_name = std::move(name);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

Var make_const(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "const";
    return Var(std::move(n));
}

Var make_scalar(double v) { return make_const(Tensor::scalar(v)); }

// ---- elementwise ----

Var add(const Var& a, const Var& b) {
    check(a.value().same_shape(b.value()),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
    return make_node("add", std::move(out), {a, b},
                     [](const Var& adj) { return std::vector<Var>{adj, adj}; });
}

Var sub(const Var& a, const Var& b) {
    check(a.value().same_shape(b.value()),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
    return make_node("sub", std::move(out), {a, b},
                     [](const Var& adj) { return std::vector<Var>{adj, neg(adj)}; });
}

Var mul(const Var& a, const Var& b) {
    check(a.value().same_shape(b.value()),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
    return make_node("mul", std::move(out), {a, b}, [a, b](const Var& adj) {
        return std::vector<Var>{mul(adj, b), mul(adj, a)};
    });
}

Var div(const Var& a, const Var& b) {
    check(a.value().same_shape(b.value()),
          "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= pb[i];
    return make_node("div", std::move(out), {a, b}, [a, b](const Var& adj) {
        Var da = div(adj, b);
        Var db = neg(mul(adj, div(a, mul(b, b))));
        return std::vector<Var>{da, db};
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return make_node("scale", std::move(out), {a},
                     [c](const Var& adj) { return std::vector<Var>{scale(adj, c)}; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    return make_node("exp", std::move(out), {a},
                     [a](const Var& adj) { return std::vector<Var>{mul(adj, exp(a))}; });
}

Var log(const Var& a) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return make_node("log", std::move(out), {a},
                     [a](const Var& adj) { return std::vector<Var>{div(adj, a)}; });
}

Var sqrt(const Var& a) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
    return make_node("sqrt", std::move(out), {a}, [a](const Var& adj) {
        return std::vector<Var>{scale(div(adj, sqrt(a)), 0.5)};
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    Tensor mask(out.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        if (out[i] > 0.0) {
            mask[i] = 1.0;
        } else {
            out[i] = 0.0;  // derivative at 0 is 0 by convention
        }
    }
    Var mask_c = make_const(std::move(mask));
    return make_node("relu", std::move(out), {a}, [mask_c](const Var& adj) {
        return std::vector<Var>{mul(adj, mask_c)};
    });
}

// ---- linear algebra ----

Var matmul(const Var& a, const Var& b) {
    check(a.value().rank() == 2 && b.value().rank() == 2,
          "matmul: both operands must be rank-2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::int64_t m = a.value().extent(0), k = a.value().extent(1);
    const std::int64_t k2 = b.value().extent(0), n = b.value().extent(1);
    check(k == k2, "matmul: inner extents disagree " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(Shape{m, n});
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            double* orow = po + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_node("matmul", std::move(out), {a, b}, [a, b](const Var& adj) {
        Var da = matmul(adj, transpose(b));
        Var db = matmul(transpose(a), adj);
        return std::vector<Var>{da, db};
    });
}

Var transpose(const Var& a) {
    check(a.value().rank() == 2, "transpose: rank-2 required, got " + shape_str(a.shape()));
    const std::int64_t m = a.value().extent(0), n = a.value().extent(1);
    Tensor out(Shape{n, m});
    const double* pa = a.value().data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
    return make_node("transpose", std::move(out), {a},
                     [](const Var& adj) { return std::vector<Var>{transpose(adj)}; });
}

Var reshape(const Var& a, Shape shape) {
    check(Tensor::numel_of(shape) == a.value().numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out(shape, a.value().vec());
    Shape orig = a.value().shape();
    return make_node("reshape", std::move(out), {a}, [orig](const Var& adj) {
        return std::vector<Var>{reshape(adj, orig)};
    });
}

Var narrow(const Var& a, std::int64_t offset, std::int64_t len) {
    check(offset >= 0 && len > 0 && offset + len <= a.value().numel(),
          "narrow: range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
              ") out of bounds for " + shape_str(a.shape()));
    Tensor out(Shape{len});
    std::memcpy(out.data(), a.value().data() + offset, static_cast<std::size_t>(len) * sizeof(double));
    const std::int64_t total = a.value().numel();
    Shape orig = a.value().shape();
    return make_node("narrow", std::move(out), {a}, [offset, total, orig](const Var& adj) {
        return std::vector<Var>{reshape(pad_flat(adj, offset, total), orig)};
    });
}

Var pad_flat(const Var& a, std::int64_t offset, std::int64_t total) {
    check(a.value().rank() == 1, "pad_flat: rank-1 required, got " + shape_str(a.shape()));
    const std::int64_t len = a.value().numel();
    check(offset >= 0 && offset + len <= total, "pad_flat: range out of bounds");
    Tensor out(Shape{total});
    std::memcpy(out.data() + offset, a.value().data(), static_cast<std::size_t>(len) * sizeof(double));
    return make_node("pad_flat", std::move(out), {a}, [offset, len](const Var& adj) {
        return std::vector<Var>{narrow(adj, offset, len)};
    });
}

Var concat_flat(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_flat: no parts");
    std::int64_t total = 0;
    for (const auto& p : parts) total += p.value().numel();
    Tensor out(Shape{total});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data() + off, p.value().data(),
                    static_cast<std::size_t>(p.value().numel()) * sizeof(double));
        off += p.value().numel();
    }
    std::vector<std::int64_t> offsets;
    std::vector<Shape> shapes;
    offsets.reserve(parts.size());
    off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        shapes.push_back(p.value().shape());
        off += p.value().numel();
    }
    return make_node("concat_flat", std::move(out), parts, [offsets, shapes](const Var& adj) {
        std::vector<Var> grads;
        grads.reserve(offsets.size());
        for (std::size_t i = 0; i < offsets.size(); ++i) {
            std::int64_t len = Tensor::numel_of(shapes[i]);
            grads.push_back(reshape(narrow(adj, offsets[i], len), shapes[i]));
        }
        return grads;
    });
}

// ---- reductions / broadcasts ----

Var sum(const Var& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
    Shape orig = a.value().shape();
    return make_node("sum", Tensor::scalar(s), {a}, [orig](const Var& adj) {
        return std::vector<Var>{broadcast_to(adj, orig)};
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().numel());
    double s = 0.0;
    for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
    Shape orig = a.value().shape();
    return make_node("mean", Tensor::scalar(s / n), {a}, [orig, n](const Var& adj) {
        return std::vector<Var>{broadcast_to(scale(adj, 1.0 / n), orig)};
    });
}

Var broadcast_to(const Var& scalar, Shape shape) {
    check(scalar.value().numel() == 1, "broadcast_to: source must be scalar");
    Tensor out = Tensor::full(shape, scalar.value()[0]);
    return make_node("broadcast_to", std::move(out), {scalar},
                     [](const Var& adj) { return std::vector<Var>{sum(adj)}; });
}

Var gather_rows(const Var& m, const std::vector<int>& idx) {
    check(m.value().rank() == 2, "gather_rows: rank-2 required, got " + shape_str(m.shape()));
    const std::int64_t n = m.value().extent(0), c = m.value().extent(1);
    check(static_cast<std::int64_t>(idx.size()) == n, "gather_rows: index count mismatch");
    Tensor out(Shape{n});
    for (std::int64_t i = 0; i < n; ++i) {
        check(idx[static_cast<std::size_t>(i)] >= 0 && idx[static_cast<std::size_t>(i)] < c,
              "gather_rows: index " + std::to_string(idx[static_cast<std::size_t>(i)]) +
                  " out of range [0, " + std::to_string(c) + ") at row " + std::to_string(i));
        out[i] = m.value()[i * c + idx[static_cast<std::size_t>(i)]];
    }
    return make_node("gather_rows", std::move(out), {m}, [idx, c](const Var& adj) {
        return std::vector<Var>{scatter_rows(adj, idx, c)};
    });
}

Var scatter_rows(const Var& v, const std::vector<int>& idx, std::int64_t cols) {
    check(v.value().rank() == 1, "scatter_rows: rank-1 required");
    const std::int64_t n = v.value().numel();
    check(static_cast<std::int64_t>(idx.size()) == n, "scatter_rows: index count mismatch");
    Tensor out(Shape{n, cols});
    for (std::int64_t i = 0; i < n; ++i) out[i * cols + idx[static_cast<std::size_t>(i)]] = v.value()[i];
    return make_node("scatter_rows", std::move(out), {v}, [idx](const Var& adj) {
        return std::vector<Var>{gather_rows(adj, idx)};
    });
}

namespace {

Var row_extreme_masked(const Var& m, const std::vector<char>& mask, bool want_max) {
    check(m.value().rank() == 2, "row extreme: rank-2 required, got " + shape_str(m.shape()));
    const std::int64_t n = m.value().extent(0), c = m.value().extent(1);
    check(static_cast<std::int64_t>(mask.size()) == n * c, "row extreme: mask size mismatch");
    Tensor out(Shape{n});
    std::vector<int> arg(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < n; ++i) {
        double best = 0.0;
        int best_j = -1;
        for (std::int64_t j = 0; j < c; ++j) {
            if (!mask[static_cast<std::size_t>(i * c + j)]) continue;
            const double v = m.value()[i * c + j];
            if (best_j < 0 || (want_max ? v > best : v < best)) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        check(best_j >= 0, std::string(want_max ? "rowmax" : "rowmin") + "_masked: row " +
                               std::to_string(i) + " has an empty mask");
        out[i] = best;
        arg[static_cast<std::size_t>(i)] = best_j;
    }
    return make_node(want_max ? "rowmax_masked" : "rowmin_masked", std::move(out), {m},
                     [arg, c](const Var& adj) {
                         return std::vector<Var>{scatter_rows(adj, arg, c)};
                     });
}

}  // namespace

Var rowmax_masked(const Var& m, const std::vector<char>& mask) { return row_extreme_masked(m, mask, true); }
Var rowmin_masked(const Var& m, const std::vector<char>& mask) { return row_extreme_masked(m, mask, false); }

Var logsumexp_rows(const Var& m) {
    check(m.value().rank() == 2, "logsumexp_rows: rank-2 required, got " + shape_str(m.shape()));
    const std::int64_t n = m.value().extent(0), c = m.value().extent(1);
    Tensor out(Shape{n});
    for (std::int64_t i = 0; i < n; ++i) {
        double mx = m.value()[i * c];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, m.value()[i * c + j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < c; ++j) s += std::exp(m.value()[i * c + j] - mx);
        out[i] = mx + std::log(s);
    }
    // d lse_i / d m_ij = softmax(m)_ij
    return make_node("logsumexp_rows", std::move(out), {m}, [m, n, c](const Var& adj) {
        Var lse = logsumexp_rows(m);
        Var ones_row = ones_const(Shape{1, c});
        Var lse_mat = matmul(reshape(lse, Shape{n, 1}), ones_row);
        Var soft = exp(sub(m, lse_mat));
        Var adj_mat = matmul(reshape(adj, Shape{n, 1}), ones_row);
        return std::vector<Var>{mul(soft, adj_mat)};
    });
}

// ---- image ops ----

namespace {

struct ConvGeom {
    std::int64_t n, c, h, w, kh, kw, stride, pad, oh, ow;
};

ConvGeom conv_geom(const Shape& in, std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad) {
    ConvGeom g{in[0], in[1], in[2], in[3], kh, kw, stride, pad, 0, 0};
    g.oh = (g.h + 2 * pad - kh) / stride + 1;
    g.ow = (g.w + 2 * pad - kw) / stride + 1;
    return g;
}

Var col2im(const Var& cols, ConvGeom g);

Var im2col_impl(const Var& input, ConvGeom g) {
    const std::int64_t rows = g.c * g.kh * g.kw;
    const std::int64_t colsn = g.n * g.oh * g.ow;
    Tensor out(Shape{rows, colsn});
    const double* px = input.value().data();
    double* po = out.data();
    for (std::int64_t ch = 0; ch < g.c; ++ch)
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const std::int64_t r = (ch * g.kh + ki) * g.kw + kj;
                double* orow = po + r * colsn;
                for (std::int64_t nn = 0; nn < g.n; ++nn)
                    for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                        const std::int64_t y = oh * g.stride - g.pad + ki;
                        if (y < 0 || y >= g.h) continue;
                        const double* xrow = px + ((nn * g.c + ch) * g.h + y) * g.w;
                        const std::int64_t lbase = (nn * g.oh + oh) * g.ow;
                        for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                            const std::int64_t x = ow * g.stride - g.pad + kj;
                            if (x < 0 || x >= g.w) continue;
                            orow[lbase + ow] = xrow[x];
                        }
                    }
            }
    return make_node("im2col", std::move(out), {input}, [g](const Var& adj) {
        return std::vector<Var>{col2im(adj, g)};
    });
}

Var col2im(const Var& cols, ConvGeom g) {
    const std::int64_t rows = g.c * g.kh * g.kw;
    const std::int64_t colsn = g.n * g.oh * g.ow;
    check(cols.value().rank() == 2 && cols.value().extent(0) == rows && cols.value().extent(1) == colsn,
          "col2im: shape mismatch " + shape_str(cols.shape()));
    Tensor out(Shape{g.n, g.c, g.h, g.w});
    const double* pc = cols.value().data();
    double* po = out.data();
    for (std::int64_t ch = 0; ch < g.c; ++ch)
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const std::int64_t r = (ch * g.kh + ki) * g.kw + kj;
                const double* crow = pc + r * colsn;
                for (std::int64_t nn = 0; nn < g.n; ++nn)
                    for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                        const std::int64_t y = oh * g.stride - g.pad + ki;
                        if (y < 0 || y >= g.h) continue;
                        double* xrow = po + ((nn * g.c + ch) * g.h + y) * g.w;
                        const std::int64_t lbase = (nn * g.oh + oh) * g.ow;
                        for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                            const std::int64_t x = ow * g.stride - g.pad + kj;
                            if (x < 0 || x >= g.w) continue;
                            xrow[x] += crow[lbase + ow];
                        }
                    }
            }
    return make_node("col2im", std::move(out), {cols}, [g](const Var& adj) {
        return std::vector<Var>{im2col_impl(adj, g)};
    });
}

Var avg_unpool(const Var& small, std::int64_t window);

Var avg_pool_impl(const Var& input, std::int64_t window) {
    const Shape& s = input.value().shape();
    const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
    const std::int64_t oh = h / window, ow = w / window;
    Tensor out(Shape{n, c, oh, ow});
    const double inv = 1.0 / static_cast<double>(window * window);
    const double* px = input.value().data();
    for (std::int64_t nc = 0; nc < n * c; ++nc)
        for (std::int64_t i = 0; i < oh; ++i)
            for (std::int64_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::int64_t di = 0; di < window; ++di)
                    for (std::int64_t dj = 0; dj < window; ++dj)
                        acc += px[(nc * h + i * window + di) * w + j * window + dj];
                out[(nc * oh + i) * ow + j] = acc * inv;
            }
    return make_node("avg_pool", std::move(out), {input}, [window](const Var& adj) {
        return std::vector<Var>{avg_unpool(adj, window)};
    });
}

Var avg_unpool(const Var& small, std::int64_t window) {
    const Shape& s = small.value().shape();
    const std::int64_t n = s[0], c = s[1], oh = s[2], ow = s[3];
    Tensor out(Shape{n, c, oh * window, ow * window});
    const double inv = 1.0 / static_cast<double>(window * window);
    const std::int64_t h = oh * window, w = ow * window;
    for (std::int64_t nc = 0; nc < n * c; ++nc)
        for (std::int64_t i = 0; i < oh; ++i)
            for (std::int64_t j = 0; j < ow; ++j) {
                const double v = small.value()[(nc * oh + i) * ow + j] * inv;
                for (std::int64_t di = 0; di < window; ++di)
                    for (std::int64_t dj = 0; dj < window; ++dj)
                        out[(nc * h + i * window + di) * w + j * window + dj] = v;
            }
    return make_node("avg_unpool", std::move(out), {small}, [window](const Var& adj) {
        return std::vector<Var>{avg_pool_impl(adj, window)};
    });
}

Var channel_major(const Var& t, std::int64_t n, std::int64_t o, std::int64_t s);

Var batch_major_impl(const Var& m, std::int64_t n, std::int64_t o, std::int64_t s) {
    check(m.value().rank() == 2 && m.value().extent(0) == o && m.value().extent(1) == n * s,
          "batch_major: expected [" + std::to_string(o) + "x" + std::to_string(n * s) + "], got " +
              shape_str(m.shape()));
    Tensor out(Shape{n, o, s});
    const double* pm = m.value().data();
    for (std::int64_t oo = 0; oo < o; ++oo)
        for (std::int64_t nn = 0; nn < n; ++nn)
            for (std::int64_t ss = 0; ss < s; ++ss)
                out[(nn * o + oo) * s + ss] = pm[oo * (n * s) + nn * s + ss];
    return make_node("batch_major", std::move(out), {m}, [n, o, s](const Var& adj) {
        return std::vector<Var>{channel_major(adj, n, o, s)};
    });
}

Var channel_major(const Var& t, std::int64_t n, std::int64_t o, std::int64_t s) {
    check(t.value().rank() == 3 && t.value().extent(0) == n && t.value().extent(1) == o &&
              t.value().extent(2) == s,
          "channel_major: shape mismatch " + shape_str(t.shape()));
    Tensor out(Shape{o, n * s});
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t oo = 0; oo < o; ++oo)
            for (std::int64_t ss = 0; ss < s; ++ss)
                out[oo * (n * s) + nn * s + ss] = t.value()[(nn * o + oo) * s + ss];
    return make_node("channel_major", std::move(out), {t}, [n, o, s](const Var& adj) {
        return std::vector<Var>{batch_major_impl(adj, n, o, s)};
    });
}

}  // namespace

Var im2col(const Var& input, std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad) {
    check(input.value().rank() == 4, "im2col: NCHW input required, got " + shape_str(input.shape()));
    check(stride >= 1 && pad >= 0, "im2col: invalid stride/pad");
    ConvGeom g = conv_geom(input.value().shape(), kh, kw, stride, pad);
    check(g.oh > 0 && g.ow > 0, "im2col: non-positive output extents for input " + shape_str(input.shape()));
    return im2col_impl(input, g);
}

Var avg_pool(const Var& input, std::int64_t window) {
    check(input.value().rank() == 4, "avg_pool: NCHW input required, got " + shape_str(input.shape()));
    check(window >= 1, "avg_pool: window must be positive");
    const Shape& s = input.value().shape();
    check(s[2] % window == 0 && s[3] % window == 0,
          "avg_pool: spatial extents " + shape_str(input.shape()) + " not divisible by window " +
              std::to_string(window));
    return avg_pool_impl(input, window);
}

Var batch_major(const Var& m, std::int64_t n, std::int64_t o, std::int64_t s) {
    return batch_major_impl(m, n, o, s);
}

// ---- composites ----

Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::int64_t stride, std::int64_t pad) {
    check(input.value().rank() == 4,
          "conv2d: NCHW input required, got " + shape_str(input.shape()));
    check(kernel.value().rank() == 4,
          "conv2d: OIHW kernel required, got " + shape_str(kernel.shape()));
    const Shape& is = input.value().shape();
    const Shape& ks = kernel.value().shape();
    check(ks[1] == is[1], "conv2d: kernel input channels " + shape_str(ks) +
                              " do not match input channels " + shape_str(is));
    check(bias.value().numel() == ks[0],
          "conv2d: bias length " + std::to_string(bias.value().numel()) + " does not match out channels " +
              std::to_string(ks[0]));
    const std::int64_t n = is[0], o = ks[0];
    ConvGeom g = conv_geom(is, ks[2], ks[3], stride, pad);
    check(g.oh > 0 && g.ow > 0, "conv2d: non-positive output extents");
    Var cols = im2col(input, ks[2], ks[3], stride, pad);
    Var kmat = reshape(kernel, Shape{o, ks[1] * ks[2] * ks[3]});
    Var prod = matmul(kmat, cols);
    Var biasb = matmul(reshape(bias, Shape{o, 1}), ones_const(Shape{1, n * g.oh * g.ow}));
    Var out = batch_major(add(prod, biasb), n, o, g.oh * g.ow);
    return reshape(out, Shape{n, o, g.oh, g.ow});
}

Var linear(const Var& input, const Var& weight, const Var& bias) {
    check(input.value().rank() == 2 && weight.value().rank() == 2,
          "linear: rank-2 input/weight required, got " + shape_str(input.shape()) + " and " +
              shape_str(weight.shape()));
    check(input.value().extent(1) == weight.value().extent(0),
          "linear: inner extents disagree " + shape_str(input.shape()) + " vs " + shape_str(weight.shape()));
    const std::int64_t n = input.value().extent(0), m = weight.value().extent(1);
    check(bias.value().numel() == m, "linear: bias length mismatch");
    return add(matmul(input, weight), matmul(ones_const(Shape{n, 1}), reshape(bias, Shape{1, m})));
}

Var softplus(const Var& v) {
    check(v.value().rank() == 1, "softplus: rank-1 required, got " + shape_str(v.shape()));
    const std::int64_t n = v.value().numel();
    // rows [0, v_i]; logsumexp gives a stable log(1 + e^v)
    Var pair = matmul(reshape(v, Shape{n, 1}), make_const(Tensor::of(Shape{1, 2}, {0.0, 1.0})));
    return logsumexp_rows(pair);
}

Var l2_norm(const Var& v) { return sqrt(sum(mul(v, v))); }

Var stack_images(const std::vector<Var>& images) {
    check(!images.empty(), "stack_images: empty list");
    const Shape s = images.front().value().shape();
    check(s.size() == 3, "stack_images: C×H×W images required, got " + shape_str(s));
    for (const auto& im : images)
        check(im.value().shape() == s, "stack_images: inconsistent image shapes");
    Var flat = concat_flat(images);
    return reshape(flat, Shape{static_cast<std::int64_t>(images.size()), s[0], s[1], s[2]});
}

// ---- backward ----

const Var& GradientMap::at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) fail("GradientMap: no entry named '" + name + "'");
    return it->second;
}

namespace {

std::vector<Node*> topo_from(Node* root) {
    // iterative post-order over requires-grad nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next].node();
            ++next;
            if (child && child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

GradientMap backward(const Var& objective, const std::vector<Var>& leaves, bool differentiable) {
    check(objective.defined(), "backward: undefined objective");
    check(objective.value().numel() == 1,
          "backward: objective must be scalar, got " + shape_str(objective.shape()));
    for (const auto& leaf : leaves) {
        check(leaf.defined() && !leaf.name().empty(), "backward: every requested leaf must be a named leaf");
    }
    {
        std::unordered_set<std::string> names;
        for (const auto& leaf : leaves)
            check(names.insert(leaf.name()).second, "backward: duplicate leaf name '" + leaf.name() + "'");
    }

    GradMode mode(differentiable);
    std::unordered_map<Node*, Var> adjoint;
    if (objective.requires_grad()) {
        std::vector<Node*> order = topo_from(objective.node());
        adjoint[objective.node()] = make_scalar(1.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            auto found = adjoint.find(node);
            if (found == adjoint.end() || !node->vjp) continue;
            std::vector<Var> input_adjoints = node->vjp(found->second);
            check(input_adjoints.size() == node->inputs.size(),
                  "backward: vjp arity mismatch in op '" + node->op + "'");
            for (std::size_t i = 0; i < node->inputs.size(); ++i) {
                Node* in = node->inputs[i].node();
                if (!in || !in->requires_grad || !input_adjoints[i].defined()) continue;
                auto cur = adjoint.find(in);
                if (cur == adjoint.end()) {
                    adjoint.emplace(in, input_adjoints[i]);
                } else {
                    cur->second = add(cur->second, input_adjoints[i]);
                }
            }
        }
    }

    GradientMap out;
    out.differentiable = differentiable;
    for (const auto& leaf : leaves) {
        Var g;
        auto it = adjoint.find(leaf.node());
        if (it != adjoint.end()) {
            g = it->second;
        } else {
            g = make_const(Tensor::zeros(leaf.value().shape()));
        }
        check(g.value().shape() == leaf.value().shape(),
              "backward: gradient shape " + shape_str(g.shape()) + " does not match leaf '" + leaf.name() +
                  "' shape " + shape_str(leaf.value().shape()));
        if (differentiable) g.node()->from_diff_backward = true;
        out.entries.emplace(leaf.name(), std::move(g));
    }
    return out;
}

GradientMap backward_through_gradients(const Var& meta_objective, const std::vector<Var>& leaves) {
    check(meta_objective.defined(), "backward_through_gradients: undefined objective");
    // the meta objective must be built over a differentiable-mode backward pass
    bool found = false;
    {
        std::unordered_set<Node*> seen;
        std::vector<Node*> stack{meta_objective.node()};
        seen.insert(meta_objective.node());
        while (!stack.empty() && !found) {
            Node* node = stack.back();
            stack.pop_back();
            if (node->from_diff_backward) {
                found = true;
                break;
            }
            for (const auto& in : node->inputs) {
                if (in.node() && !seen.count(in.node())) {
                    seen.insert(in.node());
                    stack.push_back(in.node());
                }
            }
        }
    }
    check(found,
          "backward_through_gradients: meta objective does not depend on gradients from a "
          "differentiable-mode backward pass");
    return backward(meta_objective, leaves, false);
}

}  // namespace pr2r
