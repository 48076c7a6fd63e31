// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over a dynamically recorded tape. Nodes live in an
// arena; insertion order is a valid topological order, so backward() is a
// single reverse sweep. Only the op set the model needs is provided; GEMMs
// are delegated to Eigen behind this interface.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "deepflow/tensor.hpp"

namespace deepflow {

template <typename T>
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(Tape&)> back;  // empty for leaves and no-grad nodes
        bool requires_grad = false;
        bool grad_live = false;  // received a contribution during backward
    };

public:
    Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, {});
    }
    Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    const Tensor<T>& val(Var<T> v) const { return nodes_[idx(v)].value; }
    const Tensor<T>& grad(Var<T> v) const {
        const Node& n = nodes_[idx(v)];
        if (!n.requires_grad) throw std::logic_error("grad requested for non-differentiable node");
        return n.grad;
    }
    const Shape& shape(Var<T> v) const { return nodes_[idx(v)].value.shape; }

    std::size_t size() const { return nodes_.size(); }

    // When disabled, ops still compute values but record no backward closures.
    void set_grad_enabled(bool e) { grad_enabled_ = e; }
    bool grad_enabled() const { return grad_enabled_; }

    void backward(Var<T> root) {
        Node& r = nodes_[idx(root)];
        if (r.value.size() != 1) throw std::invalid_argument("backward root must be scalar");
        if (!r.requires_grad) throw std::logic_error("backward on a non-differentiable root");
        for (auto& n : nodes_) {
            if (n.requires_grad) {
                n.grad = Tensor<T>::zeros(n.value.shape);
                n.grad_live = false;
            }
        }
        r.grad.data[0] = T(1);
        r.grad_live = true;
        for (std::int32_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.grad_live) n.back(*this);
        }
    }

    // ---- elementwise ----------------------------------------------------

    Var<T> add(Var<T> a, Var<T> b) {
        check_same_shape(a, b, "add");
        Tensor<T> out = val(a);
        arr(out) += carr(val(b));
        return unary_or_binary(std::move(out), a, b, [](Tape& t, std::int32_t self, std::int32_t pa, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) { t.arr(ga) += t.carr(g); });
            t.accumulate(pb, [&](Tensor<T>& gb) { t.arr(gb) += t.carr(g); });
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        check_same_shape(a, b, "sub");
        Tensor<T> out = val(a);
        arr(out) -= carr(val(b));
        return unary_or_binary(std::move(out), a, b, [](Tape& t, std::int32_t self, std::int32_t pa, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) { t.arr(ga) += t.carr(g); });
            t.accumulate(pb, [&](Tensor<T>& gb) { t.arr(gb) -= t.carr(g); });
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        check_same_shape(a, b, "mul");
        Tensor<T> out = val(a);
        arr(out) *= carr(val(b));
        return unary_or_binary(std::move(out), a, b, [](Tape& t, std::int32_t self, std::int32_t pa, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) { t.arr(ga) += t.carr(g) * t.carr(t.node(pb).value); });
            t.accumulate(pb, [&](Tensor<T>& gb) { t.arr(gb) += t.carr(g) * t.carr(t.node(pa).value); });
        });
    }

    Var<T> scale(Var<T> a, T c) {
        Tensor<T> out = val(a);
        arr(out) *= c;
        return unary(std::move(out), a, [c](Tape& t, std::int32_t self, std::int32_t pa) {
            t.accumulate(pa, [&](Tensor<T>& ga) { t.arr(ga) += t.carr(t.node(self).grad) * c; });
        });
    }

    Var<T> add_scalar(Var<T> a, T c) {
        Tensor<T> out = val(a);
        arr(out) += c;
        return unary(std::move(out), a, [](Tape& t, std::int32_t self, std::int32_t pa) {
            t.accumulate(pa, [&](Tensor<T>& ga) { t.arr(ga) += t.carr(t.node(self).grad); });
        });
    }

    Var<T> silu(Var<T> a) {
        const Tensor<T>& x = val(a);
        Tensor<T> out(x.shape);
        arr(out) = carr(x) * ((-carr(x)).exp() + T(1)).inverse();
        return unary(std::move(out), a, [](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& x = t.node(pa).value;
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                auto xs = t.carr(x);
                auto sig = ((-xs).exp() + T(1)).inverse();
                t.arr(ga) += t.carr(g) * sig * (T(1) + xs * (T(1) - sig));
            });
        });
    }

    // tanh-approximated GELU
    Var<T> gelu(Var<T> a) {
        const Tensor<T>& x = val(a);
        Tensor<T> out(x.shape);
        {
            auto xs = carr(x);
            arr(out) = T(0.5) * xs * ((kGeluC * (xs + kGeluA * xs.cube())).tanh() + T(1));
        }
        return unary(std::move(out), a, [](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& x = t.node(pa).value;
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                auto xs = t.carr(x);
                auto th = (kGeluC * (xs + kGeluA * xs.cube())).tanh();
                auto du = kGeluC * (T(1) + T(3) * kGeluA * xs.square());
                t.arr(ga) += t.carr(g) * (T(0.5) * (T(1) + th) + T(0.5) * xs * (T(1) - th.square()) * du);
            });
        });
    }

    // ---- linear algebra --------------------------------------------------

    // x: (..., K) times w: (K, M) -> (..., M)
    Var<T> matmul(Var<T> x, Var<T> w) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        if (wv.rank() != 2 || xv.rank() < 1 || xv.shape.back() != wv.shape[0])
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(xv.shape) + " x " + shape_str(wv.shape));
        const std::int64_t k = wv.shape[0], m = wv.shape[1];
        const std::int64_t r = xv.size() / k;
        Shape out_shape(xv.shape.begin(), xv.shape.end() - 1);
        out_shape.push_back(m);
        Tensor<T> out(std::move(out_shape));
        MapM(out.ptr(), r, m).noalias() = CMapM(xv.ptr(), r, k) * CMapM(wv.ptr(), k, m);
        return unary_or_binary(std::move(out), x, w, [r, k, m](Tape& t, std::int32_t self, std::int32_t px, std::int32_t pw) {
            const Tensor<T>& g = t.node(self).grad;
            const Tensor<T>& xv = t.node(px).value;
            const Tensor<T>& wv = t.node(pw).value;
            t.accumulate(px, [&](Tensor<T>& gx) {
                MapM(gx.ptr(), r, k).noalias() += CMapM(g.ptr(), r, m) * CMapM(wv.ptr(), k, m).transpose();
            });
            t.accumulate(pw, [&](Tensor<T>& gw) {
                MapM(gw.ptr(), k, m).noalias() += CMapM(xv.ptr(), r, k).transpose() * CMapM(g.ptr(), r, m);
            });
        });
    }

    // x: (..., M) plus bias b: (M,)
    Var<T> add_bias(Var<T> x, Var<T> b) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& bv = val(b);
        if (bv.rank() != 1 || xv.shape.back() != bv.shape[0])
            throw std::invalid_argument("add_bias: incompatible shapes");
        const std::int64_t m = bv.shape[0];
        const std::int64_t r = xv.size() / m;
        Tensor<T> out = xv;
        MapM(out.ptr(), r, m).rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.ptr(), m);
        return unary_or_binary(std::move(out), x, b, [r, m](Tape& t, std::int32_t self, std::int32_t px, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(px, [&](Tensor<T>& gx) { t.arr(gx) += t.carr(g); });
            t.accumulate(pb, [&](Tensor<T>& gb) {
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
            });
        });
    }

    Var<T> linear(Var<T> x, Var<T> w, Var<T> b) { return add_bias(matmul(x, w), b); }

    // a: (G, N, K) times b: (G, K, M) -> (G, N, M)
    // Attention groups are tiny (N, M <= tokens, K = head dim), where Eigen's
    // per-product dispatch overhead dominates; small groups take a manual
    // kernel, large ones go through Eigen.
    Var<T> bmm(Var<T> a, Var<T> b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[1])
            throw std::invalid_argument("bmm: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
        const std::int64_t gcnt = av.shape[0], n = av.shape[1], k = av.shape[2], m = bv.shape[2];
        Tensor<T> out({gcnt, n, m});
        bmm_kernel(av.ptr(), bv.ptr(), out.ptr(), gcnt, n, k, m, false);
        return unary_or_binary(std::move(out), a, b, [gcnt, n, k, m](Tape& t, std::int32_t self, std::int32_t pa, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            const Tensor<T>& av = t.node(pa).value;
            const Tensor<T>& bv = t.node(pb).value;
            // dA += G * B^T ; dB += A^T * G
            t.accumulate(pa, [&](Tensor<T>& ga) {
                bmm_bt_kernel(g.ptr(), bv.ptr(), ga.ptr(), gcnt, n, m, k);
            });
            t.accumulate(pb, [&](Tensor<T>& gb) {
                bmm_at_kernel(av.ptr(), g.ptr(), gb.ptr(), gcnt, n, k, m);
            });
        });
    }

    // (G, N, M) -> (G, M, N)
    Var<T> transpose_last2(Var<T> a) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 3) throw std::invalid_argument("transpose_last2 expects rank 3");
        const std::int64_t gcnt = av.shape[0], n = av.shape[1], m = av.shape[2];
        Tensor<T> out({gcnt, m, n});
        for (std::int64_t i = 0; i < gcnt; ++i)
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < m; ++c)
                    out[(i * m + c) * n + r] = av[(i * n + r) * m + c];
        return unary(std::move(out), a, [gcnt, n, m](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t i = 0; i < gcnt; ++i)
                    for (std::int64_t r = 0; r < n; ++r)
                        for (std::int64_t c = 0; c < m; ++c)
                            ga[(i * n + r) * m + c] += g[(i * m + c) * n + r];
            });
        });
    }

    Var<T> reshape(Var<T> a, Shape s) {
        const Tensor<T>& av = val(a);
        if (shape_numel(s) != av.size()) throw std::invalid_argument("reshape: element count mismatch");
        Tensor<T> out(std::move(s), av.data);
        return unary(std::move(out), a, [](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            });
        });
    }

    // (B, N, H, C) -> (B, H, N, C); the head split/merge move for attention.
    Var<T> swap_axes_1_2(Var<T> a) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 4) throw std::invalid_argument("swap_axes_1_2 expects rank 4");
        const std::int64_t b = av.shape[0], n = av.shape[1], h = av.shape[2], c = av.shape[3];
        Tensor<T> out({b, h, n, c});
        for (std::int64_t ib = 0; ib < b; ++ib)
            for (std::int64_t in = 0; in < n; ++in)
                for (std::int64_t ih = 0; ih < h; ++ih)
                    for (std::int64_t ic = 0; ic < c; ++ic)
                        out[((ib * h + ih) * n + in) * c + ic] = av[((ib * n + in) * h + ih) * c + ic];
        return unary(std::move(out), a, [b, n, h, c](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t ib = 0; ib < b; ++ib)
                    for (std::int64_t in = 0; in < n; ++in)
                        for (std::int64_t ih = 0; ih < h; ++ih)
                            for (std::int64_t ic = 0; ic < c; ++ic)
                                ga[((ib * n + in) * h + ih) * c + ic] += g[((ib * h + ih) * n + in) * c + ic];
            });
        });
    }

    // ---- structure -------------------------------------------------------

    Var<T> concat_last(Var<T> a, Var<T> b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.rank() != bv.rank()) throw std::invalid_argument("concat_last: rank mismatch");
        for (std::int64_t i = 0; i + 1 < av.rank(); ++i)
            if (av.shape[i] != bv.shape[i]) throw std::invalid_argument("concat_last: leading shape mismatch");
        const std::int64_t ca = av.shape.back(), cb = bv.shape.back();
        const std::int64_t rows = av.size() / ca;
        Shape s = av.shape;
        s.back() = ca + cb;
        Tensor<T> out(std::move(s));
        for (std::int64_t i = 0; i < rows; ++i) {
            std::memcpy(out.ptr() + i * (ca + cb), av.ptr() + i * ca, sizeof(T) * static_cast<std::size_t>(ca));
            std::memcpy(out.ptr() + i * (ca + cb) + ca, bv.ptr() + i * cb, sizeof(T) * static_cast<std::size_t>(cb));
        }
        return unary_or_binary(std::move(out), a, b, [rows, ca, cb](Tape& t, std::int32_t self, std::int32_t pa, std::int32_t pb) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t i = 0; i < rows; ++i)
                    t.seg(ga, i * ca, ca) += t.cseg(g, i * (ca + cb), ca);
            });
            t.accumulate(pb, [&](Tensor<T>& gb) {
                for (std::int64_t i = 0; i < rows; ++i)
                    t.seg(gb, i * cb, cb) += t.cseg(g, i * (ca + cb) + ca, cb);
            });
        });
    }

    // out[r][j] = a[r][map[j]] over the last axis; backward scatter-adds.
    Var<T> gather_cols(Var<T> a, std::vector<std::int64_t> map) {
        const Tensor<T>& av = val(a);
        const std::int64_t c = av.shape.back();
        for (auto j : map)
            if (j < 0 || j >= c) throw std::invalid_argument("gather_cols: index out of range");
        const std::int64_t w = static_cast<std::int64_t>(map.size());
        const std::int64_t rows = av.size() / c;
        Shape s = av.shape;
        s.back() = w;
        Tensor<T> out(std::move(s));
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + map[static_cast<std::size_t>(j)]];
        return unary(std::move(out), a, [rows, c, w, map = std::move(map)](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < w; ++j) ga[i * c + map[static_cast<std::size_t>(j)]] += g[i * w + j];
            });
        });
    }

    // columns [from, to) of the last axis
    Var<T> slice_last(Var<T> a, std::int64_t from, std::int64_t to) {
        const Tensor<T>& av = val(a);
        const std::int64_t c = av.shape.back();
        if (from < 0 || to > c || from >= to) throw std::invalid_argument("slice_last: bad range");
        const std::int64_t w = to - from;
        const std::int64_t rows = av.size() / c;
        Shape s = av.shape;
        s.back() = w;
        Tensor<T> out(std::move(s));
        for (std::int64_t i = 0; i < rows; ++i)
            std::memcpy(out.ptr() + i * w, av.ptr() + i * c + from, sizeof(T) * static_cast<std::size_t>(w));
        return unary(std::move(out), a, [rows, c, from, w](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (std::int64_t i = 0; i < rows; ++i)
                    t.seg(ga, i * c + from, w) += t.cseg(g, i * w, w);
            });
        });
    }

    // table: (V, D), ids in [0, V) -> (B, D); backward scatter-adds rows.
    Var<T> rows(Var<T> table, std::vector<std::int64_t> ids) {
        const Tensor<T>& tv = val(table);
        if (tv.rank() != 2) throw std::invalid_argument("rows: table must be rank 2");
        const std::int64_t v = tv.shape[0], d = tv.shape[1];
        const std::int64_t b = static_cast<std::int64_t>(ids.size());
        for (auto id : ids)
            if (id < 0 || id >= v) throw std::invalid_argument("rows: id out of range");
        Tensor<T> out({b, d});
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = tv[ids[static_cast<std::size_t>(i)] * d + j];
        return unary(std::move(out), table, [b, d, ids = std::move(ids)](Tape& t, std::int32_t self, std::int32_t pt) {
            const Tensor<T>& g = t.node(self).grad;
            t.accumulate(pt, [&](Tensor<T>& gt) {
                for (std::int64_t i = 0; i < b; ++i)
                    for (std::int64_t j = 0; j < d; ++j) gt[ids[static_cast<std::size_t>(i)] * d + j] += g[i * d + j];
            });
        });
    }

    Var<T> detach(Var<T> a) { return leaf(val(a), false); }

    // ---- broadcasts ------------------------------------------------------

    // x: (B, N, D) op s: (B, D), broadcast over the token axis.
    Var<T> mul_tokens(Var<T> x, Var<T> s) { return tokens_bc(x, s, true); }
    Var<T> add_tokens(Var<T> x, Var<T> s) { return tokens_bc(x, s, false); }

    // x: (B, ...) times per-sample scalar s: (B,)
    Var<T> mul_sample(Var<T> x, Var<T> s) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& sv = val(s);
        if (sv.rank() != 1 || xv.rank() < 1 || xv.shape[0] != sv.shape[0])
            throw std::invalid_argument("mul_sample: incompatible shapes");
        const std::int64_t b = sv.shape[0];
        const std::int64_t e = xv.size() / b;
        Tensor<T> out = xv;
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < e; ++j) out[i * e + j] *= sv[i];
        return unary_or_binary(std::move(out), x, s, [b, e](Tape& t, std::int32_t self, std::int32_t px, std::int32_t ps) {
            const Tensor<T>& g = t.node(self).grad;
            const Tensor<T>& xv = t.node(px).value;
            const Tensor<T>& sv = t.node(ps).value;
            t.accumulate(px, [&](Tensor<T>& gx) {
                for (std::int64_t i = 0; i < b; ++i)
                    for (std::int64_t j = 0; j < e; ++j) gx[i * e + j] += g[i * e + j] * sv[i];
            });
            t.accumulate(ps, [&](Tensor<T>& gs) {
                for (std::int64_t i = 0; i < b; ++i) {
                    T acc = T(0);
                    for (std::int64_t j = 0; j < e; ++j) acc += g[i * e + j] * xv[i * e + j];
                    gs[i] += acc;
                }
            });
        });
    }

    // ---- normalization & attention pieces ---------------------------------

    // LayerNorm over the last axis, no affine parameters.
    Var<T> layernorm(Var<T> a, T eps = T(1e-6)) {
        const Tensor<T>& av = val(a);
        const std::int64_t d = av.shape.back();
        const std::int64_t rows = av.size() / d;
        Tensor<T> out(av.shape);
        std::vector<T> rstd(static_cast<std::size_t>(rows));
        // reductions stay scalar: vectorized reductions are buffer-alignment
        // dependent and would break bitwise reproducibility
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* xr = av.ptr() + i * d;
            double mu = 0;
            for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
            mu /= static_cast<double>(d);
            double var = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double c = static_cast<double>(xr[j]) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            rstd[static_cast<std::size_t>(i)] = rs;
            const T mut = static_cast<T>(mu);
            for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = (xr[j] - mut) * rs;
        }
        return unary(std::move(out), a, [rows, d, rstd = std::move(rstd)](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& yv = t.node(self).value;
            const Tensor<T>& gv = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& gav) {
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* yr = yv.ptr() + i * d;
                    const T* gr = gv.ptr() + i * d;
                    double gsum = 0, gysum = 0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        gsum += gr[j];
                        gysum += gr[j] * yr[j];
                    }
                    const T gmean = static_cast<T>(gsum / static_cast<double>(d));
                    const T gymean = static_cast<T>(gysum / static_cast<double>(d));
                    const T rs = rstd[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < d; ++j)
                        gav[i * d + j] += rs * (gr[j] - gmean - yr[j] * gymean);
                }
            });
        });
    }

    // Softmax over the last axis.
    Var<T> softmax(Var<T> a) {
        const Tensor<T>& av = val(a);
        const std::int64_t d = av.shape.back();
        const std::int64_t rows = av.size() / d;
        Tensor<T> out(av.shape);
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* xr = av.ptr() + i * d;
            T mx = xr[0];
            for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
            double z = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const T e = std::exp(xr[j] - mx);
                out[i * d + j] = e;
                z += e;
            }
            const T inv = static_cast<T>(1.0 / z);
            for (std::int64_t j = 0; j < d; ++j) out[i * d + j] *= inv;
        }
        return unary(std::move(out), a, [rows, d](Tape& t, std::int32_t self, std::int32_t pa) {
            const Tensor<T>& yv = t.node(self).value;
            const Tensor<T>& gv = t.node(self).grad;
            t.accumulate(pa, [&](Tensor<T>& gav) {
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* yr = yv.ptr() + i * d;
                    const T* gr = gv.ptr() + i * d;
                    double dot = 0;
                    for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                    for (std::int64_t j = 0; j < d; ++j)
                        gav[i * d + j] += yr[j] * (gr[j] - static_cast<T>(dot));
                }
            });
        });
    }

    // ---- reductions --------------------------------------------------------

    Var<T> sum_all(Var<T> a) { return reduce_all(a, false); }
    Var<T> mean_all(Var<T> a) { return reduce_all(a, true); }

private:
    static constexpr T kGeluC = T(0.7978845608028653558798921198687);  // sqrt(2/pi)
    static constexpr T kGeluA = T(0.044715);
    static constexpr std::int64_t kSmallGemm = 4096;  // n*k*m cutoff for manual kernels

    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    // C(g) = A(g) * B(g), A: (G,N,K) B: (G,K,M); accumulate adds into C.
    static void bmm_kernel(const T* a, const T* b, T* c, std::int64_t gcnt, std::int64_t n,
                           std::int64_t k, std::int64_t m, bool accumulate) {
        if (n * k * m <= kSmallGemm) {
            for (std::int64_t g = 0; g < gcnt; ++g) {
                const T* ag = a + g * n * k;
                const T* bg = b + g * k * m;
                T* cg = c + g * n * m;
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < m; ++j) {
                        T acc = accumulate ? cg[i * m + j] : T(0);
                        for (std::int64_t l = 0; l < k; ++l) acc += ag[i * k + l] * bg[l * m + j];
                        cg[i * m + j] = acc;
                    }
            }
            return;
        }
        for (std::int64_t g = 0; g < gcnt; ++g) {
            if (accumulate)
                MapM(c + g * n * m, n, m).noalias() += CMapM(a + g * n * k, n, k) * CMapM(b + g * k * m, k, m);
            else
                MapM(c + g * n * m, n, m).noalias() = CMapM(a + g * n * k, n, k) * CMapM(b + g * k * m, k, m);
        }
    }

    // dA(g) += G(g) * B(g)^T, G: (G,N,M) B: (G,K,M) -> dA: (G,N,K)
    static void bmm_bt_kernel(const T* g_, const T* b, T* da, std::int64_t gcnt, std::int64_t n,
                              std::int64_t m, std::int64_t k) {
        if (n * k * m <= kSmallGemm) {
            for (std::int64_t g = 0; g < gcnt; ++g) {
                const T* gg = g_ + g * n * m;
                const T* bg = b + g * k * m;
                T* dg = da + g * n * k;
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t l = 0; l < k; ++l) {
                        T acc = T(0);
                        for (std::int64_t j = 0; j < m; ++j) acc += gg[i * m + j] * bg[l * m + j];
                        dg[i * k + l] += acc;
                    }
            }
            return;
        }
        for (std::int64_t g = 0; g < gcnt; ++g)
            MapM(da + g * n * k, n, k).noalias() +=
                CMapM(g_ + g * n * m, n, m) * CMapM(b + g * k * m, k, m).transpose();
    }

    // dB(g) += A(g)^T * G(g), A: (G,N,K) G: (G,N,M) -> dB: (G,K,M)
    static void bmm_at_kernel(const T* a, const T* g_, T* db, std::int64_t gcnt, std::int64_t n,
                              std::int64_t k, std::int64_t m) {
        if (n * k * m <= kSmallGemm) {
            for (std::int64_t g = 0; g < gcnt; ++g) {
                const T* ag = a + g * n * k;
                const T* gg = g_ + g * n * m;
                T* dg = db + g * k * m;
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t l = 0; l < k; ++l) {
                        const T av = ag[i * k + l];
                        for (std::int64_t j = 0; j < m; ++j) dg[l * m + j] += av * gg[i * m + j];
                    }
            }
            return;
        }
        for (std::int64_t g = 0; g < gcnt; ++g)
            MapM(db + g * k * m, k, m).noalias() +=
                CMapM(a + g * n * k, n, k).transpose() * CMapM(g_ + g * n * m, n, m);
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;

    static std::size_t idx(Var<T> v) {
        if (v.id < 0) throw std::logic_error("use of invalid Var");
        return static_cast<std::size_t>(v.id);
    }
    Node& node(std::int32_t i) { return nodes_[static_cast<std::size_t>(i)]; }

    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> arr(Tensor<T>& t) {
        return {t.ptr(), static_cast<Eigen::Index>(t.size())};
    }
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> carr(const Tensor<T>& t) {
        return {t.ptr(), static_cast<Eigen::Index>(t.size())};
    }
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> seg(Tensor<T>& t, std::int64_t off, std::int64_t len) {
        return {t.ptr() + off, static_cast<Eigen::Index>(len)};
    }
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> cseg(const Tensor<T>& t, std::int64_t off, std::int64_t len) {
        return {t.ptr() + off, static_cast<Eigen::Index>(len)};
    }

    Var<T> push(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    // Marks the parent grad live and runs the accumulation only if it is needed.
    template <typename F>
    void accumulate(std::int32_t parent, F&& f) {
        if (parent < 0) return;
        Node& p = nodes_[static_cast<std::size_t>(parent)];
        if (!p.requires_grad) return;
        f(p.grad);
        p.grad_live = true;
    }

    template <typename F>
    Var<T> unary(Tensor<T> out, Var<T> a, F&& back) {
        const bool rg = grad_enabled_ && nodes_[idx(a)].requires_grad;
        if (!rg) return push(std::move(out), false, {});
        Var<T> self{static_cast<std::int32_t>(nodes_.size())};
        const std::int32_t pa = a.id;
        return push(std::move(out), true,
                    [self, pa, back = std::forward<F>(back)](Tape& t) { back(t, self.id, pa); });
    }

    template <typename F>
    Var<T> unary_or_binary(Tensor<T> out, Var<T> a, Var<T> b, F&& back) {
        const bool rg = grad_enabled_ && (nodes_[idx(a)].requires_grad || nodes_[idx(b)].requires_grad);
        if (!rg) return push(std::move(out), false, {});
        Var<T> self{static_cast<std::int32_t>(nodes_.size())};
        const std::int32_t pa = a.id, pb = b.id;
        return push(std::move(out), true,
                    [self, pa, pb, back = std::forward<F>(back)](Tape& t) { back(t, self.id, pa, pb); });
    }

    void check_same_shape(Var<T> a, Var<T> b, const char* op) {
        if (!val(a).same_shape(val(b)))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) +
                                        " vs " + shape_str(val(b).shape));
    }

    Var<T> tokens_bc(Var<T> x, Var<T> s, bool is_mul) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& sv = val(s);
        if (xv.rank() != 3 || sv.rank() != 2 || xv.shape[0] != sv.shape[0] || xv.shape[2] != sv.shape[1])
            throw std::invalid_argument("token broadcast: want (B,N,D) with (B,D)");
        const std::int64_t b = xv.shape[0], n = xv.shape[1], d = xv.shape[2];
        Tensor<T> out = xv;
        for (std::int64_t ib = 0; ib < b; ++ib)
            for (std::int64_t in = 0; in < n; ++in)
                for (std::int64_t j = 0; j < d; ++j) {
                    T& o = out[(ib * n + in) * d + j];
                    if (is_mul)
                        o *= sv[ib * d + j];
                    else
                        o += sv[ib * d + j];
                }
        return unary_or_binary(std::move(out), x, s, [b, n, d, is_mul](Tape& t, std::int32_t self, std::int32_t px, std::int32_t ps) {
            const Tensor<T>& g = t.node(self).grad;
            const Tensor<T>& xv = t.node(px).value;
            const Tensor<T>& sv = t.node(ps).value;
            t.accumulate(px, [&](Tensor<T>& gx) {
                for (std::int64_t ib = 0; ib < b; ++ib)
                    for (std::int64_t in = 0; in < n; ++in)
                        for (std::int64_t j = 0; j < d; ++j)
                            gx[(ib * n + in) * d + j] +=
                                is_mul ? g[(ib * n + in) * d + j] * sv[ib * d + j] : g[(ib * n + in) * d + j];
            });
            t.accumulate(ps, [&](Tensor<T>& gs) {
                for (std::int64_t ib = 0; ib < b; ++ib)
                    for (std::int64_t j = 0; j < d; ++j) {
                        T acc = T(0);
                        for (std::int64_t in = 0; in < n; ++in)
                            acc += is_mul ? g[(ib * n + in) * d + j] * xv[(ib * n + in) * d + j]
                                          : g[(ib * n + in) * d + j];
                        gs[ib * d + j] += acc;
                    }
            });
        });
    }

    Var<T> reduce_all(Var<T> a, bool mean) {
        const Tensor<T>& av = val(a);
        double acc = 0;
        for (std::int64_t i = 0; i < av.size(); ++i) acc += av[i];
        const std::int64_t n = av.size();
        if (mean && n == 0) throw std::invalid_argument("mean_all of empty tensor");
        const T v = static_cast<T>(mean ? acc / static_cast<double>(n) : acc);
        Tensor<T> out = Tensor<T>::scalar(v);
        const T w = mean ? T(1) / static_cast<T>(n) : T(1);
        return unary(std::move(out), a, [w](Tape& t, std::int32_t self, std::int32_t pa) {
            const T g = t.node(self).grad.data[0] * w;
            t.accumulate(pa, [&](Tensor<T>& ga) {
                for (auto& v : ga.data) v += g;
            });
        });
    }
};

} // namespace deepflow
