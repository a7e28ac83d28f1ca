#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "dsd/common.hpp"

namespace dsd {

// Dense row-major tensor. Rank-2 is the common case (rows of features);
// convolutional code uses rank-3 {C, H, W}.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(count(shape), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) throw ShapeMismatch("tensor init size");
    }

    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeMismatch("negative dim");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }

    size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
EMap<T> as_mat(Tensor<T>& t, int r, int c) {
    return EMap<T>(t.data.data(), r, c);
}
template <typename T>
ECMap<T> as_mat(const Tensor<T>& t, int r, int c) {
    return ECMap<T>(t.data.data(), r, c);
}
template <typename T>
EMap<T> as_mat2(Tensor<T>& t) {
    return as_mat(t, t.rows(), t.cols());
}
template <typename T>
ECMap<T> as_mat2(const Tensor<T>& t) {
    return as_mat(t, t.rows(), t.cols());
}

inline double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// Reverse-mode tape. Ops append nodes that only reference earlier nodes, so
// backward() is a single reverse sweep in creation order (deterministic).
// With recording=false (teacher/eval forwards) no backward closures are kept.
template <typename T>
class Graph {
public:
    using Var = int;

    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var constant(Tensor<T> v) { return make(std::move(v), false); }
    Var leaf(Tensor<T> v) { return make(std::move(v), recording_); }

    const Tensor<T>& value(Var v) const { return nodes_[v].value; }
    const Tensor<T>& grad(Var v) const { return nodes_[v].grad; }
    bool has_grad(Var v) const { return !nodes_[v].grad.data.empty(); }

    size_t node_count() const { return nodes_.size(); }

    // ---- elementwise / broadcast ----

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data[i] += val(b).data[i];
        return unary_or_binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
            accum(a, g);
            accum(b, g);
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data[i] -= val(b).data[i];
        return unary_or_binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
            accum(a, g);
            Tensor<T> ng = g;
            for (auto& x : ng.data) x = -x;
            accum(b, ng);
        });
    }

    Var scale(Var a, T c) {
        Tensor<T> out = val(a);
        for (auto& x : out.data) x *= c;
        return unary(std::move(out), a, [this, a, c](const Tensor<T>& g) {
            Tensor<T> ga = g;
            for (auto& x : ga.data) x *= c;
            accum(a, ga);
        });
    }

    Var hadamard(Var a, Var b) {
        check_same(a, b, "hadamard");
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.data[i] *= val(b).data[i];
        return unary_or_binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
            Tensor<T> ga = g, gb = g;
            for (size_t i = 0; i < g.size(); ++i) {
                ga.data[i] *= val(b).data[i];
                gb.data[i] *= val(a).data[i];
            }
            accum(a, ga);
            accum(b, gb);
        });
    }

    // x (n x d) + row vector b (d) broadcast over rows.
    Var add_rowvec(Var a, Var b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        const int n = av.rows(), d = av.cols();
        if (static_cast<int>(bv.size()) != d) throw ShapeMismatch("add_rowvec");
        Tensor<T> out = av;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) out.at(r, c) += bv.data[c];
        return unary_or_binary(std::move(out), a, b, [this, a, b, n, d](const Tensor<T>& g) {
            accum(a, g);
            Tensor<T> gb({1, d});
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gb.data[c] += g.data[static_cast<size_t>(r) * d + c];
            accum_reshaped(b, gb);
        });
    }

    Var relu(Var a) {
        Tensor<T> out = val(a);
        for (auto& x : out.data) x = x > T(0) ? x : T(0);
        return unary(std::move(out), a, [this, a](const Tensor<T>& g) {
            Tensor<T> ga = g;
            for (size_t i = 0; i < g.size(); ++i)
                if (val(a).data[i] <= T(0)) ga.data[i] = T(0);
            accum(a, ga);
        });
    }

    Var gelu(Var a) {
        Tensor<T> out = val(a);
        for (auto& x : out.data) x = static_cast<T>(gelu_fwd(static_cast<double>(x)));
        return unary(std::move(out), a, [this, a](const Tensor<T>& g) {
            Tensor<T> ga = g;
            for (size_t i = 0; i < g.size(); ++i)
                ga.data[i] *= static_cast<T>(gelu_grad(static_cast<double>(val(a).data[i])));
            accum(a, ga);
        });
    }

    // ---- matrix products (rank-2) ----

    Var matmul(Var a, Var b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (av.cols() != bv.rows()) throw ShapeMismatch("matmul inner dim");
        Tensor<T> out({av.rows(), bv.cols()});
        as_mat2(out).noalias() = as_mat2(av) * as_mat2(bv);
        return unary_or_binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
            const auto& av2 = val(a);
            const auto& bv2 = val(b);
            Tensor<T> ga({av2.rows(), av2.cols()});
            Tensor<T> gb({bv2.rows(), bv2.cols()});
            as_mat2(ga).noalias() = as_mat2(g) * as_mat2(bv2).transpose();
            as_mat2(gb).noalias() = as_mat2(av2).transpose() * as_mat2(g);
            accum(a, ga);
            accum(b, gb);
        });
    }

    // a * b^T; the standard y = x W^T with W stored (out, in).
    Var matmul_nt(Var a, Var b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (av.cols() != bv.cols()) throw ShapeMismatch("matmul_nt inner dim");
        Tensor<T> out({av.rows(), bv.rows()});
        as_mat2(out).noalias() = as_mat2(av) * as_mat2(bv).transpose();
        return unary_or_binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
            const auto& av2 = val(a);
            const auto& bv2 = val(b);
            Tensor<T> ga({av2.rows(), av2.cols()});
            Tensor<T> gb({bv2.rows(), bv2.cols()});
            as_mat2(ga).noalias() = as_mat2(g) * as_mat2(bv2);
            as_mat2(gb).noalias() = as_mat2(g).transpose() * as_mat2(av2);
            accum(a, ga);
            accum(b, gb);
        });
    }

    // y = x W^T + bias
    Var linear(Var x, Var w, Var b) { return add_rowvec(matmul_nt(x, w), b); }

    // ---- row-wise normalizations ----

    Var softmax_rows(Var a) {
        const auto& av = val(a);
        const int n = av.rows(), d = av.cols();
        Tensor<T> out = av;
        for (int r = 0; r < n; ++r) {
            T* row = out.data.data() + static_cast<size_t>(r) * d;
            T mx = row[0];
            for (int c = 1; c < d; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < d; ++c) {
                row[c] = std::exp(row[c] - mx);
                sum += row[c];
            }
            for (int c = 0; c < d; ++c) row[c] /= sum;
        }
        Var v = unary(std::move(out), a, nullptr);
        if (node(v).requires_grad) {
            node(v).backward = [this, a, v, n, d](const Tensor<T>& g) {
                const auto& s = val(v);
                Tensor<T> ga({n, d});
                for (int r = 0; r < n; ++r) {
                    const T* sr = s.data.data() + static_cast<size_t>(r) * d;
                    const T* gr = g.data.data() + static_cast<size_t>(r) * d;
                    T dot = T(0);
                    for (int c = 0; c < d; ++c) dot += sr[c] * gr[c];
                    T* gar = ga.data.data() + static_cast<size_t>(r) * d;
                    for (int c = 0; c < d; ++c) gar[c] = sr[c] * (gr[c] - dot);
                }
                accum(a, ga);
            };
        }
        return v;
    }

    Var layernorm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        const auto& gv = val(gamma);
        const auto& bv = val(beta);
        if (static_cast<int>(gv.size()) != d || static_cast<int>(bv.size()) != d)
            throw ShapeMismatch("layernorm affine dims");
        Tensor<T> out({n, d});
        Tensor<T> xhat({n, d});
        std::vector<T> inv_std(n);
        for (int r = 0; r < n; ++r) {
            const T* xr = xv.data.data() + static_cast<size_t>(r) * d;
            T mean = T(0);
            for (int c = 0; c < d; ++c) mean += xr[c];
            mean /= T(d);
            T var = T(0);
            for (int c = 0; c < d; ++c) {
                const T t = xr[c] - mean;
                var += t * t;
            }
            var /= T(d);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            T* hr = xhat.data.data() + static_cast<size_t>(r) * d;
            T* orow = out.data.data() + static_cast<size_t>(r) * d;
            for (int c = 0; c < d; ++c) {
                hr[c] = (xr[c] - mean) * is;
                orow[c] = hr[c] * gv.data[c] + bv.data[c];
            }
        }
        Var v = make(std::move(out), node(x).requires_grad || node(gamma).requires_grad ||
                                         node(beta).requires_grad);
        if (node(v).requires_grad) {
            auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
            auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
            node(v).backward = [this, x, gamma, beta, xh, istd, n, d](const Tensor<T>& g) {
                const auto& gv2 = val(gamma);
                Tensor<T> gx({n, d});
                Tensor<T> ggamma({1, d});
                Tensor<T> gbeta({1, d});
                for (int r = 0; r < n; ++r) {
                    const T* gr = g.data.data() + static_cast<size_t>(r) * d;
                    const T* hr = xh->data.data() + static_cast<size_t>(r) * d;
                    T sum_gh = T(0), sum_ghh = T(0);
                    for (int c = 0; c < d; ++c) {
                        ggamma.data[c] += gr[c] * hr[c];
                        gbeta.data[c] += gr[c];
                        const T gy = gr[c] * gv2.data[c];
                        sum_gh += gy;
                        sum_ghh += gy * hr[c];
                    }
                    T* gxr = gx.data.data() + static_cast<size_t>(r) * d;
                    for (int c = 0; c < d; ++c) {
                        const T gy = gr[c] * gv2.data[c];
                        gxr[c] = (*istd)[r] * (gy - sum_gh / T(d) - hr[c] * sum_ghh / T(d));
                    }
                }
                accum(x, gx);
                accum_reshaped(gamma, ggamma);
                accum_reshaped(beta, gbeta);
            };
        }
        return v;
    }

    // Row-wise L2 normalization: y_r = x_r / max(||x_r||, eps)
    Var l2norm_rows(Var x, T eps = T(1e-8)) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        Tensor<T> out({n, d});
        std::vector<T> norms(n);  // raw norms, pre-floor
        for (int r = 0; r < n; ++r) {
            const T* xr = xv.data.data() + static_cast<size_t>(r) * d;
            T s = T(0);
            for (int c = 0; c < d; ++c) s += xr[c] * xr[c];
            const T raw = std::sqrt(s);
            norms[r] = raw;
            const T nrm = raw < eps ? eps : raw;
            T* orow = out.data.data() + static_cast<size_t>(r) * d;
            for (int c = 0; c < d; ++c) orow[c] = xr[c] / nrm;
        }
        Var v = unary(std::move(out), x, nullptr);
        if (node(v).requires_grad) {
            auto nm = std::make_shared<std::vector<T>>(std::move(norms));
            node(v).backward = [this, x, v, nm, n, d, eps](const Tensor<T>& g) {
                const auto& y = val(v);
                Tensor<T> gx({n, d});
                for (int r = 0; r < n; ++r) {
                    const T* gr = g.data.data() + static_cast<size_t>(r) * d;
                    const T* yr = y.data.data() + static_cast<size_t>(r) * d;
                    T* gxr = gx.data.data() + static_cast<size_t>(r) * d;
                    const T raw = (*nm)[r];
                    if (raw < eps) {
                        // below the floor the mapping is x/eps (pure scaling)
                        for (int c = 0; c < d; ++c) gxr[c] = gr[c] / eps;
                    } else {
                        T dot = T(0);
                        for (int c = 0; c < d; ++c) dot += gr[c] * yr[c];
                        for (int c = 0; c < d; ++c) gxr[c] = (gr[c] - yr[c] * dot) / raw;
                    }
                }
                accum(x, gx);
            };
        }
        return v;
    }

    // ---- shape surgery ----

    Var slice_cols(Var x, int c0, int c1) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols(), w = c1 - c0;
        if (c0 < 0 || c1 > d || w <= 0) throw ShapeMismatch("slice_cols range");
        Tensor<T> out({n, w});
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < w; ++c) out.at(r, c) = xv.at(r, c0 + c);
        return unary(std::move(out), x, [this, x, c0, w, n, d](const Tensor<T>& g) {
            Tensor<T> gx({n, d});
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < w; ++c) gx.at(r, c0 + c) = g.data[static_cast<size_t>(r) * w + c];
            accum(x, gx);
        });
    }

    Var slice_rows(Var x, int r0, int r1) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols(), h = r1 - r0;
        if (r0 < 0 || r1 > n || h <= 0) throw ShapeMismatch("slice_rows range");
        Tensor<T> out({h, d});
        std::copy(xv.data.begin() + static_cast<size_t>(r0) * d,
                  xv.data.begin() + static_cast<size_t>(r1) * d, out.data.begin());
        return unary(std::move(out), x, [this, x, r0, h, n, d](const Tensor<T>& g) {
            Tensor<T> gx({n, d});
            std::copy(g.data.begin(), g.data.end(), gx.data.begin() + static_cast<size_t>(r0) * d);
            accum(x, gx);
        });
    }

    // Gather rows (duplicates allowed); gradient accumulates per source row.
    Var select_rows(Var x, std::vector<int> idx) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        const int m = static_cast<int>(idx.size());
        Tensor<T> out({m, d});
        for (int r = 0; r < m; ++r) {
            if (idx[r] < 0 || idx[r] >= n) throw ShapeMismatch("select_rows index");
            std::copy_n(xv.data.begin() + static_cast<size_t>(idx[r]) * d, d,
                        out.data.begin() + static_cast<size_t>(r) * d);
        }
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        return unary(std::move(out), x, [this, x, ix, n, d](const Tensor<T>& g) {
            Tensor<T> gx({n, d});
            for (size_t r = 0; r < ix->size(); ++r) {
                const T* gr = g.data.data() + r * d;
                T* dst = gx.data.data() + static_cast<size_t>((*ix)[r]) * d;
                for (int c = 0; c < d; ++c) dst[c] += gr[c];
            }
            accum(x, gx);
        });
    }

    Var concat_rows(const std::vector<Var>& xs) {
        if (xs.empty()) throw ShapeMismatch("concat_rows empty");
        const int d = val(xs[0]).cols();
        int n = 0;
        for (Var v : xs) {
            if (val(v).cols() != d) throw ShapeMismatch("concat_rows width");
            n += val(v).rows();
        }
        Tensor<T> out({n, d});
        size_t off = 0;
        for (Var v : xs) {
            std::copy(val(v).data.begin(), val(v).data.end(), out.data.begin() + off);
            off += val(v).size();
        }
        bool rg = false;
        for (Var v : xs) rg = rg || node(v).requires_grad;
        Var res = make(std::move(out), rg);
        if (rg) {
            auto parts = std::make_shared<std::vector<Var>>(xs);
            node(res).backward = [this, parts, d](const Tensor<T>& g) {
                size_t off2 = 0;
                for (Var v : *parts) {
                    const auto& vv = val(v);
                    Tensor<T> gv({vv.rows(), d});
                    std::copy(g.data.begin() + off2, g.data.begin() + off2 + gv.size(),
                              gv.data.begin());
                    off2 += gv.size();
                    accum(v, gv);
                }
            };
        }
        return res;
    }

    Var concat_cols(const std::vector<Var>& xs) {
        if (xs.empty()) throw ShapeMismatch("concat_cols empty");
        const int n = val(xs[0]).rows();
        int d = 0;
        for (Var v : xs) {
            if (val(v).rows() != n) throw ShapeMismatch("concat_cols height");
            d += val(v).cols();
        }
        Tensor<T> out({n, d});
        int c0 = 0;
        for (Var v : xs) {
            const auto& vv = val(v);
            for (int r = 0; r < n; ++r)
                std::copy_n(vv.data.begin() + static_cast<size_t>(r) * vv.cols(), vv.cols(),
                            out.data.begin() + static_cast<size_t>(r) * d + c0);
            c0 += vv.cols();
        }
        bool rg = false;
        for (Var v : xs) rg = rg || node(v).requires_grad;
        Var res = make(std::move(out), rg);
        if (rg) {
            auto parts = std::make_shared<std::vector<Var>>(xs);
            node(res).backward = [this, parts, n, d](const Tensor<T>& g) {
                int off = 0;
                for (Var v : *parts) {
                    const auto& vv = val(v);
                    Tensor<T> gv({n, vv.cols()});
                    for (int r = 0; r < n; ++r)
                        std::copy_n(g.data.begin() + static_cast<size_t>(r) * d + off, vv.cols(),
                                    gv.data.begin() + static_cast<size_t>(r) * vv.cols());
                    off += vv.cols();
                    accum(v, gv);
                }
            };
        }
        return res;
    }

    // {C, h, w} -> (h*w, C) row per spatial position.
    Var chw_to_rows(Var x) {
        const auto& xv = val(x);
        if (xv.rank() != 3) throw ShapeMismatch("chw_to_rows rank");
        const int C = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
        Tensor<T> out({h * w, C});
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < h * w; ++p)
                out.data[static_cast<size_t>(p) * C + c] = xv.data[static_cast<size_t>(c) * h * w + p];
        return unary(std::move(out), x, [this, x, C, h, w](const Tensor<T>& g) {
            Tensor<T> gx({C, h, w});
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < h * w; ++p)
                    gx.data[static_cast<size_t>(c) * h * w + p] = g.data[static_cast<size_t>(p) * C + c];
            accum(x, gx);
        });
    }

    // (h*w, C) -> {C, h, w}
    Var rows_to_chw(Var x, int h, int w) {
        const auto& xv = val(x);
        if (xv.rows() != h * w) throw ShapeMismatch("rows_to_chw rows");
        const int C = xv.cols();
        Tensor<T> out({C, h, w});
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < h * w; ++p)
                out.data[static_cast<size_t>(c) * h * w + p] = xv.data[static_cast<size_t>(p) * C + c];
        return unary(std::move(out), x, [this, x, C, h, w](const Tensor<T>& g) {
            Tensor<T> gx({h * w, C});
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < h * w; ++p)
                    gx.data[static_cast<size_t>(p) * C + c] = g.data[static_cast<size_t>(c) * h * w + p];
            accum(x, gx);
        });
    }

    // Replace rows flagged in `mask` with a learned token (1 x d), broadcast.
    Var mask_rows(Var x, Var token, const std::vector<char>& mask) {
        const auto& xv = val(x);
        const auto& tv = val(token);
        const int n = xv.rows(), d = xv.cols();
        if (static_cast<int>(mask.size()) != n) throw ShapeMismatch("mask_rows length");
        if (static_cast<int>(tv.size()) != d) throw ShapeMismatch("mask_rows token dim");
        Tensor<T> out = xv;
        for (int r = 0; r < n; ++r)
            if (mask[r])
                std::copy_n(tv.data.begin(), d, out.data.begin() + static_cast<size_t>(r) * d);
        auto m = std::make_shared<std::vector<char>>(mask);
        return unary_or_binary(std::move(out), x, token, [this, x, token, m, n, d](const Tensor<T>& g) {
            Tensor<T> gx = g;
            Tensor<T> gt({1, d});
            for (int r = 0; r < n; ++r) {
                if ((*m)[r]) {
                    T* gr = gx.data.data() + static_cast<size_t>(r) * d;
                    for (int c = 0; c < d; ++c) {
                        gt.data[c] += gr[c];
                        gr[c] = T(0);
                    }
                }
            }
            accum(x, gx);
            accum_reshaped(token, gt);
        });
    }

    // ---- reductions ----

    Var mean_rows(Var x) {
        const auto& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        Tensor<T> out({1, d});
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) out.data[c] += xv.at(r, c);
        for (auto& v : out.data) v /= T(n);
        return unary(std::move(out), x, [this, x, n, d](const Tensor<T>& g) {
            Tensor<T> gx({n, d});
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gx.at(r, c) = g.data[c] / T(n);
            accum(x, gx);
        });
    }

    Var sum_all(Var x) {
        const auto& xv = val(x);
        T s = T(0);
        for (T v : xv.data) s += v;
        return unary(Tensor<T>::scalar(s), x, [this, x](const Tensor<T>& g) {
            Tensor<T> gx = val(x);
            std::fill(gx.data.begin(), gx.data.end(), g.data[0]);
            accum(x, gx);
        });
    }

    Var mean_all(Var x) { return scale(sum_all(x), T(1) / T(val(x).size())); }

    // <x, w> with constant weights
    Var dot_const(Var x, Tensor<T> w) {
        const auto& xv = val(x);
        if (!xv.same_shape(w) && xv.size() != w.size()) throw ShapeMismatch("dot_const");
        T s = T(0);
        for (size_t i = 0; i < xv.size(); ++i) s += xv.data[i] * w.data[i];
        auto wp = std::make_shared<Tensor<T>>(std::move(w));
        return unary(Tensor<T>::scalar(s), x, [this, x, wp](const Tensor<T>& g) {
            Tensor<T> gx = *wp;
            for (auto& v : gx.data) v *= g.data[0];
            gx.shape = val(x).shape;
            accum(x, gx);
        });
    }

    // ---- losses ----

    // Mean over rows of -sum_k p[r][k] * log softmax(logits[r]/tau)[k], with
    // constant target probabilities. Rows of p may sum to anything >= 0; the
    // usual case is probability rows.
    Var cross_entropy_rows(Var logits, Tensor<T> probs, T tau) {
        const auto& lv = val(logits);
        const int n = lv.rows(), d = lv.cols();
        if (!lv.same_shape(probs)) throw ShapeMismatch("cross_entropy_rows target shape");
        if (tau <= T(0)) throw DomainError("cross_entropy_rows: temperature must be positive");
        Tensor<T> soft({n, d});
        T loss = T(0);
        for (int r = 0; r < n; ++r) {
            const T* lr = lv.data.data() + static_cast<size_t>(r) * d;
            T* sr = soft.data.data() + static_cast<size_t>(r) * d;
            T mx = lr[0] / tau;
            for (int c = 1; c < d; ++c) mx = std::max(mx, lr[c] / tau);
            T sum = T(0);
            for (int c = 0; c < d; ++c) {
                sr[c] = std::exp(lr[c] / tau - mx);
                sum += sr[c];
            }
            const T logsum = std::log(sum);
            for (int c = 0; c < d; ++c) {
                const T logp = lr[c] / tau - mx - logsum;
                loss -= probs.at(r, c) * logp;
                sr[c] /= sum;
            }
        }
        loss /= T(n);
        auto sp = std::make_shared<Tensor<T>>(std::move(soft));
        auto pp = std::make_shared<Tensor<T>>(std::move(probs));
        return unary(Tensor<T>::scalar(loss), logits, [this, logits, sp, pp, n, d, tau](const Tensor<T>& g) {
            Tensor<T> gl({n, d});
            const T c0 = g.data[0] / (tau * T(n));
            for (int r = 0; r < n; ++r) {
                T mass = T(0);
                for (int c = 0; c < d; ++c) mass += pp->at(r, c);
                for (int c = 0; c < d; ++c)
                    gl.at(r, c) = c0 * (mass * sp->at(r, c) - pp->at(r, c));
            }
            accum(logits, gl);
        });
    }

    // KoLeo: rows are L2-normalized first; loss = -(1/n) sum_i log(max(d_i, eps)),
    // d_i = distance to nearest other row. Neighbor choice is treated as constant.
    Var koleo(Var x, T eps = T(1e-8)) {
        Var xn = l2norm_rows(x);
        const auto& xv = val(xn);
        const int n = xv.rows(), d = xv.cols();
        if (n < 2) throw TooFewPoints("koleo needs >= 2 rows");
        std::vector<int> nn(n);
        std::vector<T> dist(n);
        for (int i = 0; i < n; ++i) {
            T best = std::numeric_limits<T>::max();
            int bj = -1;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                T s = T(0);
                for (int c = 0; c < d; ++c) {
                    const T t = xv.at(i, c) - xv.at(j, c);
                    s += t * t;
                }
                if (s < best) {
                    best = s;
                    bj = j;
                }
            }
            nn[i] = bj;
            dist[i] = std::sqrt(best);
        }
        T loss = T(0);
        for (int i = 0; i < n; ++i) loss -= std::log(std::max(dist[i], eps));
        loss /= T(n);
        auto nnp = std::make_shared<std::vector<int>>(std::move(nn));
        auto dp = std::make_shared<std::vector<T>>(std::move(dist));
        return unary(Tensor<T>::scalar(loss), xn, [this, xn, nnp, dp, n, d, eps](const Tensor<T>& g) {
            const auto& xv2 = val(xn);
            Tensor<T> gx({n, d});
            const T c0 = -g.data[0] / T(n);
            for (int i = 0; i < n; ++i) {
                const T di = (*dp)[i];
                if (di <= eps) continue;  // clamped: zero gradient
                const int j = (*nnp)[i];
                const T coef = c0 / (di * di);
                for (int c = 0; c < d; ++c) {
                    const T diff = xv2.at(i, c) - xv2.at(j, c);
                    gx.at(i, c) += coef * diff;
                    gx.at(j, c) -= coef * diff;
                }
            }
            accum(xn, gx);
        });
    }

    // ---- convolution / spatial ops (rank-3 {C,H,W}) ----

    // weight (Cout, Cin*kh*kw), bias (Cout)
    Var conv2d(Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
        const auto& xv = val(x);
        if (xv.rank() != 3) throw ShapeMismatch("conv2d input rank");
        const int Cin = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
        const auto& wv = val(w);
        const int Cout = wv.rows();
        if (wv.cols() != Cin * kh * kw) throw ShapeMismatch("conv2d weight dims");
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw ShapeMismatch("conv2d output dims");

        // im2col (Ho*Wo, Cin*kh*kw)
        Tensor<T> col({Ho * Wo, Cin * kh * kw});
        im2col(xv, col, Cin, H, W, kh, kw, stride, pad, Ho, Wo);

        Tensor<T> outm({Ho * Wo, Cout});
        as_mat2(outm).noalias() = as_mat2(col) * as_mat2(wv).transpose();
        Tensor<T> out({Cout, Ho, Wo});
        const auto& bv = val(b);
        for (int c = 0; c < Cout; ++c)
            for (int p = 0; p < Ho * Wo; ++p)
                out.data[static_cast<size_t>(c) * Ho * Wo + p] =
                    outm.data[static_cast<size_t>(p) * Cout + c] + bv.data[c];

        bool rg = node(x).requires_grad || node(w).requires_grad || node(b).requires_grad;
        Var res = make(std::move(out), rg);
        if (rg) {
            auto colp = std::make_shared<Tensor<T>>(std::move(col));
            node(res).backward = [this, x, w, b, colp, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                  Cout](const Tensor<T>& g) {
                // g is {Cout, Ho, Wo}; reorder to (Ho*Wo, Cout)
                Tensor<T> gm({Ho * Wo, Cout});
                Tensor<T> gb({1, Cout});
                for (int c = 0; c < Cout; ++c) {
                    T s = T(0);
                    for (int p = 0; p < Ho * Wo; ++p) {
                        const T v = g.data[static_cast<size_t>(c) * Ho * Wo + p];
                        gm.data[static_cast<size_t>(p) * Cout + c] = v;
                        s += v;
                    }
                    gb.data[c] = s;
                }
                const auto& wv2 = val(w);
                Tensor<T> gw({Cout, Cin * kh * kw});
                as_mat2(gw).noalias() = as_mat2(gm).transpose() * as_mat2(*colp);
                Tensor<T> gcol({Ho * Wo, Cin * kh * kw});
                as_mat2(gcol).noalias() = as_mat2(gm) * as_mat2(wv2);
                Tensor<T> gx({Cin, H, W});
                col2im(gcol, gx, Cin, H, W, kh, kw, stride, pad, Ho, Wo);
                accum(x, gx);
                accum(w, gw);
                accum_reshaped(b, gb);
            };
        }
        return res;
    }

    Var avgpool2x2(Var x) {
        const auto& xv = val(x);
        if (xv.rank() != 3) throw ShapeMismatch("avgpool2x2 rank");
        const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
        if (H % 2 || W % 2) throw ShapeMismatch("avgpool2x2 odd dims");
        const int Ho = H / 2, Wo = W / 2;
        Tensor<T> out({C, Ho, Wo});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    const size_t base = (static_cast<size_t>(c) * H + 2 * i) * W + 2 * j;
                    out.data[(static_cast<size_t>(c) * Ho + i) * Wo + j] =
                        (xv.data[base] + xv.data[base + 1] + xv.data[base + W] +
                         xv.data[base + W + 1]) /
                        T(4);
                }
        return unary(std::move(out), x, [this, x, C, H, W, Ho, Wo](const Tensor<T>& g) {
            Tensor<T> gx({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < Ho; ++i)
                    for (int j = 0; j < Wo; ++j) {
                        const T v = g.data[(static_cast<size_t>(c) * Ho + i) * Wo + j] / T(4);
                        const size_t base = (static_cast<size_t>(c) * H + 2 * i) * W + 2 * j;
                        gx.data[base] += v;
                        gx.data[base + 1] += v;
                        gx.data[base + W] += v;
                        gx.data[base + W + 1] += v;
                    }
            accum(x, gx);
        });
    }

    Var upsample2x_nearest(Var x) {
        const auto& xv = val(x);
        if (xv.rank() != 3) throw ShapeMismatch("upsample2x rank");
        const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
        Tensor<T> out({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j)
                    out.data[(static_cast<size_t>(c) * 2 * H + i) * 2 * W + j] =
                        xv.data[(static_cast<size_t>(c) * H + i / 2) * W + j / 2];
        return unary(std::move(out), x, [this, x, C, H, W](const Tensor<T>& g) {
            Tensor<T> gx({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < 2 * H; ++i)
                    for (int j = 0; j < 2 * W; ++j)
                        gx.data[(static_cast<size_t>(c) * H + i / 2) * W + j / 2] +=
                            g.data[(static_cast<size_t>(c) * 2 * H + i) * 2 * W + j];
            accum(x, gx);
        });
    }

    // Bilinear resize with align_corners=true semantics; exact at corners.
    Var bilinear_resize(Var x, int Ho, int Wo) {
        const auto& xv = val(x);
        if (xv.rank() != 3) throw ShapeMismatch("bilinear_resize rank");
        const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
        if (Ho < 1 || Wo < 1) throw ShapeMismatch("bilinear_resize target");
        // precompute sampling weights
        struct Samp {
            int i0, i1;
            T w0, w1;
        };
        auto make_axis = [](int src, int dst) {
            std::vector<Samp> s(dst);
            for (int i = 0; i < dst; ++i) {
                double pos = (dst == 1 || src == 1)
                                 ? 0.0
                                 : static_cast<double>(i) * (src - 1) / (dst - 1);
                int i0 = static_cast<int>(std::floor(pos));
                if (i0 >= src - 1) i0 = src - 1;
                int i1 = std::min(i0 + 1, src - 1);
                double f = pos - i0;
                s[i] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
            }
            return s;
        };
        auto ys = std::make_shared<std::vector<Samp>>(make_axis(H, Ho));
        auto xs = std::make_shared<std::vector<Samp>>(make_axis(W, Wo));
        Tensor<T> out({C, Ho, Wo});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    const auto& sy = (*ys)[i];
                    const auto& sx = (*xs)[j];
                    const size_t base = static_cast<size_t>(c) * H * W;
                    out.data[(static_cast<size_t>(c) * Ho + i) * Wo + j] =
                        sy.w0 * (sx.w0 * xv.data[base + static_cast<size_t>(sy.i0) * W + sx.i0] +
                                 sx.w1 * xv.data[base + static_cast<size_t>(sy.i0) * W + sx.i1]) +
                        sy.w1 * (sx.w0 * xv.data[base + static_cast<size_t>(sy.i1) * W + sx.i0] +
                                 sx.w1 * xv.data[base + static_cast<size_t>(sy.i1) * W + sx.i1]);
                }
        return unary(std::move(out), x, [this, x, ys, xs, C, H, W, Ho, Wo](const Tensor<T>& g) {
            Tensor<T> gx({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < Ho; ++i)
                    for (int j = 0; j < Wo; ++j) {
                        const auto& sy = (*ys)[i];
                        const auto& sx = (*xs)[j];
                        const T gv = g.data[(static_cast<size_t>(c) * Ho + i) * Wo + j];
                        const size_t base = static_cast<size_t>(c) * H * W;
                        gx.data[base + static_cast<size_t>(sy.i0) * W + sx.i0] += sy.w0 * sx.w0 * gv;
                        gx.data[base + static_cast<size_t>(sy.i0) * W + sx.i1] += sy.w0 * sx.w1 * gv;
                        gx.data[base + static_cast<size_t>(sy.i1) * W + sx.i0] += sy.w1 * sx.w0 * gv;
                        gx.data[base + static_cast<size_t>(sy.i1) * W + sx.i1] += sy.w1 * sx.w1 * gv;
                    }
            accum(x, gx);
        });
    }

    // Fast-normalized weighted fusion: sum relu(w_i) x_i / (sum relu(w_i) + eps).
    Var weighted_fusion(const std::vector<Var>& xs, Var w, T eps = T(1e-4)) {
        const int k = static_cast<int>(xs.size());
        const auto& wv = val(w);
        if (static_cast<int>(wv.size()) != k) throw ShapeMismatch("weighted_fusion weight count");
        for (Var v : xs)
            if (!val(v).same_shape(val(xs[0]))) throw ShapeMismatch("weighted_fusion shapes");
        std::vector<T> rw(k);
        T denom = eps;
        for (int i = 0; i < k; ++i) {
            rw[i] = std::max(wv.data[i], T(0));
            denom += rw[i];
        }
        Tensor<T> out = val(xs[0]);
        std::fill(out.data.begin(), out.data.end(), T(0));
        for (int i = 0; i < k; ++i) {
            const T c = rw[i] / denom;
            const auto& xv = val(xs[i]);
            for (size_t p = 0; p < out.size(); ++p) out.data[p] += c * xv.data[p];
        }
        bool rg = node(w).requires_grad;
        for (Var v : xs) rg = rg || node(v).requires_grad;
        Var res = make(std::move(out), rg);
        if (rg) {
            auto parts = std::make_shared<std::vector<Var>>(xs);
            auto rwp = std::make_shared<std::vector<T>>(std::move(rw));
            node(res).backward = [this, parts, w, rwp, denom, k](const Tensor<T>& g) {
                Tensor<T> gw({1, k});
                for (int i = 0; i < k; ++i) {
                    const T c = (*rwp)[i] / denom;
                    Tensor<T> gx = g;
                    for (auto& v : gx.data) v *= c;
                    accum((*parts)[i], gx);
                    // relu gate on w_i: zero slope at or below 0
                    if (val(w).data[i] > T(0)) {
                        // d c_j / d rw_i = (delta_ij * denom - rw_j) / denom^2
                        T s = T(0);
                        const auto& xi = val((*parts)[i]);
                        for (size_t p = 0; p < g.size(); ++p) {
                            T mix = T(0);
                            for (int j = 0; j < k; ++j)
                                mix += (*rwp)[j] * val((*parts)[j]).data[p];
                            s += g.data[p] * (xi.data[p] * denom - mix) / (denom * denom);
                        }
                        gw.data[i] = s;
                    }
                }
                accum_reshaped(w, gw);
            };
        }
        return res;
    }

    // Softmax cross-entropy over a {C,H,W} logit map vs integer labels, mean
    // over pixels whose label != ignore_index.
    Var softmax_ce_map(Var logits, std::vector<int> labels, int ignore_index) {
        const auto& lv = val(logits);
        if (lv.rank() != 3) throw ShapeMismatch("softmax_ce_map rank");
        const int C = lv.shape[0], H = lv.shape[1], W = lv.shape[2];
        if (static_cast<int>(labels.size()) != H * W) throw ShapeMismatch("softmax_ce_map labels");
        int m = 0;
        T loss = T(0);
        Tensor<T> soft({C, H, W});
        for (int p = 0; p < H * W; ++p) {
            T mx = lv.data[p];
            for (int c = 1; c < C; ++c)
                mx = std::max(mx, lv.data[static_cast<size_t>(c) * H * W + p]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                const T e = std::exp(lv.data[static_cast<size_t>(c) * H * W + p] - mx);
                soft.data[static_cast<size_t>(c) * H * W + p] = e;
                sum += e;
            }
            for (int c = 0; c < C; ++c) soft.data[static_cast<size_t>(c) * H * W + p] /= sum;
            const int lab = labels[p];
            if (lab == ignore_index) continue;
            if (lab < 0 || lab >= C) throw ShapeMismatch("softmax_ce_map label range");
            ++m;
            loss -= std::log(std::max(soft.data[static_cast<size_t>(lab) * H * W + p], T(1e-12)));
        }
        if (m == 0) throw NoLabeledPixels("softmax_ce_map: all pixels ignored");
        loss /= T(m);
        auto sp = std::make_shared<Tensor<T>>(std::move(soft));
        auto lp = std::make_shared<std::vector<int>>(std::move(labels));
        return unary(Tensor<T>::scalar(loss), logits,
                     [this, logits, sp, lp, C, H, W, m, ignore_index](const Tensor<T>& g) {
                         Tensor<T> gl({C, H, W});
                         const T c0 = g.data[0] / T(m);
                         for (int p = 0; p < H * W; ++p) {
                             const int lab = (*lp)[p];
                             if (lab == ignore_index) continue;
                             for (int c = 0; c < C; ++c) {
                                 T v = sp->data[static_cast<size_t>(c) * H * W + p];
                                 if (c == lab) v -= T(1);
                                 gl.data[static_cast<size_t>(c) * H * W + p] = c0 * v;
                             }
                         }
                         accum(logits, gl);
                     });
    }

    // ---- backward ----

    void backward(Var loss) {
        if (!recording_) throw DomainError("backward on non-recording graph");
        if (val(loss).size() != 1) throw ShapeMismatch("backward: loss must be scalar");
        for (auto& n : nodes_) n.grad.data.clear();
        nodes_[loss].grad = Tensor<T>::scalar(T(1));
        nodes_[loss].grad.shape = nodes_[loss].value.shape;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[i];
            if (n.backward && !n.grad.data.empty()) n.backward(n.grad);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(const Tensor<T>&)> backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    bool recording_;

    Node& node(Var v) { return nodes_[v]; }
    const Tensor<T>& val(Var v) const { return nodes_[v].value; }

    Var make(Tensor<T> v, bool requires_grad) {
        nodes_.push_back(Node{std::move(v), {}, nullptr, requires_grad && recording_});
        return static_cast<Var>(nodes_.size() - 1);
    }

    Var unary(Tensor<T> out, Var a, std::function<void(const Tensor<T>&)> bw) {
        Var v = make(std::move(out), node(a).requires_grad);
        if (node(v).requires_grad) node(v).backward = std::move(bw);
        return v;
    }

    Var unary_or_binary(Tensor<T> out, Var a, Var b, std::function<void(const Tensor<T>&)> bw) {
        Var v = make(std::move(out), node(a).requires_grad || node(b).requires_grad);
        if (node(v).requires_grad) node(v).backward = std::move(bw);
        return v;
    }

    void check_same(Var a, Var b, const char* op) {
        if (!val(a).same_shape(val(b))) throw ShapeMismatch(std::string(op) + " shapes differ");
    }

    void accum(Var v, const Tensor<T>& g) {
        auto& n = nodes_[v];
        if (!n.requires_grad) return;
        if (n.grad.data.empty()) {
            n.grad = g;
        } else {
            for (size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
        }
    }

    // Same as accum but ignores a {1,d} vs {d} shape difference for vectors.
    void accum_reshaped(Var v, Tensor<T> g) {
        auto& n = nodes_[v];
        if (!n.requires_grad) return;
        g.shape = n.value.shape;
        accum(v, g);
    }

    static void im2col(const Tensor<T>& x, Tensor<T>& col, int Cin, int H, int W, int kh, int kw,
                       int stride, int pad, int Ho, int Wo) {
        const int K = Cin * kh * kw;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                T* dst = col.data.data() + (static_cast<size_t>(i) * Wo + j) * K;
                int idx = 0;
                for (int c = 0; c < Cin; ++c)
                    for (int di = 0; di < kh; ++di)
                        for (int dj = 0; dj < kw; ++dj, ++idx) {
                            const int si = i * stride + di - pad;
                            const int sj = j * stride + dj - pad;
                            dst[idx] = (si < 0 || si >= H || sj < 0 || sj >= W)
                                           ? T(0)
                                           : x.data[(static_cast<size_t>(c) * H + si) * W + sj];
                        }
            }
    }

    static void col2im(const Tensor<T>& col, Tensor<T>& x, int Cin, int H, int W, int kh, int kw,
                       int stride, int pad, int Ho, int Wo) {
        const int K = Cin * kh * kw;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const T* src = col.data.data() + (static_cast<size_t>(i) * Wo + j) * K;
                int idx = 0;
                for (int c = 0; c < Cin; ++c)
                    for (int di = 0; di < kh; ++di)
                        for (int dj = 0; dj < kw; ++dj, ++idx) {
                            const int si = i * stride + di - pad;
                            const int sj = j * stride + dj - pad;
                            if (si >= 0 && si < H && sj >= 0 && sj < W)
                                x.data[(static_cast<size_t>(c) * H + si) * W + sj] += src[idx];
                        }
            }
    }
};

}  // namespace dsd
