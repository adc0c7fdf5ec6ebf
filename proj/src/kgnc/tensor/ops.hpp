#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "kgnc/sparse.hpp"
#include "kgnc/tensor/tensor.hpp"

namespace kgnc {

// Sparse constant operand (adjacency). Holds the matrix and its transpose so
// backward passes can scatter without rebuilding index structures.
template <class T>
struct SparseRef {
    std::shared_ptr<const Csr<T>> mat;
    std::shared_ptr<const Csr<T>> tr;

    static SparseRef make(Csr<T> m) {
        SparseRef r;
        r.tr = std::make_shared<const Csr<T>>(m.transposed());
        r.mat = std::make_shared<const Csr<T>>(std::move(m));
        return r;
    }
    const Csr<T>& operator*() const { return *mat; }
    const Csr<T>* operator->() const { return mat.get(); }
};

namespace detail {

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const T* bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& ga = grad_of(n.parents[0]);
        auto& gb = grad_of(n.parents[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.values());
    for (T& v : out) v *= c;
    return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [c](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

// Adds a length-c row vector to every row of an r x c matrix (layer bias).
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& m, const Tensor<T>& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
        throw ShapeError("add_rowvec: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    std::vector<T> out(m.values());
    const T* vv = v.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += vv[c];
    return Tensor<T>::from_op(m.shape(), std::move(out), {m, v}, [rows, cols](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gm = grad_of(n.parents[0]);
        auto& gv = grad_of(n.parents[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
    });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    const T* av = a.data();
    const T* bv = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T x = av[i * k + p];
            if (x == T(0)) continue;
            const T* brow = bv + p * n;
            T* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& node) {
        auto& g = *node.grad;
        auto& ga = grad_of(node.parents[0]);
        auto& gb = grad_of(node.parents[1]);
        const auto& av2 = *node.parents[0]->values;
        const auto& bv2 = *node.parents[1]->values;
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                T acc = T(0);
                const T* grow = g.data() + i * n;
                const T* brow = bv2.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                ga[i * k + p] += acc;
            }
        // dB = A^T * G
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
                const T x = av2[i * k + p];
                if (x == T(0)) continue;
                const T* grow = g.data() + i * n;
                T* brow = gb.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) brow[j] += x * grow[j];
            }
    });
}

// Y = A * X with A a constant sparse matrix; gradient reaches X only.
template <class T>
Tensor<T> sparse_matmul(const SparseRef<T>& a, const Tensor<T>& x) {
    if (x.rank() != 2 || a->cols != x.dim(0))
        throw ShapeError("sparse_matmul: [" + std::to_string(a->rows) + "x" +
                         std::to_string(a->cols) + "] * " + shape_str(x.shape()));
    const std::size_t n = a->rows, d = x.dim(1);
    std::vector<T> out(n * d, T(0));
    const T* xv = x.data();
    const Csr<T>& m = *a.mat;
    for (std::uint32_t i : m.nonzero_rows) {
        T* orow = out.data() + std::size_t(i) * d;
        for (std::size_t kk = m.row_ptr[i]; kk < m.row_ptr[i + 1]; ++kk) {
            const T w = m.val[kk];
            const T* xrow = xv + std::size_t(m.col[kk]) * d;
            for (std::size_t j = 0; j < d; ++j) orow[j] += w * xrow[j];
        }
    }
    auto tr = a.tr;
    return Tensor<T>::from_op({n, d}, std::move(out), {x}, [tr, d](TensorNode<T>& node) {
        auto& g = *node.grad;
        auto& gx = grad_of(node.parents[0]);
        const Csr<T>& t = *tr;
        for (std::uint32_t j : t.nonzero_rows) {
            T* grow = gx.data() + std::size_t(j) * d;
            for (std::size_t kk = t.row_ptr[j]; kk < t.row_ptr[j + 1]; ++kk) {
                const T w = t.val[kk];
                const T* gsrc = g.data() + std::size_t(t.col[kk]) * d;
                for (std::size_t c = 0; c < d; ++c) grow[c] += w * gsrc[c];
            }
        }
    });
}

// Y = (A * X) * W computed row-sparse: rows of A without entries produce zero
// output rows and are skipped entirely. The aggregated rows (A*X) are kept
// for the weight gradient.
template <class T>
Tensor<T> sparse_project(const SparseRef<T>& a, const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 2 || w.rank() != 2 || a->cols != x.dim(0) || x.dim(1) != w.dim(0))
        throw ShapeError("sparse_project: [" + std::to_string(a->rows) + "x" +
                         std::to_string(a->cols) + "] * " + shape_str(x.shape()) + " * " +
                         shape_str(w.shape()));
    const std::size_t n = a->rows, f = x.dim(1), l = w.dim(1);
    const Csr<T>& m = *a.mat;
    const std::size_t active = m.nonzero_rows.size();
    auto agg = std::make_shared<std::vector<T>>(active * f, T(0)); // A*X, active rows only
    std::vector<T> out(n * l, T(0));
    const T* xv = x.data();
    const T* wv = w.data();
    for (std::size_t ai = 0; ai < active; ++ai) {
        const std::uint32_t i = m.nonzero_rows[ai];
        T* arow = agg->data() + ai * f;
        for (std::size_t kk = m.row_ptr[i]; kk < m.row_ptr[i + 1]; ++kk) {
            const T s = m.val[kk];
            const T* xrow = xv + std::size_t(m.col[kk]) * f;
            for (std::size_t j = 0; j < f; ++j) arow[j] += s * xrow[j];
        }
        T* orow = out.data() + std::size_t(i) * l;
        for (std::size_t j = 0; j < f; ++j) {
            const T v = arow[j];
            if (v == T(0)) continue;
            const T* wrow = wv + j * l;
            for (std::size_t c = 0; c < l; ++c) orow[c] += v * wrow[c];
        }
    }
    auto mat = a.mat;
    auto tr = a.tr;
    return Tensor<T>::from_op(
        {n, l}, std::move(out), {x, w}, [mat, tr, agg, n, f, l](TensorNode<T>& node) {
            auto& g = *node.grad;
            auto& gx = grad_of(node.parents[0]);
            auto& gw = grad_of(node.parents[1]);
            const auto& wv2 = *node.parents[1]->values;
            const Csr<T>& m2 = *mat;
            const std::size_t active = m2.nonzero_rows.size();
            // dW += (A*X)^T G over active rows; dZ = G W^T for active rows.
            std::vector<T> gz(n * f, T(0));
            for (std::size_t ai = 0; ai < active; ++ai) {
                const std::uint32_t i = m2.nonzero_rows[ai];
                const T* grow = g.data() + std::size_t(i) * l;
                const T* arow = agg->data() + ai * f;
                T* gzrow = gz.data() + std::size_t(i) * f;
                for (std::size_t j = 0; j < f; ++j) {
                    const T av = arow[j];
                    T* gwrow = gw.data() + j * l;
                    const T* w2row = wv2.data() + j * l;
                    T acc = T(0);
                    for (std::size_t c = 0; c < l; ++c) {
                        gwrow[c] += av * grow[c];
                        acc += w2row[c] * grow[c];
                    }
                    gzrow[j] = acc;
                }
            }
            // dX = A^T * gz
            const Csr<T>& t = *tr;
            for (std::uint32_t j : t.nonzero_rows) {
                T* grow = gx.data() + std::size_t(j) * f;
                for (std::size_t kk = t.row_ptr[j]; kk < t.row_ptr[j + 1]; ++kk) {
                    const T s = t.val[kk];
                    const T* src = gz.data() + std::size_t(t.col[kk]) * f;
                    for (std::size_t c = 0; c < f; ++c) grow[c] += s * src[c];
                }
            }
        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.values());
    for (T& v : out)
        if (v < T(0)) v = T(0);
    return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        const auto& y = *n.values;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (y[i] > T(0)) gx[i] += g[i];
    });
}

// ---- 1-D convolution over (channels x length) inputs ----

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t pad) {
    if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
        throw ShapeError("conv1d: bad ranks");
    const std::size_t cin = x.dim(0), len = x.dim(1);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin || b.dim(0) != cout)
        throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
    if (len + 2 * pad < k)
        throw ShapeError("conv1d: input length " + std::to_string(len) + " with padding " +
                         std::to_string(pad) + " shorter than kernel " + std::to_string(k));
    const std::size_t lp = len + 2 * pad;
    const std::size_t lout = lp - k + 1;

    auto xp = std::make_shared<std::vector<T>>(cin * lp, T(0));
    const T* xv = x.data();
    for (std::size_t c = 0; c < cin; ++c)
        std::copy(xv + c * len, xv + (c + 1) * len, xp->data() + c * lp + pad);

    std::vector<T> out(cout * lout);
    const T* wv = w.data();
    const T* bv = b.data();
    for (std::size_t f = 0; f < cout; ++f) {
        T* orow = out.data() + f * lout;
        std::fill(orow, orow + lout, bv[f]);
        for (std::size_t c = 0; c < cin; ++c) {
            const T* xrow = xp->data() + c * lp;
            const T* wrow = wv + (f * cin + c) * k;
            for (std::size_t dk = 0; dk < k; ++dk) {
                const T wgt = wrow[dk];
                const T* xs = xrow + dk;
                for (std::size_t t = 0; t < lout; ++t) orow[t] += wgt * xs[t];
            }
        }
    }
    return Tensor<T>::from_op(
        {cout, lout}, std::move(out), {x, w, b},
        [xp, cin, cout, k, lp, lout, pad, len](TensorNode<T>& n) {
            auto& g = *n.grad;
            auto& gx = grad_of(n.parents[0]);
            auto& gw = grad_of(n.parents[1]);
            auto& gb = grad_of(n.parents[2]);
            const auto& wv2 = *n.parents[1]->values;
            std::vector<T> gxp(cin * lp, T(0));
            for (std::size_t f = 0; f < cout; ++f) {
                const T* grow = g.data() + f * lout;
                T acc = T(0);
                for (std::size_t t = 0; t < lout; ++t) acc += grow[t];
                gb[f] += acc;
                for (std::size_t c = 0; c < cin; ++c) {
                    const T* xrow = xp->data() + c * lp;
                    T* gxrow = gxp.data() + c * lp;
                    const T* wrow = wv2.data() + (f * cin + c) * k;
                    T* gwrow = gw.data() + (f * cin + c) * k;
                    for (std::size_t dk = 0; dk < k; ++dk) {
                        const T* xs = xrow + dk;
                        T* gxs = gxrow + dk;
                        const T wgt = wrow[dk];
                        T wacc = T(0);
                        for (std::size_t t = 0; t < lout; ++t) {
                            wacc += grow[t] * xs[t];
                            gxs[t] += wgt * grow[t];
                        }
                        gwrow[dk] += wacc;
                    }
                }
            }
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t t = 0; t < len; ++t) gx[c * len + t] += gxp[c * lp + pad + t];
        });
}

// conv1d specialised for one-hot inputs given as symbol indices. Equivalent
// to conv1d on the dense V x L one-hot matrix but touches only the active
// rows; the input is constant so no gradient flows into it.
template <class T>
Tensor<T> conv1d_onehot(const std::vector<std::uint32_t>& idx, std::size_t vocab,
                        const Tensor<T>& w, const Tensor<T>& b, std::size_t pad) {
    if (w.rank() != 3 || w.dim(1) != vocab || b.rank() != 1 || b.dim(0) != w.dim(0))
        throw ShapeError("conv1d_onehot: bad weight shape " + shape_str(w.shape()));
    const std::size_t len = idx.size();
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (len + 2 * pad < k) throw ShapeError("conv1d_onehot: input too short");
    const std::size_t lp = len + 2 * pad;
    const std::size_t lout = lp - k + 1;
    std::vector<T> out(cout * lout);
    const T* wv = w.data();
    const T* bv = b.data();
    for (std::size_t f = 0; f < cout; ++f) {
        T* orow = out.data() + f * lout;
        std::fill(orow, orow + lout, bv[f]);
        const T* wbase = wv + f * vocab * k;
        for (std::size_t t = 0; t < lout; ++t) {
            T acc = T(0);
            // positions t..t+k-1 in the padded frame; padding columns are all-zero
            const std::size_t d0 = t >= pad ? 0 : pad - t;
            const std::size_t d1 = std::min(k, len + pad - t);
            for (std::size_t dk = d0; dk < d1; ++dk)
                acc += wbase[std::size_t(idx[t + dk - pad]) * k + dk];
            orow[t] += acc;
        }
    }
    auto indices = std::make_shared<std::vector<std::uint32_t>>(idx);
    return Tensor<T>::from_op(
        {cout, lout}, std::move(out), {w, b},
        [indices, vocab, cout, k, pad, lout](TensorNode<T>& n) {
            auto& g = *n.grad;
            auto& gw = grad_of(n.parents[0]);
            auto& gb = grad_of(n.parents[1]);
            const std::size_t len = indices->size();
            for (std::size_t f = 0; f < cout; ++f) {
                const T* grow = g.data() + f * lout;
                T acc = T(0);
                for (std::size_t t = 0; t < lout; ++t) acc += grow[t];
                gb[f] += acc;
                T* gwbase = gw.data() + f * vocab * k;
                for (std::size_t t = 0; t < lout; ++t) {
                    const T gv = grow[t];
                    if (gv == T(0)) continue;
                    const std::size_t d0 = t >= pad ? 0 : pad - t;
                    const std::size_t d1 = std::min(k, len + pad - t);
                    for (std::size_t dk = d0; dk < d1; ++dk)
                        gwbase[std::size_t((*indices)[t + dk - pad]) * k + dk] += gv;
                }
            }
        });
}

// ---- 2-D convolution over (channels x height x width) inputs ----

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
        throw ShapeError("conv2d: bad ranks");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin || b.dim(0) != cout)
        throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
    if (h + 2 * pad < kh || wd + 2 * pad < kw) throw ShapeError("conv2d: input too small");
    const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad;
    const std::size_t ho = hp - kh + 1, wo = wp - kw + 1;

    auto xp = std::make_shared<std::vector<T>>(cin * hp * wp, T(0));
    const T* xv = x.data();
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy(xv + (c * h + y) * wd, xv + (c * h + y + 1) * wd,
                      xp->data() + (c * hp + y + pad) * wp + pad);

    std::vector<T> out(cout * ho * wo);
    const T* wv = w.data();
    const T* bv = b.data();
    for (std::size_t f = 0; f < cout; ++f) {
        T* oplane = out.data() + f * ho * wo;
        std::fill(oplane, oplane + ho * wo, bv[f]);
        for (std::size_t c = 0; c < cin; ++c) {
            const T* xplane = xp->data() + c * hp * wp;
            const T* wbase = wv + ((f * cin + c) * kh) * kw;
            for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const T wgt = wbase[ky * kw + kx];
                    for (std::size_t y = 0; y < ho; ++y) {
                        const T* xrow = xplane + (y + ky) * wp + kx;
                        T* orow = oplane + y * wo;
                        for (std::size_t xo = 0; xo < wo; ++xo) orow[xo] += wgt * xrow[xo];
                    }
                }
        }
    }
    return Tensor<T>::from_op(
        {cout, ho, wo}, std::move(out), {x, w, b},
        [xp, cin, cout, kh, kw, hp, wp, ho, wo, pad, h, wd](TensorNode<T>& n) {
            auto& g = *n.grad;
            auto& gx = grad_of(n.parents[0]);
            auto& gw = grad_of(n.parents[1]);
            auto& gb = grad_of(n.parents[2]);
            const auto& wv2 = *n.parents[1]->values;
            std::vector<T> gxp(cin * hp * wp, T(0));
            for (std::size_t f = 0; f < cout; ++f) {
                const T* gplane = g.data() + f * ho * wo;
                T acc = T(0);
                for (std::size_t i = 0; i < ho * wo; ++i) acc += gplane[i];
                gb[f] += acc;
                for (std::size_t c = 0; c < cin; ++c) {
                    const T* xplane = xp->data() + c * hp * wp;
                    T* gxplane = gxp.data() + c * hp * wp;
                    const T* wbase = wv2.data() + ((f * cin + c) * kh) * kw;
                    T* gwbase = gw.data() + ((f * cin + c) * kh) * kw;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wgt = wbase[ky * kw + kx];
                            T wacc = T(0);
                            for (std::size_t y = 0; y < ho; ++y) {
                                const T* xrow = xplane + (y + ky) * wp + kx;
                                T* gxrow = gxplane + (y + ky) * wp + kx;
                                const T* grow = gplane + y * wo;
                                for (std::size_t xo = 0; xo < wo; ++xo) {
                                    wacc += grow[xo] * xrow[xo];
                                    gxrow[xo] += wgt * grow[xo];
                                }
                            }
                            gwbase[ky * kw + kx] += wacc;
                        }
                }
            }
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xo = 0; xo < wd; ++xo)
                        gx[(c * h + y) * wd + xo] += gxp[(c * hp + y + pad) * wp + pad + xo];
        });
}

// ---- pooling ----

template <class T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t k, std::size_t s) {
    if (x.rank() != 2) throw ShapeError("maxpool1d: need channels x length");
    const std::size_t c = x.dim(0), len = x.dim(1);
    if (len < k) throw ShapeError("maxpool1d: input length " + std::to_string(len) +
                                  " shorter than window " + std::to_string(k));
    const std::size_t lout = (len - k) / s + 1;
    std::vector<T> out(c * lout);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(c * lout);
    const T* xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t t = 0; t < lout; ++t) {
            std::size_t best = ch * len + t * s;
            for (std::size_t j = 1; j < k; ++j)
                if (xv[ch * len + t * s + j] > xv[best]) best = ch * len + t * s + j;
            out[ch * lout + t] = xv[best];
            (*arg)[ch * lout + t] = static_cast<std::uint32_t>(best);
        }
    return Tensor<T>::from_op({c, lout}, std::move(out), {x}, [arg](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t s) {
    if (x.rank() != 3) throw ShapeError("maxpool2d: need channels x h x w");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < k || w < k) throw ShapeError("maxpool2d: input smaller than window");
    const std::size_t ho = (h - k) / s + 1, wo = (w - k) / s + 1;
    std::vector<T> out(c * ho * wo);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(c * ho * wo);
    const T* xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xo = 0; xo < wo; ++xo) {
                std::size_t best = (ch * h + y * s) * w + xo * s;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::size_t at = (ch * h + y * s + ky) * w + xo * s + kx;
                        if (xv[at] > xv[best]) best = at;
                    }
                out[(ch * ho + y) * wo + xo] = xv[best];
                (*arg)[(ch * ho + y) * wo + xo] = static_cast<std::uint32_t>(best);
            }
    return Tensor<T>::from_op({c, ho, wo}, std::move(out), {x}, [arg](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
}

namespace detail {
inline void adaptive_bins(std::size_t len, std::size_t out, std::size_t i, std::size_t& lo,
                          std::size_t& hi) {
    lo = (i * len) / out;
    hi = ((i + 1) * len + out - 1) / out;
}
} // namespace detail

template <class T>
Tensor<T> adaptive_maxpool1d(const Tensor<T>& x, std::size_t out_len) {
    if (x.rank() != 2) throw ShapeError("adaptive_maxpool1d: need channels x length");
    if (out_len == 0) throw ShapeError("adaptive_maxpool1d: zero output length");
    const std::size_t c = x.dim(0), len = x.dim(1);
    std::vector<T> out(c * out_len);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(c * out_len);
    const T* xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_len; ++i) {
            std::size_t lo, hi;
            detail::adaptive_bins(len, out_len, i, lo, hi);
            std::size_t best = ch * len + lo;
            for (std::size_t t = lo + 1; t < hi; ++t)
                if (xv[ch * len + t] > xv[best]) best = ch * len + t;
            out[ch * out_len + i] = xv[best];
            (*arg)[ch * out_len + i] = static_cast<std::uint32_t>(best);
        }
    return Tensor<T>::from_op({c, out_len}, std::move(out), {x}, [arg](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
}

template <class T>
Tensor<T> adaptive_avgpool1d(const Tensor<T>& x, std::size_t out_len) {
    if (x.rank() != 2) throw ShapeError("adaptive_avgpool1d: need channels x length");
    if (out_len == 0) throw ShapeError("adaptive_avgpool1d: zero output length");
    const std::size_t c = x.dim(0), len = x.dim(1);
    std::vector<T> out(c * out_len);
    const T* xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_len; ++i) {
            std::size_t lo, hi;
            detail::adaptive_bins(len, out_len, i, lo, hi);
            T acc = T(0);
            for (std::size_t t = lo; t < hi; ++t) acc += xv[ch * len + t];
            out[ch * out_len + i] = acc / T(hi - lo);
        }
    return Tensor<T>::from_op({c, out_len}, std::move(out), {x}, [c, len, out_len](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < out_len; ++i) {
                std::size_t lo, hi;
                detail::adaptive_bins(len, out_len, i, lo, hi);
                const T share = g[ch * out_len + i] / T(hi - lo);
                for (std::size_t t = lo; t < hi; ++t) gx[ch * len + t] += share;
            }
    });
}

// ---- shape plumbing ----

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<T> out(x.values());
    return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
    return reshape(x, {x.size()});
}

// Column-wise concatenation of matrices with equal row counts.
template <class T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_columns: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw ShapeError("concat_columns: row count mismatch");
        total += p.dim(1);
    }
    std::vector<T> out(rows * total);
    std::size_t off = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        const T* pv = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(pv + r * w, pv + (r + 1) * w, out.data() + r * total + off);
        off += w;
        widths.push_back(w);
    }
    return Tensor<T>::from_op({rows, total}, std::move(out), parts,
                              [rows, total, widths](TensorNode<T>& n) {
                                  auto& g = *n.grad;
                                  std::size_t off2 = 0;
                                  for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                                      auto& gp = grad_of(n.parents[pi]);
                                      const std::size_t w = widths[pi];
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t c = 0; c < w; ++c)
                                              gp[r * w + c] += g[r * total + off2 + c];
                                      off2 += w;
                                  }
                              });
}

// Vector concatenation (rank-1 inputs).
template <class T>
Tensor<T> concat_vec(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_vec: no inputs");
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.rank() != 1) throw ShapeError("concat_vec: rank-1 inputs required");
        widths.push_back(p.dim(0));
        total += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(total);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return Tensor<T>::from_op({total}, std::move(out), parts, [widths](TensorNode<T>& n) {
        auto& g = *n.grad;
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
            auto& gp = grad_of(n.parents[pi]);
            for (std::size_t i = 0; i < widths[pi]; ++i) gp[i] += g[off + i];
            off += widths[pi];
        }
    });
}

// Fully connected layer on a vector: y = W x + b with W of shape (out x in).
template <class T>
Tensor<T> linear_vec(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1 || w.dim(1) != x.dim(0) ||
        w.dim(0) != b.dim(0))
        throw ShapeError("linear_vec: " + shape_str(w.shape()) + " * " + shape_str(x.shape()));
    const std::size_t in = x.dim(0), out_dim = w.dim(0);
    std::vector<T> out(out_dim);
    const T* xv = x.data();
    const T* wv = w.data();
    const T* bv = b.data();
    for (std::size_t o = 0; o < out_dim; ++o) {
        T acc = bv[o];
        const T* wrow = wv + o * in;
        for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * xv[i];
        out[o] = acc;
    }
    return Tensor<T>::from_op({out_dim}, std::move(out), {x, w, b},
                              [in, out_dim](TensorNode<T>& n) {
                                  auto& g = *n.grad;
                                  auto& gx = grad_of(n.parents[0]);
                                  auto& gw = grad_of(n.parents[1]);
                                  auto& gb = grad_of(n.parents[2]);
                                  const auto& xv2 = *n.parents[0]->values;
                                  const auto& wv2 = *n.parents[1]->values;
                                  for (std::size_t o = 0; o < out_dim; ++o) {
                                      const T go = g[o];
                                      gb[o] += go;
                                      T* gwrow = gw.data() + o * in;
                                      const T* wrow = wv2.data() + o * in;
                                      for (std::size_t i = 0; i < in; ++i) {
                                          gwrow[i] += go * xv2[i];
                                          gx[i] += go * wrow[i];
                                      }
                                  }
                              });
}

// ---- classification head ----

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows: need a matrix");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(x.values());
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * cols;
        T mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [rows, cols](TensorNode<T>& n) {
        auto& g = *n.grad;
        auto& gx = grad_of(n.parents[0]);
        const auto& y = *n.values;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yrow = y.data() + r * cols;
            const T* grow = g.data() + r * cols;
            T dot = T(0);
            for (std::size_t c = 0; c < cols; ++c) dot += grow[c] * yrow[c];
            for (std::size_t c = 0; c < cols; ++c)
                gx[r * cols + c] += yrow[c] * (grow[c] - dot);
        }
    });
}

// Mean negative log-softmax probability of the true class over the selected
// rows. rows[i] is a row of logits, labels[i] its class.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::uint32_t>& rows,
                        const std::vector<std::uint32_t>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be n x c");
    if (rows.empty()) throw ShapeError("cross_entropy: empty node subset");
    if (rows.size() != labels.size()) throw ShapeError("cross_entropy: rows/labels mismatch");
    const std::size_t cols = logits.dim(1);
    const T* lv = logits.data();
    for (std::uint32_t lab : labels)
        if (lab >= cols) throw ShapeError("cross_entropy: label out of range");
    T loss = T(0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const T* row = lv + std::size_t(rows[i]) * cols;
        T mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
        loss += mx + std::log(sum) - row[labels[i]];
    }
    loss /= T(rows.size());
    auto rcopy = std::make_shared<std::vector<std::uint32_t>>(rows);
    auto lcopy = std::make_shared<std::vector<std::uint32_t>>(labels);
    return Tensor<T>::from_op({1}, {loss}, {logits}, [rcopy, lcopy, cols](TensorNode<T>& n) {
        const T go = (*n.grad)[0] / T(rcopy->size());
        auto& gx = grad_of(n.parents[0]);
        const auto& lv2 = *n.parents[0]->values;
        std::vector<T> p(cols);
        for (std::size_t i = 0; i < rcopy->size(); ++i) {
            const T* row = lv2.data() + std::size_t((*rcopy)[i]) * cols;
            T mx = row[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (std::size_t c = 0; c < cols; ++c) {
                p[c] = std::exp(row[c] - mx);
                sum += p[c];
            }
            T* grow = gx.data() + std::size_t((*rcopy)[i]) * cols;
            for (std::size_t c = 0; c < cols; ++c) grow[c] += go * (p[c] / sum);
            grow[(*lcopy)[i]] -= go;
        }
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    return Tensor<T>::from_op({1}, {acc}, {x}, [](TensorNode<T>& n) {
        const T g = (*n.grad)[0];
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

// Inner product with a constant weight vector; handy for seeding non-scalar
// outputs in gradient tests.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::vector<T> weights) {
    if (weights.size() != x.size()) throw ShapeError("weighted_sum: size mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.values()[i];
    auto w = std::make_shared<std::vector<T>>(std::move(weights));
    return Tensor<T>::from_op({1}, {acc}, {x}, [w](TensorNode<T>& n) {
        const T g = (*n.grad)[0];
        auto& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * (*w)[i];
    });
}

// W_r = sum_k coeff[k] * bases[k]; used by the basis-decomposed layers.
template <class T>
Tensor<T> compose_basis(const std::vector<Tensor<T>>& bases, const Tensor<T>& coeff) {
    if (bases.empty()) throw ShapeError("compose_basis: no bases");
    if (coeff.rank() != 1 || coeff.dim(0) != bases.size())
        throw ShapeError("compose_basis: coefficient count mismatch");
    const Shape shape = bases[0].shape();
    for (const auto& b : bases) detail::check_same_shape(b, bases[0], "compose_basis");
    std::vector<T> out(shape_size(shape), T(0));
    for (std::size_t k = 0; k < bases.size(); ++k) {
        const T c = coeff.values()[k];
        const T* bv = bases[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * bv[i];
    }
    std::vector<Tensor<T>> parents = bases;
    parents.push_back(coeff);
    const std::size_t nb = bases.size();
    return Tensor<T>::from_op(shape, std::move(out), std::move(parents), [nb](TensorNode<T>& n) {
        auto& g = *n.grad;
        const auto& cv = *n.parents[nb]->values;
        auto& gc = grad_of(n.parents[nb]);
        for (std::size_t k = 0; k < nb; ++k) {
            auto& gb = grad_of(n.parents[k]);
            const auto& bv = *n.parents[k]->values;
            T dot = T(0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += cv[k] * g[i];
                dot += g[i] * bv[i];
            }
            gc[k] += dot;
        }
    });
}

} // namespace kgnc
