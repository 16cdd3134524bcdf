#include "hsb/executor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

extern "C" void openblas_set_num_threads(int);

namespace hsb {

namespace {

// Threaded BLAS would make summation order depend on the pool size; the
// executor owns its own determinism, so BLAS stays single threaded.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// col[(c,ky,kx), (y,x)] = src[c, y*stride - pad + ky, x*stride - pad + kx] (0 outside).
template <typename T>
void im2col(const T* src, int ch, int hs, int ws, int kh, int kw, int stride, int pad, int hg,
            int wg, T* col) {
    for (int c = 0; c < ch; ++c) {
        const T* plane = src + static_cast<size_t>(c) * hs * ws;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * hg * wg;
                for (int y = 0; y < hg; ++y) {
                    int sy = y * stride - pad + ky;
                    if (sy < 0 || sy >= hs) {
                        std::fill(row + static_cast<size_t>(y) * wg, row + (static_cast<size_t>(y) + 1) * wg, T(0));
                        continue;
                    }
                    const T* srow = plane + static_cast<size_t>(sy) * ws;
                    T* drow = row + static_cast<size_t>(y) * wg;
                    for (int x = 0; x < wg; ++x) {
                        int sx = x * stride - pad + kx;
                        drow[x] = (sx >= 0 && sx < ws) ? srow[sx] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im(const T* col, int ch, int hs, int ws, int kh, int kw, int stride, int pad, int hg,
            int wg, T* dst) {
    for (int c = 0; c < ch; ++c) {
        T* plane = dst + static_cast<size_t>(c) * hs * ws;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * hg * wg;
                for (int y = 0; y < hg; ++y) {
                    int sy = y * stride - pad + ky;
                    if (sy < 0 || sy >= hs) continue;
                    T* drow = plane + static_cast<size_t>(sy) * ws;
                    const T* srow = row + static_cast<size_t>(y) * wg;
                    for (int x = 0; x < wg; ++x) {
                        int sx = x * stride - pad + kx;
                        if (sx >= 0 && sx < ws) drow[sx] += srow[x];
                    }
                }
            }
        }
    }
}

template <typename T>
void softmax_axis(const Tensor<T>& x, int axis, bool log_form, Tensor<T>& y) {
    const Shape& s = x.shape;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    int64_t n = s[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* xp = x.data.data() + o * n * inner + in;
            T* yp = y.data.data() + o * n * inner + in;
            T mx = xp[0];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[j * inner]);
            T sum = 0;
            for (int64_t j = 0; j < n; ++j) sum += std::exp(xp[j * inner] - mx);
            if (log_form) {
                T lse = mx + std::log(sum);
                for (int64_t j = 0; j < n; ++j) yp[j * inner] = xp[j * inner] - lse;
            } else {
                T inv = T(1) / sum;
                for (int64_t j = 0; j < n; ++j) yp[j * inner] = std::exp(xp[j * inner] - mx) * inv;
            }
        }
    }
}

template <typename T>
void softmax_axis_backward(const Tensor<T>& y, const Tensor<T>& g, int axis, bool log_form,
                           Tensor<T>& dx) {
    const Shape& s = y.shape;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    int64_t n = s[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* yp = y.data.data() + o * n * inner + in;
            const T* gp = g.data.data() + o * n * inner + in;
            T* dp = dx.data.data() + o * n * inner + in;
            if (log_form) {
                T gsum = 0;
                for (int64_t j = 0; j < n; ++j) gsum += gp[j * inner];
                for (int64_t j = 0; j < n; ++j) {
                    dp[j * inner] += gp[j * inner] - std::exp(yp[j * inner]) * gsum;
                }
            } else {
                T dotv = 0;
                for (int64_t j = 0; j < n; ++j) dotv += gp[j * inner] * yp[j * inner];
                for (int64_t j = 0; j < n; ++j) {
                    dp[j * inner] += yp[j * inner] * (gp[j * inner] - dotv);
                }
            }
        }
    }
}

// Nearest-neighbor assignment for the entropy estimator; ties resolved by
// lowest index so the result does not depend on evaluation order.
template <typename T>
void nn_assign(const Tensor<T>& pts, std::vector<int>& nn, std::vector<T>& dist) {
    int n = pts.dim(0), d = pts.dim(1);
    nn.assign(static_cast<size_t>(n), -1);
    dist.assign(static_cast<size_t>(n), T(0));
    for (int i = 0; i < n; ++i) {
        T best = std::numeric_limits<T>::max();
        int bj = -1;
        const T* pi = pts.data.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const T* pj = pts.data.data() + static_cast<size_t>(j) * d;
            T acc = 0;
            for (int k = 0; k < d; ++k) {
                T diff = pi[k] - pj[k];
                acc += diff * diff;
            }
            if (acc < best) {
                best = acc;
                bj = j;
            }
        }
        nn[static_cast<size_t>(i)] = bj;
        dist[static_cast<size_t>(i)] = std::sqrt(best);
    }
}

template <typename T>
T digamma_int(int n) {  // psi(n) for integer n >= 1
    const T euler = T(0.57721566490153286060651209008240243);
    T v = -euler;
    for (int k = 1; k < n; ++k) v += T(1) / T(k);
    return v;
}

template <typename T>
T log_unit_ball_volume(int d) {
    return T(0.5) * d * std::log(T(M_PI)) - std::lgamma(T(d) / 2 + 1);
}

// InfoNCE with per-anchor positive, shared negatives and optional prototype
// negatives. Inputs are expected to be unit rows; the op itself only takes
// dot products.
template <typename T>
T infonce_forward(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& neg,
                  const Tensor<T>* proto, T tau) {
    int m = a.dim(0), d = a.dim(1);
    int nn = neg.dim(0);
    int nc = proto ? proto->dim(0) : 0;
    T loss = 0;
    std::vector<T> z(static_cast<size_t>(1 + nn + nc));
    for (int i = 0; i < m; ++i) {
        const T* ai = a.data.data() + static_cast<size_t>(i) * d;
        const T* pi = p.data.data() + static_cast<size_t>(i) * d;
        T zp = 0;
        for (int k = 0; k < d; ++k) zp += ai[k] * pi[k];
        z[0] = zp / tau;
        for (int j = 0; j < nn; ++j) {
            const T* nj = neg.data.data() + static_cast<size_t>(j) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * nj[k];
            z[static_cast<size_t>(1 + j)] = v / tau;
        }
        for (int c = 0; c < nc; ++c) {
            const T* pc = proto->data.data() + static_cast<size_t>(c) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * pc[k];
            z[static_cast<size_t>(1 + nn + c)] = v / tau;
        }
        T mx = z[0];
        for (T v : z) mx = std::max(mx, v);
        T sum = 0;
        for (T v : z) sum += std::exp(v - mx);
        loss += (mx + std::log(sum)) - z[0];
    }
    return loss / T(m);
}

template <typename T>
void infonce_backward(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& neg,
                      const Tensor<T>* proto, T tau, T gseed, Tensor<T>* da, Tensor<T>* dp,
                      Tensor<T>* dneg, Tensor<T>* dproto) {
    int m = a.dim(0), d = a.dim(1);
    int nn = neg.dim(0);
    int nc = proto ? proto->dim(0) : 0;
    std::vector<T> z(static_cast<size_t>(1 + nn + nc));
    T gm = gseed / T(m);
    for (int i = 0; i < m; ++i) {
        const T* ai = a.data.data() + static_cast<size_t>(i) * d;
        const T* pi = p.data.data() + static_cast<size_t>(i) * d;
        T zp = 0;
        for (int k = 0; k < d; ++k) zp += ai[k] * pi[k];
        z[0] = zp / tau;
        for (int j = 0; j < nn; ++j) {
            const T* nj = neg.data.data() + static_cast<size_t>(j) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * nj[k];
            z[static_cast<size_t>(1 + j)] = v / tau;
        }
        for (int c = 0; c < nc; ++c) {
            const T* pc = proto->data.data() + static_cast<size_t>(c) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * pc[k];
            z[static_cast<size_t>(1 + nn + c)] = v / tau;
        }
        T mx = z[0];
        for (T v : z) mx = std::max(mx, v);
        T sum = 0;
        for (T v : z) sum += std::exp(v - mx);
        // dz_j = (softmax_j - [j==0]) * gm ; chain through z = dot/tau
        for (size_t j = 0; j < z.size(); ++j) {
            T sj = std::exp(z[j] - mx) / sum;
            T dz = (sj - (j == 0 ? T(1) : T(0))) * gm / tau;
            if (dz == T(0)) continue;
            const T* cj = nullptr;
            T* dcj = nullptr;
            if (j == 0) {
                cj = pi;
                dcj = dp ? dp->data.data() + static_cast<size_t>(i) * d : nullptr;
            } else if (j < static_cast<size_t>(1 + nn)) {
                cj = neg.data.data() + (j - 1) * d;
                dcj = dneg ? dneg->data.data() + (j - 1) * d : nullptr;
            } else {
                cj = proto->data.data() + (j - 1 - nn) * d;
                dcj = dproto ? dproto->data.data() + (j - 1 - nn) * d : nullptr;
            }
            if (da) {
                T* dai = da->data.data() + static_cast<size_t>(i) * d;
                for (int k = 0; k < d; ++k) dai[k] += dz * cj[k];
            }
            if (dcj) {
                for (int k = 0; k < d; ++k) dcj[k] += dz * ai[k];
            }
        }
    }
}

// CUT-style patch contrastive loss: logits_ij = a_i . p_j / tau, diagonal is
// the positive.
template <typename T>
T patch_nce_forward(const Tensor<T>& a, const Tensor<T>& p, T tau) {
    int m = a.dim(0), d = a.dim(1);
    std::vector<T> z(static_cast<size_t>(m));
    T loss = 0;
    for (int i = 0; i < m; ++i) {
        const T* ai = a.data.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < m; ++j) {
            const T* pj = p.data.data() + static_cast<size_t>(j) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * pj[k];
            z[static_cast<size_t>(j)] = v / tau;
        }
        T mx = z[0];
        for (T v : z) mx = std::max(mx, v);
        T sum = 0;
        for (T v : z) sum += std::exp(v - mx);
        loss += (mx + std::log(sum)) - z[static_cast<size_t>(i)];
    }
    return loss / T(m);
}

template <typename T>
void patch_nce_backward(const Tensor<T>& a, const Tensor<T>& p, T tau, T gseed, Tensor<T>* da,
                        Tensor<T>* dp) {
    int m = a.dim(0), d = a.dim(1);
    std::vector<T> z(static_cast<size_t>(m));
    T gm = gseed / T(m);
    for (int i = 0; i < m; ++i) {
        const T* ai = a.data.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < m; ++j) {
            const T* pj = p.data.data() + static_cast<size_t>(j) * d;
            T v = 0;
            for (int k = 0; k < d; ++k) v += ai[k] * pj[k];
            z[static_cast<size_t>(j)] = v / tau;
        }
        T mx = z[0];
        for (T v : z) mx = std::max(mx, v);
        T sum = 0;
        for (T v : z) sum += std::exp(v - mx);
        for (int j = 0; j < m; ++j) {
            T sj = std::exp(z[static_cast<size_t>(j)] - mx) / sum;
            T dz = (sj - (j == i ? T(1) : T(0))) * gm / tau;
            const T* pj = p.data.data() + static_cast<size_t>(j) * d;
            if (da) {
                T* dai = da->data.data() + static_cast<size_t>(i) * d;
                for (int k = 0; k < d; ++k) dai[k] += dz * pj[k];
            }
            if (dp) {
                T* dpj = dp->data.data() + static_cast<size_t>(j) * d;
                for (int k = 0; k < d; ++k) dpj[k] += dz * ai[k];
            }
        }
    }
}

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                    int pad, Tensor<T>& y) {
    int b = x.dim(0), cin = x.dim(1), hs = x.dim(2), ws = x.dim(3);
    int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int hg = y.dim(2), wg = y.dim(3);
    int ckk = cin * kh * kw;
    std::vector<T> col(static_cast<size_t>(ckk) * hg * wg);
    for (int n = 0; n < b; ++n) {
        const T* xp = x.data.data() + static_cast<size_t>(n) * cin * hs * ws;
        T* yp = y.data.data() + static_cast<size_t>(n) * cout * hg * wg;
        im2col(xp, cin, hs, ws, kh, kw, stride, pad, hg, wg, col.data());
        gemm(false, false, cout, hg * wg, ckk, T(1), w.data.data(), ckk, col.data(), hg * wg, T(0),
             yp, hg * wg);
        if (bias) {
            for (int c = 0; c < cout; ++c) {
                T bv = bias->data[static_cast<size_t>(c)];
                T* plane = yp + static_cast<size_t>(c) * hg * wg;
                for (int i = 0; i < hg * wg; ++i) plane[i] += bv;
            }
        }
    }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                     const Tensor<T>& gy, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    int b = x.dim(0), cin = x.dim(1), hs = x.dim(2), ws = x.dim(3);
    int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int hg = gy.dim(2), wg = gy.dim(3);
    int ckk = cin * kh * kw;
    std::vector<T> col(static_cast<size_t>(ckk) * hg * wg);
    for (int n = 0; n < b; ++n) {
        const T* xp = x.data.data() + static_cast<size_t>(n) * cin * hs * ws;
        const T* gp = gy.data.data() + static_cast<size_t>(n) * cout * hg * wg;
        if (dw || dx) im2col(xp, cin, hs, ws, kh, kw, stride, pad, hg, wg, col.data());
        if (dw) {
            gemm(false, true, cout, ckk, hg * wg, T(1), gp, hg * wg, col.data(), hg * wg, T(1),
                 dw->data.data(), ckk);
        }
        if (dx) {
            gemm(true, false, ckk, hg * wg, cout, T(1), w.data.data(), ckk, gp, hg * wg, T(0),
                 col.data(), hg * wg);
            col2im(col.data(), cin, hs, ws, kh, kw, stride, pad, hg, wg,
                   dx->data.data() + static_cast<size_t>(n) * cin * hs * ws);
        }
        if (db) {
            for (int c = 0; c < cout; ++c) {
                T acc = 0;
                const T* plane = gp + static_cast<size_t>(c) * hg * wg;
                for (int i = 0; i < hg * wg; ++i) acc += plane[i];
                db->data[static_cast<size_t>(c)] += acc;
            }
        }
    }
}

template <typename T>
void convt2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                     int pad, Tensor<T>& y) {
    int b = x.dim(0), cin = x.dim(1), hs = x.dim(2), ws = x.dim(3);
    int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    int ho = y.dim(2), wo = y.dim(3);
    int ckk = cout * kh * kw;
    std::vector<T> col(static_cast<size_t>(ckk) * hs * ws);
    std::fill(y.data.begin(), y.data.end(), T(0));
    for (int n = 0; n < b; ++n) {
        const T* xp = x.data.data() + static_cast<size_t>(n) * cin * hs * ws;
        T* yp = y.data.data() + static_cast<size_t>(n) * cout * ho * wo;
        // col = W^T (ckk x cin) * X (cin x hs*ws)
        gemm(true, false, ckk, hs * ws, cin, T(1), w.data.data(), ckk, xp, hs * ws, T(0),
             col.data(), hs * ws);
        col2im(col.data(), cout, ho, wo, kh, kw, stride, pad, hs, ws, yp);
        if (bias) {
            for (int c = 0; c < cout; ++c) {
                T bv = bias->data[static_cast<size_t>(c)];
                T* plane = yp + static_cast<size_t>(c) * ho * wo;
                for (int i = 0; i < ho * wo; ++i) plane[i] += bv;
            }
        }
    }
}

template <typename T>
void convt2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                      const Tensor<T>& gy, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    int b = x.dim(0), cin = x.dim(1), hs = x.dim(2), ws = x.dim(3);
    int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    int ho = gy.dim(2), wo = gy.dim(3);
    int ckk = cout * kh * kw;
    std::vector<T> col(static_cast<size_t>(ckk) * hs * ws);
    for (int n = 0; n < b; ++n) {
        const T* xp = x.data.data() + static_cast<size_t>(n) * cin * hs * ws;
        const T* gp = gy.data.data() + static_cast<size_t>(n) * cout * ho * wo;
        im2col(gp, cout, ho, wo, kh, kw, stride, pad, hs, ws, col.data());
        if (dx) {
            gemm(false, false, cin, hs * ws, ckk, T(1), w.data.data(), ckk, col.data(), hs * ws,
                 T(0), dx->data.data() + static_cast<size_t>(n) * cin * hs * ws, hs * ws);
        }
        if (dw) {
            gemm(false, true, cin, ckk, hs * ws, T(1), xp, hs * ws, col.data(), hs * ws, T(1),
                 dw->data.data(), ckk);
        }
        if (db) {
            for (int c = 0; c < cout; ++c) {
                T acc = 0;
                const T* plane = gp + static_cast<size_t>(c) * ho * wo;
                for (int i = 0; i < ho * wo; ++i) acc += plane[i];
                db->data[static_cast<size_t>(c)] += acc;
            }
        }
    }
}

template <typename T>
void instance_norm_stats(const Tensor<T>& x, double eps, std::vector<T>& mean,
                         std::vector<T>& inv_std) {
    int b = x.dim(0), c = x.dim(1);
    int m = x.dim(2) * x.dim(3);
    mean.assign(static_cast<size_t>(b) * c, T(0));
    inv_std.assign(static_cast<size_t>(b) * c, T(0));
    for (int n = 0; n < b; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            const T* p = x.data.data() + (static_cast<size_t>(n) * c + ch) * m;
            T mu = 0;
            for (int i = 0; i < m; ++i) mu += p[i];
            mu /= T(m);
            T var = 0;
            for (int i = 0; i < m; ++i) {
                T d = p[i] - mu;
                var += d * d;
            }
            var /= T(m);
            mean[static_cast<size_t>(n) * c + ch] = mu;
            inv_std[static_cast<size_t>(n) * c + ch] = T(1) / std::sqrt(var + static_cast<T>(eps));
        }
    }
}

}  // namespace

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}
template bool all_finite<float>(const Tensor<float>&);
template bool all_finite<double>(const Tensor<double>&);

template <typename T>
Eval<T> forward(const Graph& g, const ParamStore<T>& store,
                const std::map<std::string, Tensor<T>>& inputs) {
    Eval<T> ev;
    ev.graph = &g;
    ev.vals.resize(g.nodes().size());
    for (const auto& [name, id] : g.inputs()) {
        auto it = inputs.find(name);
        if (it == inputs.end()) throw std::runtime_error("forward: missing input '" + name + "'");
        if (it->second.shape != g.node(id).shape) {
            throw std::runtime_error("forward: input '" + name + "' has shape " +
                                     shape_str(it->second.shape) + ", expected " +
                                     shape_str(g.node(id).shape));
        }
    }
    for (size_t id = 0; id < g.nodes().size(); ++id) {
        const Node& n = g.node(static_cast<int>(id));
        auto in = [&](int k) -> const Tensor<T>& {
            return ev.vals[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        Tensor<T> out(n.shape);
        switch (n.kind) {
            case OpKind::Input:
                out = inputs.at(n.name);
                break;
            case OpKind::Param: {
                const Tensor<T>& p = store.at(n.name);
                if (p.shape != n.shape) {
                    throw std::runtime_error("forward: param '" + n.name + "' has shape " +
                                             shape_str(p.shape) + ", graph expects " +
                                             shape_str(n.shape));
                }
                out = p;
                break;
            }
            case OpKind::Const:
                for (size_t i = 0; i < out.data.size(); ++i) {
                    out.data[i] = static_cast<T>(n.attrs.const_data[i]);
                }
                break;
            case OpKind::Conv2d:
                conv2d_forward(in(0), in(1), n.inputs.size() > 2 ? &in(2) : nullptr, n.attrs.stride,
                               n.attrs.pad, out);
                break;
            case OpKind::ConvTranspose2d:
                convt2d_forward(in(0), in(1), n.inputs.size() > 2 ? &in(2) : nullptr,
                                n.attrs.stride, n.attrs.pad, out);
                break;
            case OpKind::UpsampleNN2x: {
                const Tensor<T>& x = in(0);
                int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
                for (int nb = 0; nb < b; ++nb)
                    for (int ch = 0; ch < c; ++ch)
                        for (int y = 0; y < 2 * h; ++y)
                            for (int xx = 0; xx < 2 * w; ++xx)
                                out.at4(nb, ch, y, xx) = x.at4(nb, ch, y / 2, xx / 2);
                break;
            }
            case OpKind::LeakyRelu: {
                const Tensor<T>& x = in(0);
                T a = static_cast<T>(n.attrs.alpha);
                for (size_t i = 0; i < out.data.size(); ++i) {
                    T v = x.data[i];
                    out.data[i] = v > 0 ? v : a * v;
                }
                break;
            }
            case OpKind::Sigmoid: {
                const Tensor<T>& x = in(0);
                for (size_t i = 0; i < out.data.size(); ++i) {
                    T v = x.data[i];
                    out.data[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v))
                                         : std::exp(v) / (T(1) + std::exp(v));
                }
                break;
            }
            case OpKind::InstanceNorm: {
                const Tensor<T>& x = in(0);
                const Tensor<T>& gamma = in(1);
                const Tensor<T>& beta = in(2);
                std::vector<T> mean, inv_std;
                instance_norm_stats(x, n.attrs.eps, mean, inv_std);
                int b = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
                for (int nb = 0; nb < b; ++nb) {
                    for (int ch = 0; ch < c; ++ch) {
                        const T* xp = x.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        T* yp = out.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        T mu = mean[static_cast<size_t>(nb) * c + ch];
                        T is = inv_std[static_cast<size_t>(nb) * c + ch];
                        T gm = gamma.data[static_cast<size_t>(ch)];
                        T bt = beta.data[static_cast<size_t>(ch)];
                        for (int i = 0; i < m; ++i) yp[i] = gm * (xp[i] - mu) * is + bt;
                    }
                }
                break;
            }
            case OpKind::Linear: {
                const Tensor<T>& x = in(0);
                const Tensor<T>& w = in(1);
                int b = x.dim(0), k = x.dim(1), o = w.dim(0);
                gemm(false, true, b, o, k, T(1), x.data.data(), k, w.data.data(), k, T(0),
                     out.data.data(), o);
                if (n.inputs.size() > 2) {
                    const Tensor<T>& bias = in(2);
                    for (int r = 0; r < b; ++r)
                        for (int cc = 0; cc < o; ++cc)
                            out.at2(r, cc) += bias.data[static_cast<size_t>(cc)];
                }
                break;
            }
            case OpKind::Softmax:
                softmax_axis(in(0), n.attrs.axis, false, out);
                break;
            case OpKind::LogSoftmax:
                softmax_axis(in(0), n.attrs.axis, true, out);
                break;
            case OpKind::Log: {
                const Tensor<T>& x = in(0);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(x.data[i]);
                break;
            }
            case OpKind::Exp: {
                const Tensor<T>& x = in(0);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(x.data[i]);
                break;
            }
            case OpKind::Square: {
                const Tensor<T>& x = in(0);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * x.data[i];
                break;
            }
            case OpKind::Add: {
                const Tensor<T>& a = in(0);
                const Tensor<T>& b2 = in(1);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b2.data[i];
                break;
            }
            case OpKind::Sub: {
                const Tensor<T>& a = in(0);
                const Tensor<T>& b2 = in(1);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b2.data[i];
                break;
            }
            case OpKind::Mul: {
                const Tensor<T>& a = in(0);
                const Tensor<T>& b2 = in(1);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b2.data[i];
                break;
            }
            case OpKind::Scale: {
                const Tensor<T>& x = in(0);
                T c = static_cast<T>(n.attrs.c);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * x.data[i];
                break;
            }
            case OpKind::AddScalar: {
                const Tensor<T>& x = in(0);
                T c = static_cast<T>(n.attrs.c);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] + c;
                break;
            }
            case OpKind::MeanAll: {
                const Tensor<T>& x = in(0);
                T acc = 0;
                for (T v : x.data) acc += v;
                out.data[0] = acc / T(x.numel());
                break;
            }
            case OpKind::SumAll: {
                const Tensor<T>& x = in(0);
                T acc = 0;
                for (T v : x.data) acc += v;
                out.data[0] = acc;
                break;
            }
            case OpKind::Dot: {
                const Tensor<T>& a = in(0);
                const Tensor<T>& b2 = in(1);
                T acc = 0;
                for (size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b2.data[i];
                out.data[0] = acc;
                break;
            }
            case OpKind::GatherFlat: {
                const Tensor<T>& x = in(0);
                for (size_t i = 0; i < n.attrs.indices.size(); ++i) {
                    out.data[i] = x.data[static_cast<size_t>(n.attrs.indices[i])];
                }
                break;
            }
            case OpKind::GatherPixels: {
                const Tensor<T>& x = in(0);
                int f = x.dim(1), h = x.dim(2), w = x.dim(3);
                int m = static_cast<int>(n.attrs.indices.size() / 3);
                for (int i = 0; i < m; ++i) {
                    int bb = static_cast<int>(n.attrs.indices[3 * i]);
                    int yy = static_cast<int>(n.attrs.indices[3 * i + 1]);
                    int xx = static_cast<int>(n.attrs.indices[3 * i + 2]);
                    for (int c = 0; c < f; ++c) {
                        out.data[static_cast<size_t>(i) * f + c] =
                            x.data[((static_cast<size_t>(bb) * f + c) * h + yy) * w + xx];
                    }
                }
                break;
            }
            case OpKind::AddChannelBias: {
                const Tensor<T>& x = in(0);
                const Tensor<T>& bias = in(1);
                int b = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
                for (int nb = 0; nb < b; ++nb) {
                    for (int ch = 0; ch < c; ++ch) {
                        T bv = bias.at2(nb, ch);
                        const T* xp = x.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        T* yp = out.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        for (int i = 0; i < m; ++i) yp[i] = xp[i] + bv;
                    }
                }
                break;
            }
            case OpKind::ConcatChannels: {
                const Tensor<T>& a = in(0);
                const Tensor<T>& b2 = in(1);
                if (n.shape.size() == 4) {
                    int b = a.dim(0), c1 = a.dim(1), c2 = b2.dim(1), m = a.dim(2) * a.dim(3);
                    for (int nb = 0; nb < b; ++nb) {
                        std::memcpy(out.data.data() + static_cast<size_t>(nb) * (c1 + c2) * m,
                                    a.data.data() + static_cast<size_t>(nb) * c1 * m,
                                    sizeof(T) * static_cast<size_t>(c1) * m);
                        std::memcpy(out.data.data() + (static_cast<size_t>(nb) * (c1 + c2) + c1) * m,
                                    b2.data.data() + static_cast<size_t>(nb) * c2 * m,
                                    sizeof(T) * static_cast<size_t>(c2) * m);
                    }
                } else {
                    int rows = a.dim(0), c1 = a.dim(1), c2 = b2.dim(1);
                    for (int r = 0; r < rows; ++r) {
                        std::memcpy(out.data.data() + static_cast<size_t>(r) * (c1 + c2),
                                    a.data.data() + static_cast<size_t>(r) * c1, sizeof(T) * c1);
                        std::memcpy(out.data.data() + static_cast<size_t>(r) * (c1 + c2) + c1,
                                    b2.data.data() + static_cast<size_t>(r) * c2, sizeof(T) * c2);
                    }
                }
                break;
            }
            case OpKind::AvgPoolTo: {
                const Tensor<T>& x = in(0);
                int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
                int fy = h / n.attrs.th, fx = w / n.attrs.tw;
                T inv = T(1) / T(fy * fx);
                for (int nb = 0; nb < b; ++nb)
                    for (int ch = 0; ch < c; ++ch)
                        for (int ty = 0; ty < n.attrs.th; ++ty)
                            for (int tx = 0; tx < n.attrs.tw; ++tx) {
                                T acc = 0;
                                for (int dy = 0; dy < fy; ++dy)
                                    for (int dx2 = 0; dx2 < fx; ++dx2)
                                        acc += x.at4(nb, ch, ty * fy + dy, tx * fx + dx2);
                                out.at4(nb, ch, ty, tx) = acc * inv;
                            }
                break;
            }
            case OpKind::Reshape:
                out.data = in(0).data;
                break;
            case OpKind::L2NormalizeRows: {
                const Tensor<T>& x = in(0);
                int rows = x.dim(0), d = x.dim(1);
                for (int r = 0; r < rows; ++r) {
                    const T* xp = x.data.data() + static_cast<size_t>(r) * d;
                    T* yp = out.data.data() + static_cast<size_t>(r) * d;
                    T nrm = 0;
                    for (int k = 0; k < d; ++k) nrm += xp[k] * xp[k];
                    nrm = std::sqrt(nrm + static_cast<T>(n.attrs.eps));
                    for (int k = 0; k < d; ++k) yp[k] = xp[k] / nrm;
                }
                break;
            }
            case OpKind::KnnEntropy: {
                const Tensor<T>& pts = in(0);
                int np = pts.dim(0), d = pts.dim(1);
                std::vector<int> nn;
                std::vector<T> dist;
                nn_assign(pts, nn, dist);
                T acc = 0;
                for (T r : dist) acc += std::log(std::max(r, T(1e-30)));
                out.data[0] = digamma_int<T>(np) - digamma_int<T>(1) + log_unit_ball_volume<T>(d) +
                              (T(d) / T(np)) * acc;
                break;
            }
            case OpKind::InfoNce: {
                const Tensor<T>* proto = n.inputs.size() > 3 ? &in(3) : nullptr;
                out.data[0] =
                    infonce_forward(in(0), in(1), in(2), proto, static_cast<T>(n.attrs.tau));
                break;
            }
            case OpKind::PatchNce:
                out.data[0] = patch_nce_forward(in(0), in(1), static_cast<T>(n.attrs.tau));
                break;
        }
        ev.vals[id] = std::move(out);
    }
    return ev;
}

template Eval<float> forward<float>(const Graph&, const ParamStore<float>&,
                                    const std::map<std::string, Tensor<float>>&);
template Eval<double> forward<double>(const Graph&, const ParamStore<double>&,
                                      const std::map<std::string, Tensor<double>>&);

template <typename T>
Grads<T> backward(const Graph& g, const ParamStore<T>& store, const Eval<T>& ev,
                  const std::string& output_name, const Tensor<T>* seed, const GradRequest& req) {
    if (ev.graph != &g || ev.vals.size() != g.nodes().size()) {
        throw std::runtime_error("backward: evaluation does not belong to this graph (run forward first)");
    }
    int out_id = g.output(output_name);
    const Node& out_node = g.node(out_id);
    if (!seed && numel(out_node.shape) != 1) {
        throw std::runtime_error("backward: output '" + output_name +
                                 "' is not scalar; an explicit seed is required");
    }
    if (seed && seed->shape != out_node.shape) {
        throw std::runtime_error("backward: seed shape does not match output shape");
    }

    // A node participates in the sweep only if a wanted parameter or input can
    // be reached through it; everything else is pruned.
    size_t nn = g.nodes().size();
    std::vector<char> wants(nn, 0);
    for (size_t i = 0; i < nn; ++i) {
        const Node& n = g.node(static_cast<int>(i));
        if (n.kind == OpKind::Param) {
            wants[i] = req.wants_param(n.name) ? 1 : 0;
        } else if (n.kind == OpKind::Input) {
            wants[i] = (n.differentiable || req.extra_inputs.count(n.name)) ? 1 : 0;
        } else {
            for (int in : n.inputs) {
                if (wants[static_cast<size_t>(in)]) {
                    wants[i] = 1;
                    break;
                }
            }
        }
    }

    std::vector<Tensor<T>> grad(nn);
    auto ensure = [&](int id) -> Tensor<T>& {
        auto& t = grad[static_cast<size_t>(id)];
        if (t.shape.empty()) t = Tensor<T>(g.node(id).shape);
        return t;
    };
    if (wants[static_cast<size_t>(out_id)]) {
        Tensor<T>& s = ensure(out_id);
        if (seed) {
            s = *seed;
        } else {
            s.data[0] = T(1);
        }
    }

    for (int id = static_cast<int>(nn) - 1; id >= 0; --id) {
        if (!wants[static_cast<size_t>(id)] || grad[static_cast<size_t>(id)].shape.empty()) continue;
        const Node& n = g.node(id);
        const Tensor<T>& gy = grad[static_cast<size_t>(id)];
        auto val = [&](int k) -> const Tensor<T>& {
            return ev.vals[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        auto want_in = [&](int k) {
            return wants[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])] != 0;
        };
        auto gin = [&](int k) -> Tensor<T>& { return ensure(n.inputs[static_cast<size_t>(k)]); };

        switch (n.kind) {
            case OpKind::Input:
            case OpKind::Param:
            case OpKind::Const:
                break;
            case OpKind::Conv2d: {
                bool has_bias = n.inputs.size() > 2;
                Tensor<T>* dx = want_in(0) ? &gin(0) : nullptr;
                Tensor<T>* dw = want_in(1) ? &gin(1) : nullptr;
                Tensor<T>* db = has_bias && want_in(2) ? &gin(2) : nullptr;
                conv2d_backward(val(0), val(1), n.attrs.stride, n.attrs.pad, gy, dx, dw, db);
                break;
            }
            case OpKind::ConvTranspose2d: {
                bool has_bias = n.inputs.size() > 2;
                Tensor<T>* dx = want_in(0) ? &gin(0) : nullptr;
                Tensor<T>* dw = want_in(1) ? &gin(1) : nullptr;
                Tensor<T>* db = has_bias && want_in(2) ? &gin(2) : nullptr;
                convt2d_backward(val(0), val(1), n.attrs.stride, n.attrs.pad, gy, dx, dw, db);
                break;
            }
            case OpKind::UpsampleNN2x: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                int b = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
                for (int nb = 0; nb < b; ++nb)
                    for (int ch = 0; ch < c; ++ch)
                        for (int y = 0; y < 2 * h; ++y)
                            for (int xx = 0; xx < 2 * w; ++xx)
                                dx.at4(nb, ch, y / 2, xx / 2) += gy.at4(nb, ch, y, xx);
                break;
            }
            case OpKind::LeakyRelu: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& x = val(0);
                T a = static_cast<T>(n.attrs.alpha);
                for (size_t i = 0; i < dx.data.size(); ++i) {
                    dx.data[i] += gy.data[i] * (x.data[i] > 0 ? T(1) : a);
                }
                break;
            }
            case OpKind::Sigmoid: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& y = ev.vals[static_cast<size_t>(id)];
                for (size_t i = 0; i < dx.data.size(); ++i) {
                    dx.data[i] += gy.data[i] * y.data[i] * (T(1) - y.data[i]);
                }
                break;
            }
            case OpKind::InstanceNorm: {
                const Tensor<T>& x = val(0);
                const Tensor<T>& gamma = val(1);
                std::vector<T> mean, inv_std;
                instance_norm_stats(x, n.attrs.eps, mean, inv_std);
                int b = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
                Tensor<T>* dx = want_in(0) ? &gin(0) : nullptr;
                Tensor<T>* dgamma = want_in(1) ? &gin(1) : nullptr;
                Tensor<T>* dbeta = want_in(2) ? &gin(2) : nullptr;
                for (int nb = 0; nb < b; ++nb) {
                    for (int ch = 0; ch < c; ++ch) {
                        const T* xp = x.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        const T* gp = gy.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                        T mu = mean[static_cast<size_t>(nb) * c + ch];
                        T is = inv_std[static_cast<size_t>(nb) * c + ch];
                        T gsum = 0, gxsum = 0;
                        for (int i = 0; i < m; ++i) {
                            gsum += gp[i];
                            gxsum += gp[i] * (xp[i] - mu) * is;
                        }
                        if (dbeta) dbeta->data[static_cast<size_t>(ch)] += gsum;
                        if (dgamma) dgamma->data[static_cast<size_t>(ch)] += gxsum;
                        if (dx) {
                            T gm = gamma.data[static_cast<size_t>(ch)];
                            T* dp = dx->data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                            T mg = gsum / T(m), mgx = gxsum / T(m);
                            for (int i = 0; i < m; ++i) {
                                T xhat = (xp[i] - mu) * is;
                                dp[i] += gm * is * (gp[i] - mg - xhat * mgx);
                            }
                        }
                    }
                }
                break;
            }
            case OpKind::Linear: {
                const Tensor<T>& x = val(0);
                const Tensor<T>& w = val(1);
                int b = x.dim(0), k = x.dim(1), o = w.dim(0);
                if (want_in(0)) {
                    gemm(false, false, b, k, o, T(1), gy.data.data(), o, w.data.data(), k, T(1),
                         gin(0).data.data(), k);
                }
                if (want_in(1)) {
                    gemm(true, false, o, k, b, T(1), gy.data.data(), o, x.data.data(), k, T(1),
                         gin(1).data.data(), k);
                }
                if (n.inputs.size() > 2 && want_in(2)) {
                    Tensor<T>& db = gin(2);
                    for (int r = 0; r < b; ++r)
                        for (int cc = 0; cc < o; ++cc) db.data[static_cast<size_t>(cc)] += gy.at2(r, cc);
                }
                break;
            }
            case OpKind::Softmax:
                if (want_in(0)) {
                    softmax_axis_backward(ev.vals[static_cast<size_t>(id)], gy, n.attrs.axis, false,
                                          gin(0));
                }
                break;
            case OpKind::LogSoftmax:
                if (want_in(0)) {
                    softmax_axis_backward(ev.vals[static_cast<size_t>(id)], gy, n.attrs.axis, true,
                                          gin(0));
                }
                break;
            case OpKind::Log: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& x = val(0);
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gy.data[i] / x.data[i];
                break;
            }
            case OpKind::Exp: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& y = ev.vals[static_cast<size_t>(id)];
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gy.data[i] * y.data[i];
                break;
            }
            case OpKind::Square: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& x = val(0);
                for (size_t i = 0; i < dx.data.size(); ++i) {
                    dx.data[i] += gy.data[i] * T(2) * x.data[i];
                }
                break;
            }
            case OpKind::Add:
                for (int k = 0; k < 2; ++k) {
                    if (!want_in(k)) continue;
                    Tensor<T>& d = gin(k);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gy.data[i];
                }
                break;
            case OpKind::Sub: {
                if (want_in(0)) {
                    Tensor<T>& d = gin(0);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gy.data[i];
                }
                if (want_in(1)) {
                    Tensor<T>& d = gin(1);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] -= gy.data[i];
                }
                break;
            }
            case OpKind::Mul: {
                if (want_in(0)) {
                    Tensor<T>& d = gin(0);
                    const Tensor<T>& b2 = val(1);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gy.data[i] * b2.data[i];
                }
                if (want_in(1)) {
                    Tensor<T>& d = gin(1);
                    const Tensor<T>& a = val(0);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gy.data[i] * a.data[i];
                }
                break;
            }
            case OpKind::Scale: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                T c = static_cast<T>(n.attrs.c);
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += c * gy.data[i];
                break;
            }
            case OpKind::AddScalar: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gy.data[i];
                break;
            }
            case OpKind::MeanAll: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                T gv = gy.data[0] / T(dx.numel());
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gv;
                break;
            }
            case OpKind::SumAll: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                T gv = gy.data[0];
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gv;
                break;
            }
            case OpKind::Dot: {
                T gv = gy.data[0];
                if (want_in(0)) {
                    Tensor<T>& d = gin(0);
                    const Tensor<T>& b2 = val(1);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gv * b2.data[i];
                }
                if (want_in(1)) {
                    Tensor<T>& d = gin(1);
                    const Tensor<T>& a = val(0);
                    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += gv * a.data[i];
                }
                break;
            }
            case OpKind::GatherFlat: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                for (size_t i = 0; i < n.attrs.indices.size(); ++i) {
                    dx.data[static_cast<size_t>(n.attrs.indices[i])] += gy.data[i];
                }
                break;
            }
            case OpKind::GatherPixels: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                int f = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
                int m = static_cast<int>(n.attrs.indices.size() / 3);
                for (int i = 0; i < m; ++i) {
                    int bb = static_cast<int>(n.attrs.indices[3 * i]);
                    int yy = static_cast<int>(n.attrs.indices[3 * i + 1]);
                    int xx = static_cast<int>(n.attrs.indices[3 * i + 2]);
                    for (int c = 0; c < f; ++c) {
                        dx.data[((static_cast<size_t>(bb) * f + c) * h + yy) * w + xx] +=
                            gy.data[static_cast<size_t>(i) * f + c];
                    }
                }
                break;
            }
            case OpKind::AddChannelBias: {
                if (want_in(0)) {
                    Tensor<T>& dx = gin(0);
                    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gy.data[i];
                }
                if (want_in(1)) {
                    Tensor<T>& db = gin(1);
                    int b = gy.dim(0), c = gy.dim(1), m = gy.dim(2) * gy.dim(3);
                    for (int nb = 0; nb < b; ++nb) {
                        for (int ch = 0; ch < c; ++ch) {
                            const T* gp = gy.data.data() + (static_cast<size_t>(nb) * c + ch) * m;
                            T acc = 0;
                            for (int i = 0; i < m; ++i) acc += gp[i];
                            db.at2(nb, ch) += acc;
                        }
                    }
                }
                break;
            }
            case OpKind::ConcatChannels: {
                if (n.shape.size() == 4) {
                    int b = gy.dim(0), m = gy.dim(2) * gy.dim(3);
                    int c1 = g.shape_of(n.inputs[0])[1];
                    int c2 = g.shape_of(n.inputs[1])[1];
                    if (want_in(0)) {
                        Tensor<T>& da = gin(0);
                        for (int nb = 0; nb < b; ++nb)
                            for (int i = 0; i < c1 * m; ++i)
                                da.data[static_cast<size_t>(nb) * c1 * m + i] +=
                                    gy.data[static_cast<size_t>(nb) * (c1 + c2) * m + i];
                    }
                    if (want_in(1)) {
                        Tensor<T>& db = gin(1);
                        for (int nb = 0; nb < b; ++nb)
                            for (int i = 0; i < c2 * m; ++i)
                                db.data[static_cast<size_t>(nb) * c2 * m + i] +=
                                    gy.data[(static_cast<size_t>(nb) * (c1 + c2) + c1) * m + i];
                    }
                } else {
                    int rows = gy.dim(0);
                    int c1 = g.shape_of(n.inputs[0])[1];
                    int c2 = g.shape_of(n.inputs[1])[1];
                    if (want_in(0)) {
                        Tensor<T>& da = gin(0);
                        for (int r = 0; r < rows; ++r)
                            for (int k = 0; k < c1; ++k)
                                da.at2(r, k) += gy.data[static_cast<size_t>(r) * (c1 + c2) + k];
                    }
                    if (want_in(1)) {
                        Tensor<T>& db = gin(1);
                        for (int r = 0; r < rows; ++r)
                            for (int k = 0; k < c2; ++k)
                                db.at2(r, k) += gy.data[static_cast<size_t>(r) * (c1 + c2) + c1 + k];
                    }
                }
                break;
            }
            case OpKind::AvgPoolTo: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                int b = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
                int fy = h / n.attrs.th, fx = w / n.attrs.tw;
                T inv = T(1) / T(fy * fx);
                for (int nb = 0; nb < b; ++nb)
                    for (int ch = 0; ch < c; ++ch)
                        for (int ty = 0; ty < n.attrs.th; ++ty)
                            for (int tx = 0; tx < n.attrs.tw; ++tx) {
                                T gv = gy.at4(nb, ch, ty, tx) * inv;
                                for (int dy = 0; dy < fy; ++dy)
                                    for (int dx2 = 0; dx2 < fx; ++dx2)
                                        dx.at4(nb, ch, ty * fy + dy, tx * fx + dx2) += gv;
                            }
                break;
            }
            case OpKind::Reshape: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gy.data[i];
                break;
            }
            case OpKind::L2NormalizeRows: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& x = val(0);
                const Tensor<T>& y = ev.vals[static_cast<size_t>(id)];
                int rows = x.dim(0), d = x.dim(1);
                for (int r = 0; r < rows; ++r) {
                    const T* xp = x.data.data() + static_cast<size_t>(r) * d;
                    const T* yp = y.data.data() + static_cast<size_t>(r) * d;
                    const T* gp = gy.data.data() + static_cast<size_t>(r) * d;
                    T* dp = dx.data.data() + static_cast<size_t>(r) * d;
                    T nrm = 0;
                    for (int k = 0; k < d; ++k) nrm += xp[k] * xp[k];
                    nrm = std::sqrt(nrm + static_cast<T>(n.attrs.eps));
                    T yg = 0;
                    for (int k = 0; k < d; ++k) yg += yp[k] * gp[k];
                    for (int k = 0; k < d; ++k) dp[k] += (gp[k] - yp[k] * yg) / nrm;
                }
                break;
            }
            case OpKind::KnnEntropy: {
                if (!want_in(0)) break;
                Tensor<T>& dx = gin(0);
                const Tensor<T>& pts = val(0);
                int np = pts.dim(0), d = pts.dim(1);
                std::vector<int> nnv;
                std::vector<T> dist;
                nn_assign(pts, nnv, dist);
                T coef = gy.data[0] * T(d) / T(np);
                for (int i = 0; i < np; ++i) {
                    T r = dist[static_cast<size_t>(i)];
                    if (r <= T(1e-30)) continue;  // duplicate points: log clamped, no gradient
                    int m = nnv[static_cast<size_t>(i)];
                    const T* pi = pts.data.data() + static_cast<size_t>(i) * d;
                    const T* pm = pts.data.data() + static_cast<size_t>(m) * d;
                    T* di = dx.data.data() + static_cast<size_t>(i) * d;
                    T* dm = dx.data.data() + static_cast<size_t>(m) * d;
                    T s = coef / (r * r);
                    for (int k = 0; k < d; ++k) {
                        T diff = pi[k] - pm[k];
                        di[k] += s * diff;
                        dm[k] -= s * diff;
                    }
                }
                break;
            }
            case OpKind::InfoNce: {
                bool has_proto = n.inputs.size() > 3;
                const Tensor<T>* proto = has_proto ? &val(3) : nullptr;
                Tensor<T>* da = want_in(0) ? &gin(0) : nullptr;
                Tensor<T>* dp = want_in(1) ? &gin(1) : nullptr;
                Tensor<T>* dneg = want_in(2) ? &gin(2) : nullptr;
                Tensor<T>* dproto = has_proto && want_in(3) ? &gin(3) : nullptr;
                infonce_backward(val(0), val(1), val(2), proto, static_cast<T>(n.attrs.tau),
                                 gy.data[0], da, dp, dneg, dproto);
                break;
            }
            case OpKind::PatchNce: {
                Tensor<T>* da = want_in(0) ? &gin(0) : nullptr;
                Tensor<T>* dp = want_in(1) ? &gin(1) : nullptr;
                patch_nce_backward(val(0), val(1), static_cast<T>(n.attrs.tau), gy.data[0], da, dp);
                break;
            }
        }
    }

    Grads<T> out;
    for (const auto& [name, id] : g.params()) {
        if (!req.wants_param(name)) continue;
        Tensor<T>& t = grad[static_cast<size_t>(id)];
        out.params[name] = t.shape.empty() ? Tensor<T>(g.node(id).shape) : std::move(t);
    }
    for (const auto& [name, id] : g.inputs()) {
        const Node& n = g.node(id);
        if (!(n.differentiable || req.extra_inputs.count(name))) continue;
        Tensor<T>& t = grad[static_cast<size_t>(id)];
        out.inputs[name] = t.shape.empty() ? Tensor<T>(g.node(id).shape) : std::move(t);
    }
    return out;
}

template Grads<float> backward<float>(const Graph&, const ParamStore<float>&, const Eval<float>&,
                                      const std::string&, const Tensor<float>*, const GradRequest&);
template Grads<double> backward<double>(const Graph&, const ParamStore<double>&,
                                        const Eval<double>&, const std::string&,
                                        const Tensor<double>*, const GradRequest&);

}  // namespace hsb
