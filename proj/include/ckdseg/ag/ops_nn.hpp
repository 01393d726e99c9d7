/*
 * Copyright (c) 2026, the ckdseg authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <type_traits>
#include <vector>

#include "ckdseg/ag/ops_basic.hpp"

namespace ckdseg {

// ---------------------------------------------------------------------------
// Dense / batched matmul
// ---------------------------------------------------------------------------

/// y[n,o] = sum_i x[n,i] * w[i,o] (+ b[o]); x: (N, Cin), w: (Cin, Cout).
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<const Var<T>*> b = nullptr) {
    require_same_tape(x, w);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.shape[1] != wv.shape[0])
        throw ShapeError("linear: " + shape_str(xv.shape) + " x " + shape_str(wv.shape));
    int64_t N = xv.shape[0], Ci = xv.shape[1], Co = wv.shape[1];
    const T* bias = nullptr;
    int bid = -1;
    if (b) {
        const Tensor<T>& bv = t.value(b->id);
        if (bv.shape.size() != 1 || bv.shape[0] != Co) throw ShapeError("linear bias shape");
        bias = bv.data();
        bid = b->id;
    }
    Tensor<T> out({N, Co});
    for (int64_t n = 0; n < N; ++n) {
        T* o = out.data() + n * Co;
        if (bias)
            for (int64_t j = 0; j < Co; ++j) o[j] = bias[j];
        const T* xr = xv.data() + n * Ci;
        for (int64_t i = 0; i < Ci; ++i) {
            T xi = xr[i];
            const T* wr = wv.data() + i * Co;
            for (int64_t j = 0; j < Co; ++j) o[j] += xi * wr[j];
        }
    }
    bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || (b && t.needs_grad(bid));
    int xi_ = x.id, wi_ = w.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi_, wi_, bid, N, Ci, Co](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi_);
                      const Tensor<T>& wv = t.value(wi_);
                      if (t.needs_grad(xi_)) {
                          Tensor<T>& gx = t.grad(xi_);
                          for (int64_t n = 0; n < N; ++n) {
                              const T* g = go.data() + n * Co;
                              T* gxr = gx.data() + n * Ci;
                              for (int64_t i = 0; i < Ci; ++i) {
                                  const T* wr = wv.data() + i * Co;
                                  T acc = T(0);
                                  for (int64_t j = 0; j < Co; ++j) acc += g[j] * wr[j];
                                  gxr[i] += acc;
                              }
                          }
                      }
                      if (t.needs_grad(wi_)) {
                          Tensor<T>& gw = t.grad(wi_);
                          for (int64_t n = 0; n < N; ++n) {
                              const T* g = go.data() + n * Co;
                              const T* xr = xv.data() + n * Ci;
                              for (int64_t i = 0; i < Ci; ++i) {
                                  T xi = xr[i];
                                  T* gwr = gw.data() + i * Co;
                                  for (int64_t j = 0; j < Co; ++j) gwr[j] += xi * g[j];
                              }
                          }
                      }
                      if (bid >= 0 && t.needs_grad(bid)) {
                          Tensor<T>& gb = t.grad(bid);
                          for (int64_t n = 0; n < N; ++n) {
                              const T* g = go.data() + n * Co;
                              for (int64_t j = 0; j < Co; ++j) gb[j] += g[j];
                          }
                      }
                  });
}

/// Batched matmul: (G, N, K) x (G, K, M) -> (G, N, M).
template <class T>
Var<T> bmm(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    const Tensor<T>& av = t.value(a.id);
    const Tensor<T>& bv = t.value(b.id);
    if (av.shape.size() != 3 || bv.shape.size() != 3 || av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[1])
        throw ShapeError("bmm: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    int64_t G = av.shape[0], N = av.shape[1], K = av.shape[2], M = bv.shape[2];
    Tensor<T> out({G, N, M});
    for (int64_t g = 0; g < G; ++g) {
        const T* A = av.data() + g * N * K;
        const T* B = bv.data() + g * K * M;
        T* O = out.data() + g * N * M;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t k = 0; k < K; ++k) {
                T x = A[n * K + k];
                const T* Br = B + k * M;
                T* Or = O + n * M;
                for (int64_t m = 0; m < M; ++m) Or[m] += x * Br[m];
            }
    }
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi, G, N, K, M](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& av = t.value(ai);
        const Tensor<T>& bv = t.value(bi);
        if (t.needs_grad(ai)) {
            Tensor<T>& ga = t.grad(ai);  // dA = dO * B^T
            for (int64_t g = 0; g < G; ++g)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t k = 0; k < K; ++k) {
                        const T* Gr = go.data() + (g * N + n) * M;
                        const T* Br = bv.data() + (g * K + k) * M;
                        T acc = T(0);
                        for (int64_t m = 0; m < M; ++m) acc += Gr[m] * Br[m];
                        ga[(g * N + n) * K + k] += acc;
                    }
        }
        if (t.needs_grad(bi)) {
            Tensor<T>& gb = t.grad(bi);  // dB = A^T * dO
            for (int64_t g = 0; g < G; ++g)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t k = 0; k < K; ++k) {
                        T x = av[(g * N + n) * K + k];
                        const T* Gr = go.data() + (g * N + n) * M;
                        T* Gb = gb.data() + (g * K + k) * M;
                        for (int64_t m = 0; m < M; ++m) Gb[m] += x * Gr[m];
                    }
        }
    });
}

/// Batched matmul with transposed rhs: (G, N, K) x (G, M, K) -> (G, N, M).
template <class T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    const Tensor<T>& av = t.value(a.id);
    const Tensor<T>& bv = t.value(b.id);
    if (av.shape.size() != 3 || bv.shape.size() != 3 || av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[2])
        throw ShapeError("bmm_nt: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    int64_t G = av.shape[0], N = av.shape[1], K = av.shape[2], M = bv.shape[1];
    Tensor<T> out({G, N, M});
    for (int64_t g = 0; g < G; ++g)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t m = 0; m < M; ++m) {
                const T* Ar = av.data() + (g * N + n) * K;
                const T* Br = bv.data() + (g * M + m) * K;
                T acc = T(0);
                for (int64_t k = 0; k < K; ++k) acc += Ar[k] * Br[k];
                out[(g * N + n) * M + m] = acc;
            }
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi, G, N, K, M](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& av = t.value(ai);
        const Tensor<T>& bv = t.value(bi);
        if (t.needs_grad(ai)) {
            Tensor<T>& ga = t.grad(ai);  // dA = dO * B
            for (int64_t g = 0; g < G; ++g)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t m = 0; m < M; ++m) {
                        T gv = go[(g * N + n) * M + m];
                        const T* Br = bv.data() + (g * M + m) * K;
                        T* Gr = ga.data() + (g * N + n) * K;
                        for (int64_t k = 0; k < K; ++k) Gr[k] += gv * Br[k];
                    }
        }
        if (t.needs_grad(bi)) {
            Tensor<T>& gb = t.grad(bi);  // dB = dO^T * A
            for (int64_t g = 0; g < G; ++g)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t m = 0; m < M; ++m) {
                        T gv = go[(g * N + n) * M + m];
                        const T* Ar = av.data() + (g * N + n) * K;
                        T* Gr = gb.data() + (g * M + m) * K;
                        for (int64_t k = 0; k < K; ++k) Gr[k] += gv * Ar[k];
                    }
        }
    });
}

/// (G, N, H*d) -> (G*H, N, d).
template <class T>
Var<T> split_heads(Var<T> x, int64_t heads) {
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    if (xv.shape.size() != 3 || xv.shape[2] % heads != 0) throw ShapeError("split_heads: " + shape_str(xv.shape));
    int64_t G = xv.shape[0], N = xv.shape[1], C = xv.shape[2], d = C / heads;
    Tensor<T> out({G * heads, N, d});
    for (int64_t g = 0; g < G; ++g)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h) {
                const T* src = xv.data() + (g * N + n) * C + h * d;
                T* dst = out.data() + ((g * heads + h) * N + n) * d;
                std::copy(src, src + d, dst);
            }
    bool ng = t.needs_grad(x.id);
    int xi = x.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [xi, G, N, C, d, heads](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& gx = t.grad(xi);
        for (int64_t g = 0; g < G; ++g)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t h = 0; h < heads; ++h) {
                    T* dst = gx.data() + (g * N + n) * C + h * d;
                    const T* src = go.data() + ((g * heads + h) * N + n) * d;
                    for (int64_t k = 0; k < d; ++k) dst[k] += src[k];
                }
    });
}

/// (G*H, N, d) -> (G, N, H*d).
template <class T>
Var<T> merge_heads(Var<T> x, int64_t heads) {
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    if (xv.shape.size() != 3 || xv.shape[0] % heads != 0) throw ShapeError("merge_heads: " + shape_str(xv.shape));
    int64_t G = xv.shape[0] / heads, N = xv.shape[1], d = xv.shape[2], C = heads * d;
    Tensor<T> out({G, N, C});
    for (int64_t g = 0; g < G; ++g)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h) {
                const T* src = xv.data() + ((g * heads + h) * N + n) * d;
                T* dst = out.data() + (g * N + n) * C + h * d;
                std::copy(src, src + d, dst);
            }
    bool ng = t.needs_grad(x.id);
    int xi = x.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [xi, G, N, C, d, heads](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& gx = t.grad(xi);
        for (int64_t g = 0; g < G; ++g)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t h = 0; h < heads; ++h) {
                    T* dst = gx.data() + ((g * heads + h) * N + n) * d;
                    const T* src = go.data() + (g * N + n) * C + h * d;
                    for (int64_t k = 0; k < d; ++k) dst[k] += src[k];
                }
    });
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

/// Row softmax over the last axis.
template <class T>
Var<T> softmax_lastdim(Var<T> x) {
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    if (xv.shape.empty()) throw ShapeError("softmax on scalar");
    int64_t N = xv.shape.back();
    int64_t rows = xv.numel() / N;
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = xv.data() + r * N;
        T* o = out.data() + r * N;
        T m = p[0];
        for (int64_t i = 1; i < N; ++i) m = std::max(m, p[i]);
        T s = T(0);
        for (int64_t i = 0; i < N; ++i) {
            o[i] = std::exp(p[i] - m);
            s += o[i];
        }
        T inv = T(1) / s;
        for (int64_t i = 0; i < N; ++i) o[i] *= inv;
    }
    bool ng = t.needs_grad(x.id);
    int xi = x.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [xi, rows, N](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& gx = t.grad(xi);
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = go.data() + r * N;
            const T* yr = y.data() + r * N;
            T* gx_r = gx.data() + r * N;
            T dot = T(0);
            for (int64_t i = 0; i < N; ++i) dot += g[i] * yr[i];
            for (int64_t i = 0; i < N; ++i) gx_r[i] += (g[i] - dot) * yr[i];
        }
    });
}

/// Layer norm over the last axis of a (rows, C) matrix with affine (C).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    require_same_tape(x, gamma);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& gv = t.value(gamma.id);
    const Tensor<T>& bv = t.value(beta.id);
    if (xv.shape.size() != 2) throw ShapeError("layer_norm expects (rows, C)");
    int64_t R = xv.shape[0], C = xv.shape[1];
    if (gv.numel() != C || bv.numel() != C) throw ShapeError("layer_norm affine shape");
    Tensor<T> out(xv.shape);
    std::vector<T> inv_std(static_cast<size_t>(R)), means(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const T* p = xv.data() + r * C;
        T mean = T(0);
        for (int64_t i = 0; i < C; ++i) mean += p[i];
        mean /= static_cast<T>(C);
        T var = T(0);
        for (int64_t i = 0; i < C; ++i) {
            T d = p[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(C);
        T istd = T(1) / std::sqrt(var + eps);
        means[static_cast<size_t>(r)] = mean;
        inv_std[static_cast<size_t>(r)] = istd;
        T* o = out.data() + r * C;
        for (int64_t i = 0; i < C; ++i) o[i] = (p[i] - mean) * istd * gv[i] + bv[i];
    }
    bool ng = t.needs_grad(x.id) || t.needs_grad(gamma.id) || t.needs_grad(beta.id);
    int xi = x.id, gi = gamma.id, bi = beta.id;
    auto mean_c = std::make_shared<std::vector<T>>(std::move(means));
    auto istd_c = std::make_shared<std::vector<T>>(std::move(inv_std));
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi, gi, bi, R, C, mean_c, istd_c](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi);
                      const Tensor<T>& gv = t.value(gi);
                      for (int64_t r = 0; r < R; ++r) {
                          const T* p = xv.data() + r * C;
                          const T* g = go.data() + r * C;
                          T mean = (*mean_c)[static_cast<size_t>(r)];
                          T istd = (*istd_c)[static_cast<size_t>(r)];
                          if (t.needs_grad(xi)) {
                              // dx = istd * (dyg - mean(dyg) - xhat * mean(dyg * xhat))
                              T s1 = T(0), s2 = T(0);
                              for (int64_t i = 0; i < C; ++i) {
                                  T xhat = (p[i] - mean) * istd;
                                  T dyg = g[i] * gv[i];
                                  s1 += dyg;
                                  s2 += dyg * xhat;
                              }
                              s1 /= static_cast<T>(C);
                              s2 /= static_cast<T>(C);
                              T* gx = t.grad(xi).data() + r * C;
                              for (int64_t i = 0; i < C; ++i) {
                                  T xhat = (p[i] - mean) * istd;
                                  gx[i] += istd * (g[i] * gv[i] - s1 - xhat * s2);
                              }
                          }
                          if (t.needs_grad(gi)) {
                              T* gg = t.grad(gi).data();
                              for (int64_t i = 0; i < C; ++i) gg[i] += g[i] * (p[i] - mean) * istd;
                          }
                          if (t.needs_grad(bi)) {
                              T* gb = t.grad(bi).data();
                              for (int64_t i = 0; i < C; ++i) gb[i] += g[i];
                          }
                      }
                  });
}

/// Instance norm over the spatial axes of (B, C, spatial...) with per-channel
/// affine (C).
template <class T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& gv = t.value(gamma.id);
    const Tensor<T>& bv = t.value(beta.id);
    if (xv.shape.size() < 3) throw ShapeError("instance_norm expects (B,C,spatial...)");
    int64_t B = xv.shape[0], C = xv.shape[1];
    int64_t S = xv.numel() / (B * C);
    if (gv.numel() != C || bv.numel() != C) throw ShapeError("instance_norm affine shape");
    Tensor<T> out(xv.shape);
    std::vector<T> inv_std(static_cast<size_t>(B * C)), means(static_cast<size_t>(B * C));
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* p = xv.data() + bc * S;
        T mean = T(0);
        for (int64_t i = 0; i < S; ++i) mean += p[i];
        mean /= static_cast<T>(S);
        T var = T(0);
        for (int64_t i = 0; i < S; ++i) {
            T d = p[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(S);
        T istd = T(1) / std::sqrt(var + eps);
        means[static_cast<size_t>(bc)] = mean;
        inv_std[static_cast<size_t>(bc)] = istd;
        int64_t c = bc % C;
        T* o = out.data() + bc * S;
        for (int64_t i = 0; i < S; ++i) o[i] = (p[i] - mean) * istd * gv[c] + bv[c];
    }
    bool ng = t.needs_grad(x.id) || t.needs_grad(gamma.id) || t.needs_grad(beta.id);
    int xi = x.id, gi = gamma.id, bi = beta.id;
    auto mean_c = std::make_shared<std::vector<T>>(std::move(means));
    auto istd_c = std::make_shared<std::vector<T>>(std::move(inv_std));
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi, gi, bi, B, C, S, mean_c, istd_c](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi);
                      const Tensor<T>& gv = t.value(gi);
                      for (int64_t bc = 0; bc < B * C; ++bc) {
                          const T* p = xv.data() + bc * S;
                          const T* g = go.data() + bc * S;
                          int64_t c = bc % C;
                          T mean = (*mean_c)[static_cast<size_t>(bc)];
                          T istd = (*istd_c)[static_cast<size_t>(bc)];
                          if (t.needs_grad(xi)) {
                              T s1 = T(0), s2 = T(0);
                              for (int64_t i = 0; i < S; ++i) {
                                  T xhat = (p[i] - mean) * istd;
                                  T dyg = g[i] * gv[c];
                                  s1 += dyg;
                                  s2 += dyg * xhat;
                              }
                              s1 /= static_cast<T>(S);
                              s2 /= static_cast<T>(S);
                              T* gx = t.grad(xi).data() + bc * S;
                              for (int64_t i = 0; i < S; ++i) {
                                  T xhat = (p[i] - mean) * istd;
                                  gx[i] += istd * (g[i] * gv[c] - s1 - xhat * s2);
                              }
                          }
                          if (t.needs_grad(gi)) {
                              T acc = T(0);
                              for (int64_t i = 0; i < S; ++i) acc += g[i] * (p[i] - mean) * istd;
                              t.grad(gi)[c] += acc;
                          }
                          if (t.needs_grad(bi)) {
                              T acc = T(0);
                              for (int64_t i = 0; i < S; ++i) acc += g[i];
                              t.grad(bi)[c] += acc;
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Attention helpers
// ---------------------------------------------------------------------------

/// B[h, i, j] = table[h, index[i*N + j]]; table: (H, table_size).
template <class T>
Var<T> gather_bias(Var<T> table, std::type_identity_t<std::shared_ptr<const std::vector<int>>> index, int64_t n_tokens) {
    Tape<T>& t = *table.tape;
    const Tensor<T>& tv = t.value(table.id);
    if (tv.shape.size() != 2) throw ShapeError("gather_bias table must be (H, S)");
    int64_t H = tv.shape[0], S = tv.shape[1];
    if (static_cast<int64_t>(index->size()) != n_tokens * n_tokens) throw ShapeError("gather_bias index size");
    for (int idx : *index)
        if (idx < 0 || idx >= S) throw ShapeError("gather_bias index out of range");
    Tensor<T> out({H, n_tokens, n_tokens});
    for (int64_t h = 0; h < H; ++h) {
        const T* row = tv.data() + h * S;
        T* o = out.data() + h * n_tokens * n_tokens;
        for (int64_t k = 0; k < n_tokens * n_tokens; ++k) o[k] = row[(*index)[static_cast<size_t>(k)]];
    }
    bool ng = t.needs_grad(table.id);
    int ti = table.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ti, index, H, S, n_tokens](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& gt = t.grad(ti);
                      for (int64_t h = 0; h < H; ++h) {
                          T* row = gt.data() + h * S;
                          const T* g = go.data() + h * n_tokens * n_tokens;
                          for (int64_t k = 0; k < n_tokens * n_tokens; ++k) row[(*index)[static_cast<size_t>(k)]] += g[k];
                      }
                  });
}

/// scores: (B*nW*H, N, N) with head fastest; adds bias (H, N, N) per head and
/// an optional constant window mask (nW, N, N).
template <class T>
Var<T> add_bias_and_mask(Var<T> scores, Var<T> bias, std::type_identity_t<std::shared_ptr<const Tensor<T>>> mask, int64_t n_windows,
                         int64_t heads) {
    require_same_tape(scores, bias);
    Tape<T>& t = *scores.tape;
    const Tensor<T>& sv = t.value(scores.id);
    const Tensor<T>& bv = t.value(bias.id);
    if (sv.shape.size() != 3) throw ShapeError("add_bias_and_mask scores must be (G,N,N)");
    int64_t G = sv.shape[0], N = sv.shape[1];
    if (sv.shape[2] != N) throw ShapeError("add_bias_and_mask scores must be square");
    if (G % (n_windows * heads) != 0) throw ShapeError("add_bias_and_mask group count mismatch");
    if (bv.shape != Shape{heads, N, N}) throw ShapeError("add_bias_and_mask bias shape");
    if (mask && mask->shape != Shape{n_windows, N, N}) throw ShapeError("add_bias_and_mask mask shape");
    Tensor<T> out = sv;
    int64_t NN = N * N;
    for (int64_t g = 0; g < G; ++g) {
        int64_t h = g % heads;
        int64_t w = (g / heads) % n_windows;
        T* o = out.data() + g * NN;
        const T* b = bv.data() + h * NN;
        for (int64_t k = 0; k < NN; ++k) o[k] += b[k];
        if (mask) {
            const T* m = mask->data() + w * NN;
            for (int64_t k = 0; k < NN; ++k) o[k] += m[k];
        }
    }
    bool ng = t.needs_grad(scores.id) || t.needs_grad(bias.id);
    int si = scores.id, bi = bias.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [si, bi, G, NN, heads](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      if (t.needs_grad(si)) detail::accum(t.grad(si), go);
                      if (t.needs_grad(bi)) {
                          Tensor<T>& gb = t.grad(bi);
                          for (int64_t g = 0; g < G; ++g) {
                              int64_t h = g % heads;
                              const T* src = go.data() + g * NN;
                              T* dst = gb.data() + h * NN;
                              for (int64_t k = 0; k < NN; ++k) dst[k] += src[k];
                          }
                      }
                  });
}

/// Per-channel gating: x (B, C, spatial...) scaled by s (B, C).
template <class T>
Var<T> scale_channels(Var<T> x, Var<T> s) {
    require_same_tape(x, s);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& sv = t.value(s.id);
    if (xv.shape.size() < 3 || sv.shape.size() != 2 || sv.shape[0] != xv.shape[0] || sv.shape[1] != xv.shape[1])
        throw ShapeError("scale_channels: " + shape_str(xv.shape) + " x " + shape_str(sv.shape));
    int64_t BC = xv.shape[0] * xv.shape[1];
    int64_t S = xv.numel() / BC;
    Tensor<T> out = xv;
    for (int64_t bc = 0; bc < BC; ++bc) {
        T f = sv[bc];
        T* p = out.data() + bc * S;
        for (int64_t i = 0; i < S; ++i) p[i] *= f;
    }
    bool ng = t.needs_grad(x.id) || t.needs_grad(s.id);
    int xi = x.id, si = s.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [xi, si, BC, S](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& xv = t.value(xi);
        const Tensor<T>& sv = t.value(si);
        if (t.needs_grad(xi)) {
            Tensor<T>& gx = t.grad(xi);
            for (int64_t bc = 0; bc < BC; ++bc) {
                T f = sv[bc];
                const T* g = go.data() + bc * S;
                T* p = gx.data() + bc * S;
                for (int64_t i = 0; i < S; ++i) p[i] += g[i] * f;
            }
        }
        if (t.needs_grad(si)) {
            Tensor<T>& gs = t.grad(si);
            for (int64_t bc = 0; bc < BC; ++bc) {
                const T* g = go.data() + bc * S;
                const T* p = xv.data() + bc * S;
                T acc = T(0);
                for (int64_t i = 0; i < S; ++i) acc += g[i] * p[i];
                gs[bc] += acc;
            }
        }
    });
}

/// Separable product: out[b,c,x,y,z] = fx[b,c,x] * fy[b,c,y] * fz[b,c,z].
template <class T>
Var<T> outer3(Var<T> fx, Var<T> fy, Var<T> fz) {
    require_same_tape(fx, fy);
    require_same_tape(fy, fz);
    Tape<T>& t = *fx.tape;
    const Tensor<T>& xv = t.value(fx.id);
    const Tensor<T>& yv = t.value(fy.id);
    const Tensor<T>& zv = t.value(fz.id);
    if (xv.shape.size() != 3 || yv.shape.size() != 3 || zv.shape.size() != 3)
        throw ShapeError("outer3 expects (B,C,L) profiles");
    if (xv.shape[0] != yv.shape[0] || xv.shape[0] != zv.shape[0] || xv.shape[1] != yv.shape[1] ||
        xv.shape[1] != zv.shape[1])
        throw ShapeError("outer3 channel mismatch");
    int64_t B = xv.shape[0], C = xv.shape[1], X = xv.shape[2], Y = yv.shape[2], Z = zv.shape[2];
    Tensor<T> out({B, C, X, Y, Z});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* px = xv.data() + bc * X;
        const T* py = yv.data() + bc * Y;
        const T* pz = zv.data() + bc * Z;
        T* o = out.data() + bc * X * Y * Z;
        for (int64_t ix = 0; ix < X; ++ix)
            for (int64_t iy = 0; iy < Y; ++iy) {
                T xy = px[ix] * py[iy];
                T* row = o + (ix * Y + iy) * Z;
                for (int64_t iz = 0; iz < Z; ++iz) row[iz] = xy * pz[iz];
            }
    }
    bool ng = t.needs_grad(fx.id) || t.needs_grad(fy.id) || t.needs_grad(fz.id);
    int xi = fx.id, yi = fy.id, zi = fz.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi, yi, zi, B, C, X, Y, Z](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi);
                      const Tensor<T>& yv = t.value(yi);
                      const Tensor<T>& zv = t.value(zi);
                      for (int64_t bc = 0; bc < B * C; ++bc) {
                          const T* px = xv.data() + bc * X;
                          const T* py = yv.data() + bc * Y;
                          const T* pz = zv.data() + bc * Z;
                          const T* g = go.data() + bc * X * Y * Z;
                          for (int64_t ix = 0; ix < X; ++ix)
                              for (int64_t iy = 0; iy < Y; ++iy) {
                                  const T* row = g + (ix * Y + iy) * Z;
                                  if (t.needs_grad(xi)) {
                                      T acc = T(0);
                                      for (int64_t iz = 0; iz < Z; ++iz) acc += row[iz] * pz[iz];
                                      t.grad(xi)[bc * X + ix] += acc * py[iy];
                                  }
                                  if (t.needs_grad(yi)) {
                                      T acc = T(0);
                                      for (int64_t iz = 0; iz < Z; ++iz) acc += row[iz] * pz[iz];
                                      t.grad(yi)[bc * Y + iy] += acc * px[ix];
                                  }
                                  if (t.needs_grad(zi)) {
                                      T xy = px[ix] * py[iy];
                                      T* gz = t.grad(zi).data() + bc * Z;
                                      for (int64_t iz = 0; iz < Z; ++iz) gz[iz] += row[iz] * xy;
                                  }
                              }
                      }
                  });
}

}  // namespace ckdseg
