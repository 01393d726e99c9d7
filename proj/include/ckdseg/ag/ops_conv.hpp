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
#include <type_traits>

#include "ckdseg/ag/ops_basic.hpp"

namespace ckdseg {

namespace detail {

struct ConvDims {
    int64_t B, Ci, X, Y, Z;
    int64_t Co, kx, ky, kz;
    int64_t OX, OY, OZ;
    int64_t groups, ci_g, co_g;
    int64_t stride, pad;
};

}  // namespace detail

/// 3D convolution. x: (B, Cin, X, Y, Z); w: (Cout, Cin/groups, k, k, k);
/// optional bias (Cout). Cubic kernel, uniform stride and zero padding.
template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, std::type_identity_t<const Var<T>*> bias, int64_t stride, int64_t pad, int64_t groups = 1) {
    require_same_tape(x, w);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    if (xv.shape.size() != 5 || wv.shape.size() != 5)
        throw ShapeError("conv3d: x " + shape_str(xv.shape) + ", w " + shape_str(wv.shape));
    detail::ConvDims d;
    d.B = xv.shape[0];
    d.Ci = xv.shape[1];
    d.X = xv.shape[2];
    d.Y = xv.shape[3];
    d.Z = xv.shape[4];
    d.Co = wv.shape[0];
    d.kx = wv.shape[2];
    d.ky = wv.shape[3];
    d.kz = wv.shape[4];
    d.groups = groups;
    if (d.Ci % groups != 0 || d.Co % groups != 0) throw ShapeError("conv3d: channels not divisible by groups");
    d.ci_g = d.Ci / groups;
    d.co_g = d.Co / groups;
    if (wv.shape[1] != d.ci_g) throw ShapeError("conv3d: weight in-channels mismatch");
    d.stride = stride;
    d.pad = pad;
    d.OX = (d.X + 2 * pad - d.kx) / stride + 1;
    d.OY = (d.Y + 2 * pad - d.ky) / stride + 1;
    d.OZ = (d.Z + 2 * pad - d.kz) / stride + 1;
    if (d.OX <= 0 || d.OY <= 0 || d.OZ <= 0) throw ShapeError("conv3d: output would be empty");
    int bid = -1;
    if (bias) {
        if (t.value(bias->id).numel() != d.Co) throw ShapeError("conv3d bias shape");
        bid = bias->id;
    }

    Tensor<T> out({d.B, d.Co, d.OX, d.OY, d.OZ});
    const int64_t in_sp = d.X * d.Y * d.Z;
    const int64_t out_sp = d.OX * d.OY * d.OZ;
    for (int64_t b = 0; b < d.B; ++b) {
        for (int64_t oc = 0; oc < d.Co; ++oc) {
            T* yp = out.data() + (b * d.Co + oc) * out_sp;
            if (bid >= 0) {
                T bv = t.value(bid)[oc];
                for (int64_t i = 0; i < out_sp; ++i) yp[i] = bv;
            }
            int64_t g = oc / d.co_g;
            for (int64_t icr = 0; icr < d.ci_g; ++icr) {
                int64_t ic = g * d.ci_g + icr;
                const T* xp = xv.data() + (b * d.Ci + ic) * in_sp;
                const T* wp = wv.data() + (oc * d.ci_g + icr) * d.kx * d.ky * d.kz;
                for (int64_t kx = 0; kx < d.kx; ++kx)
                    for (int64_t ky = 0; ky < d.ky; ++ky)
                        for (int64_t kz = 0; kz < d.kz; ++kz) {
                            T wvk = wp[(kx * d.ky + ky) * d.kz + kz];
                            if (wvk == T(0)) continue;
                            for (int64_t ox = 0; ox < d.OX; ++ox) {
                                int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= d.X) continue;
                                for (int64_t oy = 0; oy < d.OY; ++oy) {
                                    int64_t iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= d.Y) continue;
                                    T* yrow = yp + (ox * d.OY + oy) * d.OZ;
                                    const T* xrow = xp + (ix * d.Y + iy) * d.Z;
                                    if (stride == 1) {
                                        int64_t oz0 = std::max<int64_t>(0, pad - kz);
                                        int64_t oz1 = std::min(d.OZ, d.Z + pad - kz);
                                        const T* xq = xrow + kz - pad;
                                        for (int64_t oz = oz0; oz < oz1; ++oz) yrow[oz] += wvk * xq[oz];
                                    } else {
                                        for (int64_t oz = 0; oz < d.OZ; ++oz) {
                                            int64_t iz = oz * stride + kz - pad;
                                            if (iz < 0 || iz >= d.Z) continue;
                                            yrow[oz] += wvk * xrow[iz];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    }

    bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || (bid >= 0 && t.needs_grad(bid));
    int xi = x.id, wi = w.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [xi, wi, bid, d](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& xv = t.value(xi);
        const Tensor<T>& wv = t.value(wi);
        const int64_t in_sp = d.X * d.Y * d.Z;
        const int64_t out_sp = d.OX * d.OY * d.OZ;
        bool need_x = t.needs_grad(xi);
        bool need_w = t.needs_grad(wi);
        for (int64_t b = 0; b < d.B; ++b) {
            for (int64_t oc = 0; oc < d.Co; ++oc) {
                const T* gp = go.data() + (b * d.Co + oc) * out_sp;
                int64_t g = oc / d.co_g;
                for (int64_t icr = 0; icr < d.ci_g; ++icr) {
                    int64_t ic = g * d.ci_g + icr;
                    const T* xp = xv.data() + (b * d.Ci + ic) * in_sp;
                    T* gxp = need_x ? t.grad(xi).data() + (b * d.Ci + ic) * in_sp : nullptr;
                    const T* wp = wv.data() + (oc * d.ci_g + icr) * d.kx * d.ky * d.kz;
                    T* gwp = need_w ? t.grad(wi).data() + (oc * d.ci_g + icr) * d.kx * d.ky * d.kz : nullptr;
                    for (int64_t kx = 0; kx < d.kx; ++kx)
                        for (int64_t ky = 0; ky < d.ky; ++ky)
                            for (int64_t kz = 0; kz < d.kz; ++kz) {
                                T wvk = wp[(kx * d.ky + ky) * d.kz + kz];
                                T dw = T(0);
                                for (int64_t ox = 0; ox < d.OX; ++ox) {
                                    int64_t ix = ox * d.stride + kx - d.pad;
                                    if (ix < 0 || ix >= d.X) continue;
                                    for (int64_t oy = 0; oy < d.OY; ++oy) {
                                        int64_t iy = oy * d.stride + ky - d.pad;
                                        if (iy < 0 || iy >= d.Y) continue;
                                        const T* grow = gp + (ox * d.OY + oy) * d.OZ;
                                        const T* xrow = xp + (ix * d.Y + iy) * d.Z;
                                        T* gxrow = need_x ? gxp + (ix * d.Y + iy) * d.Z : nullptr;
                                        if (d.stride == 1) {
                                            int64_t oz0 = std::max<int64_t>(0, d.pad - kz);
                                            int64_t oz1 = std::min(d.OZ, d.Z + d.pad - kz);
                                            int64_t off = kz - d.pad;
                                            if (need_w) {
                                                const T* xq = xrow + off;
                                                for (int64_t oz = oz0; oz < oz1; ++oz) dw += grow[oz] * xq[oz];
                                            }
                                            if (need_x) {
                                                T* gq = gxrow + off;
                                                for (int64_t oz = oz0; oz < oz1; ++oz) gq[oz] += grow[oz] * wvk;
                                            }
                                        } else {
                                            for (int64_t oz = 0; oz < d.OZ; ++oz) {
                                                int64_t iz = oz * d.stride + kz - d.pad;
                                                if (iz < 0 || iz >= d.Z) continue;
                                                if (need_w) dw += grow[oz] * xrow[iz];
                                                if (need_x) gxrow[iz] += grow[oz] * wvk;
                                            }
                                        }
                                    }
                                }
                                if (need_w) gwp[(kx * d.ky + ky) * d.kz + kz] += dw;
                            }
                }
                if (bid >= 0 && t.needs_grad(bid)) {
                    T acc = T(0);
                    for (int64_t i = 0; i < out_sp; ++i) acc += gp[i];
                    t.grad(bid)[oc] += acc;
                }
            }
        }
    });
}

/// Pointwise (1x1x1, stride 1) convolution over channels; faster dedicated
/// path used by expansion/projection layers.
template <class T>
Var<T> conv1x1(Var<T> x, Var<T> w, std::type_identity_t<const Var<T>*> bias) {
    require_same_tape(x, w);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    if (xv.shape.size() < 3) throw ShapeError("conv1x1 expects (B,C,spatial...)");
    if (wv.shape.size() != 2 || wv.shape[1] != xv.shape[1])
        throw ShapeError("conv1x1 weight: " + shape_str(wv.shape) + " for input " + shape_str(xv.shape));
    int64_t B = xv.shape[0], Ci = xv.shape[1], Co = wv.shape[0];
    int64_t S = xv.numel() / (B * Ci);
    int bid = -1;
    if (bias) {
        if (t.value(bias->id).numel() != Co) throw ShapeError("conv1x1 bias shape");
        bid = bias->id;
    }
    Shape out_shape = xv.shape;
    out_shape[1] = Co;
    Tensor<T> out(out_shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oc = 0; oc < Co; ++oc) {
            T* o = out.data() + (b * Co + oc) * S;
            if (bid >= 0) {
                T bv = t.value(bid)[oc];
                for (int64_t i = 0; i < S; ++i) o[i] = bv;
            }
            for (int64_t ic = 0; ic < Ci; ++ic) {
                T wvk = wv[oc * Ci + ic];
                if (wvk == T(0)) continue;
                const T* p = xv.data() + (b * Ci + ic) * S;
                for (int64_t i = 0; i < S; ++i) o[i] += wvk * p[i];
            }
        }
    bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || (bid >= 0 && t.needs_grad(bid));
    int xi = x.id, wi = w.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi, wi, bid, B, Ci, Co, S](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi);
                      const Tensor<T>& wv = t.value(wi);
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t oc = 0; oc < Co; ++oc) {
                              const T* g = go.data() + (b * Co + oc) * S;
                              for (int64_t ic = 0; ic < Ci; ++ic) {
                                  const T* p = xv.data() + (b * Ci + ic) * S;
                                  if (t.needs_grad(xi)) {
                                      T wvk = wv[oc * Ci + ic];
                                      T* gx = t.grad(xi).data() + (b * Ci + ic) * S;
                                      for (int64_t i = 0; i < S; ++i) gx[i] += g[i] * wvk;
                                  }
                                  if (t.needs_grad(wi)) {
                                      T acc = T(0);
                                      for (int64_t i = 0; i < S; ++i) acc += g[i] * p[i];
                                      t.grad(wi)[oc * Ci + ic] += acc;
                                  }
                              }
                              if (bid >= 0 && t.needs_grad(bid)) {
                                  T acc = T(0);
                                  for (int64_t i = 0; i < S; ++i) acc += g[i];
                                  t.grad(bid)[oc] += acc;
                              }
                          }
                  });
}

/// Transposed convolution with kernel 2, stride 2: doubles each spatial dim.
/// x: (B, Cin, X, Y, Z); w: (Cin, Cout, 2, 2, 2); bias (Cout) optional.
template <class T>
Var<T> conv_transpose3d_k2s2(Var<T> x, Var<T> w, std::type_identity_t<const Var<T>*> bias) {
    require_same_tape(x, w);
    Tape<T>& t = *x.tape;
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    if (xv.shape.size() != 5 || wv.shape.size() != 5 || wv.shape[0] != xv.shape[1] || wv.shape[2] != 2 ||
        wv.shape[3] != 2 || wv.shape[4] != 2)
        throw ShapeError("conv_transpose3d: x " + shape_str(xv.shape) + ", w " + shape_str(wv.shape));
    int64_t B = xv.shape[0], Ci = xv.shape[1], X = xv.shape[2], Y = xv.shape[3], Z = xv.shape[4];
    int64_t Co = wv.shape[1];
    int64_t OX = 2 * X, OY = 2 * Y, OZ = 2 * Z;
    int bid = -1;
    if (bias) {
        if (t.value(bias->id).numel() != Co) throw ShapeError("conv_transpose3d bias shape");
        bid = bias->id;
    }
    Tensor<T> out({B, Co, OX, OY, OZ});
    // With k == s every output voxel has exactly one source voxel.
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oc = 0; oc < Co; ++oc) {
            T* o = out.data() + (b * Co + oc) * OX * OY * OZ;
            if (bid >= 0) {
                T bv = t.value(bid)[oc];
                for (int64_t i = 0; i < OX * OY * OZ; ++i) o[i] = bv;
            }
            for (int64_t ic = 0; ic < Ci; ++ic) {
                const T* p = xv.data() + (b * Ci + ic) * X * Y * Z;
                const T* wp = wv.data() + (ic * Co + oc) * 8;
                for (int64_t ix = 0; ix < X; ++ix)
                    for (int64_t iy = 0; iy < Y; ++iy)
                        for (int64_t iz = 0; iz < Z; ++iz) {
                            T v = p[(ix * Y + iy) * Z + iz];
                            if (v == T(0)) continue;
                            for (int64_t kx = 0; kx < 2; ++kx)
                                for (int64_t ky = 0; ky < 2; ++ky) {
                                    T* row = o + ((2 * ix + kx) * OY + (2 * iy + ky)) * OZ + 2 * iz;
                                    const T* wr = wp + (kx * 2 + ky) * 2;
                                    row[0] += v * wr[0];
                                    row[1] += v * wr[1];
                                }
                        }
            }
        }
    bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || (bid >= 0 && t.needs_grad(bid));
    int xi = x.id, wi = w.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [xi, wi, bid, B, Ci, Co, X, Y, Z](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& xv = t.value(xi);
                      const Tensor<T>& wv = t.value(wi);
                      int64_t OY = 2 * Y, OZ = 2 * Z;
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t oc = 0; oc < Co; ++oc) {
                              const T* g = go.data() + (b * Co + oc) * 8 * X * Y * Z;
                              for (int64_t ic = 0; ic < Ci; ++ic) {
                                  const T* p = xv.data() + (b * Ci + ic) * X * Y * Z;
                                  T* gx = t.needs_grad(xi) ? t.grad(xi).data() + (b * Ci + ic) * X * Y * Z : nullptr;
                                  const T* wp = wv.data() + (ic * Co + oc) * 8;
                                  T* gw = t.needs_grad(wi) ? t.grad(wi).data() + (ic * Co + oc) * 8 : nullptr;
                                  for (int64_t ix = 0; ix < X; ++ix)
                                      for (int64_t iy = 0; iy < Y; ++iy)
                                          for (int64_t iz = 0; iz < Z; ++iz) {
                                              T v = p[(ix * Y + iy) * Z + iz];
                                              T dx = T(0);
                                              for (int64_t kx = 0; kx < 2; ++kx)
                                                  for (int64_t ky = 0; ky < 2; ++ky) {
                                                      const T* grow =
                                                          g + ((2 * ix + kx) * OY + (2 * iy + ky)) * OZ + 2 * iz;
                                                      const T* wr = wp + (kx * 2 + ky) * 2;
                                                      T* gwr = gw ? gw + (kx * 2 + ky) * 2 : nullptr;
                                                      dx += grow[0] * wr[0] + grow[1] * wr[1];
                                                      if (gwr) {
                                                          gwr[0] += grow[0] * v;
                                                          gwr[1] += grow[1] * v;
                                                      }
                                                  }
                                              if (gx) gx[(ix * Y + iy) * Z + iz] += dx;
                                          }
                              }
                              if (bid >= 0 && t.needs_grad(bid)) {
                                  T acc = T(0);
                                  for (int64_t i = 0; i < 8 * X * Y * Z; ++i) acc += g[i];
                                  t.grad(bid)[oc] += acc;
                              }
                          }
                  });
}

}  // namespace ckdseg
