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

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "ckdseg/ag/tape.hpp"

namespace ckdseg {

namespace detail {

template <class T>
void accum(Tensor<T>& g, const Tensor<T>& delta) {
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += delta.v[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    require_same_shape(t.value(a.id), t.value(b.id), "add");
    Tensor<T> out = t.value(a.id);
    const auto& bv = t.value(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        if (t.needs_grad(ai)) detail::accum(t.grad(ai), go);
        if (t.needs_grad(bi)) detail::accum(t.grad(bi), go);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    require_same_shape(t.value(a.id), t.value(b.id), "sub");
    Tensor<T> out = t.value(a.id);
    const auto& bv = t.value(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv[i];
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        if (t.needs_grad(ai)) detail::accum(t.grad(ai), go);
        if (t.needs_grad(bi)) {
            Tensor<T>& gb = t.grad(bi);
            for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= go.v[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    require_same_shape(t.value(a.id), t.value(b.id), "mul");
    Tensor<T> out = t.value(a.id);
    const auto& bv = t.value(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const auto& av = t.value(ai).v;
        const auto& bv2 = t.value(bi).v;
        if (t.needs_grad(ai)) {
            Tensor<T>& ga = t.grad(ai);
            for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += go.v[i] * bv2[i];
        }
        if (t.needs_grad(bi)) {
            Tensor<T>& gb = t.grad(bi);
            for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += go.v[i] * av[i];
        }
    });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    Tape<T>& t = *a.tape;
    require_same_shape(t.value(a.id), t.value(b.id), "div");
    Tensor<T> out = t.value(a.id);
    const auto& bv = t.value(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= bv[i];
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const auto& av = t.value(ai).v;
        const auto& bv2 = t.value(bi).v;
        if (t.needs_grad(ai)) {
            Tensor<T>& ga = t.grad(ai);
            for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += go.v[i] / bv2[i];
        }
        if (t.needs_grad(bi)) {
            Tensor<T>& gb = t.grad(bi);
            for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= go.v[i] * av[i] / (bv2[i] * bv2[i]);
        }
    });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    for (auto& x : out.v) x += c;
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
        detail::accum(t.grad(ai), t.grad(self));
    });
}

template <class T>
Var<T> mul_scalar(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    for (auto& x : out.v) x *= c;
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, c](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& ga = t.grad(ai);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += go.v[i] * c;
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(Var<T> a) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    for (auto& x : out.v) x = sigmoid_scalar(x);
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& ga = t.grad(ai);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += go.v[i] * y.v[i] * (T(1) - y.v[i]);
    });
}

template <class T>
Var<T> silu(Var<T> a) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    for (auto& x : out.v) x = x * sigmoid_scalar(x);
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& x = t.value(ai);
        Tensor<T>& ga = t.grad(ai);
        for (size_t i = 0; i < ga.v.size(); ++i) {
            T s = sigmoid_scalar(x.v[i]);
            ga.v[i] += go.v[i] * s * (T(1) + x.v[i] * (T(1) - s));
        }
    });
}

template <class T>
Var<T> gelu(Var<T> a) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (auto& x : out.v) x = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& x = t.value(ai);
        Tensor<T>& ga = t.grad(ai);
        const T inv_sqrt2 = T(0.70710678118654752440);
        const T inv_sqrt2pi = T(0.39894228040143267794);
        for (size_t i = 0; i < ga.v.size(); ++i) {
            T xi = x.v[i];
            T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xi * xi);
            ga.v[i] += go.v[i] * (cdf + xi * pdf);
        }
    });
}

template <class T>
Var<T> leaky_relu(Var<T> a, T slope) {
    Tape<T>& t = *a.tape;
    Tensor<T> out = t.value(a.id);
    for (auto& x : out.v) x = x > T(0) ? x : slope * x;
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, slope](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& x = t.value(ai);
        Tensor<T>& ga = t.grad(ai);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += go.v[i] * (x.v[i] > T(0) ? T(1) : slope);
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(Var<T> a) {
    Tape<T>& t = *a.tape;
    T s = T(0);
    for (const auto& x : t.value(a.id).v) s += x;
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(Tensor<T>({1}, std::vector<T>{s}), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
                      T g = t.grad(self).v[0];
                      Tensor<T>& ga = t.grad(ai);
                      for (auto& x : ga.v) x += g;
                  });
}

template <class T>
Var<T> mean_all(Var<T> a) {
    Tape<T>& t = *a.tape;
    int64_t n = t.value(a.id).numel();
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(n));
}

/// (B, C, spatial...) -> (B, C), summing over all spatial positions.
template <class T>
Var<T> sum_spatial(Var<T> a) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() < 3) throw ShapeError("sum_spatial expects at least 3 dims, got " + shape_str(x.shape));
    int64_t b = x.shape[0], c = x.shape[1];
    int64_t s = x.numel() / (b * c);
    Tensor<T> out({b, c});
    for (int64_t r = 0; r < b * c; ++r) {
        T acc = T(0);
        const T* p = x.data() + r * s;
        for (int64_t i = 0; i < s; ++i) acc += p[i];
        out[r] = acc;
    }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, b, c, s](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& ga = t.grad(ai);
        for (int64_t r = 0; r < b * c; ++r) {
            T g = go[r];
            T* p = ga.data() + r * s;
            for (int64_t i = 0; i < s; ++i) p[i] += g;
        }
    });
}

/// (B, C, spatial...) -> (B, C), averaging over all spatial positions.
template <class T>
Var<T> mean_spatial(Var<T> a) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() < 3) throw ShapeError("mean_spatial expects at least 3 dims");
    int64_t s = x.numel() / (x.shape[0] * x.shape[1]);
    return mul_scalar(sum_spatial(a), T(1) / static_cast<T>(s));
}

/// Directional average pool: (B, C, X, Y, Z) -> (B, C, dims[axis]) where the
/// other two spatial axes are averaged away. axis: 0=X, 1=Y, 2=Z.
template <class T>
Var<T> pool_axis(Var<T> a, int axis) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() != 5) throw ShapeError("pool_axis expects (B,C,X,Y,Z), got " + shape_str(x.shape));
    if (axis < 0 || axis > 2) throw ArgumentError("pool_axis axis must be 0, 1 or 2");
    int64_t B = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4];
    int64_t L = x.shape[static_cast<size_t>(2 + axis)];
    Tensor<T> out({B, C, L});
    T inv = T(1) / static_cast<T>(X * Y * Z / L);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.data() + (b * C + c) * X * Y * Z;
            T* o = out.data() + (b * C + c) * L;
            for (int64_t ix = 0; ix < X; ++ix)
                for (int64_t iy = 0; iy < Y; ++iy)
                    for (int64_t iz = 0; iz < Z; ++iz) {
                        int64_t l = axis == 0 ? ix : (axis == 1 ? iy : iz);
                        o[l] += p[(ix * Y + iy) * Z + iz];
                    }
            for (int64_t l = 0; l < L; ++l) o[l] *= inv;
        }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai, axis, B, C, X, Y, Z, L, inv](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& ga = t.grad(ai);
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t c = 0; c < C; ++c) {
                              T* p = ga.data() + (b * C + c) * X * Y * Z;
                              const T* o = go.data() + (b * C + c) * L;
                              for (int64_t ix = 0; ix < X; ++ix)
                                  for (int64_t iy = 0; iy < Y; ++iy)
                                      for (int64_t iz = 0; iz < Z; ++iz) {
                                          int64_t l = axis == 0 ? ix : (axis == 1 ? iy : iz);
                                          p[(ix * Y + iy) * Z + iz] += o[l] * inv;
                                      }
                          }
                  });
}

// ---------------------------------------------------------------------------
// Data movement
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tape<T>& t = *a.tape;
    if (numel(shape) != t.value(a.id).numel())
        throw ShapeError("reshape numel mismatch: " + shape_str(t.value(a.id).shape) + " -> " + shape_str(shape));
    Tensor<T> out(shape, t.value(a.id).v);
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai](Tape<T>& t, int self) {
        detail::accum(t.grad(ai), t.grad(self));
    });
}

/// (B, C, spatial...) -> (B*S, C) token matrix, one row per voxel.
template <class T>
Var<T> to_tokens(Var<T> a) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() < 3) throw ShapeError("to_tokens expects (B,C,spatial...)");
    int64_t B = x.shape[0], C = x.shape[1];
    int64_t S = x.numel() / (B * C);
    Tensor<T> out({B * S, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.data() + (b * C + c) * S;
            for (int64_t s = 0; s < S; ++s) out[(b * S + s) * C + c] = p[s];
        }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, B, C, S](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& ga = t.grad(ai);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                T* p = ga.data() + (b * C + c) * S;
                for (int64_t s = 0; s < S; ++s) p[s] += go[(b * S + s) * C + c];
            }
    });
}

/// Inverse of to_tokens: (B*S, C) -> shape (B, C, spatial...).
template <class T>
Var<T> from_tokens(Var<T> a, Shape volume_shape) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() != 2) throw ShapeError("from_tokens expects (rows, C)");
    int64_t B = volume_shape[0], C = volume_shape[1];
    int64_t S = numel(volume_shape) / (B * C);
    if (x.shape[0] != B * S || x.shape[1] != C)
        throw ShapeError("from_tokens: " + shape_str(x.shape) + " vs " + shape_str(volume_shape));
    Tensor<T> out(volume_shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T* p = out.data() + (b * C + c) * S;
            for (int64_t s = 0; s < S; ++s) p[s] = x[(b * S + s) * C + c];
        }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng, !ng ? typename Tape<T>::BackwardFn{} : [ai, B, C, S](Tape<T>& t, int self) {
        const Tensor<T>& go = t.grad(self);
        Tensor<T>& ga = t.grad(ai);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                const T* p = go.data() + (b * C + c) * S;
                for (int64_t s = 0; s < S; ++s) ga[(b * S + s) * C + c] += p[s];
            }
    });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw ArgumentError("concat of zero tensors");
    Tape<T>& t = *xs[0].tape;
    const Shape& s0 = t.value(xs[0].id).shape;
    size_t ax = static_cast<size_t>(axis);
    if (ax >= s0.size()) throw ArgumentError("concat axis out of range");
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < ax; ++i) outer *= s0[i];
    for (size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
    int64_t total_axis = 0;
    std::vector<int64_t> axis_sizes;
    for (const auto& v : xs) {
        const Shape& s = t.value(v.id).shape;
        if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (i != ax && s[i] != s0[i]) throw ShapeError("concat shape mismatch at axis " + std::to_string(i));
        axis_sizes.push_back(s[ax]);
        total_axis += s[ax];
    }
    Shape out_shape = s0;
    out_shape[ax] = total_axis;
    Tensor<T> out(out_shape);
    int64_t offset = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
        const Tensor<T>& x = t.value(xs[k].id);
        int64_t a = axis_sizes[k];
        for (int64_t o = 0; o < outer; ++o) {
            const T* src = x.data() + o * a * inner;
            T* dst = out.data() + (o * total_axis + offset) * inner;
            std::copy(src, src + a * inner, dst);
        }
        offset += a;
    }
    bool ng = false;
    std::vector<int> ids;
    for (const auto& v : xs) {
        ids.push_back(v.id);
        ng = ng || t.needs_grad(v.id);
    }
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{}
                      : [ids, axis_sizes, outer, inner, total_axis](Tape<T>& t, int self) {
                            const Tensor<T>& go = t.grad(self);
                            int64_t offset = 0;
                            for (size_t k = 0; k < ids.size(); ++k) {
                                int64_t a = axis_sizes[k];
                                if (t.needs_grad(ids[k])) {
                                    Tensor<T>& g = t.grad(ids[k]);
                                    for (int64_t o = 0; o < outer; ++o) {
                                        const T* src = go.data() + (o * total_axis + offset) * inner;
                                        T* dst = g.data() + o * a * inner;
                                        for (int64_t i = 0; i < a * inner; ++i) dst[i] += src[i];
                                    }
                                }
                                offset += a;
                            }
                        });
}

/// Slice along one axis: elements [start, start+len).
template <class T>
Var<T> narrow(Var<T> a, int axis, int64_t start, int64_t len) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    size_t ax = static_cast<size_t>(axis);
    if (ax >= x.shape.size()) throw ArgumentError("narrow axis out of range");
    int64_t A = x.shape[ax];
    if (start < 0 || len <= 0 || start + len > A) throw ShapeError("narrow range out of bounds");
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < ax; ++i) outer *= x.shape[i];
    for (size_t i = ax + 1; i < x.shape.size(); ++i) inner *= x.shape[i];
    Shape out_shape = x.shape;
    out_shape[ax] = len;
    Tensor<T> out(out_shape);
    for (int64_t o = 0; o < outer; ++o) {
        const T* src = x.data() + (o * A + start) * inner;
        std::copy(src, src + len * inner, out.data() + o * len * inner);
    }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai, A, start, len, outer, inner](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& ga = t.grad(ai);
                      for (int64_t o = 0; o < outer; ++o) {
                          const T* src = go.data() + o * len * inner;
                          T* dst = ga.data() + (o * A + start) * inner;
                          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                      }
                  });
}

/// Zero-pad the three spatial axes of (B, C, X, Y, Z): lo/hi voxels per axis.
template <class T>
Var<T> pad_spatial(Var<T> a, std::array<int64_t, 3> lo, std::array<int64_t, 3> hi) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() != 5) throw ShapeError("pad_spatial expects (B,C,X,Y,Z)");
    int64_t B = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4];
    int64_t OX = X + lo[0] + hi[0], OY = Y + lo[1] + hi[1], OZ = Z + lo[2] + hi[2];
    Tensor<T> out({B, C, OX, OY, OZ});
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t ix = 0; ix < X; ++ix)
            for (int64_t iy = 0; iy < Y; ++iy) {
                const T* src = x.data() + ((bc * X + ix) * Y + iy) * Z;
                T* dst = out.data() + ((bc * OX + ix + lo[0]) * OY + iy + lo[1]) * OZ + lo[2];
                std::copy(src, src + Z, dst);
            }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai, B, C, X, Y, Z, OX, OY, OZ, lo](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& ga = t.grad(ai);
                      for (int64_t bc = 0; bc < B * C; ++bc)
                          for (int64_t ix = 0; ix < X; ++ix)
                              for (int64_t iy = 0; iy < Y; ++iy) {
                                  T* dst = ga.data() + ((bc * X + ix) * Y + iy) * Z;
                                  const T* src =
                                      go.data() + ((bc * OX + ix + lo[0]) * OY + iy + lo[1]) * OZ + lo[2];
                                  for (int64_t iz = 0; iz < Z; ++iz) dst[iz] += src[iz];
                              }
                  });
}

/// Crop the spatial axes: keep [lo, lo+size) per axis.
template <class T>
Var<T> crop_spatial(Var<T> a, std::array<int64_t, 3> lo, std::array<int64_t, 3> size) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() != 5) throw ShapeError("crop_spatial expects (B,C,X,Y,Z)");
    int64_t B = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4];
    for (int k = 0; k < 3; ++k)
        if (lo[k] < 0 || lo[k] + size[k] > x.shape[static_cast<size_t>(2 + k)])
            throw ShapeError("crop_spatial out of bounds");
    int64_t OX = size[0], OY = size[1], OZ = size[2];
    Tensor<T> out({B, C, OX, OY, OZ});
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t ox = 0; ox < OX; ++ox)
            for (int64_t oy = 0; oy < OY; ++oy) {
                const T* src = x.data() + ((bc * X + ox + lo[0]) * Y + oy + lo[1]) * Z + lo[2];
                T* dst = out.data() + ((bc * OX + ox) * OY + oy) * OZ;
                std::copy(src, src + OZ, dst);
            }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai, B, C, X, Y, Z, OX, OY, OZ, lo](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& ga = t.grad(ai);
                      for (int64_t bc = 0; bc < B * C; ++bc)
                          for (int64_t ox = 0; ox < OX; ++ox)
                              for (int64_t oy = 0; oy < OY; ++oy) {
                                  const T* src = go.data() + ((bc * OX + ox) * OY + oy) * OZ;
                                  T* dst = ga.data() + ((bc * X + ox + lo[0]) * Y + oy + lo[1]) * Z + lo[2];
                                  for (int64_t iz = 0; iz < OZ; ++iz) dst[iz] += src[iz];
                              }
                  });
}

/// Cyclic roll of the spatial axes by (sx, sy, sz) voxels with wraparound.
template <class T>
Var<T> roll3d(Var<T> a, std::array<int64_t, 3> shift) {
    Tape<T>& t = *a.tape;
    const Tensor<T>& x = t.value(a.id);
    if (x.shape.size() != 5) throw ShapeError("roll3d expects (B,C,X,Y,Z)");
    int64_t B = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4];
    auto wrap = [](int64_t i, int64_t n) { return ((i % n) + n) % n; };
    int64_t sx = wrap(shift[0], X), sy = wrap(shift[1], Y), sz = wrap(shift[2], Z);
    Tensor<T> out(x.shape);
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t ix = 0; ix < X; ++ix) {
            int64_t ox = ix + sx >= X ? ix + sx - X : ix + sx;
            for (int64_t iy = 0; iy < Y; ++iy) {
                int64_t oy = iy + sy >= Y ? iy + sy - Y : iy + sy;
                const T* src = x.data() + ((bc * X + ix) * Y + iy) * Z;
                T* dst = out.data() + ((bc * X + ox) * Y + oy) * Z;
                for (int64_t iz = 0; iz < Z; ++iz) {
                    int64_t oz = iz + sz >= Z ? iz + sz - Z : iz + sz;
                    dst[oz] = src[iz];
                }
            }
        }
    bool ng = t.needs_grad(a.id);
    int ai = a.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{} : [ai, B, C, X, Y, Z, sx, sy, sz](Tape<T>& t, int self) {
                      const Tensor<T>& go = t.grad(self);
                      Tensor<T>& ga = t.grad(ai);
                      for (int64_t bc = 0; bc < B * C; ++bc)
                          for (int64_t ix = 0; ix < X; ++ix) {
                              int64_t ox = ix + sx >= X ? ix + sx - X : ix + sx;
                              for (int64_t iy = 0; iy < Y; ++iy) {
                                  int64_t oy = iy + sy >= Y ? iy + sy - Y : iy + sy;
                                  T* dst = ga.data() + ((bc * X + ix) * Y + iy) * Z;
                                  const T* src = go.data() + ((bc * X + ox) * Y + oy) * Z;
                                  for (int64_t iz = 0; iz < Z; ++iz) {
                                      int64_t oz = iz + sz >= Z ? iz + sz - Z : iz + sz;
                                      dst[iz] += src[oz];
                                  }
                              }
                          }
                  });
}

}  // namespace ckdseg
