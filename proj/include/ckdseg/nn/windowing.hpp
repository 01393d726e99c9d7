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
#include <memory>

#include "ckdseg/ag/ops_basic.hpp"
#include "ckdseg/ag/ops_nn.hpp"

namespace ckdseg {

struct WindowGeometry {
    int64_t batch = 0;
    std::array<int64_t, 3> dims{};   // feature dims before partition
    int64_t window = 0;
    std::array<int64_t, 3> shift{};  // cyclic shift applied upstream (bookkeeping)

    int64_t tokens_per_window() const { return window * window * window; }
    int64_t num_windows() const { return (dims[0] / window) * (dims[1] / window) * (dims[2] / window); }
};

template <class T>
struct WindowSet {
    Var<T> tokens;  // (batch * num_windows, tokens_per_window, channels)
    WindowGeometry geo;
};

/// Re-tiles (B, C, X, Y, Z) into non-overlapping cubic windows of side w,
/// token layout (B*nW, w^3, C). Lossless; dims must be divisible by w.
template <class T>
WindowSet<T> window_partition(Var<T> f, int64_t w, std::array<int64_t, 3> shift = {0, 0, 0}) {
    Tape<T>& t = *f.tape;
    const Tensor<T>& x = t.value(f.id);
    if (x.shape.size() != 5) throw ShapeError("window_partition expects (B,C,X,Y,Z)");
    int64_t B = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4];
    if (w <= 0) throw WindowSizeError("window size must be positive");
    if (X % w || Y % w || Z % w)
        throw WindowSizeError("dims " + shape_str({X, Y, Z}) + " not divisible by window " + std::to_string(w));
    int64_t nx = X / w, ny = Y / w, nz = Z / w;
    int64_t nW = nx * ny * nz, N = w * w * w;
    Tensor<T> out({B * nW, N, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* src = x.data() + (b * C + c) * X * Y * Z;
            for (int64_t wx = 0; wx < nx; ++wx)
                for (int64_t wy = 0; wy < ny; ++wy)
                    for (int64_t wz = 0; wz < nz; ++wz) {
                        int64_t g = b * nW + (wx * ny + wy) * nz + wz;
                        T* dst = out.data() + g * N * C;
                        for (int64_t lx = 0; lx < w; ++lx)
                            for (int64_t ly = 0; ly < w; ++ly)
                                for (int64_t lz = 0; lz < w; ++lz) {
                                    int64_t tok = (lx * w + ly) * w + lz;
                                    dst[tok * C + c] =
                                        src[((wx * w + lx) * Y + wy * w + ly) * Z + wz * w + lz];
                                }
                    }
        }
    bool ng = t.needs_grad(f.id);
    int fi = f.id;
    Var<T> tokens = t.push(std::move(out), ng,
                           !ng ? typename Tape<T>::BackwardFn{}
                               : [fi, B, C, X, Y, Z, w, nx, ny, nz, nW, N](Tape<T>& t, int self) {
                                     const Tensor<T>& go = t.grad(self);
                                     Tensor<T>& gf = t.grad(fi);
                                     for (int64_t b = 0; b < B; ++b)
                                         for (int64_t c = 0; c < C; ++c) {
                                             T* dst = gf.data() + (b * C + c) * X * Y * Z;
                                             for (int64_t wx = 0; wx < nx; ++wx)
                                                 for (int64_t wy = 0; wy < ny; ++wy)
                                                     for (int64_t wz = 0; wz < nz; ++wz) {
                                                         int64_t g = b * nW + (wx * ny + wy) * nz + wz;
                                                         const T* src = go.data() + g * N * C;
                                                         for (int64_t lx = 0; lx < w; ++lx)
                                                             for (int64_t ly = 0; ly < w; ++ly)
                                                                 for (int64_t lz = 0; lz < w; ++lz) {
                                                                     int64_t tok = (lx * w + ly) * w + lz;
                                                                     dst[((wx * w + lx) * Y + wy * w + ly) * Z +
                                                                         wz * w + lz] += src[tok * C + c];
                                                                 }
                                                     }
                                         }
                                 });
    WindowSet<T> ws;
    ws.tokens = tokens;
    ws.geo = WindowGeometry{B, {X, Y, Z}, w, shift};
    return ws;
}

/// Exact inverse of window_partition.
template <class T>
Var<T> window_reverse(const WindowSet<T>& ws) {
    Tape<T>& t = *ws.tokens.tape;
    const Tensor<T>& x = t.value(ws.tokens.id);
    const WindowGeometry& g = ws.geo;
    if (x.shape.size() != 3) throw ShapeError("window_reverse expects (G,N,C) tokens");
    if (g.window <= 0 || g.dims[0] % g.window || g.dims[1] % g.window || g.dims[2] % g.window)
        throw ShapeError("window_reverse: origin dims " + shape_str({g.dims[0], g.dims[1], g.dims[2]}) +
                         " inconsistent with window " + std::to_string(g.window));
    int64_t w = g.window;
    int64_t nx = g.dims[0] / w, ny = g.dims[1] / w, nz = g.dims[2] / w;
    int64_t nW = nx * ny * nz, N = w * w * w;
    if (x.shape[0] != g.batch * nW || x.shape[1] != N)
        throw ShapeError("window_reverse: token tensor " + shape_str(x.shape) + " does not match geometry");
    int64_t B = g.batch, C = x.shape[2];
    int64_t X = g.dims[0], Y = g.dims[1], Z = g.dims[2];
    Tensor<T> out({B, C, X, Y, Z});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T* dst = out.data() + (b * C + c) * X * Y * Z;
            for (int64_t wx = 0; wx < nx; ++wx)
                for (int64_t wy = 0; wy < ny; ++wy)
                    for (int64_t wz = 0; wz < nz; ++wz) {
                        const T* src = x.data() + (b * nW + (wx * ny + wy) * nz + wz) * N * C;
                        for (int64_t lx = 0; lx < w; ++lx)
                            for (int64_t ly = 0; ly < w; ++ly)
                                for (int64_t lz = 0; lz < w; ++lz)
                                    dst[((wx * w + lx) * Y + wy * w + ly) * Z + wz * w + lz] =
                                        src[((lx * w + ly) * w + lz) * C + c];
                    }
        }
    bool ng = t.needs_grad(ws.tokens.id);
    int xi = ws.tokens.id;
    return t.push(std::move(out), ng,
                  !ng ? typename Tape<T>::BackwardFn{}
                      : [xi, B, C, X, Y, Z, w, nx, ny, nz, nW, N](Tape<T>& t, int self) {
                            const Tensor<T>& go = t.grad(self);
                            Tensor<T>& gx = t.grad(xi);
                            for (int64_t b = 0; b < B; ++b)
                                for (int64_t c = 0; c < C; ++c) {
                                    const T* dst = go.data() + (b * C + c) * X * Y * Z;
                                    for (int64_t wx = 0; wx < nx; ++wx)
                                        for (int64_t wy = 0; wy < ny; ++wy)
                                            for (int64_t wz = 0; wz < nz; ++wz) {
                                                T* src = gx.data() + (b * nW + (wx * ny + wy) * nz + wz) * N * C;
                                                for (int64_t lx = 0; lx < w; ++lx)
                                                    for (int64_t ly = 0; ly < w; ++ly)
                                                        for (int64_t lz = 0; lz < w; ++lz)
                                                            src[((lx * w + ly) * w + lz) * C + c] +=
                                                                dst[((wx * w + lx) * Y + wy * w + ly) * Z +
                                                                    wz * w + lz];
                                            }
                                }
                        });
}

/// Cyclic shift of a feature volume; cyclic_shift(f, -s) inverts.
template <class T>
Var<T> cyclic_shift(Var<T> f, std::array<int64_t, 3> shift) {
    return roll3d(f, shift);
}

/// Attention mask for shifted windows: window-local (N x N) additive masks
/// with -1e30 between tokens that wrapped around from opposite borders.
/// Returns an empty tensor when shift is zero (no masking needed).
template <class T>
Tensor<T> shifted_window_mask(std::array<int64_t, 3> dims, int64_t w, int64_t shift) {
    if (shift == 0) return Tensor<T>{};
    int64_t X = dims[0], Y = dims[1], Z = dims[2];
    if (X % w || Y % w || Z % w) throw WindowSizeError("mask dims not divisible by window");
    // Region ids in the shifted frame: per axis, slices [0, D-w), [D-w, D-s),
    // [D-s, D) take distinct ids; windows mixing ids get masked pairs.
    auto axis_id = [w, shift](int64_t i, int64_t D) {
        if (i < D - w) return 0;
        if (i < D - shift) return 1;
        return 2;
    };
    std::vector<int> region(static_cast<size_t>(X * Y * Z));
    for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t z = 0; z < Z; ++z)
                region[static_cast<size_t>((x * Y + y) * Z + z)] =
                    (axis_id(x, X) * 3 + axis_id(y, Y)) * 3 + axis_id(z, Z);
    int64_t nx = X / w, ny = Y / w, nz = Z / w;
    int64_t nW = nx * ny * nz, N = w * w * w;
    Tensor<T> mask({nW, N, N});
    std::vector<int> ids(static_cast<size_t>(N));
    for (int64_t wx = 0; wx < nx; ++wx)
        for (int64_t wy = 0; wy < ny; ++wy)
            for (int64_t wz = 0; wz < nz; ++wz) {
                for (int64_t lx = 0; lx < w; ++lx)
                    for (int64_t ly = 0; ly < w; ++ly)
                        for (int64_t lz = 0; lz < w; ++lz)
                            ids[static_cast<size_t>((lx * w + ly) * w + lz)] =
                                region[static_cast<size_t>(((wx * w + lx) * Y + wy * w + ly) * Z + wz * w + lz)];
                T* m = mask.data() + ((wx * ny + wy) * nz + wz) * N * N;
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < N; ++j)
                        m[i * N + j] = ids[static_cast<size_t>(i)] == ids[static_cast<size_t>(j)] ? T(0) : T(-1e30);
            }
    return mask;
}

/// Token-to-token relative offset index for a cubic window: entry (i, j)
/// addresses the learned bias table of size (2w-1)^3.
inline std::shared_ptr<std::vector<int>> relative_offset_index(int64_t w) {
    int64_t N = w * w * w;
    auto idx = std::make_shared<std::vector<int>>(static_cast<size_t>(N * N));
    int64_t span = 2 * w - 1;
    for (int64_t i = 0; i < N; ++i) {
        int64_t ix = i / (w * w), iy = (i / w) % w, iz = i % w;
        for (int64_t j = 0; j < N; ++j) {
            int64_t jx = j / (w * w), jy = (j / w) % w, jz = j % w;
            int64_t ox = ix - jx + w - 1, oy = iy - jy + w - 1, oz = iz - jz + w - 1;
            (*idx)[static_cast<size_t>(i * N + j)] = static_cast<int>((ox * span + oy) * span + oz);
        }
    }
    return idx;
}

/// Expanded relative position bias: (heads, w^3, w^3) from a learned table of
/// (2w-1)^3 entries per head.
template <class T>
Var<T> relative_position_bias(Var<T> table, int64_t w) {
    const Tensor<T>& tv = table.tape->value(table.id);
    int64_t span = 2 * w - 1;
    if (tv.shape.size() != 2 || tv.shape[1] != span * span * span)
        throw ShapeError("bias table must be (heads, (2w-1)^3), got " + shape_str(tv.shape));
    return gather_bias(table, relative_offset_index(w), w * w * w);
}

/// Pad spatial dims up to the next multiple of w (high side). Returns the
/// original dims so callers can crop back.
template <class T>
Var<T> pad_to_window(Var<T> f, int64_t w, std::array<int64_t, 3>& orig_dims) {
    const Shape& s = f.shape();
    if (s.size() != 5) throw ShapeError("pad_to_window expects (B,C,X,Y,Z)");
    orig_dims = {s[2], s[3], s[4]};
    std::array<int64_t, 3> hi{};
    bool needed = false;
    for (int k = 0; k < 3; ++k) {
        int64_t d = s[static_cast<size_t>(2 + k)];
        int64_t pad = (w - d % w) % w;
        hi[static_cast<size_t>(k)] = pad;
        needed = needed || pad > 0;
    }
    if (!needed) return f;
    return pad_spatial(f, {0, 0, 0}, hi);
}

}  // namespace ckdseg
