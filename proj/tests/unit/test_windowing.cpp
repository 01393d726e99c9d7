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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ckdseg/nn/windowing.hpp"
#include "testing.hpp"

using namespace ckdseg;
using ckdseg::testing::random_tensor;

TEST_CASE("window partition shapes and token accounting") {
    Rng rng(1);
    SUBCASE("8^3 with w=4 gives 8 windows of 64 tokens") {
        auto f = random_tensor<double>({1, 3, 8, 8, 8}, rng);
        Tape<double> t;
        auto ws = window_partition(t.leaf(f), 4);
        CHECK(ws.tokens.shape() == Shape{8, 64, 3});
        CHECK(ws.geo.num_windows() == 8);
        CHECK(ws.geo.tokens_per_window() == 64);
    }
    SUBCASE("4^3 with w=4 is a single window") {
        auto f = random_tensor<double>({1, 2, 4, 4, 4}, rng);
        Tape<double> t;
        auto ws = window_partition(t.leaf(f), 4);
        CHECK(ws.tokens.shape() == Shape{1, 64, 2});
    }
    SUBCASE("non-divisible dims throw") {
        auto f = random_tensor<double>({1, 2, 6, 6, 6}, rng);
        Tape<double> t;
        CHECK_THROWS_AS(window_partition(t.leaf(f), 4), WindowSizeError);
    }
}

TEST_CASE("window partition/reverse is a bitwise round trip") {
    Rng rng(2);
    auto f = random_tensor<double>({1, 8, 8, 8, 8}, rng);
    Tape<double> t;
    auto x = t.leaf(f);
    auto ws = window_partition(x, 4);
    auto back = window_reverse(ws);
    CHECK(back.val().v == f.v);

    // Token count equals total voxels.
    CHECK(ws.tokens.val().numel() == f.numel());
}

TEST_CASE("round trip composed with cyclic shift and inverse shift") {
    Rng rng(3);
    auto f = random_tensor<float>({2, 3, 8, 4, 8}, rng);
    Tape<float> t;
    auto x = t.leaf(f);
    auto shifted = cyclic_shift(x, {-2, -2, -2});
    auto ws = window_partition(shifted, 4);
    auto back = cyclic_shift(window_reverse(ws), {2, 2, 2});
    CHECK(back.val().v == f.v);
}

TEST_CASE("corrupted window metadata throws ShapeError") {
    Rng rng(4);
    auto f = random_tensor<double>({1, 2, 8, 8, 8}, rng);
    Tape<double> t;
    auto ws = window_partition(t.leaf(f), 4);
    ws.geo.dims = {12, 8, 8};  // wrong origin dims
    CHECK_THROWS_AS(window_reverse(ws), ShapeError);
    ws.geo.dims = {6, 8, 8};  // not divisible by window
    CHECK_THROWS_AS(window_reverse(ws), ShapeError);
}

TEST_CASE("cyclic shift identities") {
    Rng rng(5);
    auto f = random_tensor<double>({1, 2, 4, 6, 8}, rng);
    Tape<double> t;
    auto x = t.leaf(f);
    CHECK(cyclic_shift(x, {0, 0, 0}).val().v == f.v);
    CHECK(cyclic_shift(x, {4, 6, 8}).val().v == f.v);
    auto rt = cyclic_shift(cyclic_shift(x, {1, 3, 5}), {-1, -3, -5});
    CHECK(rt.val().v == f.v);
}

TEST_CASE("random roundtrips over 40 shapes") {
    Rng rng(6);
    for (int i = 0; i < 40; ++i) {
        int64_t w = rng.uniform_int(1, 4);
        int64_t nx = rng.uniform_int(1, 3), ny = rng.uniform_int(1, 3), nz = rng.uniform_int(1, 3);
        int64_t c = rng.uniform_int(1, 5);
        auto f = random_tensor<float>({1, c, nx * w, ny * w, nz * w}, rng);
        Tape<float> t;
        auto x = t.leaf(f);
        int64_t s = rng.uniform_int(0, w);
        auto shifted = cyclic_shift(x, {-s, -s, -s});
        auto back = cyclic_shift(window_reverse(window_partition(shifted, w)), {s, s, s});
        REQUIRE(back.val().v == f.v);
    }
}

TEST_CASE("relative position bias construction") {
    SUBCASE("zero table gives zero bias") {
        Tape<double> t;
        auto table = t.leaf(Tensor<double>({2, 27}));
        auto b = relative_position_bias(table, 2);
        CHECK(b.shape() == Shape{2, 8, 8});
        for (auto v : b.val().v) CHECK(v == 0.0);
    }
    SUBCASE("w=2: 8x8 bias from 27 table entries per head") {
        Rng rng(7);
        auto tbl = random_tensor<double>({1, 27}, rng);
        Tape<double> t;
        auto b = relative_position_bias(t.leaf(tbl), 2);
        CHECK(b.shape() == Shape{1, 8, 8});
        // Equal offsets share one value: diagonal entries all equal the
        // center table entry.
        double center = b.val()[0];
        for (int i = 0; i < 8; ++i) CHECK(b.val()[i * 8 + i] == center);
    }
    SUBCASE("entries depend only on the coordinate difference") {
        Rng rng(8);
        auto tbl = random_tensor<double>({1, 343}, rng);  // w=4
        Tape<double> t;
        auto b = relative_position_bias(t.leaf(tbl), 4);
        auto coord = [](int i) { return std::array<int, 3>{i / 16, (i / 4) % 4, i % 4}; };
        Rng pick(9);
        int64_t N = 64;
        for (int trial = 0; trial < 200; ++trial) {
            int i1 = static_cast<int>(pick.uniform_int(0, N - 1));
            int j1 = static_cast<int>(pick.uniform_int(0, N - 1));
            auto c_i = coord(i1), c_j = coord(j1);
            // find another pair with the same offset
            int dx = c_i[0] - c_j[0], dy = c_i[1] - c_j[1], dz = c_i[2] - c_j[2];
            for (int i2 = 0; i2 < N; ++i2) {
                auto c2 = coord(i2);
                int jx = c2[0] - dx, jy = c2[1] - dy, jz = c2[2] - dz;
                if (jx < 0 || jx > 3 || jy < 0 || jy > 3 || jz < 0 || jz > 3) continue;
                int j2 = (jx * 4 + jy) * 4 + jz;
                REQUIRE(b.val()[i1 * N + j1] == b.val()[i2 * N + j2]);
                break;
            }
        }
    }
    SUBCASE("table size mismatch throws") {
        Tape<double> t;
        auto table = t.leaf(Tensor<double>({2, 20}));
        CHECK_THROWS_AS(relative_position_bias(table, 2), ShapeError);
    }
}

TEST_CASE("shifted window mask separates wrapped regions") {
    // 1D intuition embedded in 3D: with dims == window, shifting wraps the
    // volume onto itself and the two halves per axis must not attend.
    auto mask = shifted_window_mask<double>({4, 4, 4}, 4, 2);
    CHECK(mask.shape == Shape{1, 64, 64});
    // token (0,0,0) and token (3,0,0) lie in different x-halves
    int i = 0, j = 3 * 16;
    CHECK(mask[i * 64 + j] == -1e30);
    // tokens (0,0,0) and (1,0,0) share all region ids
    CHECK(mask[i * 64 + 16] == 0.0);
    // no mask needed without shift
    CHECK(shifted_window_mask<double>({4, 4, 4}, 4, 0).empty());

    // With dims > window the interior windows are unmasked.
    auto m2 = shifted_window_mask<double>({8, 8, 8}, 4, 2);
    CHECK(m2.shape == Shape{8, 64, 64});
    bool first_window_unmasked = true;
    for (int64_t k = 0; k < 64 * 64; ++k)
        if (m2[k] != 0.0) first_window_unmasked = false;
    CHECK(first_window_unmasked);
}

TEST_CASE("pad_to_window pads high side and records original dims") {
    Rng rng(10);
    auto f = random_tensor<double>({1, 2, 6, 8, 5}, rng);
    Tape<double> t;
    std::array<int64_t, 3> orig{};
    auto padded = pad_to_window(t.leaf(f), 4, orig);
    CHECK(orig == std::array<int64_t, 3>{6, 8, 5});
    CHECK(padded.shape() == Shape{1, 2, 8, 8, 8});
}

TEST_CASE("window partition gradient") {
    Rng rng(11);
    auto f = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto rep = ckdseg::testing::gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            auto ws = window_partition(v[0], 2);
            Rng r2(3);
            Tensor<double> w(ws.tokens.shape());
            ckdseg::testing::fill_uniform(w, r2);
            return sum_all(mul(ws.tokens, t.leaf(std::move(w))));
        },
        {f}, 12);
    CHECK(rep.max_rel_err < 1e-4);
}
