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

#include "ckdseg/ag/ops_basic.hpp"
#include "ckdseg/ag/ops_conv.hpp"
#include "ckdseg/ag/ops_nn.hpp"
#include "testing.hpp"

using namespace ckdseg;
using ckdseg::testing::fd_check;
using ckdseg::testing::gradcheck_inputs;
using ckdseg::testing::random_tensor;

namespace {

Var<double> weighted_sum(Tape<double>& t, Var<double> x, uint64_t seed = 7) {
    Rng rng(seed);
    Tensor<double> r(x.shape());
    ckdseg::testing::fill_uniform(r, rng, -1.0, 1.0);
    return sum_all(mul(x, t.leaf(std::move(r))));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
    Rng rng(1);
    auto a = random_tensor<double>({2, 3, 4}, rng);
    auto b = random_tensor<double>({2, 3, 4}, rng, 0.5, 2.0);

    auto rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            auto x = add(v[0], v[1]);
            x = sub(x, mul(v[0], v[1]));
            x = div(x, add_scalar(mul(v[1], v[1]), 1.0));
            x = mul_scalar(x, 1.7);
            return weighted_sum(t, x);
        },
        {a, b}, 12);
    CHECK(rep.max_rel_err < kTol);

    Tape<double> t;
    auto x = t.leaf(Tensor<double>({2}, {1.0, 2.0}));
    auto y = t.leaf(Tensor<double>({2}, {3.0, 5.0}));
    CHECK(add(x, y).val()[0] == 4.0);
    CHECK(sub(x, y).val()[1] == -3.0);
    CHECK(mul(x, y).val()[1] == 10.0);
    CHECK(div(y, x).val()[1] == 2.5);
    CHECK_THROWS_AS(add(x, t.leaf(Tensor<double>({3}))), ShapeError);
}

TEST_CASE("activations: gradients") {
    Rng rng(2);
    auto a = random_tensor<double>({3, 5}, rng, -2.0, 2.0);
    for (auto fn : {0, 1, 2, 3, 4}) {
        auto rep = gradcheck_inputs(
            [fn](Tape<double>& t, std::vector<Var<double>>& v) {
                Var<double> y;
                switch (fn) {
                    case 0: y = sigmoid(v[0]); break;
                    case 1: y = silu(v[0]); break;
                    case 2: y = gelu(v[0]); break;
                    case 3: y = leaky_relu(v[0], 0.01); break;
                    default: y = softmax_lastdim(v[0]); break;
                }
                return weighted_sum(t, y);
            },
            {a}, 15);
        INFO("fn=", fn);
        CHECK(rep.max_rel_err < kTol);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    auto a = random_tensor<double>({4, 7}, rng, -5.0, 5.0);
    Tape<double> t;
    auto y = softmax_lastdim(t.leaf(a));
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0;
        for (int64_t i = 0; i < 7; ++i) s += y.val()[r * 7 + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reductions: gradients and values") {
    Rng rng(4);
    auto a = random_tensor<double>({2, 3, 2, 2, 2}, rng);
    auto rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            auto s1 = sum_spatial(v[0]);     // (2,3)
            auto s2 = mean_spatial(v[0]);    // (2,3)
            auto p = pool_axis(v[0], 1);     // (2,3,2)
            return add(add(sum_all(s1), mean_all(s2)), weighted_sum(t, p, 9));
        },
        {a}, 16);
    CHECK(rep.max_rel_err < kTol);

    // pool_axis value oracle: mean over the two other axes.
    Tape<double> t;
    Tensor<double> x({1, 1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) x[i] = i;  // x[x,y,z] = 4x + 2y + z
    auto px = pool_axis(t.leaf(x), 0);
    CHECK(px.val()[0] == doctest::Approx(1.5));   // mean over y,z at x=0
    CHECK(px.val()[1] == doctest::Approx(5.5));   // at x=1
    auto pz = pool_axis(t.leaf(x), 2);
    CHECK(pz.val()[0] == doctest::Approx(3.0));   // mean over x,y at z=0
    CHECK(pz.val()[1] == doctest::Approx(4.0));
}

TEST_CASE("data movement round trips and gradients") {
    Rng rng(5);
    auto a = random_tensor<double>({1, 3, 4, 4, 4}, rng);

    SUBCASE("to_tokens/from_tokens inverse") {
        Tape<double> t;
        auto x = t.leaf(a);
        auto y = from_tokens(to_tokens(x), a.shape);
        CHECK(y.val().v == a.v);
    }
    SUBCASE("roll inverse") {
        Tape<double> t;
        auto x = t.leaf(a);
        auto y = roll3d(roll3d(x, {1, 2, 3}), {-1, -2, -3});
        CHECK(y.val().v == a.v);
    }
    SUBCASE("pad then crop restores") {
        Tape<double> t;
        auto x = t.leaf(a);
        auto y = crop_spatial(pad_spatial(x, {1, 0, 2}, {0, 1, 0}), {1, 0, 2}, {4, 4, 4});
        CHECK(y.val().v == a.v);
    }
    SUBCASE("concat/narrow inverse") {
        Tape<double> t;
        auto x = t.leaf(a);
        auto c = concat<double>({x, x}, 1);
        CHECK(c.shape() == Shape{1, 6, 4, 4, 4});
        auto back = narrow(c, 1, 3, 3);
        CHECK(back.val().v == a.v);
    }
    SUBCASE("gradients through movement chain") {
        auto rep = gradcheck_inputs(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
                auto x = pad_spatial(v[0], {1, 1, 1}, {1, 1, 1});
                x = roll3d(x, {2, -1, 3});
                x = crop_spatial(x, {1, 1, 1}, {4, 4, 4});
                auto tk = to_tokens(x);
                auto y = concat<double>({tk, tk}, 1);
                y = narrow(y, 1, 2, 3);
                return weighted_sum(t, y, 11);
            },
            {a}, 14);
        CHECK(rep.max_rel_err < kTol);
    }
}

TEST_CASE("linear and batched matmul") {
    Rng rng(6);
    auto x = random_tensor<double>({5, 3}, rng);
    auto w = random_tensor<double>({3, 4}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            auto y = linear(v[0], v[1], &v[2]);
            return weighted_sum(t, y, 13);
        },
        {x, w, b}, 12);
    CHECK(rep.max_rel_err < kTol);

    auto A = random_tensor<double>({2, 3, 4}, rng);
    auto B = random_tensor<double>({2, 4, 5}, rng);
    auto Bt = random_tensor<double>({2, 5, 4}, rng);
    rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            auto y1 = bmm(v[0], v[1]);
            auto y2 = bmm_nt(v[0], v[2]);
            return add(weighted_sum(t, y1, 17), weighted_sum(t, y2, 18));
        },
        {A, B, Bt}, 12);
    CHECK(rep.max_rel_err < kTol);

    // bmm_nt equals bmm with manually transposed rhs.
    Tape<double> t;
    auto a_ = t.leaf(A);
    auto b_ = t.leaf(B);
    Tensor<double> Btr({2, 5, 4});
    for (int g = 0; g < 2; ++g)
        for (int k = 0; k < 4; ++k)
            for (int m = 0; m < 5; ++m) Btr[(g * 5 + m) * 4 + k] = B[(g * 4 + k) * 5 + m];
    auto y_nt = bmm_nt(a_, t.leaf(Btr));
    auto y = bmm(a_, b_);
    for (int64_t i = 0; i < y.val().numel(); ++i)
        CHECK(y.val()[i] == doctest::Approx(y_nt.val()[i]).epsilon(1e-12));
}

TEST_CASE("split/merge heads round trip and gradient") {
    Rng rng(7);
    auto x = random_tensor<double>({3, 4, 6}, rng);
    Tape<double> t;
    auto v = t.leaf(x);
    auto rt = merge_heads(split_heads(v, 2), 2);
    CHECK(rt.val().v == x.v);

    auto rep = gradcheck_inputs(
        [](Tape<double>& t2, std::vector<Var<double>>& vs) {
            return weighted_sum(t2, split_heads(vs[0], 3), 19);
        },
        {x}, 10);
    CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("layer_norm and instance_norm gradients") {
    Rng rng(8);
    auto x = random_tensor<double>({6, 5}, rng);
    auto g = random_tensor<double>({5}, rng, 0.5, 1.5);
    auto b = random_tensor<double>({5}, rng);
    auto rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            return weighted_sum(t, layer_norm(v[0], v[1], v[2]), 21);
        },
        {x, g, b}, 14);
    CHECK(rep.max_rel_err < kTol);

    auto xi = random_tensor<double>({2, 3, 2, 2, 2}, rng);
    auto gi = random_tensor<double>({3}, rng, 0.5, 1.5);
    auto bi = random_tensor<double>({3}, rng);
    rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            return weighted_sum(t, instance_norm(v[0], v[1], v[2]), 22);
        },
        {xi, gi, bi}, 14);
    CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("gather_bias and add_bias_and_mask") {
    Rng rng(9);
    auto table = random_tensor<double>({2, 27}, rng);
    auto index = std::make_shared<std::vector<int>>();
    Rng irng(10);
    for (int i = 0; i < 16; ++i) index->push_back(static_cast<int>(irng.uniform_int(0, 26)));

    auto rep = gradcheck_inputs(
        [index](Tape<double>& t, std::vector<Var<double>>& v) {
            return weighted_sum(t, gather_bias(v[0], index, 4), 23);
        },
        {table}, 12);
    CHECK(rep.max_rel_err < kTol);

    // scores (B*nW*H, N, N) with B=1, nW=2, H=2, N=4.
    auto scores = random_tensor<double>({4, 4, 4}, rng);
    auto bias = random_tensor<double>({2, 4, 4}, rng);
    auto mask = std::make_shared<Tensor<double>>(Shape{2, 4, 4});
    (*mask)[3] = -1e30;
    rep = gradcheck_inputs(
        [mask](Tape<double>& t, std::vector<Var<double>>& v) {
            auto s = add_bias_and_mask(v[0], v[1], mask, 2, 2);
            return weighted_sum(t, softmax_lastdim(s), 24);
        },
        {scores, bias}, 12);
    CHECK(rep.max_rel_err < kTol);

    // Masked entry gets zero attention.
    Tape<double> t;
    auto s = add_bias_and_mask(t.leaf(scores), t.leaf(Tensor<double>({2, 4, 4})), mask, 2, 2);
    auto att = softmax_lastdim(s);
    CHECK(att.val()[3] == 0.0);
}

TEST_CASE("scale_channels and outer3") {
    Rng rng(11);
    auto x = random_tensor<double>({2, 3, 2, 2, 2}, rng);
    auto s = random_tensor<double>({2, 3}, rng, 0.5, 1.5);
    auto rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            return weighted_sum(t, scale_channels(v[0], v[1]), 25);
        },
        {x, s}, 12);
    CHECK(rep.max_rel_err < kTol);

    auto fx = random_tensor<double>({1, 2, 3}, rng, 0.1, 0.9);
    auto fy = random_tensor<double>({1, 2, 3}, rng, 0.1, 0.9);
    auto fz = random_tensor<double>({1, 2, 3}, rng, 0.1, 0.9);
    rep = gradcheck_inputs(
        [](Tape<double>& t, std::vector<Var<double>>& v) {
            return weighted_sum(t, outer3(v[0], v[1], v[2]), 26);
        },
        {fx, fy, fz}, 12);
    CHECK(rep.max_rel_err < kTol);

    // outer3 value oracle: triple loop.
    Tape<double> t;
    auto a = outer3(t.leaf(fx), t.leaf(fy), t.leaf(fz));
    for (int c = 0; c < 2; ++c)
        for (int ix = 0; ix < 3; ++ix)
            for (int iy = 0; iy < 3; ++iy)
                for (int iz = 0; iz < 3; ++iz) {
                    double expect = fx[c * 3 + ix] * fy[c * 3 + iy] * fz[c * 3 + iz];
                    CHECK(a.val()[((c * 3 + ix) * 3 + iy) * 3 + iz] == doctest::Approx(expect).epsilon(1e-15));
                }
}

TEST_CASE("conv3d configurations") {
    Rng rng(12);
    SUBCASE("k3 s1 p1") {
        auto x = random_tensor<double>({1, 2, 3, 3, 3}, rng);
        auto w = random_tensor<double>({3, 2, 3, 3, 3}, rng);
        auto b = random_tensor<double>({3}, rng);
        auto rep = gradcheck_inputs(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
                return weighted_sum(t, conv3d(v[0], v[1], &v[2], 1, 1), 27);
            },
            {x, w, b}, 14);
        CHECK(rep.max_rel_err < kTol);
    }
    SUBCASE("k3 s2 p1") {
        auto x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
        auto w = random_tensor<double>({4, 2, 3, 3, 3}, rng);
        auto b = random_tensor<double>({4}, rng);
        Tape<double> t;
        auto vx = t.leaf(x);
        auto vw = t.leaf(w);
        auto vb = t.leaf(b);
        auto y = conv3d(vx, vw, &vb, 2, 1);
        CHECK(y.shape() == Shape{1, 4, 2, 2, 2});
        auto rep = gradcheck_inputs(
            [](Tape<double>& t2, std::vector<Var<double>>& v) {
                return weighted_sum(t2, conv3d(v[0], v[1], &v[2], 2, 1), 28);
            },
            {x, w, b}, 14);
        CHECK(rep.max_rel_err < kTol);
    }
    SUBCASE("depthwise groups=C") {
        auto x = random_tensor<double>({1, 4, 3, 3, 3}, rng);
        auto w = random_tensor<double>({4, 1, 3, 3, 3}, rng);
        auto rep = gradcheck_inputs(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
                return weighted_sum(t, conv3d(v[0], v[1], nullptr, 1, 1, 4), 29);
            },
            {x, w}, 14);
        CHECK(rep.max_rel_err < kTol);
    }
    SUBCASE("conv1x1 matches conv3d with k=1") {
        auto x = random_tensor<double>({2, 3, 2, 2, 2}, rng);
        auto w = random_tensor<double>({4, 3}, rng);
        auto b = random_tensor<double>({4}, rng);
        Tensor<double> w5({4, 3, 1, 1, 1}, w.v);
        Tape<double> t;
        auto vx = t.leaf(x);
        auto vb = t.leaf(b);
        auto y1 = conv1x1(vx, t.leaf(w), &vb);
        auto y2 = conv3d(vx, t.leaf(w5), &vb, 1, 0);
        REQUIRE(y1.shape() == y2.shape());
        for (int64_t i = 0; i < y1.val().numel(); ++i)
            CHECK(y1.val()[i] == doctest::Approx(y2.val()[i]).epsilon(1e-13));
        auto rep = gradcheck_inputs(
            [](Tape<double>& t2, std::vector<Var<double>>& v) {
                return weighted_sum(t2, conv1x1(v[0], v[1], &v[2]), 30);
            },
            {x, w, b}, 12);
        CHECK(rep.max_rel_err < kTol);
    }
}

TEST_CASE("conv_transpose3d k2s2") {
    Rng rng(13);
    auto x = random_tensor<double>({1, 3, 2, 2, 2}, rng);
    auto w = random_tensor<double>({3, 2, 2, 2, 2}, rng);
    auto b = random_tensor<double>({2}, rng);
    Tape<double> t;
    auto y = conv_transpose3d_k2s2(t.leaf(x), t.leaf(w), nullptr);
    CHECK(y.shape() == Shape{1, 2, 4, 4, 4});
    auto rep = gradcheck_inputs(
        [](Tape<double>& t2, std::vector<Var<double>>& v) {
            return weighted_sum(t2, conv_transpose3d_k2s2(v[0], v[1], &v[2]), 31);
        },
        {x, w, b}, 14);
    CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("tape backward accumulates into parameters") {
    Parameter<double> p("w", {3});
    p.value.v = {1.0, 2.0, 3.0};
    Tape<double> t;
    auto w = t.use(p);
    auto loss = sum_all(mul(w, w));
    t.backward(loss);
    CHECK(p.grad.v[0] == doctest::Approx(2.0));
    CHECK(p.grad.v[1] == doctest::Approx(4.0));
    CHECK(p.grad.v[2] == doctest::Approx(6.0));
}
