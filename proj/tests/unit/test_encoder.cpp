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

#include "ckdseg/model/encoder.hpp"
#include "param_oracles.hpp"
#include "testing.hpp"

using namespace ckdseg;
using ckdseg::testing::fd_check;
using ckdseg::testing::fill_uniform;
using ckdseg::testing::random_tensor;

namespace {

/// Zeros every parameter except norm scales, making all residual blocks
/// exact identities.
template <class T>
void zero_sublayers(ParamStore<T>& ps) {
    for (auto* p : ps.all()) {
        bool is_gamma = p->name.size() >= 2 && p->name.compare(p->name.size() - 2, 2, ".g") == 0;
        if (!is_gamma) std::fill(p->value.v.begin(), p->value.v.end(), T(0));
    }
}

template <class T>
void randomize(ParamStore<T>& ps, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto* p : ps.all()) fill_uniform(p->value, rng, -scale, scale);
}

}  // namespace

TEST_CASE("conv_stem output shapes") {
    ParamStore<float> ps;
    ConvStem<float> stem(ps, "stem", 1, 32);
    ps.initialize(1);
    SUBCASE("64^3 input, base 32") {
        Rng rng(1);
        auto x = random_tensor<float>({1, 1, 64, 64, 64}, rng);
        Tape<float> t(false);
        auto out = stem.forward(t, t.leaf(x));
        CHECK(out.half.shape() == Shape{1, 16, 32, 32, 32});
        CHECK(out.quarter.shape() == Shape{1, 32, 16, 16, 16});
    }
    SUBCASE("32^3 input") {
        Rng rng(2);
        auto x = random_tensor<float>({1, 1, 32, 32, 32}, rng);
        Tape<float> t(false);
        auto out = stem.forward(t, t.leaf(x));
        CHECK(out.half.shape() == Shape{1, 16, 16, 16, 16});
        CHECK(out.quarter.shape() == Shape{1, 32, 8, 8, 8});
    }
    SUBCASE("30^3 input throws") {
        Rng rng(3);
        auto x = random_tensor<float>({1, 1, 30, 30, 30}, rng);
        Tape<float> t(false);
        CHECK_THROWS_AS(stem.forward(t, t.leaf(x)), ShapeError);
    }
}

TEST_CASE("self-modal block: zero sublayer weights is an exact identity") {
    ParamStore<double> ps;
    TransformerBlock<double> block(ps, "blk", 8, 2, 4, 0, true);
    ps.initialize(0);
    zero_sublayers(ps);
    Rng rng(4);
    auto x = random_tensor<double>({1, 8, 4, 4, 4}, rng);
    Tape<double> t(false);
    auto y = block.forward(t, t.leaf(x));
    CHECK(y.val().v == x.v);
}

TEST_CASE("self-modal block preserves shape on random input") {
    ParamStore<float> ps;
    TransformerBlock<float> block(ps, "blk", 8, 2, 4, 0, true);
    ps.initialize(7);
    Rng rng(5);
    auto x = random_tensor<float>({1, 8, 8, 4, 8}, rng);
    Tape<float> t(false);
    auto y = block.forward(t, t.leaf(x));
    CHECK(y.shape() == x.shape);
}

TEST_CASE("self-modal block gradient check at (1,8,4^3)") {
    ParamStore<double> ps;
    TransformerBlock<double> block(ps, "blk", 8, 2, 4, 0, true);
    ps.initialize(2);
    randomize(ps, 13);
    Rng rng(6);
    auto x = random_tensor<double>({1, 8, 4, 4, 4}, rng);
    Tensor<double> cot;

    auto run = [&](bool grad, Tape<double>** tape_out, int* leaf_id) {
        auto* t = new Tape<double>(grad);
        auto v = t->leaf(x, true);
        if (leaf_id) *leaf_id = v.id;
        auto y = block.forward(*t, v);
        if (cot.empty()) {
            Rng r(9);
            cot = Tensor<double>(y.shape());
            fill_uniform(cot, r);
        }
        auto loss = sum_all(mul(y, t->leaf(cot)));
        *tape_out = t;
        return loss;
    };
    Tape<double>* tape = nullptr;
    int leaf_id = 0;
    ps.zero_grad();
    auto loss = run(true, &tape, &leaf_id);
    tape->backward(loss);

    std::vector<ckdseg::testing::CheckTarget> targets;
    for (auto* p : ps.all()) targets.push_back({p->value.data(), p->grad.data(), p->numel(), p->name});
    Tensor<double> gx = tape->grad(leaf_id);
    targets.push_back({x.data(), gx.data(), x.numel(), "x"});
    auto rep = fd_check(
        [&]() {
            Tape<double>* t2 = nullptr;
            auto l = run(false, &t2, nullptr);
            double v = l.val()[0];
            delete t2;
            return v;
        },
        targets, 3);
    delete tape;
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("cross-modal block: zero weights pass both streams through") {
    ParamStore<double> ps;
    CrossModalBlock<double> block(ps, "x", 8, 2, 4, true, true);
    ps.initialize(0);
    zero_sublayers(ps);
    Rng rng(7);
    auto xa = random_tensor<double>({1, 8, 4, 4, 4}, rng);
    auto xb = random_tensor<double>({1, 8, 4, 4, 4}, rng);
    Tape<double> t(false);
    auto [ya, yb] = block.forward(t, t.leaf(xa), t.leaf(xb));
    CHECK(ya.val().v == xa.v);
    CHECK(yb.val().v == xb.v);
}

TEST_CASE("fusion flag changes parameters by exactly the CM-MSA size") {
    const int64_t C = 16, H = 4, W = 4;
    ParamStore<float> with_f, without_f;
    CrossModalBlock<float> b1(with_f, "x", C, H, W, true, true);
    CrossModalBlock<float> b2(without_f, "x", C, H, W, false, true);
    int64_t delta = with_f.total_params() - without_f.total_params();
    CHECK(delta == ckdseg::testing::cm_msa_params(C, H, W));
}

TEST_CASE("swapping streams and branch parameter sets swaps the outputs bitwise") {
    const int64_t C = 8, H = 2, W = 4;
    ParamStore<double> ps1, ps2;
    CrossModalBlock<double> b1(ps1, "x", C, H, W, true, true);
    CrossModalBlock<double> b2(ps2, "x", C, H, W, true, true);
    ps1.initialize(0);
    ps2.initialize(0);
    randomize(ps1, 17);
    // Mirror parameters of b1 into b2 with the stream roles exchanged.
    for (auto* p : ps1.all()) {
        std::string mirrored = p->name;
        auto swap_tag = [&mirrored](const std::string& a, const std::string& b) {
            auto pos = mirrored.find(a);
            if (pos != std::string::npos) {
                mirrored.replace(pos, a.size(), b);
                return true;
            }
            return false;
        };
        if (!swap_tag(".a.", ".#.")) {
        }
        if (!swap_tag(".b.", ".a.")) {
        }
        if (!swap_tag(".#.", ".b.")) {
        }
        auto* q = ps2.find(mirrored);
        REQUIRE(q != nullptr);
        q->value = p->value;
    }
    Rng rng(8);
    auto xa = random_tensor<double>({1, C, 4, 4, 4}, rng);
    auto xb = random_tensor<double>({1, C, 4, 4, 4}, rng);
    Tape<double> t(false);
    auto [ya, yb] = b1.forward(t, t.leaf(xa), t.leaf(xb));
    auto [zb, za] = b2.forward(t, t.leaf(xb), t.leaf(xa));
    CHECK(ya.val().v == za.val().v);
    CHECK(yb.val().v == zb.val().v);
}

TEST_CASE("mcca stage: identity at zero weights, shape preservation, hybrid delta") {
    SUBCASE("zero weights -> identity on both streams") {
        ParamStore<double> ps;
        MccaStage<double> stage(ps, "st", 2, 8, 2, 4, true, true);
        ps.initialize(0);
        zero_sublayers(ps);
        Rng rng(9);
        auto xa = random_tensor<double>({1, 8, 4, 4, 4}, rng);
        auto xb = random_tensor<double>({1, 8, 4, 4, 4}, rng);
        Tape<double> t(false);
        auto out = stage.forward(t, {t.leaf(xa), t.leaf(xb)});
        CHECK(out[0].val().v == xa.v);
        CHECK(out[1].val().v == xb.v);
    }
    SUBCASE("shape preservation") {
        ParamStore<float> ps;
        MccaStage<float> stage(ps, "st", 2, 8, 2, 4, true, true);
        ps.initialize(3);
        Rng rng(10);
        auto xa = random_tensor<float>({1, 8, 8, 8, 4}, rng);
        auto xb = random_tensor<float>({1, 8, 8, 8, 4}, rng);
        Tape<float> t(false);
        auto out = stage.forward(t, {t.leaf(xa), t.leaf(xb)});
        CHECK(out[0].shape() == xa.shape);
        CHECK(out[1].shape() == xb.shape);
    }
    SUBCASE("hybrid flag delta matches the MBConv/MLP closed form") {
        const int64_t C = 16, H = 4, W = 4;
        ParamStore<float> hybrid_on, hybrid_off;
        MccaStage<float> s1(hybrid_on, "st", 2, C, H, W, true, true);
        MccaStage<float> s2(hybrid_off, "st", 2, C, H, W, true, false);
        // 2 self blocks + 2 cross-stream feed-forwards per paired stage.
        int64_t expect = 4 * ckdseg::testing::hybrid_delta_per_ff(C);
        CHECK(hybrid_on.total_params() - hybrid_off.total_params() == expect);
    }
}

TEST_CASE("downsample doubles channels and halves dims") {
    ParamStore<float> ps;
    Downsample<float> d1(ps, "d1", 32);
    Downsample<float> d2(ps, "d2", 64);
    ps.initialize(11);
    Rng rng(11);
    Tape<float> t(false);
    auto y1 = d1.forward(t, t.leaf(random_tensor<float>({1, 32, 16, 16, 16}, rng)));
    CHECK(y1.shape() == Shape{1, 64, 8, 8, 8});
    auto y2 = d2.forward(t, t.leaf(random_tensor<float>({1, 64, 8, 8, 8}, rng)));
    CHECK(y2.shape() == Shape{1, 128, 4, 4, 4});
    CHECK_THROWS_AS(d1.forward(t, t.leaf(random_tensor<float>({1, 32, 7, 7, 7}, rng))), ShapeError);
}

TEST_CASE("bottleneck concatenates, projects optionally, and respects ordering") {
    SUBCASE("zero block weights -> raw concatenation (no projection)") {
        ParamStore<double> ps;
        BottleneckLayer<double> bnl(ps, "bnl", 32, 32, 4, 4, true);  // fused == concat: no projection
        ps.initialize(0);
        zero_sublayers(ps);
        Rng rng(12);
        std::vector<Tensor<double>> xs;
        for (int i = 0; i < 4; ++i) xs.push_back(random_tensor<double>({1, 8, 4, 4, 4}, rng));
        Tape<double> t(false);
        std::vector<Var<double>> vs;
        for (auto& x : xs) vs.push_back(t.leaf(x));
        auto out = bnl.forward(t, vs);
        CHECK(out.shape() == Shape{1, 32, 4, 4, 4});
        // channel blocks equal the inputs, in order; permuting inputs permutes blocks
        for (int i = 0; i < 4; ++i) {
            Tape<double> t2(false);
            auto blk = narrow(t2.leaf(out.val()), 1, i * 8, 8);
            CHECK(blk.val().v == xs[static_cast<size_t>(i)].v);
        }
        std::swap(vs[0], vs[3]);
        auto out2 = bnl.forward(t, vs);
        Tape<double> t3(false);
        CHECK(narrow(t3.leaf(out2.val()), 1, 0, 8).val().v == xs[3].v);
        CHECK(narrow(t3.leaf(out2.val()), 1, 24, 8).val().v == xs[0].v);
    }
    SUBCASE("shape mismatch throws") {
        ParamStore<float> ps;
        BottleneckLayer<float> bnl(ps, "bnl", 32, 16, 4, 4, true);
        ps.initialize(0);
        Rng rng(13);
        Tape<float> t(false);
        std::vector<Var<float>> vs{t.leaf(random_tensor<float>({1, 8, 4, 4, 4}, rng)),
                                   t.leaf(random_tensor<float>({1, 8, 2, 2, 2}, rng))};
        CHECK_THROWS_AS(bnl.forward(t, vs), ShapeError);
    }
}

TEST_CASE("encoder tap schedule at 64^3, base 32") {
    ParamStore<float> ps;
    DualBranchEncoder<float> enc(ps, "enc", {{0, 1}, {2, 3}}, 1, 32, {2, 4, 8}, 16, 4, true, true);
    ps.initialize(5);
    Rng rng(14);
    std::vector<Var<float>> inputs;
    Tape<float> t(false);
    for (int i = 0; i < 4; ++i) inputs.push_back(t.leaf(random_tensor<float>({1, 1, 64, 64, 64}, rng)));
    auto taps = enc.forward(t, inputs);
    REQUIRE(taps.stem_skips.size() == 4);
    CHECK(taps.stem_skips[0].shape() == Shape{1, 16, 32, 32, 32});
    CHECK(taps.stage[0][0].shape() == Shape{1, 32, 16, 16, 16});
    CHECK(taps.stage[1][0].shape() == Shape{1, 64, 8, 8, 8});
    CHECK(taps.stage[2][0].shape() == Shape{1, 128, 4, 4, 4});
    CHECK(taps.f_bnl.shape() == Shape{1, 512, 2, 2, 2});
}

TEST_CASE("zero-weight residual blocks leave the encoder stages as identities end-to-end") {
    ParamStore<double> ps;
    DualBranchEncoder<double> enc(ps, "enc", {{0, 1}, {2, 3}}, 1, 8, {2, 2, 2}, 4, 4, true, true);
    ps.initialize(0);
    zero_sublayers(ps);
    Rng rng(15);
    Tape<double> t(false);
    std::vector<Var<double>> inputs;
    for (int i = 0; i < 4; ++i) inputs.push_back(t.leaf(random_tensor<double>({1, 1, 32, 32, 32}, rng)));
    auto taps = enc.forward(t, inputs);
    // With identity stages, stage-1 taps equal the stem quarter outputs and
    // each later tap equals the downsample of the previous tap.
    for (int s = 0; s < 4; ++s) {
        auto so = enc.stems[static_cast<size_t>(s)].forward(t, inputs[static_cast<size_t>(s)]);
        CHECK(taps.stage[0][static_cast<size_t>(s)].val().v == so.quarter.val().v);
        auto d1 = enc.downs[static_cast<size_t>(s)][0].forward(t, so.quarter);
        CHECK(taps.stage[1][static_cast<size_t>(s)].val().v == d1.val().v);
        auto d2 = enc.downs[static_cast<size_t>(s)][1].forward(t, d1);
        CHECK(taps.stage[2][static_cast<size_t>(s)].val().v == d2.val().v);
    }
}

TEST_CASE("branches have disjoint parameters") {
    ParamStore<float> ps;
    DualBranchEncoder<float> enc(ps, "enc", {{0, 1}, {2, 3}}, 1, 8, {2, 2, 2}, 4, 4, true, true);
    ps.initialize(21);
    Rng rng(16);
    std::vector<Tensor<float>> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_tensor<float>({1, 1, 32, 32, 32}, rng));

    auto run = [&]() {
        Tape<float> t(false);
        std::vector<Var<float>> inputs;
        for (auto& x : xs) inputs.push_back(t.leaf(x));
        auto taps = enc.forward(t, inputs);
        return std::pair{taps.stage[2][0].val(), taps.stage[2][2].val()};
    };
    auto [a_before, b_before] = run();
    // Perturb a branch-0 stage parameter; branch-1 stream outputs must not move.
    auto* p = ps.find("enc.b0.st2.self0.msa.wq.w");
    REQUIRE(p != nullptr);
    p->value[0] += 0.5f;
    auto [a_after, b_after] = run();
    CHECK(a_before.v != a_after.v);
    CHECK(b_before.v == b_after.v);
}
