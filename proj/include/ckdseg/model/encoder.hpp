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

#include <memory>
#include <string>
#include <vector>

#include "ckdseg/nn/attention.hpp"
#include "ckdseg/nn/layers.hpp"

namespace ckdseg {

template <class T>
struct StemOutput {
    Var<T> half;     // scale 1/2, base/2 channels (skip path)
    Var<T> quarter;  // scale 1/4, base channels (feed-forward path)
};

/// Convolutional stem: progressive stride-2 downsampling to 1/2 and 1/4
/// scale, one instance per input stream, unshared.
template <class T>
struct ConvStem {
    ConvNormAct<T> c0, c1, c2, c3;

    ConvStem(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t base)
        : c0(ps, name + ".c0", cin, std::max<int64_t>(1, base / 4), 1),
          c1(ps, name + ".c1", std::max<int64_t>(1, base / 4), base / 2, 2),
          c2(ps, name + ".c2", base / 2, base / 2, 1),
          c3(ps, name + ".c3", base / 2, base, 2) {}

    StemOutput<T> forward(Tape<T>& t, Var<T> x) const {
        const Shape& s = x.shape();
        if (s.size() != 5) throw ShapeError("conv_stem expects (B,C,X,Y,Z)");
        if (s[2] % 4 || s[3] % 4 || s[4] % 4)
            throw ShapeError("conv_stem dims " + shape_str(s) + " not divisible by 4");
        Var<T> h = c2.forward(t, c1.forward(t, c0.forward(t, x)));
        Var<T> q = c3.forward(t, h);
        return {h, q};
    }
};

namespace detail {

/// Pre-norm windowed attention sub-layer on a feature volume: pad to window
/// multiples, optional cyclic shift, partition, attend, reverse, unshift,
/// crop. Returns the residual contribution (not yet added).
template <class T>
Var<T> windowed_attention(Tape<T>& t, const WindowMSA<T>& msa, Var<T> normed, int64_t window, int64_t shift,
                          Probe<T>* probe) {
    std::array<int64_t, 3> orig{};
    Var<T> x = pad_to_window(normed, window, orig);
    std::array<int64_t, 3> dims{x.shape()[2], x.shape()[3], x.shape()[4]};
    std::shared_ptr<Tensor<T>> mask;
    if (shift > 0) {
        x = cyclic_shift(x, {-shift, -shift, -shift});
        mask = std::make_shared<Tensor<T>>(shifted_window_mask<T>(dims, window, shift));
    }
    WindowSet<T> ws = window_partition(x, window, {shift, shift, shift});
    WindowSet<T> out = msa.forward(t, ws, mask, probe);
    Var<T> y = window_reverse(out);
    if (shift > 0) y = cyclic_shift(y, {shift, shift, shift});
    if (dims != orig) y = crop_spatial(y, {0, 0, 0}, orig);
    return y;
}

}  // namespace detail

/// One transformer unit on a single stream: windowed MSA and a feed-forward
/// factor, both pre-normed residual sub-layers. shift = 0 gives the
/// self-modal module; shift = window/2 gives the shifted-window module used
/// by single-stream variants and by the cross-modal module's own attention.
template <class T>
struct TransformerBlock {
    ChannelLayerNorm<T> norm1, norm2;
    WindowMSA<T> msa;
    FeedForward<T> ff;
    int64_t window = 0, shift = 0;
    std::string name;

    TransformerBlock(ParamStore<T>& ps, const std::string& name_, int64_t c, int64_t heads, int64_t window_,
                     int64_t shift_, bool hybrid)
        : norm1(ps, name_ + ".n1", c), norm2(ps, name_ + ".n2", c), msa(ps, name_ + ".msa", c, heads, window_),
          ff(ps, name_ + ".ff", c, hybrid), window(window_), shift(shift_), name(name_) {}

    Var<T> forward(Tape<T>& t, Var<T> x, Probe<T>* probe = nullptr) const {
        Var<T> attn = detail::windowed_attention(t, msa, norm1.forward(t, x), window, shift, probe);
        Var<T> y = add(x, attn);
        Var<T> out = add(y, ff.forward(t, norm2.forward(t, y)));
        if (probe) probe->put(name + ".out", out.val());
        return out;
    }
};

/// Cross-modal module of a paired branch: per-stream shifted-window MSA plus
/// a cross-modal attention message between the two streams, then per-stream
/// feed-forward. With fusion disabled the message is omitted and the module
/// behaves as two independent shifted-window blocks.
template <class T>
struct CrossModalBlock {
    ChannelLayerNorm<T> norm1_a, norm1_b;
    WindowMSA<T> msa_a, msa_b;
    std::unique_ptr<CrossModalMSA<T>> cm;
    ChannelLayerNorm<T> norm2_a, norm2_b;
    FeedForward<T> ff_a, ff_b;
    int64_t window = 0, shift = 0;
    std::string name;

    CrossModalBlock(ParamStore<T>& ps, const std::string& name_, int64_t c, int64_t heads, int64_t window_,
                    bool fusion, bool hybrid)
        : norm1_a(ps, name_ + ".a.n1", c), norm1_b(ps, name_ + ".b.n1", c),
          msa_a(ps, name_ + ".a.msa", c, heads, window_), msa_b(ps, name_ + ".b.msa", c, heads, window_),
          norm2_a(ps, name_ + ".a.n2", c), norm2_b(ps, name_ + ".b.n2", c),
          ff_a(ps, name_ + ".a.ff", c, hybrid), ff_b(ps, name_ + ".b.ff", c, hybrid), window(window_),
          shift(window_ / 2), name(name_) {
        if (fusion) cm = std::make_unique<CrossModalMSA<T>>(ps, name_ + ".cm", c, heads, window_);
    }

    std::pair<Var<T>, Var<T>> forward(Tape<T>& t, Var<T> xa, Var<T> xb, Probe<T>* probe = nullptr) const {
        require_same_shape(t.value(xa.id), t.value(xb.id), "cross_modal_block");
        Var<T> na = norm1_a.forward(t, xa);
        Var<T> nb = norm1_b.forward(t, xb);
        Var<T> attn_a = detail::windowed_attention(t, msa_a, na, window, shift, probe);
        Var<T> attn_b = detail::windowed_attention(t, msa_b, nb, window, shift, probe);
        Var<T> ya = add(xa, attn_a);
        Var<T> yb = add(xb, attn_b);
        if (cm) {
            auto [ma, mb] = cross_messages(t, na, nb, probe);
            ya = add(ya, ma);
            yb = add(yb, mb);
        }
        Var<T> oa = add(ya, ff_a.forward(t, norm2_a.forward(t, ya)));
        Var<T> ob = add(yb, ff_b.forward(t, norm2_b.forward(t, yb)));
        if (probe) {
            probe->put(name + ".out_a", oa.val());
            probe->put(name + ".out_b", ob.val());
        }
        return {oa, ob};
    }

private:
    /// Cross-modal messages on the shared shifted-window partition.
    std::pair<Var<T>, Var<T>> cross_messages(Tape<T>& t, Var<T> na, Var<T> nb, Probe<T>* probe) const {
        std::array<int64_t, 3> orig{};
        Var<T> pa = pad_to_window(na, window, orig);
        Var<T> pb = pad_to_window(nb, window, orig);
        std::array<int64_t, 3> dims{pa.shape()[2], pa.shape()[3], pa.shape()[4]};
        std::shared_ptr<Tensor<T>> mask;
        if (shift > 0) {
            pa = cyclic_shift(pa, {-shift, -shift, -shift});
            pb = cyclic_shift(pb, {-shift, -shift, -shift});
            mask = std::make_shared<Tensor<T>>(shifted_window_mask<T>(dims, window, shift));
        }
        WindowSet<T> wa = window_partition(pa, window, {shift, shift, shift});
        WindowSet<T> wb = window_partition(pb, window, {shift, shift, shift});
        auto [ma_ws, mb_ws] = cm->forward(t, wa, wb, mask, probe);
        auto devolume = [&](const WindowSet<T>& ws) {
            Var<T> y = window_reverse(ws);
            if (shift > 0) y = cyclic_shift(y, {shift, shift, shift});
            if (dims != orig) y = crop_spatial(y, {0, 0, 0}, orig);
            return y;
        };
        return {devolume(ma_ws), devolume(mb_ws)};
    }
};

/// One encoder stage of a branch: self-modal block per stream, then the
/// cross-modal module across the pair (or a shifted-window block for
/// single-stream branches).
template <class T>
struct MccaStage {
    std::vector<TransformerBlock<T>> self_blocks;
    std::unique_ptr<CrossModalBlock<T>> cross_pair;
    std::unique_ptr<TransformerBlock<T>> cross_single;

    MccaStage(ParamStore<T>& ps, const std::string& name, int64_t n_streams, int64_t c, int64_t heads,
              int64_t window, bool fusion, bool hybrid) {
        if (n_streams != 1 && n_streams != 2) throw ConfigError("MCCA stage supports 1 or 2 streams");
        for (int64_t i = 0; i < n_streams; ++i)
            self_blocks.emplace_back(ps, name + ".self" + std::to_string(i), c, heads, window, 0, hybrid);
        if (n_streams == 2)
            cross_pair = std::make_unique<CrossModalBlock<T>>(ps, name + ".cross", c, heads, window, fusion, hybrid);
        else
            cross_single =
                std::make_unique<TransformerBlock<T>>(ps, name + ".cross", c, heads, window, window / 2, hybrid);
    }

    std::vector<Var<T>> forward(Tape<T>& t, const std::vector<Var<T>>& xs, Probe<T>* probe = nullptr) const {
        if (xs.size() != self_blocks.size()) throw ShapeError("MCCA stage stream count mismatch");
        std::vector<Var<T>> ys;
        for (size_t i = 0; i < xs.size(); ++i) ys.push_back(self_blocks[i].forward(t, xs[i], probe));
        if (cross_pair) {
            auto [oa, ob] = cross_pair->forward(t, ys[0], ys[1], probe);
            return {oa, ob};
        }
        return {cross_single->forward(t, ys[0], probe)};
    }
};

/// Stride-2 convolution between stages: halves spatial dims, doubles
/// channels.
template <class T>
struct Downsample {
    Conv3dLayer<T> conv;

    Downsample(ParamStore<T>& ps, const std::string& name, int64_t c)
        : conv(ps, name + ".conv", c, 2 * c, 3, 2, 1) {}

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        const Shape& s = x.shape();
        if (s[2] % 2 || s[3] % 2 || s[4] % 2)
            throw ShapeError("downsample requires even spatial dims, got " + shape_str(s));
        return conv.forward(t, x);
    }
};

/// Bottleneck: channel concatenation of all streams, optional 1x1x1
/// projection to the fused width, then one self-modal-style block.
template <class T>
struct BottleneckLayer {
    std::unique_ptr<PointwiseConv<T>> proj;
    std::unique_ptr<TransformerBlock<T>> block;
    int64_t concat_channels = 0, fused_channels = 0;
    std::string name;

    BottleneckLayer(ParamStore<T>& ps, const std::string& name_, int64_t concat_c, int64_t fused_c, int64_t heads,
                    int64_t window, bool hybrid)
        : concat_channels(concat_c), fused_channels(fused_c), name(name_) {
        if (fused_c != concat_c) proj = std::make_unique<PointwiseConv<T>>(ps, name_ + ".proj", concat_c, fused_c);
        block = std::make_unique<TransformerBlock<T>>(ps, name_ + ".block", fused_c, heads, window, 0, hybrid);
    }

    Var<T> forward(Tape<T>& t, const std::vector<Var<T>>& streams, Probe<T>* probe = nullptr) const {
        if (streams.empty()) throw ShapeError("bottleneck with no inputs");
        for (size_t i = 1; i < streams.size(); ++i)
            require_same_shape(t.value(streams[0].id), t.value(streams[i].id), "bottleneck inputs");
        Var<T> x = streams.size() == 1 ? streams[0] : concat(streams, 1);
        if (x.shape()[1] != concat_channels) throw ShapeError("bottleneck channel mismatch");
        if (proj) x = proj->forward(t, x);
        Var<T> out = block->forward(t, x, probe);
        if (probe) probe->put(name + ".out", out.val());
        return out;
    }
};

template <class T>
struct EncoderTaps {
    std::vector<Var<T>> stem_skips;            // per stream, scale 1/2
    std::array<std::vector<Var<T>>, 3> stage;  // per stage, per stream: 1/4, 1/8, 1/16
    Var<T> f_bnl;                              // scale 1/32
};

/// The dual-branch hybrid encoder. `branches` lists the streams of each
/// branch; streams are indexed in branch-major order and never share
/// parameters.
template <class T>
struct DualBranchEncoder {
    std::vector<std::vector<int>> branches;
    std::vector<ConvStem<T>> stems;
    std::vector<std::vector<MccaStage<T>>> stages;  // [branch][stage]
    std::vector<std::vector<Downsample<T>>> downs;  // [stream][stage]
    std::unique_ptr<BottleneckLayer<T>> bottleneck;
    int64_t base = 0;

    DualBranchEncoder(ParamStore<T>& ps, const std::string& name, std::vector<std::vector<int>> branches_,
                      int64_t stem_cin, int64_t base_, std::array<int64_t, 3> heads, int64_t bnl_heads,
                      int64_t window, bool fusion, bool hybrid)
        : branches(std::move(branches_)), base(base_) {
        int n_streams = 0;
        for (const auto& b : branches) n_streams += static_cast<int>(b.size());
        for (int s = 0; s < n_streams; ++s)
            stems.emplace_back(ps, name + ".stem" + std::to_string(s), stem_cin, base_);
        for (size_t b = 0; b < branches.size(); ++b) {
            stages.emplace_back();
            for (int k = 0; k < 3; ++k) {
                int64_t c = base_ << k;
                stages.back().emplace_back(ps, name + ".b" + std::to_string(b) + ".st" + std::to_string(k + 1),
                                           static_cast<int64_t>(branches[b].size()), c,
                                           heads[static_cast<size_t>(k)], window, fusion, hybrid);
            }
        }
        for (int s = 0; s < n_streams; ++s) {
            downs.emplace_back();
            for (int k = 0; k < 3; ++k) {
                int64_t c = base_ << k;
                downs.back().emplace_back(ps, name + ".down" + std::to_string(s) + "_" + std::to_string(k + 1), c);
            }
        }
        int64_t concat_c = n_streams * 8 * base_;
        int64_t fused_c = 16 * base_;
        bottleneck = std::make_unique<BottleneckLayer<T>>(ps, name + ".bnl", concat_c, fused_c, bnl_heads, window,
                                                          hybrid);
    }

    int64_t n_streams() const {
        int64_t n = 0;
        for (const auto& b : branches) n += static_cast<int64_t>(b.size());
        return n;
    }

    EncoderTaps<T> forward(Tape<T>& t, const std::vector<Var<T>>& inputs, Probe<T>* probe = nullptr) const {
        if (static_cast<int64_t>(inputs.size()) != n_streams())
            throw ShapeError("encoder expects " + std::to_string(n_streams()) + " input streams");
        EncoderTaps<T> taps;
        std::vector<Var<T>> x(inputs.size());
        for (size_t s = 0; s < inputs.size(); ++s) {
            StemOutput<T> so = stems[s].forward(t, inputs[s]);
            taps.stem_skips.push_back(so.half);
            x[s] = so.quarter;
        }
        for (int k = 0; k < 3; ++k) {
            int stream0 = 0;
            for (size_t b = 0; b < branches.size(); ++b) {
                int nb = static_cast<int>(branches[b].size());
                std::vector<Var<T>> in(x.begin() + stream0, x.begin() + stream0 + nb);
                std::vector<Var<T>> out = stages[b][static_cast<size_t>(k)].forward(t, in, probe);
                for (int i = 0; i < nb; ++i) x[static_cast<size_t>(stream0 + i)] = out[static_cast<size_t>(i)];
                stream0 += nb;
            }
            for (size_t s = 0; s < x.size(); ++s) {
                taps.stage[static_cast<size_t>(k)].push_back(x[s]);
                x[s] = downs[s][static_cast<size_t>(k)].forward(t, x[s]);
            }
        }
        taps.f_bnl = bottleneck->forward(t, x, probe);
        return taps;
    }
};

}  // namespace ckdseg
