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

#include "ckdseg/ag/ops_basic.hpp"
#include "ckdseg/ag/ops_conv.hpp"
#include "ckdseg/ag/ops_nn.hpp"
#include "ckdseg/nn/params.hpp"

namespace ckdseg {

template <class T>
struct LinearLayer {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    int64_t cin = 0, cout = 0;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, const std::string& name, int64_t cin_, int64_t cout_, bool bias = true)
        : cin(cin_), cout(cout_) {
        w = ps.create(name + ".w", {cin_, cout_}, Init::kTruncNormal);
        if (bias) b = ps.create(name + ".b", {cout_}, Init::kZero);
    }

};

/// x: (N, Cin) -> (N, Cout)
template <class T>
Var<T> apply_linear(Tape<T>& t, const LinearLayer<T>& l, Var<T> x) {
    Var<T> w = t.use(*l.w);
    if (l.b) {
        Var<T> b = t.use(*l.b);
        return linear(x, w, &b);
    }
    return linear(x, w);
}

template <class T>
struct Conv3dLayer {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    int64_t stride = 1, pad = 0, groups = 1;

    Conv3dLayer() = default;
    Conv3dLayer(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k, int64_t stride_,
                int64_t pad_, int64_t groups_ = 1, bool bias = true)
        : stride(stride_), pad(pad_), groups(groups_) {
        int64_t fan_in = (cin / groups_) * k * k * k;
        w = ps.create(name + ".w", {cout, cin / groups_, k, k, k}, Init::kFanInNormal, fan_in);
        if (bias) b = ps.create(name + ".b", {cout}, Init::kZero);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Var<T> wv = t.use(*w);
        if (b) {
            Var<T> bv = t.use(*b);
            return conv3d(x, wv, &bv, stride, pad, groups);
        }
        return conv3d(x, wv, nullptr, stride, pad, groups);
    }
};

/// 1x1x1 convolution over channels of a (B, C, spatial...) tensor.
template <class T>
struct PointwiseConv {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;

    PointwiseConv() = default;
    PointwiseConv(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout, bool bias = true) {
        w = ps.create(name + ".w", {cout, cin}, Init::kFanInNormal, cin);
        if (bias) b = ps.create(name + ".b", {cout}, Init::kZero);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Var<T> wv = t.use(*w);
        if (b) {
            Var<T> bv = t.use(*b);
            return conv1x1(x, wv, &bv);
        }
        return conv1x1(x, wv, nullptr);
    }
};

/// Transposed convolution, kernel 2 stride 2: doubles spatial, maps cin->cout.
template <class T>
struct DeconvLayer {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;

    DeconvLayer() = default;
    DeconvLayer(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout, bool bias = true) {
        w = ps.create(name + ".w", {cin, cout, 2, 2, 2}, Init::kFanInNormal, cin);
        if (bias) b = ps.create(name + ".b", {cout}, Init::kZero);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Var<T> wv = t.use(*w);
        if (b) {
            Var<T> bv = t.use(*b);
            return conv_transpose3d_k2s2(x, wv, &bv);
        }
        return conv_transpose3d_k2s2(x, wv, nullptr);
    }
};

/// Layer norm over the channel axis of a token matrix (N, C).
template <class T>
struct LayerNormLayer {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& ps, const std::string& name, int64_t c) {
        gamma = ps.create(name + ".g", {c}, Init::kOne);
        beta = ps.create(name + ".b", {c}, Init::kZero);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const { return layer_norm(x, t.use(*gamma), t.use(*beta)); }
};

/// Layer norm over the channel axis of a (B, C, X, Y, Z) volume, one voxel
/// per normalization row.
template <class T>
struct ChannelLayerNorm {
    LayerNormLayer<T> ln;

    ChannelLayerNorm() = default;
    ChannelLayerNorm(ParamStore<T>& ps, const std::string& name, int64_t c) : ln(ps, name, c) {}

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Shape s = x.shape();
        return from_tokens(ln.forward(t, to_tokens(x)), s);
    }
};

template <class T>
struct InstanceNormLayer {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    InstanceNormLayer() = default;
    InstanceNormLayer(ParamStore<T>& ps, const std::string& name, int64_t c) {
        gamma = ps.create(name + ".g", {c}, Init::kOne);
        beta = ps.create(name + ".b", {c}, Init::kZero);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const { return instance_norm(x, t.use(*gamma), t.use(*beta)); }
};

/// conv3x3 + instance norm + leaky relu, the basic CNN unit of stems and the
/// decoder refinement blocks.
template <class T>
struct ConvNormAct {
    Conv3dLayer<T> conv;
    InstanceNormLayer<T> norm;

    ConvNormAct() = default;
    ConvNormAct(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout, int64_t stride)
        : conv(ps, name + ".conv", cin, cout, 3, stride, 1), norm(ps, name + ".norm", cout) {}

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        return leaky_relu(norm.forward(t, conv.forward(t, x)), T(0.01));
    }
};

/// Squeeze-and-excitation over channels.
template <class T>
struct SqueezeExcite {
    LinearLayer<T> fc1, fc2;

    SqueezeExcite() = default;
    SqueezeExcite(ParamStore<T>& ps, const std::string& name, int64_t channels, int64_t hidden)
        : fc1(ps, name + ".fc1", channels, hidden), fc2(ps, name + ".fc2", hidden, channels) {}

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Var<T> s = mean_spatial(x);                    // (B, C)
        s = silu(apply_linear(t, fc1, s));
        s = sigmoid(apply_linear(t, fc2, s));
        return scale_channels(x, s);
    }
};

/// Inverted residual convolution (the factor inside the residual): expand by
/// 1x1x1, depthwise 3x3x3, squeeze-excitation, project by 1x1x1. Spatial dims
/// and channel count are preserved; zero weights give a zero output.
template <class T>
struct MBConvLayer {
    PointwiseConv<T> expand;
    Conv3dLayer<T> depthwise;
    SqueezeExcite<T> se;
    PointwiseConv<T> project;
    int64_t channels = 0;

    static constexpr int64_t kExpansion = 4;

    MBConvLayer() = default;
    MBConvLayer(ParamStore<T>& ps, const std::string& name, int64_t c)
        : expand(ps, name + ".expand", c, kExpansion * c),
          depthwise(ps, name + ".dw", kExpansion * c, kExpansion * c, 3, 1, 1, kExpansion * c),
          se(ps, name + ".se", kExpansion * c, se_hidden(c)),
          project(ps, name + ".proj", kExpansion * c, c),
          channels(c) {}

    static int64_t se_hidden(int64_t c) { return std::max<int64_t>(1, c / 4); }

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        if (x.shape().size() != 5 || x.shape()[1] != channels)
            throw ShapeError("mbconv: expected " + std::to_string(channels) + " channels, got " +
                             shape_str(x.shape()));
        Var<T> h = silu(expand.forward(t, x));
        h = silu(depthwise.forward(t, h));
        h = se.forward(t, h);
        return project.forward(t, h);
    }
};

/// Plain two-layer MLP feed-forward (used when the hybrid encoder flag is
/// off), matching the MBConv expansion ratio. Operates on volumes.
template <class T>
struct MlpLayer {
    LinearLayer<T> fc1, fc2;
    int64_t channels = 0;

    static constexpr int64_t kExpansion = 4;

    MlpLayer() = default;
    MlpLayer(ParamStore<T>& ps, const std::string& name, int64_t c)
        : fc1(ps, name + ".fc1", c, kExpansion * c), fc2(ps, name + ".fc2", kExpansion * c, c), channels(c) {}

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        Shape s = x.shape();
        Var<T> tk = to_tokens(x);
        tk = apply_linear(t, fc2, gelu(apply_linear(t, fc1, tk)));
        return from_tokens(tk, s);
    }
};

/// The transformer feed-forward slot: MBConv when hybrid, MLP otherwise.
template <class T>
struct FeedForward {
    std::unique_ptr<MBConvLayer<T>> mbconv;
    std::unique_ptr<MlpLayer<T>> mlp;

    FeedForward() = default;
    FeedForward(ParamStore<T>& ps, const std::string& name, int64_t c, bool hybrid) {
        if (hybrid)
            mbconv = std::make_unique<MBConvLayer<T>>(ps, name, c);
        else
            mlp = std::make_unique<MlpLayer<T>>(ps, name, c);
    }

    Var<T> forward(Tape<T>& t, Var<T> x) const {
        return mbconv ? mbconv->forward(t, x) : mlp->forward(t, x);
    }
};

}  // namespace ckdseg
