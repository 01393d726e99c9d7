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

#include "ckdseg/model/encoder.hpp"

namespace ckdseg {

template <class T>
struct DirectionalProfiles {
    Var<T> x, y, z;  // each (B, C, side)
};

/// Average pool a cubic feature volume along each axis separately:
/// profile_x[c, i] = mean over (y, z) of f[c, i, y, z], and so on.
template <class T>
DirectionalProfiles<T> tri_directional_pool(Var<T> f) {
    const Shape& s = f.shape();
    if (s.size() != 5) throw ShapeError("tri_directional_pool expects (B,C,X,Y,Z)");
    if (s[2] != s[3] || s[3] != s[4])
        throw ShapeError("tri_directional_pool requires cubic dims, got " + shape_str(s));
    return {pool_axis(f, 0), pool_axis(f, 1), pool_axis(f, 2)};
}

/// The three profiles are concatenated along the spatial axis, passed
/// through one shared pointwise convolution over channels, and split back.
template <class T>
struct FuseCompress {
    PointwiseConv<T> conv;
    int64_t cout = 0;

    FuseCompress(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout_)
        : conv(ps, name, cin, cout_), cout(cout_) {}

    DirectionalProfiles<T> forward(Tape<T>& t, const DirectionalProfiles<T>& p) const {
        int64_t L = p.x.shape()[2];
        if (p.y.shape()[2] != L || p.z.shape()[2] != L)
            throw ShapeError("fuse_compress profile length mismatch");
        Var<T> cat = concat<T>({p.x, p.y, p.z}, 2);  // (B, C, 3L)
        Var<T> h = conv.forward(t, cat);
        return {narrow(h, 2, 0, L), narrow(h, 2, L, L), narrow(h, 2, 2 * L, L)};
    }
};

/// Direction-wise gate: sigmoid(conv(average of the two profiles)).
template <class T>
struct DirectionGate {
    PointwiseConv<T> conv;

    DirectionGate(ParamStore<T>& ps, const std::string& name, int64_t c) : conv(ps, name, c, c) {}

    Var<T> forward(Tape<T>& t, Var<T> trans_profile, Var<T> main_profile) const {
        require_same_shape(t.value(trans_profile.id), t.value(main_profile.id), "direction_gate");
        Var<T> avg = mul_scalar(add(trans_profile, main_profile), T(0.5));
        return sigmoid(conv.forward(t, avg));
    }
};

/// Separable calibration tensor from three gated profiles (per-channel outer
/// product); entries stay in (0,1) because each factor does.
template <class T>
Var<T> calibration_tensor(Var<T> bx, Var<T> by, Var<T> bz) {
    return outer3(bx, by, bz);
}

/// Feature calibration block: gates the transformer skip features with a
/// tri-directional separable attention tensor, then concatenates the
/// calibrated skip with the decoder main stream. With calibration disabled
/// it degenerates to the plain concatenation.
template <class T>
struct TcfcBlock {
    bool calibration = true;
    std::unique_ptr<FuseCompress<T>> comp_trans;  // C_t -> C_t
    std::unique_ptr<FuseCompress<T>> comp_main;   // C_f -> C_t
    std::unique_ptr<DirectionGate<T>> gate_x, gate_y, gate_z;
    int64_t c_trans = 0, c_main = 0;
    std::string name;

    TcfcBlock(ParamStore<T>& ps, const std::string& name_, int64_t c_trans_, int64_t c_main_, bool calibration_)
        : calibration(calibration_), c_trans(c_trans_), c_main(c_main_), name(name_) {
        if (calibration_) {
            comp_trans = std::make_unique<FuseCompress<T>>(ps, name_ + ".comp_t", c_trans_, c_trans_);
            comp_main = std::make_unique<FuseCompress<T>>(ps, name_ + ".comp_m", c_main_, c_trans_);
            gate_x = std::make_unique<DirectionGate<T>>(ps, name_ + ".gx", c_trans_);
            gate_y = std::make_unique<DirectionGate<T>>(ps, name_ + ".gy", c_trans_);
            gate_z = std::make_unique<DirectionGate<T>>(ps, name_ + ".gz", c_trans_);
        }
    }

    Var<T> forward(Tape<T>& t, Var<T> f_trans, Var<T> f, Probe<T>* probe = nullptr) const {
        const Shape& st = f_trans.shape();
        const Shape& sf = f.shape();
        if (st.size() != 5 || sf.size() != 5 || st[2] != sf[2] || st[3] != sf[3] || st[4] != sf[4])
            throw ShapeError("tcfc: scale mismatch " + shape_str(st) + " vs " + shape_str(sf));
        if (st[1] != c_trans || sf[1] != c_main) throw ShapeError("tcfc: channel mismatch");
        if (!calibration) return concat<T>({f_trans, f}, 1);
        DirectionalProfiles<T> pt = comp_trans->forward(t, tri_directional_pool(f_trans));
        DirectionalProfiles<T> pm = comp_main->forward(t, tri_directional_pool(f));
        Var<T> bx = gate_x->forward(t, pt.x, pm.x);
        Var<T> by = gate_y->forward(t, pt.y, pm.y);
        Var<T> bz = gate_z->forward(t, pt.z, pm.z);
        Var<T> a = calibration_tensor(bx, by, bz);
        if (probe) probe->put(name + ".calibration", a.val());
        return concat<T>({mul(a, f_trans), f}, 1);
    }
};

/// Segmentation head: pointwise convolution to 3 overlapping region logits.
template <class T>
struct SegHead {
    PointwiseConv<T> conv;

    SegHead(ParamStore<T>& ps, const std::string& name, int64_t cin) : conv(ps, name, cin, 3) {}

    Var<T> forward(Tape<T>& t, Var<T> x, std::array<int64_t, 3> full_dims) const {
        const Shape& s = x.shape();
        if (s[2] != full_dims[0] || s[3] != full_dims[1] || s[4] != full_dims[2])
            throw ShapeError("seg_head expects full-resolution input, got " + shape_str(s));
        return conv.forward(t, x);
    }
};

/// Feature calibration decoder: three TCFC blocks at 1/16, 1/8 and 1/4 with
/// deconvolution upsampling, convolutional fusion with the stem skips at
/// 1/2, and the segmentation head at full resolution.
template <class T>
struct Decoder {
    DeconvLayer<T> up0, up1, up2, up3, up4;
    std::vector<TcfcBlock<T>> tcfc;           // at 1/16, 1/8, 1/4
    std::vector<PointwiseConv<T>> harmonize;  // restores the canonical width
    ConvNormAct<T> fuse1, fuse2;              // skip fusion at 1/2
    ConvNormAct<T> final_conv;                // full resolution
    SegHead<T> head;
    int64_t base = 0;

    /// trans_widths: channels of the concatenated branch taps at 1/16, 1/8,
    /// 1/4; skip_width: channels of the concatenated stem skips.
    Decoder(ParamStore<T>& ps, const std::string& name, int64_t base_, int64_t f_bnl_c,
            std::array<int64_t, 3> trans_widths, int64_t skip_width, bool calibration)
        : up0(ps, name + ".up0", f_bnl_c, 8 * base_),
          up1(ps, name + ".up1", 8 * base_, 4 * base_),
          up2(ps, name + ".up2", 4 * base_, 2 * base_),
          up3(ps, name + ".up3", 2 * base_, base_),
          up4(ps, name + ".up4", base_, base_ / 2),
          fuse1(ps, name + ".fuse1", skip_width + base_, base_, 1),
          fuse2(ps, name + ".fuse2", base_, base_, 1),
          final_conv(ps, name + ".final", base_ / 2, base_ / 2, 1),
          head(ps, name + ".head", base_ / 2),
          base(base_) {
        for (int k = 0; k < 3; ++k) {
            int64_t c_main = (8 * base_) >> k;
            tcfc.emplace_back(ps, name + ".tcfc" + std::to_string(k + 1), trans_widths[static_cast<size_t>(k)],
                              c_main, calibration);
            harmonize.emplace_back(ps, name + ".harm" + std::to_string(k + 1),
                                   trans_widths[static_cast<size_t>(k)] + c_main, c_main);
        }
    }

    Var<T> forward(Tape<T>& t, const EncoderTaps<T>& taps, Probe<T>* probe = nullptr) const {
        Var<T> f = up0.forward(t, taps.f_bnl);
        const DeconvLayer<T>* ups[3] = {&up1, &up2, &up3};
        for (int k = 0; k < 3; ++k) {
            const auto& stream_taps = taps.stage[static_cast<size_t>(2 - k)];  // deepest first
            Var<T> f_trans = stream_taps.size() == 1 ? stream_taps[0] : concat(stream_taps, 1);
            Var<T> x = tcfc[static_cast<size_t>(k)].forward(t, f_trans, f, probe);
            f = harmonize[static_cast<size_t>(k)].forward(t, x);
            f = ups[k]->forward(t, f);
        }
        Var<T> skips =
            taps.stem_skips.size() == 1 ? taps.stem_skips[0] : concat(taps.stem_skips, 1);
        f = fuse2.forward(t, fuse1.forward(t, concat<T>({skips, f}, 1)));
        f = up4.forward(t, f);
        f = final_conv.forward(t, f);
        const Shape& s = f.shape();
        return head.forward(t, f, {s[2], s[3], s[4]});
    }
};

}  // namespace ckdseg
