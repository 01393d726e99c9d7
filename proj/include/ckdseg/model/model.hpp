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
#include <utility>
#include <vector>

#include "ckdseg/model/config.hpp"
#include "ckdseg/model/decoder.hpp"
#include "ckdseg/model/encoder.hpp"

namespace ckdseg {

struct ParamReport {
    std::vector<std::pair<std::string, int64_t>> parts;
    int64_t total = 0;
};

/// Branch layout induced by a grouping scheme: stream lists per branch, in
/// branch-major order. Stream tensors are fed in the same order.
inline std::vector<std::vector<int>> branch_layout(Grouping g) {
    switch (g) {
        case Grouping::kClinical:
        case Grouping::kSwap1:
        case Grouping::kSwap2: return {{0, 1}, {2, 3}};
        case Grouping::kPerModality: return {{0}, {1}, {2}, {3}};
        case Grouping::kInputConcat: return {{0}};
    }
    return {};
}

/// The assembled segmentation model: stems + dual-branch encoder + feature
/// calibration decoder + segmentation head, built from a ModelConfig with
/// deterministic seed-derived initialization.
template <class T>
class CkdModel {
public:
    explicit CkdModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        auto branches = branch_layout(cfg.grouping);
        int64_t stem_cin = cfg.grouping == Grouping::kInputConcat ? 4 : 1;
        encoder_ = std::make_unique<DualBranchEncoder<T>>(store_, "enc", branches, stem_cin, cfg.base_embed,
                                                          cfg.heads, cfg.bottleneck_heads, cfg.window, cfg.fusion,
                                                          cfg.hybrid);
        int64_t n = encoder_->n_streams();
        std::array<int64_t, 3> trans_widths = {n * 4 * cfg.base_embed, n * 2 * cfg.base_embed,
                                               n * cfg.base_embed};
        int64_t skip_width = n * (cfg.base_embed / 2);
        decoder_ = std::make_unique<Decoder<T>>(store_, "dec", cfg.base_embed, 16 * cfg.base_embed, trans_widths,
                                                skip_width, cfg.calibration);
        store_.initialize(cfg.seed);
    }

    int64_t n_streams() const { return encoder_->n_streams(); }
    int64_t stream_channels() const { return cfg_.grouping == Grouping::kInputConcat ? 4 : 1; }

    /// streams: one (1, stream_channels, X, Y, Z) tensor per encoder stream,
    /// branch-major order. Input is zero-padded up to a cube whose side is a
    /// multiple of 32; logits are cropped back to the input dims.
    Var<T> forward(Tape<T>& t, const std::vector<Tensor<T>>& streams, Probe<T>* probe = nullptr) const {
        if (static_cast<int64_t>(streams.size()) != n_streams())
            throw ShapeError("model expects " + std::to_string(n_streams()) + " stream tensors");
        const Shape& s0 = streams[0].shape;
        if (s0.size() != 5 || s0[0] != 1 || s0[1] != stream_channels())
            throw ShapeError("stream tensors must be (1," + std::to_string(stream_channels()) + ",X,Y,Z), got " +
                             shape_str(s0));
        for (const auto& s : streams)
            if (s.shape != s0) throw ShapeError("stream tensors must share dims");
        std::array<int64_t, 3> dims{s0[2], s0[3], s0[4]};
        int64_t side = std::max({dims[0], dims[1], dims[2]});
        side = (side + 31) / 32 * 32;
        std::vector<Var<T>> inputs;
        inputs.reserve(streams.size());
        for (const auto& s : streams) {
            Var<T> v = t.leaf(s, /*needs_grad=*/true);
            if (dims[0] != side || dims[1] != side || dims[2] != side)
                v = pad_spatial(v, {0, 0, 0}, {side - dims[0], side - dims[1], side - dims[2]});
            inputs.push_back(v);
        }
        EncoderTaps<T> taps = encoder_->forward(t, inputs, probe);
        Var<T> logits = decoder_->forward(t, taps, probe);
        if (logits.shape()[2] != side) throw ShapeError("decoder output scale mismatch");
        if (dims[0] != side || dims[1] != side || dims[2] != side)
            logits = crop_spatial(logits, {0, 0, 0}, dims);
        return logits;
    }

    ParamReport param_count() const {
        ParamReport rep;
        int64_t n_stems = 0;
        for (size_t s = 0; s < encoder_->stems.size(); ++s)
            n_stems += store_.count_prefix("enc.stem" + std::to_string(s) + ".");
        rep.parts.emplace_back("stems", n_stems);
        int64_t n_stages = store_.count_prefix("enc.down");
        for (size_t b = 0; b < encoder_->branches.size(); ++b)
            n_stages += store_.count_prefix("enc.b" + std::to_string(b) + ".");
        rep.parts.emplace_back("encoder_stages", n_stages);
        rep.parts.emplace_back("bottleneck", store_.count_prefix("enc.bnl."));
        rep.parts.emplace_back("decoder", store_.count_prefix("dec."));
        rep.total = store_.total_params();
        return rep;
    }

    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    const DualBranchEncoder<T>& encoder() const { return *encoder_; }
    const Decoder<T>& decoder() const { return *decoder_; }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    std::unique_ptr<DualBranchEncoder<T>> encoder_;
    std::unique_ptr<Decoder<T>> decoder_;
};

}  // namespace ckdseg
