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

#include "ckdseg/nn/layers.hpp"
#include "ckdseg/nn/windowing.hpp"

namespace ckdseg {

/// Q/K/V/output projection set for one attention stream.
template <class T>
struct AttnProjections {
    LinearLayer<T> q, k, v, o;

    AttnProjections() = default;
    AttnProjections(ParamStore<T>& ps, const std::string& name, int64_t c)
        : q(ps, name + ".wq", c, c), k(ps, name + ".wk", c, c), v(ps, name + ".wv", c, c),
          o(ps, name + ".wo", c, c) {}
};

namespace detail {

/// Core scaled-dot-product attention over window tokens.
/// queries from `tq`, keys/values from `tkv`; bias (H, N, N); optional window
/// mask (nW, N, N). Returns (G, N, C) tokens after the output projection.
template <class T>
Var<T> window_attend(Tape<T>& t, Var<T> tq, Var<T> tkv, const AttnProjections<T>& pq,
                     const AttnProjections<T>& pkv, Var<T> bias, std::type_identity_t<std::shared_ptr<const Tensor<T>>> mask,
                     int64_t n_windows, int64_t heads, std::type_identity_t<Probe<T>*> probe, const std::string& probe_name) {
    const Shape& s = tq.shape();
    int64_t G = s[0], N = s[1], C = s[2];
    if (C % heads != 0) throw ShapeError("embed dim " + std::to_string(C) + " not divisible by heads");
    int64_t d = C / heads;
    auto project = [&](const LinearLayer<T>& l, Var<T> tokens) {
        return reshape(apply_linear(t, l, reshape(tokens, {G * N, C})), {G, N, C});
    };
    Var<T> qh = split_heads(project(pq.q, tq), heads);    // (G*H, N, d)
    Var<T> kh = split_heads(project(pkv.k, tkv), heads);
    Var<T> vh = split_heads(project(pkv.v, tkv), heads);
    Var<T> scores = mul_scalar(bmm_nt(qh, kh), T(1) / std::sqrt(static_cast<T>(d)));
    scores = add_bias_and_mask(scores, bias, std::move(mask), n_windows, heads);
    Var<T> attn = softmax_lastdim(scores);
    if (probe) probe->put(probe_name, attn.val());
    Var<T> out = merge_heads(bmm(attn, vh), heads);       // (G, N, C)
    return project(pq.o, out);
}

}  // namespace detail

/// Windowed multi-head self-attention with learned relative position bias.
template <class T>
struct WindowMSA {
    AttnProjections<T> proj;
    Parameter<T>* bias_table = nullptr;  // (heads, (2w-1)^3)
    int64_t heads = 0;
    int64_t window = 0;
    std::string name;

    WindowMSA() = default;
    WindowMSA(ParamStore<T>& ps, const std::string& name_, int64_t c, int64_t heads_, int64_t window_)
        : proj(ps, name_, c), heads(heads_), window(window_), name(name_) {
        int64_t span = 2 * window_ - 1;
        bias_table = ps.create(name_ + ".bias_table", {heads_, span * span * span}, Init::kZero);
    }

    WindowSet<T> forward(Tape<T>& t, const WindowSet<T>& ws, std::shared_ptr<const Tensor<T>> mask = {},
                         Probe<T>* probe = nullptr) const {
        if (ws.geo.window != window) throw ShapeError("window size mismatch in msa");
        Var<T> bias = relative_position_bias(t.use(*bias_table), window);
        Var<T> out = detail::window_attend(t, ws.tokens, ws.tokens, proj, proj, bias, std::move(mask),
                                           ws.geo.num_windows(), heads, probe, name + ".attn");
        WindowSet<T> r = ws;
        r.tokens = out;
        return r;
    }
};

/// Cross-modal window attention: each stream queries the other stream's keys
/// and values (Eqs. of the paired formulation); one bias table is shared by
/// the two directions so the operator is symmetric under swapping the pair.
template <class T>
struct CrossModalMSA {
    AttnProjections<T> proj_a, proj_b;
    Parameter<T>* bias_table = nullptr;
    int64_t heads = 0;
    int64_t window = 0;
    std::string name;

    CrossModalMSA() = default;
    CrossModalMSA(ParamStore<T>& ps, const std::string& name_, int64_t c, int64_t heads_, int64_t window_)
        : proj_a(ps, name_ + ".a", c), proj_b(ps, name_ + ".b", c), heads(heads_), window(window_), name(name_) {
        int64_t span = 2 * window_ - 1;
        bias_table = ps.create(name_ + ".bias_table", {heads_, span * span * span}, Init::kZero);
    }

    std::pair<WindowSet<T>, WindowSet<T>> forward(Tape<T>& t, const WindowSet<T>& wa, const WindowSet<T>& wb,
                                                  std::shared_ptr<const Tensor<T>> mask = nullptr,
                                                  Probe<T>* probe = nullptr) const {
        if (wa.geo.batch != wb.geo.batch || wa.geo.dims != wb.geo.dims || wa.geo.window != wb.geo.window ||
            wa.geo.shift != wb.geo.shift)
            throw ShapeError("cm_msa: window geometry mismatch");
        if (wa.geo.window != window) throw ShapeError("cm_msa: window size mismatch");
        require_same_shape(t.value(wa.tokens.id), t.value(wb.tokens.id), "cm_msa tokens");
        Var<T> bias = relative_position_bias(t.use(*bias_table), window);
        int64_t nw = wa.geo.num_windows();
        Var<T> ma = detail::window_attend(t, wa.tokens, wb.tokens, proj_a, proj_b, bias, mask, nw, heads, probe,
                                          name + ".attn_ab");
        Var<T> mb = detail::window_attend(t, wb.tokens, wa.tokens, proj_b, proj_a, bias, mask, nw, heads, probe,
                                          name + ".attn_ba");
        WindowSet<T> ra = wa, rb = wb;
        ra.tokens = ma;
        rb.tokens = mb;
        return {ra, rb};
    }
};

}  // namespace ckdseg
