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

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "ckdseg/ag/tape.hpp"
#include "ckdseg/core/rng.hpp"

namespace ckdseg {

enum class Init {
    kZero,
    kOne,
    kTruncNormal,   // sigma 0.02, clipped at 2 sigma
    kFanInNormal,   // sigma sqrt(2 / fan_in)
};

/// Owns every parameter of a model. Names are hierarchical
/// ("enc.b0.s1.self0.msa.wq") and double as checkpoint keys; per-parameter
/// init seeds are derived from (model seed, name) so initialization does not
/// depend on creation order.
template <class T>
class ParamStore {
public:
    Parameter<T>* create(const std::string& name, Shape shape, Init init, int64_t fan_in = 0) {
        if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
        entries_.push_back(Entry{Parameter<T>(name, std::move(shape)), init, fan_in});
        index_[name] = entries_.size() - 1;
        return &entries_.back().p;
    }

    void initialize(uint64_t seed) {
        for (auto& e : entries_) {
            Rng rng(mix_seed(seed, e.p.name));
            switch (e.init) {
                case Init::kZero:
                    std::fill(e.p.value.v.begin(), e.p.value.v.end(), T(0));
                    break;
                case Init::kOne:
                    std::fill(e.p.value.v.begin(), e.p.value.v.end(), T(1));
                    break;
                case Init::kTruncNormal:
                    for (auto& x : e.p.value.v) x = static_cast<T>(rng.truncated_normal(0.02));
                    break;
                case Init::kFanInNormal: {
                    double sigma = std::sqrt(2.0 / static_cast<double>(std::max<int64_t>(1, e.fan_in)));
                    for (auto& x : e.p.value.v) x = static_cast<T>(rng.normal(0.0, sigma));
                    break;
                }
            }
            e.p.zero_grad();
        }
    }

    void zero_grad() {
        for (auto& e : entries_) e.p.zero_grad();
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> out;
        out.reserve(entries_.size());
        for (auto& e : entries_) out.push_back(&e.p);
        return out;
    }

    std::vector<const Parameter<T>*> all() const {
        std::vector<const Parameter<T>*> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(&e.p);
        return out;
    }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second].p;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.p.numel();
        return n;
    }

    /// Sum of parameter counts whose name starts with `prefix`.
    int64_t count_prefix(const std::string& prefix) const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.p.name.rfind(prefix, 0) == 0) n += e.p.numel();
        return n;
    }

    size_t size() const { return entries_.size(); }

private:
    struct Entry {
        Parameter<T> p;
        Init init;
        int64_t fan_in;
    };
    std::deque<Entry> entries_;
    std::map<std::string, size_t> index_;
};

/// Captures named intermediate tensors during a forward pass (attention
/// matrices, per-block activations) for tests and diagnostics.
template <class T>
struct Probe {
    std::map<std::string, Tensor<T>> tensors;

    void put(const std::string& name, const Tensor<T>& t) { tensors[name] = t; }
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    const Tensor<T>& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ArgumentError("probe has no tensor named " + name);
        return it->second;
    }
};

}  // namespace ckdseg
