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

#include <functional>
#include <utility>
#include <vector>

#include "ckdseg/core/tensor.hpp"

namespace ckdseg {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& val() const { return tape->value(id); }
    const Shape& shape() const { return tape->value(id).shape; }
};

/// A trainable tensor that outlives individual forward passes. Gradients
/// accumulate here after Tape::backward.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s) : name(std::move(n)), value(std::move(s)), grad(value.shape) {}
    int64_t numel() const { return value.numel(); }
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), T(0)); }
};

/// Reverse-mode autodiff tape. One tape records one forward pass; backward
/// walks the nodes in reverse creation order. Execution is single threaded
/// and the reduction order is fixed, so results are bitwise reproducible.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape<T>&, int)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    /// Insert a constant or input tensor.
    Var<T> leaf(Tensor<T> value, bool needs_grad = false) {
        return push(std::move(value), needs_grad && grad_enabled_, nullptr);
    }

    /// Insert a parameter; after backward() its gradient is accumulated into
    /// Parameter::grad.
    Var<T> use(Parameter<T>& p) {
        Var<T> v = push(p.value, grad_enabled_, nullptr);
        if (grad_enabled_) bound_.push_back({v.id, &p});
        return v;
    }

    Var<T> push(Tensor<T> value, bool needs_grad, BackwardFn back) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(back), needs_grad && grad_enabled_});
        Var<T> v;
        v.tape = this;
        v.id = static_cast<int>(nodes_.size()) - 1;
        return v;
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor<T>& mutable_value(int id) { return nodes_[static_cast<size_t>(id)].value; }

    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    /// Gradient buffer of a node, allocated (zero) on first touch.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

    /// Backpropagate from a scalar loss node.
    void backward(Var<T> loss) {
        if (!grad_enabled_) throw ArgumentError("backward() on a no-grad tape");
        if (value(loss.id).numel() != 1) throw ShapeError("backward() expects a scalar loss");
        grad(loss.id).v[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
            n.backward(*this, i);
        }
        for (auto& [id, p] : bound_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.empty()) continue;
            for (int64_t k = 0; k < n.grad.numel(); ++k) p->grad.v[static_cast<size_t>(k)] += n.grad[k];
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Parameter<T>*>> bound_;
    bool grad_enabled_;
};

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw ArgumentError("vars belong to different tapes");
}

}  // namespace ckdseg
