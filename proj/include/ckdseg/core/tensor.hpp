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

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ckdseg/core/errors.hpp"

namespace ckdseg {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Dense row-major tensor. Volumes use the layout (batch, channels, X, Y, Z)
/// with Z varying fastest.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<size_t>(ckdseg::numel(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), v(static_cast<size_t>(ckdseg::numel(shape)), fill) {}
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != ckdseg::numel(shape))
            throw ShapeError("tensor data size does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    bool empty() const { return v.empty(); }
    int64_t dim(size_t i) const { return shape.at(i); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T value) { return Tensor(std::move(s), value); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

template <class T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
    if (!same_shape(a, b))
        throw ShapeError(std::string(where) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace ckdseg
