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

#include <string>

#include "ckdseg/core/errors.hpp"

namespace ckdseg {

/// How the four MRI modalities are organized at the model input.
/// CLINICAL pairs (T1, T1GD) and (T2, T2FLAIR); the two SWAP schemes permute
/// the pairing; INPUT_CONCAT feeds one 4-channel stream; PER_MODALITY feeds
/// four independent single-modality streams fused at the bottleneck.
enum class Grouping {
    kClinical,
    kSwap1,
    kSwap2,
    kInputConcat,
    kPerModality,
};

inline const char* grouping_name(Grouping g) {
    switch (g) {
        case Grouping::kClinical: return "clinical";
        case Grouping::kSwap1: return "swap1";
        case Grouping::kSwap2: return "swap2";
        case Grouping::kInputConcat: return "input_concat";
        case Grouping::kPerModality: return "per_modality";
    }
    return "?";
}

inline Grouping grouping_from_name(const std::string& s) {
    if (s == "clinical") return Grouping::kClinical;
    if (s == "swap1") return Grouping::kSwap1;
    if (s == "swap2") return Grouping::kSwap2;
    if (s == "input_concat") return Grouping::kInputConcat;
    if (s == "per_modality") return Grouping::kPerModality;
    throw ConfigError("unknown grouping scheme: " + s);
}

}  // namespace ckdseg
