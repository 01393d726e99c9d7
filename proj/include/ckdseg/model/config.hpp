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

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "ckdseg/core/errors.hpp"
#include "ckdseg/core/grouping.hpp"

namespace ckdseg {

struct ModelConfig {
    int64_t base_embed = 32;
    int64_t window = 4;
    std::array<int64_t, 3> heads = {2, 4, 8};
    int64_t bottleneck_heads = 16;
    int64_t crop = 128;
    bool fusion = true;
    bool hybrid = true;
    bool calibration = true;
    Grouping grouping = Grouping::kClinical;
    uint64_t seed = 0;

    void validate() const {
        if (base_embed < 4 || base_embed % 4 != 0)
            throw ConfigError("base_embed must be a positive multiple of 4");
        if (window < 1) throw ConfigError("window must be >= 1");
        if (crop < 1) throw ConfigError("crop must be >= 1");
        for (int k = 0; k < 3; ++k) {
            int64_t c = base_embed << k;
            if (heads[static_cast<size_t>(k)] < 1 || c % heads[static_cast<size_t>(k)] != 0)
                throw ConfigError("stage " + std::to_string(k + 1) + " embed dim " + std::to_string(c) +
                                  " not divisible by heads");
        }
        if (bottleneck_heads < 1 || (16 * base_embed) % bottleneck_heads != 0)
            throw ConfigError("bottleneck width not divisible by bottleneck_heads");
        if (fusion && (grouping == Grouping::kInputConcat || grouping == Grouping::kPerModality))
            throw ConfigError(std::string("fusion requires paired branches; grouping ") +
                              grouping_name(grouping) + " has none");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"base_embed", base_embed},
                              {"window", window},
                              {"heads", {heads[0], heads[1], heads[2]}},
                              {"bottleneck_heads", bottleneck_heads},
                              {"crop", crop},
                              {"fusion", fusion},
                              {"hybrid", hybrid},
                              {"calibration", calibration},
                              {"grouping", grouping_name(grouping)},
                              {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            if (j.contains("base_embed")) c.base_embed = j.at("base_embed").get<int64_t>();
            if (j.contains("window")) c.window = j.at("window").get<int64_t>();
            if (j.contains("heads")) {
                auto h = j.at("heads");
                if (!h.is_array() || h.size() != 3) throw ConfigError("heads must be a 3-element array");
                for (size_t k = 0; k < 3; ++k) c.heads[k] = h.at(k).get<int64_t>();
            }
            if (j.contains("bottleneck_heads")) c.bottleneck_heads = j.at("bottleneck_heads").get<int64_t>();
            if (j.contains("crop")) c.crop = j.at("crop").get<int64_t>();
            if (j.contains("fusion")) c.fusion = j.at("fusion").get<bool>();
            if (j.contains("hybrid")) c.hybrid = j.at("hybrid").get<bool>();
            if (j.contains("calibration")) c.calibration = j.at("calibration").get<bool>();
            if (j.contains("grouping")) c.grouping = grouping_from_name(j.at("grouping").get<std::string>());
            if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad model config: ") + e.what());
        }
        return c;
    }

    /// Canonical serialized form; used to detect checkpoint/config mismatch.
    std::string fingerprint() const { return to_json().dump(); }
};

/// Rows of the two experiment matrices: the ablation grid over
/// {fusion, calibration, hybrid} and the fusion-strategy comparison.
enum class Preset {
    kTable2Row1,
    kTable2Row2,
    kTable2Row3,
    kTable2Row4,
    kTable2Row5,
    kTable2Row6,
    kTable2Row7,
    kTable2Row8,
    kTable3Row1,
    kTable3Row2,
    kTable3Row3,
    kTable3Row4,
    kTable3Row5,
};

inline ModelConfig variant(Preset p) {
    ModelConfig c;
    auto flags = [&c](bool fusion, bool calibration, bool hybrid) {
        c.fusion = fusion;
        c.calibration = calibration;
        c.hybrid = hybrid;
    };
    switch (p) {
        case Preset::kTable2Row1: flags(false, false, false); break;
        case Preset::kTable2Row2: flags(true, false, false); break;
        case Preset::kTable2Row3: flags(false, true, false); break;
        case Preset::kTable2Row4: flags(false, false, true); break;
        case Preset::kTable2Row5: flags(true, false, true); break;
        case Preset::kTable2Row6: flags(true, true, false); break;
        case Preset::kTable2Row7: flags(false, true, true); break;
        case Preset::kTable2Row8: flags(true, true, true); break;
        case Preset::kTable3Row1:
            flags(false, true, true);
            c.grouping = Grouping::kPerModality;
            break;
        case Preset::kTable3Row2:
            flags(false, true, true);
            c.grouping = Grouping::kInputConcat;
            break;
        case Preset::kTable3Row3:
            flags(true, true, true);
            c.grouping = Grouping::kSwap1;
            break;
        case Preset::kTable3Row4:
            flags(true, true, true);
            c.grouping = Grouping::kSwap2;
            break;
        case Preset::kTable3Row5:
            flags(true, true, true);
            c.grouping = Grouping::kClinical;
            break;
    }
    return c;
}

inline const char* preset_name(Preset p) {
    switch (p) {
        case Preset::kTable2Row1: return "table2_row1";
        case Preset::kTable2Row2: return "table2_row2";
        case Preset::kTable2Row3: return "table2_row3";
        case Preset::kTable2Row4: return "table2_row4";
        case Preset::kTable2Row5: return "table2_row5";
        case Preset::kTable2Row6: return "table2_row6";
        case Preset::kTable2Row7: return "table2_row7";
        case Preset::kTable2Row8: return "table2_row8";
        case Preset::kTable3Row1: return "table3_row1_latent";
        case Preset::kTable3Row2: return "table3_row2_input";
        case Preset::kTable3Row3: return "table3_row3_swap1";
        case Preset::kTable3Row4: return "table3_row4_swap2";
        case Preset::kTable3Row5: return "table3_row5_clinical";
    }
    return "?";
}

inline Preset preset_from_name(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(Preset::kTable3Row5); ++i) {
        Preset p = static_cast<Preset>(i);
        if (s == preset_name(p)) return p;
    }
    throw ConfigError("unknown preset: " + s);
}

inline std::array<Preset, 8> table2_presets() {
    return {Preset::kTable2Row1, Preset::kTable2Row2, Preset::kTable2Row3, Preset::kTable2Row4,
            Preset::kTable2Row5, Preset::kTable2Row6, Preset::kTable2Row7, Preset::kTable2Row8};
}

inline std::array<Preset, 5> table3_presets() {
    return {Preset::kTable3Row1, Preset::kTable3Row2, Preset::kTable3Row3, Preset::kTable3Row4,
            Preset::kTable3Row5};
}

}  // namespace ckdseg
