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

#include "ckdseg/core/version.hpp"

#include <cstdlib>
#include <cstring>

namespace ckdseg {

const char* version() { return "0.1.0"; }

bool deterministic_mode() {
    const char* v = std::getenv("CKD_DETERMINISTIC");
    return v != nullptr && std::strcmp(v, "1") == 0;
}

}  // namespace ckdseg
