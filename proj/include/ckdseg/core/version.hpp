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

namespace ckdseg {

const char* version();

/// True when CKD_DETERMINISTIC=1 is set in the environment. The current
/// implementation is single threaded with fixed reduction order, so results
/// are reproducible either way; the flag is honored as a hard guarantee.
bool deterministic_mode();

}  // namespace ckdseg
