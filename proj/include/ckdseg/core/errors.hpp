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

#include <stdexcept>
#include <string>

namespace ckdseg {

/// Process exit codes used by the CLI. 0 is success.
enum class ExitCode : int {
    kOk = 0,
    kConfig = 2,
    kData = 3,
    kNumerical = 4,
};

class Error : public std::runtime_error {
public:
    Error(std::string msg, ExitCode code)
        : std::runtime_error(std::move(msg)), code_(code) {}
    ExitCode exit_code() const { return code_; }

private:
    ExitCode code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg, ExitCode::kConfig) {}
};

class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& msg) : Error("argument error: " + msg, ExitCode::kConfig) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg, ExitCode::kData) {}
};

class WindowSizeError : public ShapeError {
public:
    explicit WindowSizeError(const std::string& msg) : ShapeError("window: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io error: " + msg, ExitCode::kData) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format error: " + msg, ExitCode::kData) {}
};

class MissingModality : public Error {
public:
    explicit MissingModality(const std::string& msg) : Error("missing modality: " + msg, ExitCode::kData) {}
};

class CoRegistrationError : public Error {
public:
    explicit CoRegistrationError(const std::string& msg)
        : Error("co-registration error: " + msg, ExitCode::kData) {}
};

class LabelCodeError : public Error {
public:
    explicit LabelCodeError(const std::string& msg) : Error("label code error: " + msg, ExitCode::kData) {}
};

class EmptyVolumeError : public Error {
public:
    explicit EmptyVolumeError(const std::string& msg) : Error("empty volume: " + msg, ExitCode::kData) {}
};

class MissingLabelError : public Error {
public:
    explicit MissingLabelError(const std::string& msg) : Error("missing label: " + msg, ExitCode::kData) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error("numerical error: " + msg, ExitCode::kNumerical) {}
};

}  // namespace ckdseg
