// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gradlens {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents do not line up (matmul, elementwise, seed vs output, ...).
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A key path is missing, collides, or contains the separator character.
struct KeyError : Error {
    explicit KeyError(const std::string& msg) : Error(msg) {}
};

// Object used outside its lifecycle contract (consumed tape, nested run, ...).
struct StateError : Error {
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// Bad user-facing configuration (CLI config files, method options).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File parsing / serialization failures.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace gradlens
