// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mustdrop {

/// Base class for all domain errors raised by the library. The CLI maps
/// these to exit code 1; usage/config problems map to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Matrix dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Softmax over a fully-masked row.
class DegenerateRowError : public Error {
public:
    using Error::Error;
};

/// Cosine similarity of a zero vector.
class SimilarityError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// KV cache misuse (layer mismatch, empty layer).
class CacheError : public Error {
public:
    using Error::Error;
};

/// Budget calibration cannot reach its target.
class CalibrationError : public Error {
public:
    using Error::Error;
};

/// Malformed input file; carries the byte offset of the failure.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t byte_offset)
        : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}

    std::size_t byte_offset() const { return byte_offset_; }

private:
    std::size_t byte_offset_ = 0;
};

/// Destination not writable or stream failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace mustdrop
