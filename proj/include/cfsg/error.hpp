#pragma once

#include <stdexcept>
#include <string>

namespace cfsg {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension disagreement between operands. The message names the offending
/// dimension and the values that clashed.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
    ShapeError(const std::string& dim, long long expected, long long got)
        : Error("shape mismatch on dimension '" + dim + "': expected " +
                std::to_string(expected) + ", got " + std::to_string(got)),
          dimension(dim) {}
    std::string dimension;
};

/// Invalid configuration (bad field values, unknown keys, missing version).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Bad data: corrupt files, failed checksums, out-of-range labels.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Filesystem / stream failure.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

} // namespace cfsg
