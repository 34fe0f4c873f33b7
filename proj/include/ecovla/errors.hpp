#pragma once

#include <stdexcept>
#include <string>

namespace ecovla {

// Error taxonomy. Each maps one failure class of the public operations;
// all derive from Error so callers may catch coarsely.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct LayoutError : Error {
    explicit LayoutError(const std::string& msg) : Error("layout error: " + msg) {}
};

struct MaskError : Error {
    explicit MaskError(const std::string& msg) : Error("mask error: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct StateError : Error {
    explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

struct InputError : Error {
    explicit InputError(const std::string& msg) : Error("input error: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("I/O error: " + msg) {}
};

}  // namespace ecovla
