#pragma once

#include <stdexcept>
#include <string>

namespace convolt {

/// Input violates a documented precondition or invariant (CLI exit code 1).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem or on-disk format problem (CLI exit code 2).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace convolt
