// SPDX-License-Identifier: MIT
#pragma once

#include <stdexcept>
#include <string>

namespace voxelage {

inline constexpr const char* version_string = "0.1.0";
inline constexpr int checkpoint_format_version = 1;

// Error taxonomy. Validation errors are caller mistakes (bad arguments,
// shape mismatches, out-of-contract inputs); format errors are malformed
// input files; io errors are filesystem failures.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UnsupportedError : std::runtime_error {
    explicit UnsupportedError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

}  // namespace voxelage
