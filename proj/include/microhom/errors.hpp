#pragma once

#include <stdexcept>
#include <string>

namespace microhom {

/** Violated precondition (bad arguments, mismatched grids, unmet hypotheses). */
struct PreconditionError : std::invalid_argument {
    explicit PreconditionError(const std::string& msg) : std::invalid_argument(msg) {}
};

/** Malformed or truncated serialized data. */
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/** A numerical routine failed to reach its required accuracy. */
struct SolverError : std::runtime_error {
    explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw PreconditionError(msg);
}

} // namespace microhom
