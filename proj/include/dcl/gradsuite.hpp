#pragma once

// Finite-difference suite over every differentiable primitive and the full
// clustering objective, in double and single precision.

#include <cstdint>
#include <string>
#include <vector>

namespace dcl::gradsuite {

inline constexpr double kDoubleTolerance = 1e-6;
inline constexpr double kFloatTolerance = 1e-3;

struct CaseResult {
    std::string name;
    double double_error = 0;
    double float_error = 0;
    bool passed = false;
};

struct SuiteResult {
    std::vector<CaseResult> cases;
    double max_double_error = 0;
    double max_float_error = 0;
    bool passed = false;
};

SuiteResult run(std::uint64_t seed = 0);

} // namespace dcl::gradsuite
