#pragma once

// Central finite-difference verification of every autograd primitive, in
// double precision. Used by the unit tests, the `gradcheck` CLI subcommand
// and the acceptance suite. The finite-difference side never touches the
// backward pass it is checking.

#include <cstdint>
#include <string>
#include <vector>

namespace absorber {

struct GradCheckResult {
    std::string op;
    int cases = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Runs `cases_per_op` randomized checks per primitive op (step 1e-5,
// relative error threshold 1e-4).
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, int cases_per_op);

bool all_passed(const std::vector<GradCheckResult>& results);

} // namespace absorber
