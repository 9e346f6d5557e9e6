#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qsm {

struct GradcheckRow {
    std::string name;
    int cases = 0;
    double max_rel_error = 0.0; // worst over all cases
};

// Central-difference checks of every differentiable op, both networks and every loss on
// random small inputs.
std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed, int cases_per_check = 20);

} // namespace qsm
