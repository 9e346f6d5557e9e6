#pragma once

// Central-difference verification of tape gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qsm/nn/tensor.hpp"

namespace qsm::nn {

struct GradCheckResult {
    double max_rel_error = 0.0; // max over checked entries of |analytic - numeric| / max(|analytic|, |numeric|) over all entries
    std::size_t entries_checked = 0;
    std::string worst_input;
    std::size_t kink_retries = 0; // entries re-estimated over the step ladder
};

// `f` builds a scalar on the given tape from the leaves in `inputs` (which must require grad).
// Checks up to `max_entries` coordinates per input, chosen deterministically from `seed`.
GradCheckResult check_gradients(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& inputs,
                                double step = 1e-6, std::size_t max_entries = 48, std::uint64_t seed = 0);

} // namespace qsm::nn
