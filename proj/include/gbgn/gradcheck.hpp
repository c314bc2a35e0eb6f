#pragma once

#include "gbgn/tape.hpp"

#include <string>
#include <vector>

namespace gbgn {

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
    int64_t checked = 0;
    int64_t kink_excluded = 0; // elements whose perturbation crossed a relu/warp kink
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
    std::string worst_param;

    std::string summary() const;
};

// Compares backward() with central finite differences of step h, replaying the
// tape at perturbed parameter values. Relative error uses the denominator
// max(|analytic|, |fd|, 1). Elements whose +/-h replays land on different
// sides of a relu or warp kink are reported and excluded from pass/fail.
// max_elements_per_param limits the checked elements per parameter tensor
// (0 = all), chosen deterministically from select_seed.
GradCheckReport finite_diff_check(Tape& tape, ValueId root, double h, double tol,
                                  int64_t max_elements_per_param = 0, uint64_t select_seed = 1);

} // namespace gbgn
