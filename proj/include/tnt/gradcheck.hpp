#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tnt/tensor.hpp"

namespace tnt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check of d(f)/d(param) against one reverse pass.
// `f` must rebuild the whole computation from the current parameter values on
// every call and be deterministic (re-seed any randomness inside). Relative
// error uses max(|analytic|, |numeric|, 1e-12) as the denominator.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double h);

}  // namespace tnt
