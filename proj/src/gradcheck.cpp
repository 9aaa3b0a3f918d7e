#include "tnt/gradcheck.hpp"

#include <cmath>

namespace tnt {

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double h) {
  if (h <= 0.0) throw domain_error(msg("finite_diff_check: h = ", h));
  for (const auto& [name, p] : params) {
    if (!p.defined()) throw usage_error(msg("finite_diff_check: undefined param ", name));
    // The reverse pass only reaches marked leaves.
    const_cast<Tensor&>(p).set_requires_grad(true);
    const_cast<Tensor&>(p).zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  for (const auto& [name, p] : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<size_t>(p.numel()), 0.0);
  }

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    auto pd = p.data();
    for (size_t i = 0; i < pd.size(); ++i) {
      // Each probe runs under its own discarded tape so that training-only
      // ops stay usable inside f; nothing records into the analytic pass.
      double saved = pd[i];
      pd[i] = saved + h;
      double fp;
      {
        Tape probe;
        fp = f().value();
      }
      pd[i] = saved - h;
      double fm;
      {
        Tape probe;
        fm = f().value();
      }
      pd[i] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi][i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi].first;
        rep.worst_index = static_cast<int64_t>(i);
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace tnt
