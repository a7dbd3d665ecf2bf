#include "mfbsde/cross_check.hpp"

#include <algorithm>

namespace mfbsde {

double cross_check(const ProblemSpec& spec, const RiccatiSolution& P,
                   const FieldSolution& fs, const ExpectationPath& path) {
  (void)spec;
  double worst = 0.0;
  for (std::size_t i = 0; i < path.tgrid.size(); ++i) {
    const double s = path.tgrid[i];
    const Vec lhs = path.ybar[i];
    const Vec rhs = eval_P(P, s) * path.xbar[i] + fs.eval(s, path.xbar[i]);
    worst = std::max(worst, (lhs - rhs).lpNorm<Eigen::Infinity>());
  }
  return worst;
}

}  // namespace mfbsde
