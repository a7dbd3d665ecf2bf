#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mfbsde/types.hpp"

namespace mfbsde {

/// Positioned error from the coefficient-expression mini-language.
struct ExprError : std::runtime_error {
  int line = 1, column = 1;
  ExprError(const std::string& what, int line, int column)
      : std::runtime_error(what + " at " + std::to_string(line) + ":" +
                           std::to_string(column)),
        line(line),
        column(column) {}
};

/// Variable bindings available during evaluation. y/ybar hold n components.
struct ExprEnv {
  double t = 0.0, x = 0.0, xbar = 0.0;
  Vec y;     // y1..yn
  Vec ybar;  // ybar1..ybarn
};

/// Parsed expression over {t, x, xbar, y1..yn, ybar1..ybarn}, parameters,
/// numeric constants, operators + - * / ^ (with ^ right-associative above
/// unary minus) and functions sin cos exp sqrt tanh abs min max.
class CoefficientExpr {
 public:
  CoefficientExpr() = default;

  /// Recursive-descent parse; `params` supplies named constants. Throws
  /// ExprError carrying line:column and the offending token.
  static CoefficientExpr parse(const std::string& src,
                               const std::map<std::string, double>& params = {},
                               int n = 1);

  double eval(const ExprEnv& env) const;

  /// Emits text that re-parses to an identical tree.
  std::string to_string() const;

  bool empty() const { return root_ == nullptr; }

  struct Node;

 private:
  std::shared_ptr<const Node> root_;
  std::map<std::string, double> params_;
  int n_ = 1;
};

}  // namespace mfbsde
