#pragma once

#include <span>
#include <string>
#include <vector>

#include "ctxguard/errors.hpp"
#include "ctxguard/numerics.hpp"

namespace ctxguard {

struct ScgOptions {
  double sigma0 = 1e-4;
  double lambda0 = 1e-6;
  int max_iters = 500;
  double grad_tol = 1e-8;

  void validate() const;
};

struct ScgIteration {
  int iter = 0;
  double objective = 0.0;  // at the current point after this iteration
  double grad_norm = 0.0;
  double lambda = 0.0;
  bool accepted = false;
};

struct ScgTrace {
  std::vector<ScgIteration> iterations;

  std::size_t accepted_count() const;
  /// Header iter,objective,grad_norm,lambda,accepted then one row per iteration.
  std::string to_csv() const;
};

struct ScgResult {
  std::vector<double> w;
  double value = 0.0;
  double grad_norm = 0.0;
  bool converged = false;  // stopped on the gradient tolerance
  ScgTrace trace;
};

/// Non-finite objective or gradient mid-run; carries the trace so far.
class ScgNumericError : public NumericError {
 public:
  ScgNumericError(const std::string& what, ScgTrace trace)
      : NumericError(what), trace_(std::move(trace)) {}
  const ScgTrace& trace() const noexcept { return trace_; }

 private:
  ScgTrace trace_;
};

/// Scaled conjugate gradient (Moller 1993): conjugate directions with a
/// Polak-Ribiere beta, restarts every n iterations and on non-descent
/// directions, curvature from a one-sided gradient difference, and
/// Levenberg-Marquardt damping driven by the comparison parameter.
/// A step is accepted only when it strictly lowers the objective.
ScgResult scg_minimize(const Objective& objective, std::span<const double> w0,
                       const ScgOptions& opts = {});

}  // namespace ctxguard
