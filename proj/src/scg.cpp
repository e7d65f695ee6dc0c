#include "ctxguard/scg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ctxguard {

namespace {

constexpr double kLambdaMin = 1e-15;
constexpr double kLambdaMax = 1e100;

bool finite_all(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ScgOptions::validate() const {
  if (!(sigma0 > 0.0)) throw ArgumentError("scg: sigma0 must be positive");
  if (!(lambda0 > 0.0)) throw ArgumentError("scg: lambda0 must be positive");
  if (!(grad_tol >= 0.0)) throw ArgumentError("scg: grad_tol must be non-negative");
  if (max_iters < 0) throw ArgumentError("scg: max_iters must be non-negative");
}

std::size_t ScgTrace::accepted_count() const {
  return static_cast<std::size_t>(
      std::count_if(iterations.begin(), iterations.end(), [](const ScgIteration& it) { return it.accepted; }));
}

std::string ScgTrace::to_csv() const {
  std::string out = "iter,objective,grad_norm,lambda,accepted\n";
  for (const auto& it : iterations) {
    out += std::to_string(it.iter) + "," + fmt_double(it.objective) + "," + fmt_double(it.grad_norm) +
           "," + fmt_double(it.lambda) + "," + (it.accepted ? "1" : "0") + "\n";
  }
  return out;
}

ScgResult scg_minimize(const Objective& objective, std::span<const double> w0, const ScgOptions& opts) {
  opts.validate();
  const std::size_t n = w0.size();
  ScgResult res;
  res.w.assign(w0.begin(), w0.end());

  ValueGrad cur = objective(res.w);
  if (!std::isfinite(cur.value) || cur.grad.size() != n || !finite_all(cur.grad)) {
    throw ScgNumericError("scg: non-finite objective at the starting point", res.trace);
  }
  res.value = cur.value;
  std::vector<double> r(n), p(n), trial(n), s(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = -cur.grad[i];
  p = r;
  res.grad_norm = norm2(r);
  if (res.grad_norm <= opts.grad_tol || n == 0) {
    res.converged = true;
    return res;
  }

  double lambda = opts.lambda0;
  double lambda_bar = 0.0;
  double delta = 0.0;
  bool success = true;
  std::size_t since_restart = 0;

  for (int iter = 1; iter <= opts.max_iters; ++iter) {
    const double pp = dot(p, p);
    if (success) {
      const double sigma = opts.sigma0 / std::sqrt(pp);
      for (std::size_t i = 0; i < n; ++i) trial[i] = res.w[i] + sigma * p[i];
      const ValueGrad probe = objective(trial);
      if (probe.grad.size() != n || !finite_all(probe.grad)) {
        throw ScgNumericError("scg: non-finite gradient at the curvature probe (iteration " +
                                  std::to_string(iter) + ")",
                              res.trace);
      }
      for (std::size_t i = 0; i < n; ++i) s[i] = (probe.grad[i] - cur.grad[i]) / sigma;
      delta = dot(p, s);
    }

    delta += (lambda - lambda_bar) * pp;
    if (delta <= 0.0) {
      // Make the local Hessian estimate positive definite.
      lambda_bar = 2.0 * (lambda - delta / pp);
      delta = -delta + lambda * pp;
      lambda = lambda_bar;
    }

    const double mu = dot(p, r);
    const double alpha = mu / delta;
    for (std::size_t i = 0; i < n; ++i) trial[i] = res.w[i] + alpha * p[i];
    ValueGrad next = objective(trial);
    if (!std::isfinite(next.value) || next.grad.size() != n || !finite_all(next.grad)) {
      throw ScgNumericError("scg: non-finite objective at a trial point (iteration " +
                                std::to_string(iter) + ")",
                            res.trace);
    }
    const double comparison = 2.0 * delta * (cur.value - next.value) / (mu * mu);
    const bool accepted = next.value < cur.value;

    if (accepted) {
      res.w = trial;
      std::vector<double> r_new(n);
      for (std::size_t i = 0; i < n; ++i) r_new[i] = -next.grad[i];
      cur = std::move(next);
      lambda_bar = 0.0;
      success = true;
      ++since_restart;
      if (since_restart % n == 0) {
        p = r_new;
      } else {
        const double beta = (dot(r_new, r_new) - dot(r_new, r)) / mu;
        for (std::size_t i = 0; i < n; ++i) p[i] = r_new[i] + beta * p[i];
      }
      r = std::move(r_new);
      if (dot(p, r) <= 0.0) {
        p = r;
        since_restart = 0;
      }
      if (comparison >= 0.75) lambda *= 0.25;
    } else {
      lambda_bar = lambda;
      success = false;
    }
    if (comparison < 0.25) lambda += delta * (1.0 - comparison) / pp;
    lambda = std::clamp(lambda, kLambdaMin, kLambdaMax);

    res.value = cur.value;
    res.grad_norm = norm2(r);
    res.trace.iterations.push_back({iter, res.value, res.grad_norm, lambda, accepted});
    if (res.grad_norm <= opts.grad_tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace ctxguard
