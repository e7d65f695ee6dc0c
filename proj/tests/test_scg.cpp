#include <cmath>

#include "doctest.h"

#include "ctxguard/scg.hpp"

using namespace ctxguard;

namespace {

void check_strict_decrease(const ScgTrace& t, double start) {
  double prev = start;
  for (const auto& it : t.iterations) {
    if (!it.accepted) continue;
    CHECK(it.objective < prev);
    prev = it.objective;
  }
}

}  // namespace

TEST_CASE("scg: 1/2 |w - a|^2 in 20 dimensions") {
  Rng rng(1);
  std::vector<double> a(20);
  for (double& v : a) v = rng.normal();
  Objective f = [&](std::span<const double> w) {
    ValueGrad vg;
    vg.grad.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      vg.grad[i] = w[i] - a[i];
      vg.value += 0.5 * vg.grad[i] * vg.grad[i];
    }
    return vg;
  };
  ScgResult r = scg_minimize(f, std::vector<double>(20, 0.0));
  CHECK(r.converged);
  CHECK(r.trace.iterations.size() <= 200);
  for (std::size_t i = 0; i < 20; ++i) CHECK(std::abs(r.w[i] - a[i]) <= 1e-6);
  check_strict_decrease(r.trace, f(std::vector<double>(20, 0.0)).value);
}

TEST_CASE("scg: 1/2 (w - w*)' (M'M + I) (w - w*) in 20 dimensions, 3 seeds") {
  const std::size_t n = 20;
  for (std::uint64_t seed : {11u, 22u, 33u}) {
    Rng rng(seed);
    std::vector<double> m(n * n), wstar(n);
    for (double& v : m) v = rng.normal();
    for (double& v : wstar) v = rng.normal();
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) a[i * n + j] += m[k * n + i] * m[k * n + j];
        if (i == j) a[i * n + j] += 1.0;
      }
    Objective f = [&](std::span<const double> w) {
      ValueGrad vg;
      vg.grad.assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) vg.grad[i] += a[i * n + j] * (w[j] - wstar[j]);
      for (std::size_t i = 0; i < n; ++i) vg.value += 0.5 * (w[i] - wstar[i]) * vg.grad[i];
      return vg;
    };
    ScgOptions opts;
    opts.max_iters = 200;
    ScgResult r = scg_minimize(f, std::vector<double>(n, 0.0), opts);
    CHECK(r.converged);
    CHECK(r.grad_norm <= 1e-8);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(r.w[i] - wstar[i]) <= 1e-6);
    check_strict_decrease(r.trace, f(std::vector<double>(n, 0.0)).value);
  }
}

TEST_CASE("scg: stationary start returns w0 with no accepted steps") {
  Objective f = [](std::span<const double> w) {
    ValueGrad vg;
    vg.grad.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      vg.grad[i] = w[i] - 2.0;
      vg.value += 0.5 * vg.grad[i] * vg.grad[i];
    }
    return vg;
  };
  std::vector<double> w0(5, 2.0);
  ScgResult r = scg_minimize(f, w0);
  CHECK(r.w == w0);
  CHECK(r.trace.accepted_count() == 0);
  CHECK(r.converged);
}

TEST_CASE("scg: Rosenbrock from (-1.2, 1)") {
  Objective f = [](std::span<const double> w) {
    const double x = w[0], y = w[1];
    ValueGrad vg;
    vg.value = (1 - x) * (1 - x) + 100 * (y - x * x) * (y - x * x);
    vg.grad = {-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)};
    return vg;
  };
  ScgOptions opts;
  opts.max_iters = 2000;
  ScgResult r = scg_minimize(f, std::vector<double>{-1.2, 1.0}, opts);
  CHECK(r.value <= 1e-6);
  check_strict_decrease(r.trace, f(std::vector<double>{-1.2, 1.0}).value);
}

TEST_CASE("scg: trace CSV has one row per iteration") {
  Objective f = [](std::span<const double> w) {
    ValueGrad vg;
    vg.value = std::pow(w[0] - 1, 4) + w[1] * w[1];
    vg.grad = {4 * std::pow(w[0] - 1, 3), 2 * w[1]};
    return vg;
  };
  ScgOptions opts;
  opts.max_iters = 30;
  ScgResult r = scg_minimize(f, std::vector<double>{3.0, 2.0}, opts);
  std::string csv = r.trace.to_csv();
  std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
  CHECK(lines == r.trace.iterations.size() + 1);
  CHECK(csv.rfind("iter,objective,grad_norm,lambda,accepted\n", 0) == 0);
}

TEST_CASE("scg: invalid options and non-finite objective") {
  ScgOptions bad;
  bad.sigma0 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
  Objective nan_after = [](std::span<const double> w) {
    ValueGrad vg;
    // Finite only at the start point, so the first trial step fails.
    vg.value = w[0] == 0.0 ? 1.0 : std::nan("");
    vg.grad = {1.0};
    return vg;
  };
  CHECK_THROWS_AS(scg_minimize(nan_after, std::vector<double>{0.0}), ScgNumericError);
}
