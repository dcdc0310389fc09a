#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "advperc/ops.hpp"

namespace advperc::ops {

namespace {

constexpr double kRoundingUlps = 16.0;

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe evaluate(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  BranchTrace trace;
  const Tensor y = f(x);
  if (y.numel() != 1) throw TensorError("finite_diff_check: f must return a scalar");
  const double v = y.item();
  if (!std::isfinite(v)) throw TensorError("finite_diff_check: f(x) is not finite");
  return {v, trace.signature()};
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<std::size_t> all(x.numel());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return finite_diff_check(f, x, h, all);
}

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                                  std::span<const std::size_t> coordinates) {
  if (!(h > 0.0)) throw TensorError("finite_diff_check: step must be positive");

  std::vector<double> analytic;
  {
    Graph graph;
    GraphScope scope(graph);
    const Tensor leaf = x.as_leaf();
    const Tensor y = f(leaf);
    if (y.numel() != 1) throw TensorError("finite_diff_check: f must return a scalar");
    if (!y.requires_grad()) {
      analytic.assign(x.numel(), 0.0);
    } else {
      graph.backward(y);
      analytic.assign(leaf.grad().begin(), leaf.grad().end());
    }
  }

  const Probe center = evaluate(f, x.detach());
  std::vector<double> values(x.data().begin(), x.data().end());
  auto probe_at = [&](std::size_t i, double offset) {
    const double saved = values[i];
    values[i] = saved + offset;
    Probe p = evaluate(f, Tensor(x.shape(), values));
    values[i] = saved;
    return p;
  };

  GradCheckReport report;
  for (const std::size_t i : coordinates) {
    if (i >= values.size()) throw TensorError("finite_diff_check: coordinate out of range");
    bool smooth = false;
    double numeric = 0.0, noise = 0.0;
    for (double step = h; step >= h * 1e-2 * 0.999; step /= 10.0) {
      const Probe plus = probe_at(i, step);
      const Probe minus = probe_at(i, -step);
      if (plus.signature != center.signature || minus.signature != center.signature) continue;
      numeric = (plus.value - minus.value) / (2.0 * step);
      // rounding in the two evaluations, propagated through the stencil
      noise = kRoundingUlps * std::numeric_limits<double>::epsilon() * (std::abs(plus.value) + std::abs(minus.value)) /
              (2.0 * step);
      smooth = true;
      break;
    }
    if (!smooth) {
      ++report.skipped_nonsmooth;
      continue;
    }
    ++report.checked;
    const double err = std::max(0.0, std::abs(analytic[i] - numeric) - noise) /
                       std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (count >= n) return all;
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace advperc::ops
