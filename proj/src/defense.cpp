#include "advperc/defense.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace advperc {

void DefenseConfig::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw std::invalid_argument("DefenseConfig: radius must be positive");
  if (!(truncation > 0.0) || !std::isfinite(truncation)) {
    throw std::invalid_argument("DefenseConfig: truncation must be positive");
  }
}

std::vector<double> gaussian_kernel(const DefenseConfig& cfg) {
  cfg.validate();
  const long half = static_cast<long>(std::ceil(cfg.truncation * cfg.radius));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double total = 0.0;
  for (long i = -half; i <= half; ++i) {
    const double x = static_cast<double>(i) / cfg.radius;
    total += k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * x * x);
  }
  for (auto& v : k) v /= total;
  return k;
}

namespace {

// Symmetric reflection: ... c b a | a b c ... | c b a ..., period 2n.
std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, const DefenseConfig& cfg) {
  if (!image.defined() || image.rank() != 4) throw std::invalid_argument("gaussian_blur: expected an NCHW image");
  const auto k = gaussian_kernel(cfg);
  const long half = static_cast<long>(k.size() / 2);
  const std::size_t planes = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
  const auto src = image.data();
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = src.data() + p * h * w;
    double* mid = tmp.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -half; t <= half; ++t) {
          acc += k[static_cast<std::size_t>(t + half)] * in[y * w + reflect(static_cast<long>(x) + t, static_cast<long>(w))];
        }
        mid[y * w + x] = acc;
      }
    }
    double* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -half; t <= half; ++t) {
          acc += k[static_cast<std::size_t>(t + half)] * mid[reflect(static_cast<long>(y) + t, static_cast<long>(h)) * w + x];
        }
        dst[y * w + x] = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

TaskMetrics defended_metrics(const Model& model, const Sample& sample, const Tensor& frame_curr,
                             const DefenseConfig& cfg) {
  const TaskOutputs clean = forward(model, sample.frame_prev, sample.frame_curr);
  const TaskOutputs blurred =
      forward(model, gaussian_blur(sample.frame_prev, cfg), gaussian_blur(frame_curr, cfg));
  return evaluate(blurred, clean, sample);
}

std::vector<TaskMetrics> evaluate_defense(std::span<const AttackResult> results, std::span<const Sample> samples,
                                          const Model& model, const DefenseConfig& cfg) {
  if (results.size() != samples.size()) throw std::invalid_argument("evaluate_defense: results/samples size mismatch");
  std::vector<TaskMetrics> out;
  out.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].sample_seed != samples[i].seed) {
      throw std::invalid_argument("evaluate_defense: result " + std::to_string(i) + " belongs to another sample");
    }
    out.push_back(defended_metrics(model, samples[i], results[i].adversarial, cfg));
  }
  return out;
}

}  // namespace advperc
