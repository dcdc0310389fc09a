#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "advperc/tensor.hpp"

namespace advperc::ops {

enum class Reduction { mean, sum };

// All image-like tensors are NCHW.

/// weight [K, C, kh, kw], bias [K] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor upsample2x_nearest(const Tensor& x);
/// Softmax over the channel axis at every (n, h, w).
Tensor channel_softmax(const Tensor& x);
/// Elementwise sum; either operand may be a one-element tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor concat_channels(std::span<const Tensor> parts);
/// Channels [begin, end).
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
Tensor mse(const Tensor& x, const Tensor& target, Reduction reduction = Reduction::mean);
/// probs NCHW (already softmaxed), one label per (n, h, w). Probabilities are
/// floored at kProbFloor before the log.
Tensor cross_entropy(const Tensor& probs, std::span<const int> labels,
                     Reduction reduction = Reduction::mean);
Tensor sum(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

inline constexpr double kProbFloor = 1e-7;

enum class OpKind {
  conv2d,
  relu,
  sigmoid,
  upsample2x_nearest,
  channel_softmax,
  add,
  concat_channels,
  slice_channels,
  mse,
  cross_entropy,
  sum,
  scale,
};

struct OpAttrs {
  int stride = 1;
  int padding = 0;
  double factor = 1.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<int> labels;
  Reduction reduction = Reduction::mean;
};

OpKind op_kind_from_string(std::string_view name);
std::string_view to_string(OpKind kind);

/// Uniform entry point over the op set.
Tensor op_forward(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Coordinates whose stencil crossed a kink at every tried step size.
  std::size_t skipped_nonsmooth = 0;
};

/// Compares the reverse-mode gradient of f at x with central differences.
/// Relative error per coordinate is max(0, |g_ad - g_fd| - r) / max(1e-8, |g_ad| + |g_fd|),
/// where r = 16 eps (|f(x+h)| + |f(x-h)|) / 2h bounds the stencil's own rounding error.
/// A coordinate whose stencil leaves the smooth piece containing x is retried
/// with h/10 and h/100 before being skipped.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double h);
/// Same check restricted to the given flat coordinates.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                                  std::span<const std::size_t> coordinates);

/// `count` distinct flat indices below n, sorted, deterministic in seed; all of them when count >= n.
std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t count, std::uint64_t seed);

}  // namespace advperc::ops
