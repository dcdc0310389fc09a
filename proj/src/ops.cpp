#include "advperc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace advperc::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& message) {
  if (!ok) throw TensorError(message);
}

void require_nchw(const Tensor& t, std::string_view op) {
  require(t.defined() && t.rank() == 4,
          std::string(op) + ": expected NCHW tensor, got " + (t.defined() ? shape_str(t.shape()) : "undefined"));
}

/// Folds a boolean mask into the active branch trace, 64 flags per word.
template <typename Pred>
void trace_mask(std::size_t n, Pred pred) {
  if (!branch_trace_active()) return;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < n; ++i) {
    word = (word << 1) | (pred(i) ? 1u : 0u);
    if (i % 64 == 63) {
      note_branch(word);
      word = 0;
    }
  }
  note_branch(word ^ n);
}

struct ConvGeometry {
  std::size_t n, c, h, w, k, kh, kw, ho, wo;
  int stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

// cols is (C*kh*kw) x (Ho*Wo), row-major.
void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t P = g.pixels();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          if (g.stride == 1) {
            // valid ox range where 0 <= ox - pad + kx < w
            const long shift = static_cast<long>(kx) - g.pad;
            const long lo = std::max(0L, -shift);
            const long hi = std::min(static_cast<long>(g.wo), static_cast<long>(g.w) - shift);
            std::fill(dst, dst + lo, 0.0);
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + g.wo, 0.0);
            continue;
          }
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t P = g.pixels();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_nchw(input, "conv2d");
  require(weight.defined() && weight.rank() == 4, "conv2d: weight must be [K,C,kh,kw]");
  require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.k = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  require(weight.dim(1) == g.c, "conv2d: input has " + std::to_string(g.c) + " channels, weight expects " +
                                    std::to_string(weight.dim(1)));
  const long hp = static_cast<long>(g.h) + 2 * padding - static_cast<long>(g.kh);
  const long wp = static_cast<long>(g.w) + 2 * padding - static_cast<long>(g.kw);
  require(hp >= 0 && wp >= 0, "conv2d: kernel larger than padded input");
  g.ho = static_cast<std::size_t>(hp / stride + 1);
  g.wo = static_cast<std::size_t>(wp / stride + 1);
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == g.k, "conv2d: bias length must equal output channels");

  const std::size_t P = g.pixels(), Q = g.patch();
  std::shared_ptr<double[]> cols(new double[g.n * Q * P]);
  std::vector<double> out(g.n * g.k * P);
  ConstMapMat wmat(weight.data().data(), static_cast<long>(g.k), static_cast<long>(Q));
  const double* x = input.data().data();
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    double* c = cols.get() + ni * Q * P;
    im2col(x + ni * g.c * g.h * g.w, g, c);
    MapMat o(out.data() + ni * g.k * P, static_cast<long>(g.k), static_cast<long>(P));
    o.noalias() = wmat * ConstMapMat(c, static_cast<long>(Q), static_cast<long>(P));
    if (has_bias) {
      for (std::size_t ki = 0; ki < g.k; ++ki) o.row(static_cast<long>(ki)).array() += bias.data()[ki];
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op("conv2d", {g.n, g.k, g.ho, g.wo}, std::move(out), std::move(inputs),
                 [g, cols, weight, has_bias](std::span<const double> gout, std::span<double* const> gin) {
                   const std::size_t P = g.pixels(), Q = g.patch();
                   ConstMapMat wmat(weight.data().data(), static_cast<long>(g.k), static_cast<long>(Q));
                   std::vector<double> dcols(gin[0] ? Q * P : 0);
                   for (std::size_t ni = 0; ni < g.n; ++ni) {
                     ConstMapMat go(gout.data() + ni * g.k * P, static_cast<long>(g.k), static_cast<long>(P));
                     ConstMapMat c(cols.get() + ni * Q * P, static_cast<long>(Q), static_cast<long>(P));
                     if (gin[1] && g.k == 1) {
                       // single output channel would dispatch to a GEMV whose reduction
                       // order depends on pointer alignment; keep it bit-stable
                       for (std::size_t q = 0; q < Q; ++q) {
                         const double* row = cols.get() + (ni * Q + q) * P;
                         const double* go1 = gout.data() + ni * P;
                         double acc = 0.0;
                         for (std::size_t p = 0; p < P; ++p) acc += go1[p] * row[p];
                         gin[1][q] += acc;
                       }
                     } else if (gin[1]) {
                       MapMat dw(gin[1], static_cast<long>(g.k), static_cast<long>(Q));
                       dw.noalias() += go * c.transpose();
                     }
                     if (has_bias && gin[2]) {
                       // plain loop: Eigen's vectorised redux order depends on pointer alignment
                       for (std::size_t ki = 0; ki < g.k; ++ki) {
                         const double* row = gout.data() + (ni * g.k + ki) * P;
                         double acc = 0.0;
                         for (std::size_t p = 0; p < P; ++p) acc += row[p];
                         gin[2][ki] += acc;
                       }
                     }
                     if (gin[0]) {
                       MapMat dc(dcols.data(), static_cast<long>(Q), static_cast<long>(P));
                       dc.noalias() = wmat.transpose() * go;
                       col2im_add(dcols.data(), g, gin[0] + ni * g.c * g.h * g.w);
                     }
                   }
                 });
}

Tensor relu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  trace_mask(in.size(), [&](std::size_t i) { return in[i] > 0.0; });
  return make_op("relu", x.shape(), std::move(out), {x},
                 [x](std::span<const double> gout, std::span<double* const> gin) {
                   const auto in = x.data();
                   for (std::size_t i = 0; i < in.size(); ++i) {
                     if (in[i] > 0.0) gin[0][i] += gout[i];
                   }
                 });
}

namespace {

double stable_sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

void softmax_into(const double* in, std::size_t n, std::size_t c, std::size_t hw, double* out) {
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* src = in + ni * c * hw;
    double* dst = out + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = src[p];
      for (std::size_t ci = 1; ci < c; ++ci) mx = std::max(mx, src[ci * hw + p]);
      double z = 0.0;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double e = std::exp(src[ci * hw + p] - mx);
        dst[ci * hw + p] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t ci = 0; ci < c; ++ci) dst[ci * hw + p] *= inv;
    }
  }
}

}  // namespace

// Backward passes recompute activations from the input rather than keeping a second copy.
Tensor sigmoid(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = stable_sigmoid(in[i]);
  return make_op("sigmoid", x.shape(), std::move(out), {x},
                 [x](std::span<const double> gout, std::span<double* const> gin) {
                   const auto in = x.data();
                   for (std::size_t i = 0; i < in.size(); ++i) {
                     const double s = stable_sigmoid(in[i]);
                     gin[0][i] += gout[i] * s * (1.0 - s);
                   }
                 });
}

Tensor upsample2x_nearest(const Tensor& x) {
  require_nchw(x, "upsample2x_nearest");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto in = x.data();
  std::vector<double> out(nc * 4 * h * w);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        out[(p * 2 * h + y) * 2 * w + xx] = in[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make_op("upsample2x_nearest", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                 [nc, h, w](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t p = 0; p < nc; ++p) {
                     for (std::size_t y = 0; y < 2 * h; ++y) {
                       for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                         gin[0][(p * h + y / 2) * w + xx / 2] += gout[(p * 2 * h + y) * 2 * w + xx];
                       }
                     }
                   }
                 });
}

Tensor channel_softmax(const Tensor& x) {
  require_nchw(x, "channel_softmax");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  softmax_into(x.data().data(), n, c, hw, out.data());
  return make_op("channel_softmax", x.shape(), std::move(out), {x},
                 [x, n, c, hw](std::span<const double> gout, std::span<double* const> gin) {
                   std::vector<double> prob(x.numel());
                   softmax_into(x.data().data(), n, c, hw, prob.data());
                   for (std::size_t ni = 0; ni < n; ++ni) {
                     const std::size_t base = ni * c * hw;
                     for (std::size_t p = 0; p < hw; ++p) {
                       double dot = 0.0;
                       for (std::size_t ci = 0; ci < c; ++ci) dot += gout[base + ci * hw + p] * prob[base + ci * hw + p];
                       for (std::size_t ci = 0; ci < c; ++ci) {
                         const std::size_t i = base + ci * hw + p;
                         gin[0][i] += prob[i] * (gout[i] - dot);
                       }
                     }
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor& big = a_scalar ? b : a;
  const auto da = a.data(), db = b.data();
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[a_scalar ? 0 : i] + db[b_scalar ? 0 : i];
  return make_op("add", big.shape(), std::move(out), {a, b},
                 [a_scalar, b_scalar](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t i = 0; i < gout.size(); ++i) {
                     if (gin[0]) gin[0][a_scalar ? 0 : i] += gout[i];
                     if (gin[1]) gin[1][b_scalar ? 0 : i] += gout[i];
                   }
                 });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) require_nchw(p, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require(p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
            "concat_channels: non-channel extents differ: " + shape_str(parts[0].shape()) + " vs " +
                shape_str(p.shape()));
    widths.push_back(p.dim(1));
    channels += p.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(n * channels * hw);
  for (std::size_t ni = 0; ni < n; ++ni) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto src = parts[k].data().subspan(ni * widths[k] * hw, widths[k] * hw);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<long>((ni * channels + offset) * hw));
      offset += widths[k];
    }
  }
  return make_op("concat_channels", {n, channels, h, w}, std::move(out),
                 std::vector<Tensor>(parts.begin(), parts.end()),
                 [n, channels, hw, widths](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t ni = 0; ni < n; ++ni) {
                     std::size_t offset = 0;
                     for (std::size_t k = 0; k < widths.size(); ++k) {
                       if (gin[k]) {
                         const double* src = gout.data() + (ni * channels + offset) * hw;
                         double* dst = gin[k] + ni * widths[k] * hw;
                         for (std::size_t i = 0; i < widths[k] * hw; ++i) dst[i] += src[i];
                       }
                       offset += widths[k];
                     }
                   }
                 });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require_nchw(x, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(begin < end && end <= c, "slice_channels: invalid range");
  const std::size_t width = end - begin;
  std::vector<double> out(n * width * hw);
  const auto in = x.data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    std::copy_n(in.begin() + static_cast<long>((ni * c + begin) * hw), width * hw,
                out.begin() + static_cast<long>(ni * width * hw));
  }
  return make_op("slice_channels", {n, width, x.dim(2), x.dim(3)}, std::move(out), {x},
                 [n, c, hw, begin, width](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t ni = 0; ni < n; ++ni) {
                     double* dst = gin[0] + (ni * c + begin) * hw;
                     const double* src = gout.data() + ni * width * hw;
                     for (std::size_t i = 0; i < width * hw; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor mse(const Tensor& x, const Tensor& target, Reduction reduction) {
  require(x.shape() == target.shape(),
          "mse: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(target.shape()));
  const auto a = x.data(), b = target.data();
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(a.size()) : 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return make_op("mse", {1}, {acc * norm}, {x, target},
                 [x, target, norm](std::span<const double> gout, std::span<double* const> gin) {
                   const auto a = x.data(), b = target.data();
                   const double g = gout[0] * 2.0 * norm;
                   for (std::size_t i = 0; i < a.size(); ++i) {
                     const double d = g * (a[i] - b[i]);
                     if (gin[0]) gin[0][i] += d;
                     if (gin[1]) gin[1][i] -= d;
                   }
                 });
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> labels, Reduction reduction) {
  require_nchw(probs, "cross_entropy");
  const std::size_t n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  require(labels.size() == n * hw, "cross_entropy: expected " + std::to_string(n * hw) + " labels, got " +
                                       std::to_string(labels.size()));
  const auto p = probs.data();
  std::vector<std::size_t> index(labels.size());
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t q = 0; q < hw; ++q) {
      const int label = labels[ni * hw + q];
      require(label >= 0 && static_cast<std::size_t>(label) < c,
              "cross_entropy: label " + std::to_string(label) + " out of range [0," + std::to_string(c) + ")");
      index[ni * hw + q] = (ni * c + static_cast<std::size_t>(label)) * hw + q;
    }
  }
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(labels.size()) : 1.0;
  double acc = 0.0;
  for (auto i : index) acc -= std::log(std::max(p[i], kProbFloor));
  trace_mask(index.size(), [&](std::size_t k) { return p[index[k]] < kProbFloor; });
  return make_op("cross_entropy", {1}, {acc * norm}, {probs},
                 [probs, index, norm](std::span<const double> gout, std::span<double* const> gin) {
                   const auto p = probs.data();
                   for (auto i : index) {
                     if (p[i] >= kProbFloor) gin[0][i] -= gout[0] * norm / p[i];
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const std::size_t n = x.numel();
  return make_op("sum", {1}, {acc}, {x}, [n](std::span<const double> gout, std::span<double* const> gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += gout[0];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_op("scale", x.shape(), std::move(out), {x},
                 [factor](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += factor * gout[i];
                 });
}

}  // namespace advperc::ops

namespace advperc::ops {

namespace {
constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::conv2d, "conv2d"},
    {OpKind::relu, "relu"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::upsample2x_nearest, "upsample2x_nearest"},
    {OpKind::channel_softmax, "channel_softmax"},
    {OpKind::add, "add"},
    {OpKind::concat_channels, "concat_channels"},
    {OpKind::slice_channels, "slice_channels"},
    {OpKind::mse, "mse"},
    {OpKind::cross_entropy, "cross_entropy"},
    {OpKind::sum, "sum"},
    {OpKind::scale, "scale"},
};

void require_arity(std::span<const Tensor> inputs, std::size_t lo, std::size_t hi, std::string_view op) {
  if (inputs.size() < lo || inputs.size() > hi) {
    throw TensorError(std::string(op) + ": wrong number of inputs (" + std::to_string(inputs.size()) + ")");
  }
}
}  // namespace

OpKind op_kind_from_string(std::string_view name) {
  for (const auto& [kind, text] : kOpNames) {
    if (text == name) return kind;
  }
  throw TensorError("unknown op kind '" + std::string(name) + "'");
}

std::string_view to_string(OpKind kind) {
  for (const auto& [k, text] : kOpNames) {
    if (k == kind) return text;
  }
  throw TensorError("unknown op kind");
}

Tensor op_forward(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  const auto name = to_string(kind);
  switch (kind) {
    case OpKind::conv2d:
      require_arity(inputs, 2, 3, name);
      return conv2d(inputs[0], inputs[1], inputs.size() == 3 ? inputs[2] : Tensor{}, attrs.stride, attrs.padding);
    case OpKind::relu:
      require_arity(inputs, 1, 1, name);
      return relu(inputs[0]);
    case OpKind::sigmoid:
      require_arity(inputs, 1, 1, name);
      return sigmoid(inputs[0]);
    case OpKind::upsample2x_nearest:
      require_arity(inputs, 1, 1, name);
      return upsample2x_nearest(inputs[0]);
    case OpKind::channel_softmax:
      require_arity(inputs, 1, 1, name);
      return channel_softmax(inputs[0]);
    case OpKind::add:
      require_arity(inputs, 2, 2, name);
      return add(inputs[0], inputs[1]);
    case OpKind::concat_channels:
      return concat_channels(inputs);
    case OpKind::slice_channels:
      require_arity(inputs, 1, 1, name);
      return slice_channels(inputs[0], attrs.begin, attrs.end);
    case OpKind::mse:
      require_arity(inputs, 2, 2, name);
      return mse(inputs[0], inputs[1], attrs.reduction);
    case OpKind::cross_entropy:
      require_arity(inputs, 1, 1, name);
      return cross_entropy(inputs[0], attrs.labels, attrs.reduction);
    case OpKind::sum:
      require_arity(inputs, 1, 1, name);
      return sum(inputs[0]);
    case OpKind::scale:
      require_arity(inputs, 1, 1, name);
      return scale(inputs[0], attrs.factor);
  }
  throw TensorError("unknown op kind");
}

}  // namespace advperc::ops
