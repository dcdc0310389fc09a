#include "advperc/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "advperc/losses.hpp"
#include "advperc/ops.hpp"

namespace advperc {

std::string_view to_string(AttackMode mode) { return mode == AttackMode::whitebox ? "whitebox" : "blackbox"; }
std::string_view to_string(Objective objective) {
  return objective == Objective::untargeted ? "untargeted" : "targeted";
}
std::string_view to_string(Recombination r) { return r == Recombination::softmax ? "softmax" : "nes"; }

AttackMode attack_mode_from_string(std::string_view name) {
  if (name == "whitebox") return AttackMode::whitebox;
  if (name == "blackbox") return AttackMode::blackbox;
  throw std::invalid_argument("unknown attack mode '" + std::string(name) + "' (whitebox|blackbox)");
}

Objective objective_from_string(std::string_view name) {
  if (name == "untargeted") return Objective::untargeted;
  if (name == "targeted") return Objective::targeted;
  throw std::invalid_argument("unknown objective '" + std::string(name) + "' (untargeted|targeted)");
}

Recombination recombination_from_string(std::string_view name) {
  if (name == "softmax") return Recombination::softmax;
  if (name == "nes") return Recombination::nes;
  throw std::invalid_argument("unknown recombination '" + std::string(name) + "' (softmax|nes)");
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("AttackConfig: " + m); };
  if (steps == 0) fail("steps must be positive");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be >= 0");
  if (es.population < 2) fail("population must be >= 2");
  if (!(es.sigma > 0.0) || !std::isfinite(es.sigma)) fail("sigma must be positive");
  if (!std::isfinite(es.mu)) fail("mu must be finite");
  if (!(es.lr > 0.0) || !std::isfinite(es.lr)) fail("lr must be positive");
  if (linf_budget && !(*linf_budget > 0.0)) fail("linf budget must be positive");
  if (!(near_threshold > 0.0 && near_threshold <= 1.0)) fail("near threshold must lie in (0,1]");
  if (!(escape_noise >= 0.0)) fail("escape noise must be >= 0");
}

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> objectness_of(const Tensor& detection) {
  const std::size_t cells = detection.dim(2) * detection.dim(3);
  const auto d = detection.data();
  return {d.begin() + static_cast<long>(det::kObjectness * cells),
          d.begin() + static_cast<long>((det::kObjectness + 1) * cells)};
}

TaskOutputs detached(const TaskOutputs& o) {
  return {o.distance.detach(), o.segmentation.detach(), o.motion.detach(), o.detection.detach()};
}

/// Clamps `next` to [0,1] and to the L-inf ball, then nudges each pixel until
/// clean + (adv - clean) reproduces adv exactly.
Tensor settle(const Tensor& clean, const Tensor& next, const std::optional<double>& budget) {
  const auto c = clean.data(), x = next.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double a = x[i];
    if (budget) a = std::clamp(a, c[i] - *budget, c[i] + *budget);
    a = std::clamp(a, 0.0, 1.0);
    bool exact = false;
    for (int round = 0; round < 4 && !exact; ++round) {
      const double back = c[i] + (a - c[i]);
      exact = back == a;
      a = std::clamp(back, 0.0, 1.0);
    }
    out[i] = exact ? a : c[i];
  }
  return Tensor(clean.shape(), std::move(out));
}

WhiteboxStep whitebox_impl(const Tensor& image, const Features& prev, const Model& frozen, const TargetSpec& reference,
                           const AttackConfig& cfg) {
  Graph graph;
  GraphScope scope(graph);
  const Tensor leaf = image.as_leaf();
  const TaskOutputs outputs = decode(frozen, prev, encode(frozen, leaf));
  const Tensor loss = attack_loss(outputs, reference);
  WhiteboxStep step;
  step.loss = loss.item();
  if (!std::isfinite(step.loss)) throw TensorError("whitebox_step: non-finite attack loss");
  step.outputs = detached(outputs);
  std::vector<double> grad(image.numel(), 0.0);
  if (loss.requires_grad()) {
    graph.backward(loss);
    grad.assign(leaf.grad().begin(), leaf.grad().end());
  }
  step.zero_gradient = std::all_of(grad.begin(), grad.end(), [](double g) { return g == 0.0; });
  const double sign = cfg.objective == Objective::untargeted ? 1.0 : -1.0;
  const auto x = image.data();
  std::vector<double> next(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) next[i] = std::clamp(x[i] + sign * cfg.alpha * grad[i], 0.0, 1.0);
  step.image = Tensor(image.shape(), std::move(next));
  return step;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TargetSpec untargeted_reference(const TaskOutputs& clean, Task task) {
  TargetSpec ref;
  ref.task = task;
  ref.objective = Objective::untargeted;
  switch (task) {
    case Task::distance: ref.distance = to_vector(clean.distance); break;
    case Task::segmentation: ref.labels = argmax_channels(clean.segmentation); break;
    case Task::motion: ref.labels = argmax_channels(clean.motion); break;
    case Task::detection:
      ref.objectness = objectness_of(clean.detection);
      for (auto& o : ref.objectness) o = o >= 0.5 ? 1.0 : 0.0;
      break;
  }
  return ref;
}

TargetSpec make_target(const TaskOutputs& clean, const AttackConfig& cfg, std::mt19937_64& rng) {
  TargetSpec ref;
  ref.task = cfg.task;
  ref.objective = Objective::targeted;
  std::bernoulli_distribution coin(0.5);
  switch (cfg.task) {
    case Task::distance:
      ref.distance = to_vector(clean.distance);
      for (auto& d : ref.distance) {
        if (d < cfg.near_threshold) d = 1.0;
      }
      break;
    case Task::segmentation:
      ref.labels = argmax_channels(clean.segmentation);
      ref.relabelled_class = coin(rng) ? seg::kVehicle : seg::kRoad;
      for (auto& l : ref.labels) {
        if (l == ref.relabelled_class) l = seg::kVoid;
      }
      break;
    case Task::motion:
      ref.labels = argmax_channels(clean.motion);
      for (auto& l : ref.labels) l = motion::kStatic;
      break;
    case Task::detection:
      ref.objectness = objectness_of(clean.detection);
      for (auto& o : ref.objectness) o = coin(rng) ? 1.0 : 0.0;
      break;
  }
  return ref;
}

TargetSpec make_reference(const TaskOutputs& clean, const AttackConfig& cfg, std::mt19937_64& rng) {
  return cfg.objective == Objective::untargeted ? untargeted_reference(clean, cfg.task)
                                                : make_target(clean, cfg, rng);
}

Tensor attack_loss(const TaskOutputs& outputs, const TargetSpec& reference) {
  switch (reference.task) {
    case Task::distance:
      if (reference.distance.size() != outputs.distance.numel()) {
        throw TensorError("attack_loss: distance reference has the wrong size");
      }
      return ops::mse(outputs.distance, Tensor(outputs.distance.shape(), reference.distance), ops::Reduction::sum);
    case Task::segmentation:
      return ops::cross_entropy(outputs.segmentation, reference.labels, ops::Reduction::sum);
    case Task::motion:
      return ops::cross_entropy(outputs.motion, reference.labels, ops::Reduction::sum);
    case Task::detection: {
      const Tensor obj = ops::slice_channels(outputs.detection, det::kObjectness, det::kObjectness + 1);
      return binary_cross_entropy(obj, reference.objectness, ops::Reduction::sum);
    }
  }
  throw TensorError("attack_loss: unknown task");
}

WhiteboxStep whitebox_step(const Tensor& image, const Tensor& frame_prev, const Model& model,
                           const TargetSpec& reference, const AttackConfig& cfg) {
  const Model frozen = model.frozen();
  return whitebox_impl(image, encode(frozen, frame_prev.detach()), frozen, reference, cfg);
}

ModelOracle::ModelOracle(const Model& model, const Tensor& frame_prev)
    : model_(model.frozen()), prev_(encode(model_, frame_prev.detach())) {}

TaskOutputs ModelOracle::query(const Tensor& frame_curr) {
  return detached(decode(model_, prev_, encode(model_, frame_curr.detach())));
}

Tensor es_update(const Tensor& image, const std::function<double(const Tensor&)>& fitness, const EsConfig& es,
                 std::mt19937_64& rng) {
  const std::size_t n = image.numel(), pop = es.population;
  if (pop < 2 || !(es.sigma > 0.0)) throw std::invalid_argument("es_update: invalid population or sigma");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> eps(pop, std::vector<double>(n));
  if (es.antithetic) {
    for (std::size_t k = 0; k + 1 < pop; k += 2) {
      for (std::size_t i = 0; i < n; ++i) {
        const double z = es.sigma * normal(rng);
        eps[k][i] = es.mu + z;
        eps[k + 1][i] = es.mu - z;
      }
    }
    if (pop % 2 == 1) std::fill(eps.back().begin(), eps.back().end(), es.mu);
  } else {
    for (auto& e : eps) {
      for (auto& v : e) v = es.mu + es.sigma * normal(rng);
    }
  }

  const auto x = image.data();
  std::vector<std::vector<double>> candidates(pop, std::vector<double>(n));
  std::vector<double> f(pop);
  for (std::size_t k = 0; k < pop; ++k) {
    for (std::size_t i = 0; i < n; ++i) candidates[k][i] = std::clamp(x[i] + eps[k][i], 0.0, 1.0);
    f[k] = fitness(Tensor(image.shape(), candidates[k]));
    if (!std::isfinite(f[k])) throw TensorError("es_update: non-finite fitness for candidate " + std::to_string(k));
  }
  const double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(pop);
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(pop));

  std::vector<double> out(n, 0.0);
  if (es.recombination == Recombination::softmax) {
    const double temperature = sd + 1e-8;
    const double top = *std::max_element(f.begin(), f.end());
    std::vector<double> w(pop);
    double z = 0.0;
    for (std::size_t k = 0; k < pop; ++k) z += w[k] = std::exp((f[k] - top) / temperature);
    for (std::size_t k = 0; k < pop; ++k) {
      const double wk = w[k] / z;
      for (std::size_t i = 0; i < n; ++i) out[i] += wk * candidates[k][i];
    }
    for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
  } else {
    // search-gradient estimate: sum_k w_k eps_k / (N sigma^2)
    const double gain = sd > 0.0 ? es.lr / (static_cast<double>(pop) * es.sigma * es.sigma * sd) : 0.0;
    for (std::size_t k = 0; k < pop; ++k) {
      const double wk = gain * (f[k] - mean);
      for (std::size_t i = 0; i < n; ++i) out[i] += wk * eps[k][i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] = std::clamp(x[i] + out[i], 0.0, 1.0);
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor es_step(const Tensor& image, ForwardOracle& oracle, const TargetSpec& reference, const AttackConfig& cfg,
               std::mt19937_64& rng) {
  const double sign = cfg.objective == Objective::untargeted ? 1.0 : -1.0;
  return es_update(
      image, [&](const Tensor& candidate) { return sign * attack_loss(oracle.query(candidate), reference).item(); },
      cfg.es, rng);
}

std::mt19937_64 attack_rng(const AttackConfig& cfg, std::uint64_t sample_seed) {
  return std::mt19937_64(mix64(mix64(cfg.seed) ^ sample_seed));
}

AttackResult run_attack(const Sample& sample, const Model& model, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult result;
  result.sample_seed = sample.seed;
  result.config = cfg;
  result.clean = sample.frame_curr.detach();

  auto rng = attack_rng(cfg, sample.seed);
  const Model frozen = model.frozen();
  const Features prev = encode(frozen, sample.frame_prev);
  const TaskOutputs clean = decode(frozen, prev, encode(frozen, result.clean));
  result.reference = make_reference(clean, cfg, rng);
  ModelOracle oracle(frozen, sample.frame_prev);
  std::uniform_real_distribution<double> escape(-cfg.escape_noise, cfg.escape_noise);

  Tensor x = result.clean;
  for (std::size_t t = 0;; ++t) {
    try {
      TaskOutputs outputs;
      double loss = 0.0;
      Tensor next;
      const bool last = t == cfg.steps;
      if (cfg.mode == AttackMode::whitebox && !last) {
        WhiteboxStep step = whitebox_impl(x, prev, frozen, result.reference, cfg);
        outputs = std::move(step.outputs);
        loss = step.loss;
        next = step.image;
        if (step.zero_gradient && cfg.objective == Objective::untargeted && cfg.alpha > 0.0 &&
            cfg.escape_noise > 0.0) {
          std::vector<double> v(x.data().begin(), x.data().end());
          for (auto& p : v) p += escape(rng);
          next = Tensor(x.shape(), std::move(v));
        }
      } else {
        outputs = oracle.query(x);
        loss = attack_loss(outputs, result.reference).item();
        if (!last) next = es_step(x, oracle, result.reference, cfg, rng);
      }
      if (!std::isfinite(loss)) throw TensorError("non-finite attack loss");
      result.curve.push_back({evaluate(outputs, clean, sample), loss, l2_distance(x, result.clean)});
      if (last) break;
      x = settle(result.clean, next, cfg.linf_budget);
    } catch (const std::exception& e) {
      throw TensorError("run_attack: sample " + std::to_string(sample.seed) + ", step " + std::to_string(t) + ": " +
                        e.what());
    }
  }
  result.adversarial = x;
  std::vector<double> p(x.numel());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = x.data()[i] - result.clean.data()[i];
  result.perturbation = Tensor(x.shape(), std::move(p));
  return result;
}

Tensor render_perturbation(const AttackResult& result, double gain) {
  std::vector<double> v(result.perturbation.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(0.5 + gain * result.perturbation.data()[i], 0.0, 1.0);
  return Tensor(result.perturbation.shape(), std::move(v));
}

namespace {

constexpr char kImageMagic[8] = {'A', 'P', 'I', 'M', 'A', 'G', 'E', '1'};

void check_image(const Tensor& image, std::string_view op) {
  if (!image.defined() || image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw std::invalid_argument(std::string(op) + ": expected a [1,3,H,W] image");
  }
}

}  // namespace

void write_image(const Tensor& image, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(kImageMagic, sizeof kImageMagic);
  const std::uint32_t rank = static_cast<std::uint32_t>(image.rank());
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (auto d : image.shape()) {
    const std::uint64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  out.write(reinterpret_cast<const char*>(image.data().data()),
            static_cast<std::streamsize>(image.numel() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

Tensor read_image(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kImageMagic, sizeof magic) != 0) {
    throw std::runtime_error(file.string() + ": not an image container");
  }
  std::uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!in || rank == 0 || rank > 8) throw std::runtime_error(file.string() + ": bad rank");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    d = static_cast<std::size_t>(v);
  }
  std::vector<double> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw std::runtime_error(file.string() + ": truncated image");
  return Tensor(shape, std::move(data));
}

void write_ppm(const Tensor& image, const std::filesystem::path& file) {
  check_image(image, "write_ppm");
  const std::size_t h = image.dim(2), w = image.dim(3), hw = h * w;
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  const auto d = image.data();
  for (std::size_t q = 0; q < hw; ++q) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.put(static_cast<char>(std::lround(std::clamp(d[c * hw + q], 0.0, 1.0) * 255.0)));
    }
  }
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

Tensor read_ppm(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw std::runtime_error(file.string() + ": not a binary 8-bit PPM");
  }
  in.get();
  const std::size_t hw = h * w;
  std::vector<double> data(3 * hw);
  for (std::size_t q = 0; q < hw; ++q) {
    for (std::size_t c = 0; c < 3; ++c) {
      const int byte = in.get();
      if (byte == EOF) throw std::runtime_error(file.string() + ": truncated PPM");
      data[c * hw + q] = static_cast<double>(byte) / 255.0;
    }
  }
  return Tensor({1, 3, h, w}, std::move(data));
}

}  // namespace advperc
