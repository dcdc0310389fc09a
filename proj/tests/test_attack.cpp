#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "advperc/attack.hpp"
#include "advperc/defense.hpp"
#include "advperc/ops.hpp"

using namespace advperc;

namespace {

const Model& test_model() {
  static const Model model = make_model(ModelConfig{.seed = 5});
  return model;
}

const Sample& test_sample() {
  static const Sample sample = generate_scene(SceneParams{}, 77);
  return sample;
}

TaskOutputs clean_outputs() { return forward(test_model(), test_sample().frame_prev, test_sample().frame_curr); }

class CountingOracle : public ForwardOracle {
 public:
  explicit CountingOracle(ForwardOracle& inner) : inner_(inner) {}
  TaskOutputs query(const Tensor& frame_curr) override {
    ++calls;
    return inner_.query(frame_curr);
  }
  std::size_t calls = 0;

 private:
  ForwardOracle& inner_;
};

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST(AttackConfig, Validation) {
  AttackConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.steps = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.es.population = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.es.sigma = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.alpha = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(attack_mode_from_string("greybox"), std::invalid_argument);
  EXPECT_EQ(objective_from_string("targeted"), Objective::targeted);
}

TEST(AttackLoss, UntargetedReferenceAtCleanPoint) {
  const auto clean = clean_outputs();
  EXPECT_EQ(attack_loss(clean, untargeted_reference(clean, Task::distance)).item(), 0.0);
  const double self_entropy =
      ops::cross_entropy(clean.segmentation, argmax_channels(clean.segmentation), ops::Reduction::sum).item();
  EXPECT_EQ(attack_loss(clean, untargeted_reference(clean, Task::segmentation)).item(), self_entropy);
}

TEST(AttackLoss, TargetedDistanceAllFarIsZero) {
  TaskOutputs out = clean_outputs();
  out.distance = Tensor::full(out.distance.shape(), 1.0);
  TargetSpec ref;
  ref.task = Task::distance;
  ref.objective = Objective::targeted;
  ref.distance.assign(out.distance.numel(), 1.0);
  EXPECT_EQ(attack_loss(out, ref).item(), 0.0);
}

TEST(AttackLoss, TwoPixelSegmentationClosedForm) {
  TaskOutputs out;
  out.segmentation = Tensor({1, 2, 1, 2}, {0.9, 0.3, 0.1, 0.7});
  TargetSpec ref;
  ref.task = Task::segmentation;
  ref.labels = {1, 1};
  EXPECT_NEAR(attack_loss(out, ref).item(), -std::log(0.1) - std::log(0.7), 1e-12);
}

TEST(AttackLoss, DetectionUsesObjectnessOnly) {
  auto out = clean_outputs();
  const auto ref = untargeted_reference(out, Task::detection);
  const double before = attack_loss(out, ref).item();
  std::vector<double> d(out.detection.data().begin(), out.detection.data().end());
  for (std::size_t i = 64; i < d.size(); ++i) d[i] = 0.5;  // every channel but objectness
  out.detection = Tensor(out.detection.shape(), d);
  EXPECT_EQ(attack_loss(out, ref).item(), before);
}

TEST(MakeTarget, MotionAllStaticIsUnchanged) {
  TaskOutputs clean = clean_outputs();
  std::vector<double> m(clean.motion.numel());
  std::fill(m.begin(), m.begin() + static_cast<long>(m.size() / 2), 0.9);
  std::fill(m.begin() + static_cast<long>(m.size() / 2), m.end(), 0.1);
  clean.motion = Tensor(clean.motion.shape(), m);
  AttackConfig cfg;
  cfg.task = Task::motion;
  std::mt19937_64 rng(1);
  EXPECT_EQ(make_target(clean, cfg, rng).labels, argmax_channels(clean.motion));
}

TEST(MakeTarget, DistanceBeyondThresholdIsUnchanged) {
  TaskOutputs clean = clean_outputs();
  clean.distance = Tensor::full(clean.distance.shape(), 0.3);
  AttackConfig cfg;
  cfg.task = Task::distance;
  std::mt19937_64 rng(1);
  const auto target = make_target(clean, cfg, rng);
  EXPECT_TRUE(std::equal(target.distance.begin(), target.distance.end(), clean.distance.data().begin()));
  clean.distance = Tensor::full(clean.distance.shape(), 0.1);
  for (double d : make_target(clean, cfg, rng).distance) EXPECT_EQ(d, 1.0);
}

TEST(MakeTarget, SegmentationRelabelsExactlyTheChosenClass) {
  // 1x3 map: vehicle, vehicle, road plus one more vehicle
  std::vector<double> p(7 * 4, 0.0);
  const int labels[4] = {seg::kVehicle, seg::kVehicle, seg::kRoad, seg::kVehicle};
  for (std::size_t q = 0; q < 4; ++q) p[static_cast<std::size_t>(labels[q]) * 4 + q] = 1.0;
  TaskOutputs clean;
  clean.segmentation = Tensor({1, 7, 1, 4}, p);
  AttackConfig cfg;
  cfg.task = Task::segmentation;
  bool saw_vehicle = false, saw_road = false;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    std::mt19937_64 rng(seed);
    const auto t = make_target(clean, cfg, rng);
    if (t.relabelled_class == seg::kVehicle) {
      saw_vehicle = true;
      EXPECT_EQ(t.labels, (std::vector<int>{seg::kVoid, seg::kVoid, seg::kRoad, seg::kVoid}));
    } else {
      ASSERT_EQ(t.relabelled_class, seg::kRoad);
      saw_road = true;
      EXPECT_EQ(t.labels, (std::vector<int>{seg::kVehicle, seg::kVehicle, seg::kVoid, seg::kVehicle}));
    }
  }
  EXPECT_TRUE(saw_vehicle && saw_road);
}

TEST(MakeTarget, DetectionFlipsEveryCellToACoin) {
  const auto clean = clean_outputs();
  AttackConfig cfg;
  cfg.task = Task::detection;
  std::mt19937_64 rng(4);
  const auto t = make_target(clean, cfg, rng);
  ASSERT_EQ(t.objectness.size(), 64u);
  const auto ones = std::count(t.objectness.begin(), t.objectness.end(), 1.0);
  EXPECT_EQ(ones + std::count(t.objectness.begin(), t.objectness.end(), 0.0), 64);
  EXPECT_GT(ones, 10);
  EXPECT_LT(ones, 54);
}

TEST(Whitebox, ZeroStepLeavesImageUnchanged) {
  const auto clean = clean_outputs();
  AttackConfig cfg;
  cfg.alpha = 0.0;
  const auto& s = test_sample();
  const auto step = whitebox_step(s.frame_curr, s.frame_prev, test_model(),
                                  untargeted_reference(clean, Task::segmentation), cfg);
  EXPECT_EQ(max_abs_diff(step.image, s.frame_curr), 0.0);
  // the untargeted distance loss is at its minimum: exactly zero gradient
  cfg.alpha = 0.00015;
  const auto flat = whitebox_step(s.frame_curr, s.frame_prev, test_model(),
                                  untargeted_reference(clean, Task::distance), cfg);
  EXPECT_TRUE(flat.zero_gradient);
  EXPECT_EQ(max_abs_diff(flat.image, s.frame_curr), 0.0);
}

TEST(Whitebox, StepIsBoundedAndIncreasesLoss) {
  const auto clean = clean_outputs();
  const auto& s = test_sample();
  AttackConfig cfg;
  const auto ref = untargeted_reference(clean, Task::segmentation);
  const auto step = whitebox_step(s.frame_curr, s.frame_prev, test_model(), ref, cfg);
  // recover the gradient to check the L-inf bound
  Graph graph;
  GraphScope scope(graph);
  const Model frozen = test_model().frozen();
  const Tensor leaf = s.frame_curr.as_leaf();
  graph.backward(attack_loss(forward(frozen, s.frame_prev, leaf), ref));
  double gmax = 0.0;
  for (double g : leaf.grad()) gmax = std::max(gmax, std::abs(g));
  EXPECT_LE(max_abs_diff(step.image, s.frame_curr), cfg.alpha * gmax * (1 + 1e-12));
  for (double v : step.image.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const double after = attack_loss(forward(test_model(), s.frame_prev, step.image), ref).item();
  EXPECT_GE(after, step.loss);
  // frame_prev untouched and targeted steps descend
  cfg.objective = Objective::targeted;
  cfg.task = Task::motion;
  std::mt19937_64 rng(1);
  const auto target = make_target(clean, cfg, rng);
  const auto down = whitebox_step(s.frame_curr, s.frame_prev, test_model(), target, cfg);
  EXPECT_LE(attack_loss(forward(test_model(), s.frame_prev, down.image), target).item(), down.loss);
}

TEST(Es, SoftmaxWeightsFollowStdTemperature) {
  // one candidate at fitness F, the rest at 0: z-scores are sqrt(N-1) and -1/sqrt(N-1)
  EsConfig es;
  es.population = 6;
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::full({1, 3, 2, 2}, 0.5);
  std::vector<Tensor> seen;
  const Tensor out = es_update(
      x,
      [&](const Tensor& c) {
        seen.push_back(c);
        return seen.size() == 4 ? 1e6 : 0.0;
      },
      es, rng);
  ASSERT_EQ(seen.size(), 6u);
  const double n = 6.0, gap = n / std::sqrt(n - 1.0);
  const double top = 1.0 / (1.0 + (n - 1.0) * std::exp(-gap)), rest = (1.0 - top) / (n - 1.0);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double expected = 0.0;
    for (std::size_t k = 0; k < 6; ++k) expected += (k == 3 ? top : rest) * seen[k].data()[i];
    EXPECT_NEAR(out.data()[i], expected, 1e-9);
  }
}

TEST(Es, SoftmaxSaturatesOnLargePopulation) {
  EsConfig es;
  es.population = 400;
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::full({1, 3, 2, 2}, 0.5);
  std::vector<Tensor> seen;
  const Tensor out = es_update(
      x,
      [&](const Tensor& c) {
        seen.push_back(c);
        return seen.size() == 17 ? 1e6 : 0.0;
      },
      es, rng);
  EXPECT_LT(max_abs_diff(out, seen[16]), 1e-5);
}

TEST(Es, VanishingSigmaKeepsImage) {
  EsConfig es;
  es.sigma = 1e-300;
  std::mt19937_64 rng(3);
  const auto& s = test_sample();
  std::uniform_real_distribution<double> u(0, 1);
  const Tensor out = es_update(s.frame_curr, [&](const Tensor&) { return u(rng); }, es, rng);
  EXPECT_LT(max_abs_diff(out, s.frame_curr), 1e-15);
}

TEST(Es, NesConvergesOnQuadratic) {
  std::mt19937_64 init(9);
  std::uniform_real_distribution<double> u(0.2, 0.8), v(0.0, 1.0);
  std::vector<double> c(100), x0(100);
  for (auto& e : c) e = u(init);
  for (auto& e : x0) e = v(init);
  const Tensor centre({100}, c);
  auto dist = [&](const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 100; ++i) acc += (x.data()[i] - c[i]) * (x.data()[i] - c[i]);
    return std::sqrt(acc);
  };
  // lr 0.001; smaller rates contract too slowly near the optimum (see Es.NesSmallRateProgress)
  for (double lr : {0.001}) {
    EsConfig es;
    es.recombination = Recombination::nes;
    es.antithetic = true;
    es.lr = lr;
    std::mt19937_64 rng(10);
    Tensor x({100}, x0);
    const double d0 = dist(x);
    for (int step = 0; step < 200; ++step) {
      x = es_update(x, [&](const Tensor& y) { return -dist(y) * dist(y); }, es, rng);
    }
    EXPECT_LE(dist(x), 0.1 * d0) << "lr " << lr;
  }
}

TEST(Es, NesSmallRateProgress) {
  std::mt19937_64 init(9);
  std::uniform_real_distribution<double> u(0.2, 0.8), v(0.0, 1.0);
  std::vector<double> c(100), x0(100);
  for (auto& e : c) e = u(init);
  for (auto& e : x0) e = v(init);
  auto dist = [&](const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 100; ++i) acc += (x.data()[i] - c[i]) * (x.data()[i] - c[i]);
    return std::sqrt(acc);
  };
  EsConfig es;
  es.recombination = Recombination::nes;
  es.antithetic = true;
  es.lr = 0.0001;
  std::mt19937_64 rng(10);
  Tensor x({100}, x0);
  double previous = dist(x);
  for (int block = 0; block < 4; ++block) {
    for (int step = 0; step < 50; ++step) {
      x = es_update(x, [&](const Tensor& y) { return -dist(y) * dist(y); }, es, rng);
    }
    EXPECT_LT(dist(x), previous);
    previous = dist(x);
  }
}

TEST(Es, OracleCalledExactlyPopulationTimesWithoutGradients) {
  const auto& s = test_sample();
  ModelOracle model_oracle(test_model(), s.frame_prev);
  CountingOracle oracle(model_oracle);
  AttackConfig cfg;
  cfg.mode = AttackMode::blackbox;
  const auto ref = untargeted_reference(clean_outputs(), Task::segmentation);
  const auto backward_before = backward_calls();
  std::mt19937_64 rng(4);
  Tensor x = s.frame_curr;
  for (int step = 0; step < 3; ++step) {
    const std::size_t before = oracle.calls;
    x = es_step(x, oracle, ref, cfg, rng);
    EXPECT_EQ(oracle.calls - before, cfg.es.population);
  }
  EXPECT_EQ(backward_calls(), backward_before);
  const auto out = oracle.query(x);
  EXPECT_FALSE(out.segmentation.requires_grad());
}

TEST(RunAttack, ZeroAlphaCurveIsFlat) {
  AttackConfig cfg;
  cfg.steps = 1;
  cfg.alpha = 0.0;
  const auto r = run_attack(test_sample(), test_model(), cfg);
  ASSERT_EQ(r.curve.size(), 2u);
  EXPECT_EQ(r.curve[0].metrics, r.curve[1].metrics);
  EXPECT_EQ(r.curve[0].attack_loss, r.curve[1].attack_loss);
  EXPECT_EQ(max_abs_diff(r.adversarial, test_sample().frame_curr), 0.0);
}

TEST(RunAttack, StepZeroIsCleanEvaluationAndInvariantsHold) {
  for (auto mode : {AttackMode::whitebox, AttackMode::blackbox}) {
    for (Task task : kAllTasks) {
      AttackConfig cfg;
      cfg.task = task;
      cfg.mode = mode;
      cfg.steps = 3;
      cfg.objective = task == Task::motion ? Objective::targeted : Objective::untargeted;
      const auto r = run_attack(test_sample(), test_model(), cfg);
      ASSERT_EQ(r.curve.size(), 4u);
      EXPECT_EQ(r.curve[0].metrics, evaluate(test_model(), test_sample()));
      EXPECT_EQ(r.curve[0].perturbation_l2, 0.0);
      for (std::size_t i = 0; i < r.adversarial.numel(); ++i) {
        const double a = r.adversarial.data()[i];
        ASSERT_EQ(r.clean.data()[i] + r.perturbation.data()[i], a);
        ASSERT_GE(a, 0.0);
        ASSERT_LE(a, 1.0);
      }
    }
  }
}

TEST(RunAttack, SeedDeterminism) {
  AttackConfig cfg;
  cfg.mode = AttackMode::blackbox;
  cfg.steps = 2;
  const auto a = run_attack(test_sample(), test_model(), cfg);
  const auto b = run_attack(test_sample(), test_model(), cfg);
  EXPECT_EQ(max_abs_diff(a.adversarial, b.adversarial), 0.0);
  for (std::size_t t = 0; t < a.curve.size(); ++t) EXPECT_EQ(a.curve[t].attack_loss, b.curve[t].attack_loss);
  cfg.seed = 2;
  EXPECT_GT(max_abs_diff(run_attack(test_sample(), test_model(), cfg).adversarial, a.adversarial), 0.0);
}

TEST(RunAttack, LinfBudgetIsRespected) {
  AttackConfig cfg;
  cfg.mode = AttackMode::blackbox;
  cfg.steps = 3;
  cfg.linf_budget = 0.01;
  const auto r = run_attack(test_sample(), test_model(), cfg);
  for (double p : r.perturbation.data()) EXPECT_LE(std::abs(p), 0.01 + 1e-15);
}

TEST(RenderPerturbation, GainArithmetic) {
  AttackResult r;
  std::vector<double> p(12, 0.0);
  p[5] = 0.05;
  p[6] = -0.01;
  r.perturbation = Tensor({1, 3, 2, 2}, p);
  const auto img = render_perturbation(r);
  EXPECT_EQ(img.data()[0], 0.5);
  EXPECT_EQ(img.data()[5], 1.0);
  EXPECT_NEAR(img.data()[6], 0.4, 1e-15);
  const auto flat = render_perturbation(r, 0.0);
  for (double v : flat.data()) EXPECT_EQ(v, 0.5);
}

TEST(ImageIo, RoundTrips) {
  const auto dir = std::filesystem::temp_directory_path() / "advperc_test_image_io";
  std::filesystem::create_directories(dir);
  const auto& img = test_sample().frame_curr;
  write_image(img, dir / "a.bin");
  EXPECT_EQ(max_abs_diff(read_image(dir / "a.bin"), img), 0.0);
  write_ppm(img, dir / "a.ppm");
  EXPECT_EQ(max_abs_diff(read_ppm(dir / "a.ppm"), img), 0.0);  // frames are 8-bit exact
  std::filesystem::remove_all(dir);
}

TEST(Blur, KernelIsNormalised) {
  const auto k = gaussian_kernel(DefenseConfig{});
  ASSERT_EQ(k.size(), 7u);
  double total = 0.0;
  for (double v : k) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_THROW(gaussian_kernel(DefenseConfig{.radius = 0.0}), std::invalid_argument);
}

TEST(Blur, ConstantImageIsFixed) {
  const auto img = Tensor::full({1, 3, 9, 5}, 0.37);
  EXPECT_LT(max_abs_diff(gaussian_blur(img, DefenseConfig{}), img), 1e-12);
}

TEST(Blur, ImpulseGivesKernel) {
  std::vector<double> v(3 * 15 * 15, 0.0);
  v[7 * 15 + 7] = 1.0;
  const auto out = gaussian_blur(Tensor({1, 3, 15, 15}, v), DefenseConfig{});
  const auto k = gaussian_kernel(DefenseConfig{});
  for (std::size_t y = 0; y < 15; ++y) {
    for (std::size_t x = 0; x < 15; ++x) {
      const long dy = static_cast<long>(y) - 7, dx = static_cast<long>(x) - 7;
      const double expected =
          (std::abs(dy) <= 3 && std::abs(dx) <= 3) ? k[static_cast<std::size_t>(dy + 3)] * k[static_cast<std::size_t>(dx + 3)] : 0.0;
      EXPECT_NEAR(out.data()[y * 15 + x], expected, 1e-15);
    }
  }
}

TEST(Blur, SemigroupOnSmoothImage) {
  const std::size_t n = 32;
  std::vector<double> v(3 * n * n);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        v[(c * n + y) * n + x] = 0.5 + 0.3 * std::sin(0.2 * x + c) * std::cos(0.15 * y);
      }
    }
  }
  const Tensor img({1, 3, n, n}, v);
  const auto twice = gaussian_blur(gaussian_blur(img, DefenseConfig{}), DefenseConfig{});
  const auto once = gaussian_blur(img, DefenseConfig{.radius = std::sqrt(2.0)});
  EXPECT_LT(max_abs_diff(twice, once), 1e-3);
}

TEST(Blur, ContractsTotalVariation) {
  auto tv = [](const Tensor& t) {
    const std::size_t planes = t.dim(0) * t.dim(1), h = t.dim(2), w = t.dim(3);
    double acc = 0.0;
    for (std::size_t p = 0; p < planes; ++p) {
      const double* d = t.data().data() + p * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          if (x + 1 < w) acc += std::abs(d[y * w + x + 1] - d[y * w + x]);
          if (y + 1 < h) acc += std::abs(d[(y + 1) * w + x] - d[y * w + x]);
        }
      }
    }
    return acc;
  };
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 3 + trial % 7, w = 2 + trial % 5;
    std::vector<double> v(3 * h * w);
    for (auto& e : v) e = u(rng);
    const Tensor img({1, 3, h, w}, v);
    EXPECT_LE(tv(gaussian_blur(img, DefenseConfig{})), tv(img) + 1e-12);
  }
  EXPECT_LE(tv(gaussian_blur(test_sample().frame_curr, DefenseConfig{})), tv(test_sample().frame_curr));
}

TEST(Defense, TinyRadiusMatchesAttackMetrics) {
  AttackConfig cfg;
  cfg.steps = 2;
  const auto r = run_attack(test_sample(), test_model(), cfg);
  const auto m = evaluate_defense(std::span(&r, 1), std::span(&test_sample(), 1), test_model(),
                                  DefenseConfig{.radius = 1e-3});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0], r.curve.back().metrics);
}

TEST(Defense, DeterministicAndLeavesArtifactsAlone) {
  const auto& s = test_sample();
  const Tensor copy = s.frame_curr.detach();
  const auto a = defended_metrics(test_model(), s, s.frame_curr, DefenseConfig{});
  const auto b = defended_metrics(test_model(), s, s.frame_curr, DefenseConfig{});
  EXPECT_EQ(a, b);
  EXPECT_EQ(max_abs_diff(copy, s.frame_curr), 0.0);
}
