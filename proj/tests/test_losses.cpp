#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "advperc/losses.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"
#include "advperc/train.hpp"
#include "oracles.hpp"

using namespace advperc;

namespace {

using oracle::random_probs;

Tensor one_hot(const std::vector<int>& labels, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(c * h * w, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) v[static_cast<std::size_t>(labels[i]) * h * w + i] = 1.0;
  return Tensor({1, c, h, w}, v);
}

TaskOutputs ground_truth_outputs(const Sample& s) {
  const std::size_t h = s.height(), w = s.width(), g = 8;
  TaskOutputs out;
  out.distance = Tensor({1, 1, h, w}, s.gt_distance);
  out.segmentation = one_hot(s.gt_seg, seg::kNumClasses, h, w);
  out.motion = one_hot(s.gt_motion, motion::kNumClasses, h, w);
  std::vector<double> det(det::kChannels * g * g, 0.0);
  for (std::size_t c = det::kClassBegin; c < det::kChannels; ++c) {
    for (std::size_t q = 0; q < g * g; ++q) det[c * g * g + q] = 0.2;
  }
  for (const auto& t : assign_cells(s.gt_boxes, g)) {
    const std::size_t q = t.row * g + t.col;
    det[q] = 1.0;
    const double box[4] = {t.tx, t.ty, t.w, t.h};
    for (std::size_t k = 0; k < 4; ++k) det[(det::kBoxBegin + k) * g * g + q] = box[k];
    for (std::size_t c = 0; c < det::kNumClasses; ++c) {
      det[(det::kClassBegin + c) * g * g + q] = static_cast<int>(c) == t.cls ? 1.0 : 0.0;
    }
  }
  out.detection = Tensor({1, det::kChannels, g, g}, det);
  return out;
}

}  // namespace

TEST(Lovasz, PerfectPredictionIsZero) {
  const std::vector<int> labels{0, 2, 1, 1, 0, 2};
  EXPECT_EQ(lovasz_softmax(one_hot(labels, 3, 2, 3), labels).item(), 0.0);
}

TEST(Lovasz, UniformProbsSingleClassMatchesOracle) {
  const std::vector<int> labels(4, 1);
  const auto probs = Tensor::full({1, 3, 2, 2}, 1.0 / 3.0);
  // every error is 2/3 and all pixels are foreground: Delta = 1 at the single level
  EXPECT_NEAR(lovasz_softmax(probs, labels).item(), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(lovasz_softmax(probs, labels).item(), oracle::lovasz(probs, labels), 1e-12);
}

TEST(Lovasz, ThreePixelHandSortedCase) {
  // class 0 present at pixels 0 and 2; errors (0.2, 0.7, 0.5) sorted -> 0.7 (bg), 0.5 (fg), 0.2 (fg)
  const std::vector<int> labels{0, 1, 0};
  const Tensor probs({1, 2, 1, 3}, {0.8, 0.7, 0.5, 0.2, 0.3, 0.5});
  // class 0: Jaccard losses along the order: 1/3, 2/3, 1 -> 0.7/3 + 0.5/3 + 0.2/3
  // class 1 (pixel 1 fg): errors (0.2, 0.7, 0.5) on fg = {1}: sorted 0.7 (fg), 0.5, 0.2 -> 0.7*1 + 0 + 0
  const double expected = ((0.7 + 0.5 + 0.2) / 3.0 + 0.7) / 2.0;
  EXPECT_NEAR(lovasz_softmax(probs, labels).item(), expected, 1e-12);
  EXPECT_NEAR(oracle::lovasz(probs, labels), expected, 1e-12);
}

TEST(Lovasz, MatchesLevelSetOracleOnAllSmallLabelMaps) {
  std::size_t cases = 0;
  EXPECT_LT(oracle::lovasz_enumeration_error(11, &cases), 1e-6);
  EXPECT_EQ(cases, 3u + 9 + 27 + 9 + 81 + 729);
}

TEST(Lovasz, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const std::vector<int> labels{0, 2, 2, 1, 0, 2, 1, 1};
  const auto probs = random_probs(3, 2, 4, rng);
  const auto report = ops::finite_diff_check([&](const Tensor& p) { return lovasz_softmax(p, labels); }, probs, 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_GT(report.checked, 20u);
}

TEST(Lovasz, RejectsOutOfRangeLabel) {
  EXPECT_THROW(lovasz_softmax(Tensor::full({1, 2, 1, 2}, 0.5), std::vector<int>{0, 2}), TensorError);
}

TEST(Focal, GammaZeroIsCrossEntropy) {
  std::mt19937_64 rng(13);
  const auto probs = random_probs(5, 4, 4, rng);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5);
  EXPECT_NEAR(focal_loss(probs, labels, 0.0).item(), ops::cross_entropy(probs, labels).item(), 1e-9);
}

TEST(Focal, CertainPredictionIsZero) {
  const std::vector<int> labels{1, 0};
  EXPECT_EQ(focal_loss(one_hot(labels, 2, 1, 2), labels, 2.0).item(), 0.0);
}

TEST(Focal, HalfProbabilityClosedForm) {
  const Tensor probs({1, 2, 1, 1}, {0.5, 0.5});
  EXPECT_NEAR(focal_loss(probs, std::vector<int>{0}, 2.0).item(), 0.25 * std::log(2.0), 1e-15);
}

TEST(Focal, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const auto probs = random_probs(2, 2, 3, rng);
  for (double gamma : {0.0, 0.5, 2.0}) {
    const auto report =
        ops::finite_diff_check([&](const Tensor& p) { return focal_loss(p, labels, gamma); }, probs, 1e-6);
    EXPECT_LT(report.max_rel_error, 1e-6) << "gamma " << gamma;
  }
}

TEST(Focal, RejectsNegativeGamma) {
  EXPECT_THROW(focal_loss(Tensor::full({1, 2, 1, 1}, 0.5), std::vector<int>{0}, -1.0), TensorError);
}

TEST(BinaryCrossEntropy, ClosedForm) {
  const Tensor p({2}, {0.25, 0.9});
  const std::vector<double> t{1.0, 0.0};
  EXPECT_NEAR(binary_cross_entropy(p, t, ops::Reduction::sum).item(), -std::log(0.25) - std::log(0.1), 1e-12);
  const auto report = ops::finite_diff_check(
      [&](const Tensor& x) { return binary_cross_entropy(x, std::vector<double>{0.3, 1.0}); }, p, 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-7);
}

TEST(Detection, EmptySceneWithZeroObjectnessIsZero) {
  std::vector<double> v(det::kChannels * 4, 0.3);
  for (std::size_t q = 0; q < 4; ++q) v[q] = 0.0;
  EXPECT_EQ(detection_loss(Tensor({1, det::kChannels, 2, 2}, v), {}).item(), 0.0);
}

TEST(Detection, ExactPredictionIsNearZero) {
  const std::size_t g = 4;
  const Box box{det::kVehicle, 0.3, 0.6, 0.2, 0.1};
  std::vector<double> v(det::kChannels * g * g, 0.0);
  const std::size_t q = 2 * g + 1;  // row floor(0.6*4)=2, col floor(0.3*4)=1
  v[q] = 1.0;
  const double box_t[4] = {0.3 * 4 - 1, 0.6 * 4 - 2, 0.2, 0.1};
  for (std::size_t k = 0; k < 4; ++k) v[(det::kBoxBegin + k) * g * g + q] = box_t[k];
  v[(det::kClassBegin + det::kVehicle) * g * g + q] = 1.0;
  EXPECT_LT(detection_loss(Tensor({1, det::kChannels, g, g}, v), std::vector<Box>{box}).item(), 1e-6);
}

TEST(Detection, MatchesDirectSummationOnTwoByTwoGrid) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> v(det::kChannels * 4);
  for (auto& x : v) x = u(rng);
  const Tensor pred({1, det::kChannels, 2, 2}, v);
  // box A in cell (row 0, col 1), box B in cell (row 1, col 0)
  const std::vector<Box> boxes{{det::kPedestrian, 0.7, 0.2, 0.3, 0.2}, {det::kTrafficSign, 0.1, 0.9, 0.1, 0.15}};
  auto p = [&](std::size_t ch, std::size_t cell) { return v[ch * 4 + cell]; };
  double obj = 0.0;
  obj -= std::log(1.0 - p(0, 0));  // cell 0 empty
  obj -= std::log(p(0, 1));        // cell 1 positive (A)
  obj -= std::log(p(0, 2));        // cell 2 positive (B)
  obj -= std::log(1.0 - p(0, 3));  // cell 3 empty
  auto sq = [](double a) { return a * a; };
  const double a_terms = sq(p(1, 1) - 0.4) + sq(p(2, 1) - 0.4) + sq(p(3, 1) - 0.3) + sq(p(4, 1) - 0.2) -
                         std::log(p(5 + det::kPedestrian, 1));
  const double b_terms = sq(p(1, 2) - 0.2) + sq(p(2, 2) - 0.8) + sq(p(3, 2) - 0.1) + sq(p(4, 2) - 0.15) -
                         std::log(p(5 + det::kTrafficSign, 2));
  const double expected = obj / 4.0 + (a_terms + b_terms) / 2.0;
  EXPECT_NEAR(detection_loss(pred, boxes).item(), expected, 1e-6);
  const auto report = ops::finite_diff_check([&](const Tensor& x) { return detection_loss(x, boxes); }, pred, 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Detection, LaterBoxWinsSharedCell) {
  const std::vector<Box> boxes{{0, 0.1, 0.1, 0.1, 0.1}, {2, 0.2, 0.2, 0.1, 0.1}};
  const auto cells = assign_cells(boxes, 2);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].cls, 2);
}

TEST(Detection, RejectsMalformedBox) {
  const std::vector<Box> bad{{0, 0.5, 0.5, 0.0, 0.1}};
  EXPECT_THROW(detection_loss(Tensor::full({1, det::kChannels, 2, 2}, 0.5), bad), TensorError);
}

TEST(TotalLoss, GroundTruthEncodingIsNearZero) {
  const auto sample = generate_scene(SceneParams{}, 21);
  const auto terms = total_train_loss(ground_truth_outputs(sample), sample, TrainConfig{});
  EXPECT_LT(terms.total.item(), 1e-5);
}

TEST(TotalLoss, EqualsWeightedSumOfComponents) {
  const auto sample = generate_scene(SceneParams{}, 22);
  const auto model = make_model(ModelConfig{});
  const auto out = forward(model, sample.frame_prev, sample.frame_curr);
  TrainConfig cfg;
  cfg.loss_weights = {1, 2, 3, 4};
  const double d = ops::mse(out.distance, Tensor(out.distance.shape(), sample.gt_distance)).item();
  const double s = lovasz_softmax(out.segmentation, sample.gt_seg).item();
  const double m = lovasz_softmax(out.motion, sample.gt_motion).item() +
                   focal_loss(out.motion, sample.gt_motion, cfg.focal_gamma).item();
  const double k = detection_loss(out.detection, sample.gt_boxes).item();
  const auto terms = total_train_loss(out, sample, cfg);
  EXPECT_NEAR(terms.total.item(), (1 * d + 2 * s + 3 * m + 4 * k) / 10.0, 1e-12);
  EXPECT_NEAR(terms.task[0], d, 1e-15);
  EXPECT_NEAR(terms.task[3], k, 1e-15);
}

TEST(TotalLoss, ZeroWeightIgnoresTask) {
  const auto sample = generate_scene(SceneParams{}, 23);
  const auto model = make_model(ModelConfig{});
  auto out = forward(model, sample.frame_prev, sample.frame_curr);
  TrainConfig cfg;
  cfg.loss_weights = {1, 1, 0, 1};
  const double before = total_train_loss(out, sample, cfg).total.item();
  out.motion = ops::channel_softmax(Tensor::full(out.motion.shape(), 0.0));
  EXPECT_EQ(total_train_loss(out, sample, cfg).total.item(), before);
}

TEST(TrainConfig, RejectsBadHyperparameters) {
  TrainConfig cfg;
  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.loss_weights = {0, 0, 0, 0};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.max_grad_norm = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  const auto data = generate_dataset(2, SceneParams{}, 5);
  const auto model = make_model(ModelConfig{});
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto result = train(model, data, cfg);
  EXPECT_TRUE(result.history.empty());
  const auto a = model.parameters(), b = result.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].second->data().begin(), a[i].second->data().end(), b[i].second->data().begin()));
  }
}

TEST(Train, OverfitsSingleSample) {
  const auto data = generate_dataset(1, SceneParams{}, 6);
  ASSERT_EQ(data.train.size(), 1u);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.05;
  const auto result = train(make_model(ModelConfig{}), data, cfg);
  ASSERT_EQ(result.history.size(), 200u);
  EXPECT_LT(result.history.back().loss, 0.5 * result.history.front().loss);
}

TEST(Train, SameSeedGivesIdenticalWeights) {
  const auto data = generate_dataset(4, SceneParams{}, 7);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  const auto model = make_model(ModelConfig{});
  const auto first = train(model, data, cfg), second = train(model, data, cfg);
  const auto a = first.model.parameters(), b = second.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].second->data().begin(), a[i].second->data().end(), b[i].second->data().begin()))
        << a[i].first;
  }
}

TEST(Train, ClippingBoundsEveryStep) {
  // with the clip far below the natural norm every step has length exactly lr * clip
  const auto data = generate_dataset(4, SceneParams{}, 8);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.learning_rate = 1.0;
  cfg.max_grad_norm = 1e-3;
  const auto model = make_model(ModelConfig{});
  const auto result = train(model, data, cfg);
  ASSERT_EQ(data.train.size(), 4u);
  EXPECT_EQ(result.history[0].clipped_batches, 2u);
  EXPECT_GT(result.history[0].max_grad_norm, 1e-3);
  const auto a = model.parameters(), b = result.model.parameters();
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].second->numel(); ++k) {
      const double d = a[i].second->data()[k] - b[i].second->data()[k];
      sq += d * d;
    }
  }
  // two steps of length 1e-3 each
  EXPECT_LE(std::sqrt(sq), 2e-3 * (1 + 1e-9));
  EXPECT_GT(std::sqrt(sq), 1e-3);
}
