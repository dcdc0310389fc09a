#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "advperc/metrics.hpp"
#include "oracles.hpp"

using namespace advperc;


TEST(Rmse, Definitions) {
  const std::vector<double> a{0.1, 0.5, 0.9, 0.3};
  EXPECT_EQ(rmse(a, a), 0.0);
  std::vector<double> b = a;
  for (auto& v : b) v += 0.1;
  EXPECT_NEAR(rmse(b, a), 0.1, 1e-12);
  // 2x2 toy: differences 0, 0.2, -0.4, 0 -> sqrt(0.2 / 4)
  const std::vector<double> c{0.1, 0.7, 0.5, 0.3};
  EXPECT_NEAR(rmse(c, a), std::sqrt((0.04 + 0.16) / 4.0), 1e-12);
  EXPECT_THROW(rmse(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Miou, Trivial) {
  const std::vector<int> a{0, 1, 1, 2};
  EXPECT_EQ(miou(a, a, 3), 1.0);
  EXPECT_EQ(miou(std::vector<int>(4, 0), std::vector<int>(4, 1), 2), 0.0);
  EXPECT_THROW(miou(std::vector<int>{3}, std::vector<int>{0}, 3), std::invalid_argument);
}

TEST(Miou, ThreeByThreeHandCount) {
  const std::vector<int> pred{0, 0, 1, 0, 1, 1, 0, 0, 1};
  const std::vector<int> ref{0, 1, 1, 0, 0, 1, 0, 0, 0};
  // class 0: pred {0,1,3,6,7}, ref {0,3,4,6,7,8}: inter 4, union 7
  // class 1: pred {2,4,5,8}, ref {1,2,5}: inter 2, union 5
  EXPECT_EQ(miou(pred, ref, 2), (4.0 / 7.0 + 2.0 / 5.0) / 2.0);
}

TEST(Miou, MatchesSetOracleOnEnumeratedMaps) {
  // all binary 3x3 pairs and all 3-class 2x2 pairs
  EXPECT_EQ(oracle::miou_enumeration_mismatches(), 0u);
}

TEST(MeanAp, Trivial) {
  const std::vector<Box> gt{{0, 0.3, 0.3, 0.2, 0.2}, {1, 0.7, 0.7, 0.1, 0.3}};
  EXPECT_EQ(mean_ap(gt, gt), 1.0);
  EXPECT_EQ(mean_ap({}, gt), 0.0);
  EXPECT_EQ(mean_ap({}, {}), 1.0);
  EXPECT_EQ(mean_ap(gt, {}), 0.0);
  // predictions of a class absent from the ground truth are ignored
  std::vector<Box> extra = gt;
  extra.push_back({3, 0.5, 0.5, 0.1, 0.1, 0.6});
  EXPECT_EQ(mean_ap(extra, gt), 1.0);
}

TEST(MeanAp, HandWalkedCurveWithOneFalsePositive) {
  const std::vector<Box> gt{{0, 0.25, 0.25, 0.2, 0.2}, {0, 0.75, 0.75, 0.2, 0.2}};
  const std::vector<Box> preds{{0, 0.25, 0.25, 0.2, 0.2, 0.9},
                               {0, 0.50, 0.10, 0.1, 0.1, 0.8},  // overlaps nothing
                               {0, 0.76, 0.75, 0.2, 0.2, 0.7}};
  // ranks: TP (r .5, p 1), FP (r .5, p .5), TP (r 1, p 2/3); envelope 1, 2/3, 2/3
  EXPECT_NEAR(mean_ap(preds, gt), 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
}

TEST(MeanAp, DuplicateDetectionIsFalsePositive) {
  const std::vector<Box> gt{{2, 0.5, 0.5, 0.2, 0.2}};
  const std::vector<Box> preds{{2, 0.5, 0.5, 0.2, 0.2, 0.6}, {2, 0.5, 0.5, 0.2, 0.2, 0.9}};
  EXPECT_EQ(mean_ap(preds, gt), 1.0);
  const std::vector<Box> late{{2, 0.1, 0.1, 0.1, 0.1, 0.9}, {2, 0.5, 0.5, 0.2, 0.2, 0.6}};
  EXPECT_NEAR(mean_ap(late, gt), 0.5, 1e-12);
}

TEST(MeanAp, MatchesOracleOnEnumeratedSmallScenes) { EXPECT_LT(oracle::map_enumeration_error(3, 4000), 1e-9); }

TEST(MeanAp, RejectsMalformedBox) {
  const std::vector<Box> bad{{0, 0.5, 0.5, -0.1, 0.2}};
  EXPECT_THROW(mean_ap(bad, {}), std::invalid_argument);
}

TEST(Evaluate, CleanReferenceGivesZeroDistanceError) {
  const auto sample = generate_scene(SceneParams{}, 31);
  const auto model = make_model(ModelConfig{});
  const auto m = evaluate(model, sample);
  EXPECT_EQ(m.distance_rmse, 0.0);
  EXPECT_GE(m.seg_miou, 0.0);
  EXPECT_LE(m.seg_miou, 1.0);
}

TEST(Evaluate, MatchesComponentOracles) {
  const auto sample = generate_scene(SceneParams{}, 32);
  const auto model = make_model(ModelConfig{.seed = 3});
  const auto clean = forward(model, sample.frame_prev, sample.frame_curr);
  const auto other = forward(model, sample.frame_curr, sample.frame_prev);
  const auto m = evaluate(other, clean, sample);
  EXPECT_EQ(m.distance_rmse, rmse(other.distance.data(), clean.distance.data()));
  EXPECT_EQ(m.seg_miou, oracle::miou_by_sets(argmax_channels(other.segmentation), sample.gt_seg, seg::kNumClasses));
  EXPECT_EQ(m.motion_miou, oracle::miou_by_sets(argmax_channels(other.motion), sample.gt_motion, motion::kNumClasses));
  EXPECT_NEAR(m.det_map, oracle::map(decode_detections(other.detection), sample.gt_boxes), 1e-12);
}
