#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dubox/losses.hpp"
#include "dubox/ops.hpp"
#include "support/oracles.hpp"

namespace dubox {
namespace {

using testing::check_gradients;
using testing::top_k_reference;

constexpr int kClasses = 3;

EncoderConfig encoder() {
  EncoderConfig e;
  e.num_classes = kClasses;
  return e;
}

// Random image with 1-3 objects on a 64x64 canvas, detector 1 (8x8 map).
TargetMaps random_targets(std::mt19937_64& rng, int detector = 1) {
  std::uniform_real_distribution<double> side(10, 40), u(0, 1);
  std::uniform_int_distribution<int> count(1, 3), cls(0, kClasses - 1);
  std::vector<GroundTruth> gts;
  for (int n = count(rng); n > 0; --n) {
    const double w = side(rng), h = side(rng);
    const double x = u(rng) * (64 - w), y = u(rng) * (64 - h);
    gts.push_back({make_box(x, y, x + w, y + h), cls(rng)});
  }
  return encode_targets(gts, HookGrid::for_detector(detector, 64, 64), encoder());
}

// Prediction near the targets, kept inside (0.02, 0.98).
Tensor64 perturbed_offsets(const std::vector<TargetMaps>& t, std::mt19937_64& rng, double noise) {
  const std::size_t plane = static_cast<std::size_t>(t[0].spatial_size());
  Tensor64 p(Shape{t.size(), 4, std::size_t(t[0].map_h), std::size_t(t[0].map_w)});
  std::uniform_real_distribution<double> d(-noise, noise), fill(0.05, 0.3);
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (std::size_t i = 0; i < 4 * plane; ++i) {
      const double base = t[n].positive_mask[i % plane] ? t[n].offsets[i] : fill(rng);
      p[n * 4 * plane + i] = std::clamp(base + d(rng), 0.02, 0.98);
    }
  }
  return p;
}

Tensor64 random_probs(const Shape& s, std::mt19937_64& rng) {
  return testing::random_tensor(s, rng, 0.02, 0.98);
}

TEST(IouLoss, PerfectPredictionHasZeroLoss) {
  std::mt19937_64 rng(1);
  const std::vector<TargetMaps> t{random_targets(rng), random_targets(rng)};
  Tensor64 p = perturbed_offsets(t, rng, 0.0);
  // Exact targets, including offsets at the clamp bounds.
  const std::size_t plane = static_cast<std::size_t>(t[0].spatial_size());
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 4 * plane; ++i) {
      if (t[n].positive_mask[i % plane]) p[n * 4 * plane + i] = t[n].offsets[i];
    }
  }
  const auto r = iou_loss(p, t, LossConfig{});
  EXPECT_NEAR(r.loss.item(), 0.0, 1e-12);
  EXPECT_GT(r.contributing_hooks, 0u);
}

TEST(IouLoss, DisjointBoxesHitTheFloor) {
  // Target box strictly right of its hook; a zero prediction has no overlap.
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(8.5, 0, 15, 64), 0}},
                                      HookGrid::for_detector(2, 64, 64), encoder());
  ASSERT_EQ(t.positive_count(), 1u);
  const Tensor64 p(Shape{1, 4, 2, 2});
  const auto r = iou_loss(p, std::span(&t, 1), LossConfig{});
  EXPECT_NEAR(r.loss.item(), -std::log(1e-6), 1e-9);
  EXPECT_NEAR(r.loss.item(), 13.8155, 1e-4);
}

TEST(IouLoss, HandComputedValue) {
  // One hook, target extents (1,1,1,1) cells, prediction (2,1,1,1): IoU 2/3.
  TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(24, 24, 40, 40), 0}},
                                HookGrid::for_detector(1, 64, 64), encoder());
  ASSERT_EQ(t.positive_count(), 1u);
  Tensor64 p(Shape{1, 4, 8, 8});
  const std::size_t at = t.index(4, 4);
  p[at] = 2.0 / 8;
  p[64 + at] = p[128 + at] = p[192 + at] = 1.0 / 8;
  const auto r = iou_loss(p, std::span(&t, 1), LossConfig{});
  EXPECT_NEAR(r.loss.item(), -std::log(2.0 / 3.0), 1e-12);
  EXPECT_NEAR(r.iou[at], 2.0 / 3.0, 1e-12);
}

TEST(IouLoss, IgnoresHooksWithoutRegressionWeight) {
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(0, 0, 60, 60), 0}},
                                      HookGrid::for_detector(1, 64, 64), encoder());
  ASSERT_GT(t.positive_count(), 0u);
  std::mt19937_64 rng(2);
  const auto r = iou_loss(random_probs({1, 4, 8, 8}, rng), std::span(&t, 1), LossConfig{});
  EXPECT_EQ(r.contributing_hooks, 0u);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(IouLoss, ShapeMismatchIsAnError) {
  std::mt19937_64 rng(3);
  const std::vector<TargetMaps> t{random_targets(rng)};
  EXPECT_THROW(iou_loss(Tensor64(Shape{1, 3, 8, 8}), t, LossConfig{}), ShapeError);
  EXPECT_THROW(iou_loss(Tensor64(Shape{2, 4, 8, 8}), t, LossConfig{}), ShapeError);
  EXPECT_THROW(iou_loss(Tensor64(Shape{1, 4, 4, 8}), t, LossConfig{}), ShapeError);
}

TEST(IouLoss, TranslationOfTheWholeSceneLeavesTheLossUnchanged) {
  // Same object and prediction at two hooks one cell apart.
  const HookGrid g = HookGrid::for_detector(1, 64, 64);
  const TargetMaps a = encode_targets(std::vector<GroundTruth>{{make_box(10, 14, 30, 38), 0}}, g, encoder());
  const TargetMaps b = encode_targets(std::vector<GroundTruth>{{make_box(18, 22, 38, 46), 0}}, g, encoder());
  Tensor64 pa(Shape{1, 4, 8, 8}, 0.1), pb(Shape{1, 4, 8, 8}, 0.1);
  for (int c = 0; c < 4; ++c) {
    for (int j = 0; j < 7; ++j) {
      for (int i = 0; i < 7; ++i) {
        const double v = 0.1 + 0.02 * c + 0.01 * ((i + j) % 3);
        pa[std::size_t(c * 64 + j * 8 + i)] = v;
        pb[std::size_t(c * 64 + (j + 1) * 8 + i + 1)] = v;
      }
    }
  }
  EXPECT_NEAR(iou_loss(pa, std::span(&a, 1), LossConfig{}).loss.item(),
              iou_loss(pb, std::span(&b, 1), LossConfig{}).loss.item(), 1e-12);
}

class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, IouLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  const std::vector<TargetMaps> t{random_targets(rng), random_targets(rng, 2)};
  std::vector<TargetMaps> t1{t[0]}, t2{t[1]};
  Tensor64 p1 = perturbed_offsets(t1, rng, 0.03);
  Tensor64 p2 = perturbed_offsets(t2, rng, 0.03);
  for (const auto& [p, tt] : {std::pair{&p1, &t1}, std::pair{&p2, &t2}}) {
    const auto r = iou_loss(*p, *tt, LossConfig{});
    for (double v : r.iou) {
      if (v > 0) ASSERT_GT(v, 0.05);
    }
    const auto res = check_gradients([&] { return iou_loss(*p, *tt, LossConfig{}).loss; }, {*p}, rng, 256);
    EXPECT_LE(res.max_rel_error, 1e-5);
  }
}

TEST_P(LossGradient, SmoothL1MatchesFiniteDifferences) {
  std::mt19937_64 rng(2000 + GetParam());
  const std::vector<TargetMaps> t{random_targets(rng), random_targets(rng)};
  Tensor64 p = perturbed_offsets(t, rng, 0.2);
  const auto res = check_gradients([&] { return smooth_l1_loss(p, t, LossConfig{}).loss; }, {p}, rng, 256);
  EXPECT_LE(res.max_rel_error, 1e-5);
}

TEST_P(LossGradient, CrpsLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(3000 + GetParam());
  const std::vector<TargetMaps> t{random_targets(rng), random_targets(rng)};
  const Tensor64 offsets = perturbed_offsets(t, rng, 0.05);
  const IouMap iou = hook_iou_map(offsets, t);
  // Distinct negative losses keep the mined set fixed under the probe step.
  Tensor64 p = random_probs({2, kClasses, 8, 8}, rng);
  const auto res =
      check_gradients([&] { return crps_cls_loss(p, t, iou, LossConfig{}).loss; }, {p}, rng, 256);
  EXPECT_LE(res.max_rel_error, 1e-5);
}

TEST_P(LossGradient, CombinedLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(4000 + GetParam());
  const std::array<std::vector<TargetMaps>, 2> t{
      std::vector<TargetMaps>{random_targets(rng, 1), random_targets(rng, 1)},
      std::vector<TargetMaps>{random_targets(rng, 2), random_targets(rng, 2)}};
  Tensor64 b1 = perturbed_offsets(t[0], rng, 0.03), b2 = perturbed_offsets(t[1], rng, 0.03);
  Tensor64 c1 = random_probs({2, kClasses, 8, 8}, rng), c2 = random_probs({2, kClasses, 2, 2}, rng);
  LossConfig cfg;
  cfg.lambda_bbox = 1.5;
  cfg.lambda_cls = 0.7;
  auto loss = [&] {
    return detection_loss<double>({DetectorPrediction<double>{c1, b1}, DetectorPrediction<double>{c2, b2}}, t,
                                  cfg)
        .total;
  };
  EXPECT_LE(check_gradients(loss, {b1, b2, c1, c2}, rng, 128).max_rel_error, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Random, LossGradient, ::testing::Range(0, 20));

TEST(CrpsLoss, FullyGatedBatchHasZeroLoss) {
  std::mt19937_64 rng(5);
  const std::vector<TargetMaps> t{random_targets(rng)};
  const IouMap zero(64, 0.0);
  const auto r = crps_cls_loss(random_probs({1, kClasses, 8, 8}, rng), t, zero, LossConfig{});
  EXPECT_EQ(r.loss.item(), 0.0);
  EXPECT_EQ(r.positives, 0u);
  EXPECT_EQ(r.mined_negatives, 0u);
  EXPECT_EQ(r.gated_out, t[0].positive_count());
}

TEST(CrpsLoss, PerfectPredictionHasNearZeroLoss) {
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(24, 24, 40, 40), 1}},
                                      HookGrid::for_detector(1, 64, 64), encoder());
  Tensor64 p(Shape{1, kClasses, 8, 8});
  const std::size_t at = t.index(4, 4);
  p[64 + at] = 1.0;
  IouMap iou(64, 0.0);
  iou[at] = 0.6;
  const auto r = crps_cls_loss(p, std::span(&t, 1), iou, LossConfig{});
  EXPECT_EQ(r.positives, 1u);
  EXPECT_EQ(r.mined_negatives, 3u);
  // Probabilities are clamped one part in 10^7 away from {0,1}.
  EXPECT_LT(r.loss.item(), 1e-6);
}

TEST(CrpsLoss, GateIsStrict) {
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(24, 24, 40, 40), 1}},
                                      HookGrid::for_detector(1, 64, 64), encoder());
  const Tensor64 p(Shape{1, kClasses, 8, 8}, 0.5);
  IouMap iou(64, 0.0);
  iou[t.index(4, 4)] = 0.5;
  EXPECT_EQ(crps_cls_loss(p, std::span(&t, 1), iou, LossConfig{}).positives, 0u);
  iou[t.index(4, 4)] = std::nextafter(0.5, 1.0);
  EXPECT_EQ(crps_cls_loss(p, std::span(&t, 1), iou, LossConfig{}).positives, 1u);
}

TEST(CrpsLoss, MinesTheTopThreeNNegatives) {
  std::mt19937_64 rng(6);
  // Two positives and 100 negatives with distinct losses.
  std::vector<GroundTruth> gts{{make_box(0, 0, 8, 8), 0}, {make_box(72, 72, 80, 80), 2}};
  const TargetMaps t = encode_targets(gts, HookGrid::for_detector(1, 80, 80), encoder());
  ASSERT_EQ(t.positive_count(), 2u);
  Tensor64 p = random_probs({1, kClasses, 10, 10}, rng);
  IouMap iou(100, 0.9);
  const auto r = crps_cls_loss(p, std::span(&t, 1), iou, LossConfig{});
  ASSERT_EQ(r.positives, 2u);
  ASSERT_EQ(r.mined_negatives, 6u);
  std::vector<double> neg_loss(100, -1.0);
  for (std::size_t a = 0; a < 100; ++a) {
    if (t.positive_mask[a]) continue;
    double l = 0;
    for (int c = 0; c < kClasses; ++c) l -= std::log(1 - p[std::size_t(c) * 100 + a]);
    neg_loss[a] = l;
  }
  EXPECT_EQ(r.kept_negative_hooks, top_k_reference(neg_loss, 6));
}

TEST(CrpsLoss, NegativeTiesPreferLowerIndex) {
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(24, 24, 40, 40), 1}},
                                      HookGrid::for_detector(1, 64, 64), encoder());
  const Tensor64 p(Shape{1, kClasses, 8, 8}, 0.3);
  IouMap iou(64, 0.0);
  iou[t.index(4, 4)] = 0.9;
  const auto r = crps_cls_loss(p, std::span(&t, 1), iou, LossConfig{});
  EXPECT_EQ(r.kept_negative_hooks, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(CrpsLoss, KeepsAllNegativesWhenFewerThanThreeN) {
  // A wide disk makes 9 of the 16 hooks positive, leaving 7 < 27 negatives.
  EncoderConfig wide = encoder();
  wide.p2 = 3.7;
  const TargetMaps t = encode_targets(std::vector<GroundTruth>{{make_box(0, 0, 128, 128), 0}},
                                      HookGrid::for_detector(2, 128, 128), wide);
  ASSERT_EQ(t.positive_count(), 9u);
  const std::size_t negatives = 7;
  std::mt19937_64 rng(7);
  const IouMap iou(16, 0.9);
  const auto r = crps_cls_loss(random_probs({1, kClasses, 4, 4}, rng), std::span(&t, 1), iou, LossConfig{});
  EXPECT_EQ(r.positives, 9u);
  EXPECT_EQ(r.mined_negatives, negatives);
}

TEST(CrpsLoss, RaisingEpsilonNeverAddsPositives) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 50; ++k) {
    const std::vector<TargetMaps> t{random_targets(rng), random_targets(rng)};
    const IouMap iou = hook_iou_map(perturbed_offsets(t, rng, 0.1), t);
    const Tensor64 p = random_probs({2, kClasses, 8, 8}, rng);
    std::size_t prev = SIZE_MAX;
    for (double eps : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      LossConfig cfg;
      cfg.epsilon = eps;
      const std::size_t n = crps_cls_loss(p, t, iou, cfg).positives;
      EXPECT_LE(n, prev);
      prev = n;
    }
  }
}

TEST(CrpsLoss, ErrorsOnMismatchedInputs) {
  std::mt19937_64 rng(9);
  const std::vector<TargetMaps> t{random_targets(rng)};
  EXPECT_THROW(crps_cls_loss(Tensor64(Shape{1, 2, 8, 8}), t, IouMap(64), LossConfig{}), ShapeError);
  EXPECT_THROW(crps_cls_loss(Tensor64(Shape{1, 3, 8, 8}), t, IouMap(10), LossConfig{}), ShapeError);
  EXPECT_THROW(crps_cls_loss(Tensor64(Shape{1, 3, 8, 8}), std::span<const TargetMaps>(), IouMap(), LossConfig{}),
               ShapeError);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.epsilon = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
  c = LossConfig{};
  c.ohem_ratio = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = LossConfig{};
  c.lambda_cls = -1;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(TotalLoss, Examples) {
  LossConfig cfg;
  EXPECT_EQ(total_loss({{{1, 2}, {3, 4}}}, cfg), 10);
  cfg.lambda_bbox = 0;
  EXPECT_EQ(total_loss({{{1, 2}, {3, 4}}}, cfg), 6);
  cfg.lambda_bbox = 2;
  cfg.lambda_cls = 0.5;
  EXPECT_EQ(total_loss({{{1, 2}, {3, 4}}}, cfg), 11);
}

TEST(DetectionLoss, BreakdownIsConsistent) {
  std::mt19937_64 rng(10);
  const std::array<std::vector<TargetMaps>, 2> t{std::vector<TargetMaps>{random_targets(rng, 1)},
                                                 std::vector<TargetMaps>{random_targets(rng, 2)}};
  const Tensor64 b1 = perturbed_offsets(t[0], rng, 0.05), b2 = perturbed_offsets(t[1], rng, 0.05);
  const Tensor64 c1 = random_probs({1, kClasses, 8, 8}, rng), c2 = random_probs({1, kClasses, 2, 2}, rng);
  LossConfig cfg;
  cfg.lambda_bbox = 2;
  const auto out =
      detection_loss<double>({DetectorPrediction<double>{c1, b1}, DetectorPrediction<double>{c2, b2}}, t, cfg);
  const auto& d = out.breakdown.detectors;
  EXPECT_NEAR(out.breakdown.total,
              total_loss({{{d[0].bbox_loss, d[0].cls_loss}, {d[1].bbox_loss, d[1].cls_loss}}}, cfg), 1e-12);
  EXPECT_EQ(out.total.item(), out.breakdown.total);
  for (const auto& s : d) {
    EXPECT_GE(s.bbox_loss, 0);
    EXPECT_GE(s.cls_loss, 0);
  }
}

TEST(DetectionLoss, EmptyBatchIsFinite) {
  const HookGrid g1 = HookGrid::for_detector(1, 64, 64), g2 = HookGrid::for_detector(2, 64, 64);
  const std::array<std::vector<TargetMaps>, 2> t{std::vector<TargetMaps>{encode_targets({}, g1, encoder())},
                                                 std::vector<TargetMaps>{encode_targets({}, g2, encoder())}};
  std::mt19937_64 rng(11);
  const auto out = detection_loss<double>(
      {DetectorPrediction<double>{random_probs({1, kClasses, 8, 8}, rng), random_probs({1, 4, 8, 8}, rng)},
       DetectorPrediction<double>{random_probs({1, kClasses, 2, 2}, rng), random_probs({1, 4, 2, 2}, rng)}},
      t, LossConfig{});
  EXPECT_EQ(out.breakdown.detectors[0].bbox_loss, 0.0);
  EXPECT_TRUE(std::isfinite(out.breakdown.total));
}

}  // namespace
}  // namespace dubox
