#include <doctest.h>

#include <cmath>

#include "tbdetect/metrics.hpp"
#include "tbdetect/rng.hpp"

using namespace tb;

namespace {

BinaryMask random_mask(std::size_t w, std::size_t h, SplitMix64& rng, double density = 0.4) {
  BinaryMask m(w, h);
  for (auto& b : m.bits) b = rng.next_double() < density ? 1 : 0;
  return m;
}

struct PixelCounts {
  std::size_t inter = 0, a = 0, b = 0;
};

PixelCounts count_pixels(const BinaryMask& x, const BinaryMask& y) {
  PixelCounts c;
  for (std::size_t i = 0; i < x.bits.size(); ++i) {
    c.inter += x.bits[i] && y.bits[i];
    c.a += x.bits[i];
    c.b += y.bits[i];
  }
  return c;
}

}  // namespace

TEST_CASE("jaccard spot values") {
  SplitMix64 rng(61);
  const BinaryMask m = random_mask(10, 10, rng);
  CHECK(jaccard(m, m) == 1.0);

  BinaryMask left(6, 6), right(6, 6);
  left.set(0, 0, 1);
  right.set(5, 5, 1);
  CHECK(jaccard(left, right) == 0.0);

  // |A ∩ B| = 2, |A ∪ B| = 4 on constructed 3x3 masks
  BinaryMask a(3, 3), b(3, 3);
  a.set(0, 0, 1);
  a.set(1, 0, 1);
  a.set(2, 0, 1);
  b.set(1, 0, 1);
  b.set(2, 0, 1);
  b.set(0, 1, 1);
  CHECK(jaccard(a, b) == 0.5);

  CHECK(jaccard(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
  CHECK_THROWS_AS(jaccard(BinaryMask(4, 4), BinaryMask(5, 4)), ContractViolation);
}

TEST_CASE("dice spot values") {
  SplitMix64 rng(62);
  const BinaryMask m = random_mask(10, 10, rng);
  CHECK(dice(m, m) == 1.0);

  // |A ∩ B| = 2, |A| = |B| = 3
  BinaryMask a(3, 3), b(3, 3);
  a.set(0, 0, 1);
  a.set(1, 0, 1);
  a.set(2, 0, 1);
  b.set(0, 0, 1);
  b.set(1, 0, 1);
  b.set(1, 1, 1);
  CHECK(dice(a, b) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(dice(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
}

TEST_CASE("jaccard and dice match pixel-count oracles and each other") {
  SplitMix64 rng(63);
  for (int trial = 0; trial < 100; ++trial) {
    const BinaryMask a = random_mask(16, 16, rng, rng.next_double());
    const BinaryMask b = random_mask(16, 16, rng, rng.next_double());
    const PixelCounts c = count_pixels(a, b);
    const std::size_t uni = c.a + c.b - c.inter;
    const double j = jaccard(a, b);
    const double d = dice(a, b);
    if (uni == 0) {
      CHECK(j == 1.0);
      CHECK(d == 1.0);
    } else {
      CHECK(j == static_cast<double>(c.inter) / static_cast<double>(uni));
      CHECK(d == 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b));
    }
    CHECK(std::abs(d - 2.0 * j / (1.0 + j)) < 1e-12);
    CHECK(j <= d + 1e-15);
    CHECK(jaccard(a, b) == jaccard(b, a));
    CHECK(dice(a, b) == dice(b, a));
    const SegScores s = seg_scores(a, b);
    CHECK(s.jaccard == j);
    CHECK(s.dice == d);
  }
}

TEST_CASE("rates on hand-computed confusion matrices") {
  {
    const Rates r = rates(ConfusionCounts{1, 1, 0, 0});
    CHECK(*r.accuracy == 1.0);
    CHECK(*r.precision == 1.0);
    CHECK(*r.recall == 1.0);
    CHECK(*r.f1 == 1.0);
  }
  {
    // precision 1, recall 0.9939 -> F1 0.9969 at 4 decimal places
    const Rates r = rates(ConfusionCounts{9939, 0, 0, 61});
    CHECK(*r.precision == 1.0);
    CHECK(*r.recall == doctest::Approx(0.9939).epsilon(1e-12));
    CHECK(std::round(*r.f1 * 1e4) / 1e4 == 0.9969);
  }
  {
    const Rates r = rates(ConfusionCounts{3, 4, 1, 2});
    CHECK(*r.precision == 0.75);
    CHECK(*r.recall == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(*r.f1 == doctest::Approx(2.0 * 0.45 / 1.35).epsilon(1e-12));
    CHECK(*r.accuracy == 0.7);
  }
}

TEST_CASE("undefined rates stay absent instead of collapsing to zero") {
  const Rates none = rates(ConfusionCounts{0, 0, 0, 0});
  CHECK(!none.accuracy);
  CHECK(!none.precision);
  CHECK(!none.recall);
  CHECK(!none.f1);

  const Rates no_pos = rates(ConfusionCounts{0, 5, 0, 0});
  CHECK(*no_pos.accuracy == 1.0);
  CHECK(!no_pos.precision);
  CHECK(!no_pos.recall);
  CHECK(!no_pos.f1);

  const Rates zero_pr = rates(ConfusionCounts{0, 1, 2, 3});
  CHECK(*zero_pr.precision == 0.0);
  CHECK(*zero_pr.recall == 0.0);
  CHECK(!zero_pr.f1);  // harmonic mean of two zeros is 0/0
}

TEST_CASE("f1 lies between precision and recall") {
  SplitMix64 rng(64);
  for (int trial = 0; trial < 50; ++trial) {
    const ConfusionCounts c{1 + rng.next_below(50), rng.next_below(50), rng.next_below(50),
                            rng.next_below(50)};
    const Rates r = rates(c);
    REQUIRE(r.f1.has_value());
    CHECK(*r.f1 >= std::min(*r.precision, *r.recall) - 1e-12);
    CHECK(*r.f1 <= std::max(*r.precision, *r.recall) + 1e-12);
  }
}

TEST_CASE("published-style rate rows are internally consistent") {
  const double rows[][4] = {
      // accuracy column unused here; (precision, recall, f1)
      {0.6711, 0.6, 0.6335},
      {0.9, 0.75, 0.8181},
      {1.0, 0.9939, 0.9969},
      {0.9966, 0.9933, 0.9949},
      {0.9892, 0.9435, 0.9659},
  };
  for (const auto& row : rows) {
    CHECK(std::abs(f1_from_precision_recall(row[0], row[1]) - row[2]) < 1e-3);
  }
}

TEST_CASE("report metrics recompute exactly from their counts") {
  SplitMix64 rng(65);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ImageDetection> per_image;
    for (int i = 0; i < 4; ++i) {
      per_image.push_back(ImageDetection{
          "img" + std::to_string(i),
          ConfusionCounts{rng.next_below(20), rng.next_below(20), rng.next_below(20),
                          rng.next_below(20)}});
    }
    const DetReport report = make_det_report(per_image);
    ConfusionCounts total;
    for (const auto& d : per_image) total += d.counts;
    CHECK(total.tp == report.counts.tp);
    const Rates again = rates(report.counts);
    if (again.accuracy) CHECK(std::abs(*again.accuracy - *report.metrics.accuracy) < 1e-12);
    if (again.f1) CHECK(std::abs(*again.f1 - *report.metrics.f1) < 1e-12);
  }
}

namespace {

// Scene builder for matcher tests: stamps rectangles into masks.
void stamp(BinaryMask& m, const Box& b) {
  for (std::size_t y = b.y_min; y <= b.y_max; ++y) {
    for (std::size_t x = b.x_min; x <= b.x_max; ++x) m.set(x, y, 1);
  }
}

}  // namespace

TEST_CASE("matcher counts a fully covered prediction as a true positive") {
  BinaryMask truth(16, 16);
  stamp(truth, Box{4, 4, 8, 8});
  BinaryMask pred(16, 16);
  stamp(pred, Box{5, 5, 7, 7});  // fully inside the truth component
  auto regions = connected_components(pred);
  RasterImage img(16, 16);
  auto rois = extract_rois(img, regions);
  rois[0].predicted_label = 1;
  const ConfusionCounts c = match_rois_to_truth(rois, regions, truth, 0.5);
  CHECK(c.tp == 1);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
  CHECK(*rois[0].truth_label == 1);
}

TEST_CASE("matcher charges one miss per uncovered truth component") {
  BinaryMask truth(20, 20);
  stamp(truth, Box{2, 2, 4, 4});
  stamp(truth, Box{12, 12, 15, 15});
  std::vector<ROI> rois;
  std::vector<Region> regions;
  const ConfusionCounts c = match_rois_to_truth(rois, regions, truth, 0.5);
  CHECK(c.fn == 2);
  CHECK(c.total() == 2);
}

TEST_CASE("matcher requires predictions and aligned masks") {
  BinaryMask truth(8, 8);
  BinaryMask pred(8, 8);
  stamp(pred, Box{1, 1, 2, 2});
  auto regions = connected_components(pred);
  RasterImage img(8, 8);
  auto rois = extract_rois(img, regions);
  CHECK_THROWS_AS(match_rois_to_truth(rois, regions, truth, 0.5), ContractViolation);
  rois[0].predicted_label = 1;
  BinaryMask small_truth(2, 2);
  CHECK_THROWS_WITH_AS(match_rois_to_truth(rois, regions, small_truth, 0.5),
                       doctest::Contains("misaligned"), ContractViolation);
}

TEST_CASE("matcher agrees with a brute-force matcher on random scenes") {
  SplitMix64 rng(66);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t side = 24;
    const BinaryMask truth = random_mask(side, side, rng, 0.25);
    const BinaryMask pred = random_mask(side, side, rng, 0.25);
    auto regions = connected_components(pred);
    RasterImage img(side, side);
    auto rois = extract_rois(img, regions);
    for (std::size_t i = 0; i < rois.size(); ++i) {
      rois[i].predicted_label = static_cast<int>(rng.next_below(2));
    }
    const ConfusionCounts got = match_rois_to_truth(rois, regions, truth, 0.5);

    // oracle: direct per-pixel recount over all regions and components
    ConfusionCounts expected;
    for (std::size_t i = 0; i < regions.size(); ++i) {
      std::size_t on = 0;
      for (const Run& run : regions[i].runs) {
        for (std::size_t k = 0; k < run.len; ++k) on += truth.at(run.x0 + k, run.y);
      }
      const bool is_pos = static_cast<double>(on) / regions[i].area >= 0.5;
      const bool said_pos = *rois[i].predicted_label == 1;
      if (is_pos && said_pos) ++expected.tp;
      if (is_pos && !said_pos) ++expected.fn;
      if (!is_pos && said_pos) ++expected.fp;
      if (!is_pos && !said_pos) ++expected.tn;
    }
    for (const auto& comp : connected_components(truth)) {
      bool touched = false;
      for (const Run& run : comp.runs) {
        for (std::size_t k = 0; k < run.len && !touched; ++k) {
          touched = pred.at(run.x0 + k, run.y) != 0;
        }
        if (touched) break;
      }
      if (!touched) ++expected.fn;
    }
    CHECK(got.tp == expected.tp);
    CHECK(got.tn == expected.tn);
    CHECK(got.fp == expected.fp);
    CHECK(got.fn == expected.fn);
    CHECK(got.total() >= rois.size());  // conservation; misses only add
  }
}
