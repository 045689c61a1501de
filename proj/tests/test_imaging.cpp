#include <doctest.h>

#include <algorithm>
#include <set>

#include "tbdetect/pipeline.hpp"
#include "tbdetect/rng.hpp"

using namespace tb;

namespace {

BinaryMask random_mask(std::size_t w, std::size_t h, SplitMix64& rng, double density = 0.4) {
  BinaryMask m(w, h);
  for (auto& b : m.bits) b = rng.next_double() < density ? 1 : 0;
  return m;
}

RasterImage random_image(std::size_t w, std::size_t h, SplitMix64& rng) {
  RasterImage img(w, h);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.next_below(256));
  return img;
}

// Test-only oracle: BFS flood fill over 8-neighbourhoods, regions in order of
// first row-major pixel; independent of the union-find implementation.
struct OracleRegion {
  std::set<std::pair<std::size_t, std::size_t>> pixels;  // (y,x)
  std::size_t area = 0;
  Box bbox;
};

std::vector<OracleRegion> flood_fill_components(const BinaryMask& mask) {
  std::vector<OracleRegion> regions;
  std::vector<std::uint8_t> seen(mask.bits.size(), 0);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y) || seen[y * mask.width + x]) continue;
      OracleRegion region;
      region.bbox = Box{x, y, x, y};
      std::vector<std::pair<std::size_t, std::size_t>> stack{{y, x}};
      seen[y * mask.width + x] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        region.pixels.emplace(cy, cx);
        region.bbox.x_min = std::min(region.bbox.x_min, cx);
        region.bbox.x_max = std::max(region.bbox.x_max, cx);
        region.bbox.y_min = std::min(region.bbox.y_min, cy);
        region.bbox.y_max = std::max(region.bbox.y_max, cy);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(cy) + dy;
            const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(cx) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(mask.height) ||
                nx >= static_cast<std::ptrdiff_t>(mask.width)) {
              continue;
            }
            const std::size_t idx =
                static_cast<std::size_t>(ny) * mask.width + static_cast<std::size_t>(nx);
            if (mask.bits[idx] && !seen[idx]) {
              seen[idx] = 1;
              stack.emplace_back(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx));
            }
          }
        }
      }
      region.area = region.pixels.size();
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

std::set<std::pair<std::size_t, std::size_t>> region_pixels(const Region& r) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (const Run& run : r.runs) {
    for (std::size_t k = 0; k < run.len; ++k) out.emplace(run.y, run.x0 + k);
  }
  return out;
}

}  // namespace

TEST_CASE("patch grids reproduce the reference tiling counts") {
  RasterImage a(2880, 2048);
  CHECK(split_into_patches(a, 256).first.size() == 88);
  CHECK(split_into_patches(a, 256).second.cols == 11);
  CHECK(split_into_patches(a, 256).second.rows == 8);

  RasterImage b(2592, 1944);
  CHECK(split_into_patches(b, 256).first.size() == 70);

  RasterImage c(256, 256);
  CHECK(split_into_patches(c, 256).first.size() == 1);

  RasterImage small(100, 100);
  CHECK_THROWS_AS(split_into_patches(small, 256), ContractViolation);
}

TEST_CASE("split and reassemble round-trip exactly on the covered area") {
  SplitMix64 rng(41);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t p = 1 + rng.next_below(16);
    const std::size_t w = p + rng.next_below(60);
    const std::size_t h = p + rng.next_below(60);
    const BinaryMask mask = random_mask(w, h, rng);
    auto [patches, grid] = split_mask_into_patches(mask, p);
    const BinaryMask rebuilt = reassemble_mask(patches, grid);
    CHECK(rebuilt == crop_mask(mask, grid.covered_width(), grid.covered_height()));
  }
}

TEST_CASE("single-patch reassembly is the identity") {
  SplitMix64 rng(42);
  const BinaryMask mask = random_mask(16, 16, rng);
  auto [patches, grid] = split_mask_into_patches(mask, 16);
  REQUIRE(patches.size() == 1);
  CHECK(reassemble_mask(patches, grid) == mask);
}

TEST_CASE("reassembled pixels equal their source patch pixels") {
  SplitMix64 rng(43);
  const std::size_t p = 4;
  std::vector<BinaryMask> patches;
  for (int i = 0; i < 6; ++i) patches.push_back(random_mask(p, p, rng));
  const PatchGrid grid{p, 3, 2};
  const BinaryMask out = reassemble_mask(patches, grid);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        CHECK(out.at(grid.origin_x(i) + x, grid.origin_y(i) + y) == patches[i].at(x, y));
      }
    }
  }
  patches.pop_back();
  CHECK_THROWS_AS(reassemble_mask(patches, grid), ContractViolation);
}

TEST_CASE("binarize uses a strict threshold") {
  Tensor<float> flat = Tensor<float>::full({1, 1, 4, 4}, 0.5f);
  CHECK(binarize(flat, 0.5).foreground_count() == 0);
  Tensor<float> ones = Tensor<float>::full({1, 1, 4, 4}, 1.0f);
  CHECK(binarize(ones, 0.5).foreground_count() == 16);

  SplitMix64 rng(44);
  Tensor<float> probs({1, 1, 8, 8});
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = static_cast<float>(rng.next_double());
  const BinaryMask mask = binarize(probs, 0.3);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    CHECK(mask.bits[i] == (static_cast<double>(probs[i]) > 0.3 ? 1 : 0));
  }
}

TEST_CASE("connected components of simple masks") {
  CHECK(connected_components(BinaryMask(8, 8)).empty());

  BinaryMask rect(9, 7);
  for (std::size_t y = 1; y <= 4; ++y) {
    for (std::size_t x = 2; x <= 6; ++x) rect.set(x, y, 1);
  }
  const auto regions = connected_components(rect);
  REQUIRE(regions.size() == 1);
  CHECK(regions[0].area == 20);
  CHECK(regions[0].bbox.x_min == 2);
  CHECK(regions[0].bbox.x_max == 6);
  CHECK(regions[0].bbox.y_min == 1);
  CHECK(regions[0].bbox.y_max == 4);

  // diagonal pixels join under 8-connectivity
  BinaryMask diag(4, 4);
  diag.set(0, 0, 1);
  diag.set(1, 1, 1);
  diag.set(2, 2, 1);
  CHECK(connected_components(diag).size() == 1);
}

TEST_CASE("connected components match the flood-fill oracle on random masks") {
  SplitMix64 rng(45);
  for (int trial = 0; trial < 200; ++trial) {
    const BinaryMask mask = random_mask(32, 32, rng, 0.35 + 0.3 * rng.next_double());
    const auto got = connected_components(mask);
    const auto expected = flood_fill_components(mask);
    REQUIRE(got.size() == expected.size());
    std::size_t total_area = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].id == i);
      CHECK(got[i].area == expected[i].area);
      CHECK(got[i].bbox.x_min == expected[i].bbox.x_min);
      CHECK(got[i].bbox.x_max == expected[i].bbox.x_max);
      CHECK(got[i].bbox.y_min == expected[i].bbox.y_min);
      CHECK(got[i].bbox.y_max == expected[i].bbox.y_max);
      CHECK(region_pixels(got[i]) == expected[i].pixels);
      total_area += got[i].area;
    }
    CHECK(total_area == mask.foreground_count());  // partition covers the foreground
  }
}

TEST_CASE("area filter keeps regions strictly above the threshold") {
  SplitMix64 rng(46);
  std::vector<Region> regions(3);
  regions[0].area = 199;
  regions[1].area = 200;
  regions[2].area = 201;
  const auto kept = filter_regions_by_area(regions, 200);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].area == 201);

  const BinaryMask mask = random_mask(24, 24, rng);
  const auto all = connected_components(mask);
  CHECK(filter_regions_by_area(all, 0).size() == all.size());
  for (double thr : {1.0, 3.0, 7.0}) {
    const auto filtered = filter_regions_by_area(all, thr);
    std::size_t expected = 0;
    for (const auto& r : all) expected += r.area > thr;
    CHECK(filtered.size() == expected);
  }

  CHECK(scaled_min_area(200.0, 64) == doctest::Approx(12.5).epsilon(1e-12));
  CHECK(scaled_min_area(200.0, 256) == doctest::Approx(200.0).epsilon(1e-12));
}

TEST_CASE("roi extraction crops exactly the bounding boxes") {
  SplitMix64 rng(47);
  const RasterImage img = random_image(16, 16, rng);

  Region r;
  r.id = 0;
  r.bbox = Box{2, 3, 6, 9};
  r.area = 1;
  r.runs = {Run{3, 2, 1}};
  const auto rois = extract_rois(img, {r});
  REQUIRE(rois.size() == 1);
  CHECK(rois[0].crop.width == 5);
  CHECK(rois[0].crop.height == 7);
  for (std::size_t y = 0; y < 7; ++y) {
    for (std::size_t x = 0; x < 5; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(rois[0].crop.pixel(x, y)[c] == img.pixel(2 + x, 3 + y)[c]);
      }
    }
  }

  Region full;
  full.bbox = Box{0, 0, 15, 15};
  full.area = 1;
  full.runs = {Run{0, 0, 1}};
  CHECK(extract_rois(img, {full})[0].crop == img);

  Region outside;
  outside.bbox = Box{10, 10, 16, 12};
  CHECK_THROWS_AS(extract_rois(img, {outside}), ContractViolation);
}

TEST_CASE("otsu separates a two-level image exactly") {
  RasterImage img(16, 16);
  BinaryMask expected(16, 16);
  for (std::size_t i = 0; i < 256; ++i) {
    const bool dark = i % 2 == 0;
    const std::uint8_t v = dark ? 50 : 200;
    img.data[3 * i] = img.data[3 * i + 1] = img.data[3 * i + 2] = v;
    expected.bits[i] = dark ? 1 : 0;
  }
  int threshold = -1;
  const BinaryMask mask = otsu_threshold(img, true, &threshold);
  CHECK(threshold >= 50);
  CHECK(threshold < 200);
  CHECK(mask == expected);
}

TEST_CASE("otsu on a constant image yields threshold zero and empty foreground") {
  const RasterImage img = RasterImage::filled(12, 12, 90, 90, 90);
  int threshold = -1;
  const BinaryMask mask = otsu_threshold(img, true, &threshold);
  CHECK(threshold == 0);
  CHECK(mask.foreground_count() == 0);
}

TEST_CASE("otsu matches the exhaustive between-class-variance search") {
  SplitMix64 rng(48);
  for (int trial = 0; trial < 100; ++trial) {
    const RasterImage img = random_image(24, 24, rng);
    int got = -1;
    otsu_threshold(img, true, &got);

    // oracle: direct O(256 * pixels) recomputation from the gray image
    std::vector<std::uint8_t> gray(img.width * img.height);
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const double v = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] +
                       0.114 * img.data[3 * i + 2];
      gray[i] = static_cast<std::uint8_t>(std::lround(v));
    }
    double best_var = 0.0;
    int best_t = 0;
    for (int t = 0; t < 256; ++t) {
      double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
      for (std::uint8_t g : gray) {
        if (g <= t) {
          n0 += 1;
          s0 += g;
        } else {
          n1 += 1;
          s1 += g;
        }
      }
      if (n0 == 0 || n1 == 0) continue;
      const double mu0 = s0 / n0, mu1 = s1 / n1;
      const double var = n0 * n1 * (mu0 - mu1) * (mu0 - mu1);
      if (var > best_var) {
        best_var = var;
        best_t = t;
      }
    }
    CHECK(got == best_t);
  }
}

TEST_CASE("overlay recolors only bounding-box perimeters") {
  SplitMix64 rng(49);
  const RasterImage img = random_image(20, 20, rng);
  CHECK(overlay_render(img, {}) == img);

  ROI roi;
  roi.bbox = Box{3, 4, 9, 8};
  roi.predicted_label = 1;
  const RasterImage out = overlay_render(img, {roi});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const bool on_perimeter =
          (x >= 3 && x <= 9 && (y == 4 || y == 8)) || (y >= 4 && y <= 8 && (x == 3 || x == 9));
      if (on_perimeter) {
        CHECK(out.pixel(x, y)[0] == 0);
        CHECK(out.pixel(x, y)[1] == 255);
        CHECK(out.pixel(x, y)[2] == 0);
      } else {
        for (std::size_t c = 0; c < 3; ++c) CHECK(out.pixel(x, y)[c] == img.pixel(x, y)[c]);
      }
    }
  }

  ROI negative;
  negative.bbox = Box{1, 1, 2, 2};
  negative.predicted_label = 0;
  const RasterImage out2 = overlay_render(img, {negative});
  CHECK(out2.pixel(1, 1)[0] == 255);
  CHECK(out2.pixel(1, 1)[1] == 0);
}

TEST_CASE("bilinear resize basics") {
  SplitMix64 rng(50);
  const RasterImage img = random_image(9, 7, rng);
  CHECK(resize_bilinear(img, 9, 7) == img);
  const RasterImage flat = RasterImage::filled(5, 5, 10, 200, 77);
  const RasterImage up = resize_bilinear(flat, 16, 16);
  for (std::size_t i = 0; i < up.width * up.height; ++i) {
    CHECK(up.data[3 * i] == 10);
    CHECK(up.data[3 * i + 1] == 200);
    CHECK(up.data[3 * i + 2] == 77);
  }
}
