#include "tbdetect/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tb {

PatchGrid make_patch_grid(std::size_t width, std::size_t height, std::size_t patch_side) {
  if (patch_side == 0) throw ContractViolation("patch side must be positive");
  if (patch_side > width || patch_side > height) {
    throw ContractViolation("patch side " + std::to_string(patch_side) +
                            " exceeds image extent " + std::to_string(width) + "x" +
                            std::to_string(height));
  }
  return PatchGrid{patch_side, width / patch_side, height / patch_side};
}

std::pair<std::vector<RasterImage>, PatchGrid> split_into_patches(const RasterImage& image,
                                                                  std::size_t patch_side) {
  const PatchGrid grid = make_patch_grid(image.width, image.height, patch_side);
  std::vector<RasterImage> patches;
  patches.reserve(grid.count());
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const std::size_t ox = grid.origin_x(i), oy = grid.origin_y(i);
    RasterImage p(patch_side, patch_side);
    for (std::size_t y = 0; y < patch_side; ++y) {
      const std::uint8_t* src = image.pixel(ox, oy + y);
      std::copy_n(src, patch_side * 3, p.data.data() + y * patch_side * 3);
    }
    patches.push_back(std::move(p));
  }
  return {std::move(patches), grid};
}

std::pair<std::vector<BinaryMask>, PatchGrid> split_mask_into_patches(const BinaryMask& mask,
                                                                      std::size_t patch_side) {
  const PatchGrid grid = make_patch_grid(mask.width, mask.height, patch_side);
  std::vector<BinaryMask> patches;
  patches.reserve(grid.count());
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const std::size_t ox = grid.origin_x(i), oy = grid.origin_y(i);
    BinaryMask p(patch_side, patch_side);
    for (std::size_t y = 0; y < patch_side; ++y) {
      std::copy_n(mask.bits.data() + (oy + y) * mask.width + ox, patch_side,
                  p.bits.data() + y * patch_side);
    }
    patches.push_back(std::move(p));
  }
  return {std::move(patches), grid};
}

BinaryMask reassemble_mask(const std::vector<BinaryMask>& patches, const PatchGrid& grid) {
  if (patches.size() != grid.count()) {
    throw ContractViolation("patch count " + std::to_string(patches.size()) +
                            " does not match grid count " + std::to_string(grid.count()));
  }
  const std::size_t p = grid.patch_side;
  BinaryMask out(grid.covered_width(), grid.covered_height());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const BinaryMask& m = patches[i];
    if (m.width != p || m.height != p) {
      throw ContractViolation("patch " + std::to_string(i) + " measures " +
                              std::to_string(m.width) + "x" + std::to_string(m.height) +
                              ", expected " + std::to_string(p));
    }
    const std::size_t ox = grid.origin_x(i), oy = grid.origin_y(i);
    for (std::size_t y = 0; y < p; ++y) {
      std::copy_n(m.bits.data() + y * p, p, out.bits.data() + (oy + y) * out.width + ox);
    }
  }
  return out;
}

BinaryMask crop_mask(const BinaryMask& mask, std::size_t width, std::size_t height) {
  if (width > mask.width || height > mask.height) {
    throw ContractViolation("crop exceeds mask bounds");
  }
  BinaryMask out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    std::copy_n(mask.bits.data() + y * mask.width, width, out.bits.data() + y * width);
  }
  return out;
}

RasterImage crop_image(const RasterImage& image, std::size_t width, std::size_t height) {
  if (width > image.width || height > image.height) {
    throw ContractViolation("crop exceeds image bounds");
  }
  RasterImage out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    std::copy_n(image.pixel(0, y), width * 3, out.data.data() + y * width * 3);
  }
  return out;
}

BinaryMask binarize(const Tensor<float>& prob_map, double threshold) {
  if (prob_map.rank() != 4 || prob_map.dim(0) != 1 || prob_map.dim(1) != 1) {
    throw ContractViolation("binarize expects a [1,1,H,W] probability map, got " +
                            shape_str(prob_map.shape()));
  }
  const std::size_t H = prob_map.dim(2), W = prob_map.dim(3);
  BinaryMask mask(W, H);
  for (std::size_t i = 0; i < H * W; ++i) {
    mask.bits[i] = static_cast<double>(prob_map[i]) > threshold ? 1 : 0;
  }
  return mask;
}

namespace {

struct UnionFind {
  std::vector<std::uint32_t> parent;
  std::uint32_t make() {
    parent.push_back(static_cast<std::uint32_t>(parent.size()));
    return parent.back();
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

std::vector<Region> connected_components(const BinaryMask& mask) {
  const std::size_t W = mask.width, H = mask.height;
  std::vector<Region> regions;
  if (W == 0 || H == 0) return regions;
  constexpr std::uint32_t kNone = 0xFFFFFFFFu;
  std::vector<std::uint32_t> labels(W * H, kNone);
  UnionFind uf;

  // first pass: provisional labels from already-scanned 8-neighbours
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!mask.bits[y * W + x]) continue;
      std::uint32_t best = kNone;
      const auto consider = [&](std::size_t nx, std::size_t ny) {
        const std::uint32_t l = labels[ny * W + nx];
        if (l == kNone) return;
        if (best == kNone) {
          best = l;
        } else {
          uf.unite(best, l);
        }
      };
      if (x > 0) consider(x - 1, y);
      if (y > 0) {
        if (x > 0) consider(x - 1, y - 1);
        consider(x, y - 1);
        if (x + 1 < W) consider(x + 1, y - 1);
      }
      labels[y * W + x] = best == kNone ? uf.make() : uf.find(best);
    }
  }

  // second pass: region ids in order of first-encountered pixel
  std::vector<std::uint32_t> root_to_region(uf.parent.size(), kNone);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W;) {
      if (!mask.bits[y * W + x]) {
        ++x;
        continue;
      }
      const std::uint32_t root = uf.find(labels[y * W + x]);
      std::uint32_t rid = root_to_region[root];
      if (rid == kNone) {
        rid = static_cast<std::uint32_t>(regions.size());
        root_to_region[root] = rid;
        Region r;
        r.id = rid;
        r.bbox = Box{x, y, x, y};
        regions.push_back(std::move(r));
      }
      // extend the run while the root stays the same
      std::size_t x2 = x;
      while (x2 + 1 < W && mask.bits[y * W + x2 + 1] &&
             uf.find(labels[y * W + x2 + 1]) == root) {
        ++x2;
      }
      Region& r = regions[rid];
      r.runs.push_back(Run{y, x, x2 - x + 1});
      r.area += x2 - x + 1;
      r.bbox.x_min = std::min(r.bbox.x_min, x);
      r.bbox.x_max = std::max(r.bbox.x_max, x2);
      r.bbox.y_min = std::min(r.bbox.y_min, y);
      r.bbox.y_max = std::max(r.bbox.y_max, y);
      x = x2 + 1;
    }
  }
  return regions;
}

std::vector<Region> filter_regions_by_area(const std::vector<Region>& regions, double min_area) {
  if (min_area < 0) throw ContractViolation("min_area must be >= 0");
  std::vector<Region> kept;
  for (const Region& r : regions) {
    if (static_cast<double>(r.area) > min_area) kept.push_back(r);
  }
  return kept;
}

double scaled_min_area(double min_area_at_256, std::size_t patch_side) {
  const double f = static_cast<double>(patch_side) / 256.0;
  return min_area_at_256 * f * f;
}

std::vector<ROI> extract_rois(const RasterImage& image, const std::vector<Region>& regions) {
  std::vector<ROI> rois;
  rois.reserve(regions.size());
  for (const Region& r : regions) {
    if (r.bbox.x_max >= image.width || r.bbox.y_max >= image.height) {
      throw ContractViolation("region bbox exceeds image bounds: x_max=" +
                              std::to_string(r.bbox.x_max) + " y_max=" +
                              std::to_string(r.bbox.y_max) + " image " +
                              std::to_string(image.width) + "x" + std::to_string(image.height));
    }
    ROI roi;
    roi.region_id = r.id;
    roi.bbox = r.bbox;
    roi.crop = RasterImage(r.bbox.width(), r.bbox.height());
    for (std::size_t y = 0; y < roi.crop.height; ++y) {
      std::copy_n(image.pixel(r.bbox.x_min, r.bbox.y_min + y), roi.crop.width * 3,
                  roi.crop.data.data() + y * roi.crop.width * 3);
    }
    rois.push_back(std::move(roi));
  }
  return rois;
}

int otsu_select_threshold(const std::vector<std::size_t>& histogram) {
  if (histogram.size() != 256) throw ContractViolation("otsu histogram must have 256 bins");
  const std::size_t total = std::accumulate(histogram.begin(), histogram.end(), std::size_t(0));
  if (total == 0) return 0;
  double sum_all = 0;
  for (std::size_t g = 0; g < 256; ++g) sum_all += static_cast<double>(g) * histogram[g];
  double w0 = 0, sum0 = 0, best_var = 0;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    w0 += static_cast<double>(histogram[t]);
    sum0 += static_cast<double>(t) * histogram[t];
    const double w1 = static_cast<double>(total) - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return best_var > 0 ? best_t : 0;
}

namespace {

std::uint8_t luma(const std::uint8_t* px) {
  const double v = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  return static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

}  // namespace

BinaryMask otsu_threshold(const RasterImage& image, bool dark_foreground,
                          int* chosen_threshold) {
  std::vector<std::uint8_t> gray(image.width * image.height);
  std::vector<std::size_t> hist(256, 0);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = luma(image.data.data() + 3 * i);
    ++hist[gray[i]];
  }
  BinaryMask mask(image.width, image.height);
  // degenerate constant image: threshold 0 and empty foreground
  const bool constant =
      std::count(hist.begin(), hist.end(), std::size_t(0)) == 255 || gray.empty();
  const int t = constant ? 0 : otsu_select_threshold(hist);
  if (chosen_threshold) *chosen_threshold = t;
  if (!constant) {
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const bool dark = gray[i] <= static_cast<std::uint8_t>(t);
      mask.bits[i] = (dark == dark_foreground) ? 1 : 0;
    }
  }
  return mask;
}

RasterImage overlay_render(const RasterImage& image, const std::vector<ROI>& rois) {
  RasterImage out = image;
  const auto paint = [&](std::size_t x, std::size_t y, bool bacilli) {
    std::uint8_t* px = out.pixel(x, y);
    px[0] = bacilli ? 0 : 255;
    px[1] = bacilli ? 255 : 0;
    px[2] = 0;
  };
  for (const ROI& roi : rois) {
    const bool bacilli = roi.predicted_label.value_or(0) == 1;
    const Box& b = roi.bbox;
    for (std::size_t x = b.x_min; x <= b.x_max; ++x) {
      paint(x, b.y_min, bacilli);
      paint(x, b.y_max, bacilli);
    }
    for (std::size_t y = b.y_min; y <= b.y_max; ++y) {
      paint(b.x_min, y, bacilli);
      paint(b.x_max, y, bacilli);
    }
  }
  return out;
}

RasterImage resize_bilinear(const RasterImage& image, std::size_t new_width,
                            std::size_t new_height) {
  if (new_width == 0 || new_height == 0) throw ContractViolation("resize target must be positive");
  if (image.width == 0 || image.height == 0) throw ContractViolation("cannot resize empty image");
  RasterImage out(new_width, new_height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(new_width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(new_height);
  for (std::size_t y = 0; y < new_height; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const double cy = std::min(std::max(fy, 0.0), static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(cy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = cy - static_cast<double>(y0);
    for (std::size_t x = 0; x < new_width; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double cx = std::min(std::max(fx, 0.0), static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(cx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = cx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v00 = image.pixel(x0, y0)[c];
        const double v01 = image.pixel(x1, y0)[c];
        const double v10 = image.pixel(x0, y1)[c];
        const double v11 = image.pixel(x1, y1)[c];
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                         wy * ((1 - wx) * v10 + wx * v11);
        out.pixel(x, y)[c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

Tensor<float> image_to_tensor(const RasterImage& image) {
  Tensor<float> t({3, image.height, image.width});
  const std::size_t plane = image.width * image.height;
  for (std::size_t i = 0; i < plane; ++i) {
    t[i] = static_cast<float>(image.data[3 * i]) / 255.0f;
    t[plane + i] = static_cast<float>(image.data[3 * i + 1]) / 255.0f;
    t[2 * plane + i] = static_cast<float>(image.data[3 * i + 2]) / 255.0f;
  }
  return t;
}

Tensor<float> patches_to_batch(const std::vector<RasterImage>& patches) {
  if (patches.empty()) throw ContractViolation("patches_to_batch needs at least one patch");
  const std::size_t w = patches[0].width, h = patches[0].height;
  Tensor<float> t({patches.size(), 3, h, w});
  const std::size_t plane = w * h;
  for (std::size_t n = 0; n < patches.size(); ++n) {
    const RasterImage& p = patches[n];
    if (p.width != w || p.height != h) {
      throw ContractViolation("patch " + std::to_string(n) + " has inconsistent size");
    }
    float* dst = t.raw() + n * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = static_cast<float>(p.data[3 * i]) / 255.0f;
      dst[plane + i] = static_cast<float>(p.data[3 * i + 1]) / 255.0f;
      dst[2 * plane + i] = static_cast<float>(p.data[3 * i + 2]) / 255.0f;
    }
  }
  return t;
}

Tensor<float> mask_to_tensor(const BinaryMask& mask) {
  Tensor<float> t({1, mask.height, mask.width});
  for (std::size_t i = 0; i < mask.bits.size(); ++i) t[i] = mask.bits[i] ? 1.0f : 0.0f;
  return t;
}

Tensor<float> roi_to_input(const RasterImage& crop, std::size_t roi_side) {
  if (crop.width == roi_side && crop.height == roi_side) return image_to_tensor(crop);
  return image_to_tensor(resize_bilinear(crop, roi_side, roi_side));
}

}  // namespace tb
