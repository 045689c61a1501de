#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "tbdetect/raster.hpp"
#include "tbdetect/tensor.hpp"

namespace tb {

// Tiling of an image into non-overlapping square patches. Right/bottom
// remainders that do not fill a whole patch are excluded.
struct PatchGrid {
  std::size_t patch_side = 0;
  std::size_t cols = 0;
  std::size_t rows = 0;

  std::size_t count() const { return cols * rows; }
  std::size_t origin_x(std::size_t index) const { return (index % cols) * patch_side; }
  std::size_t origin_y(std::size_t index) const { return (index / cols) * patch_side; }
  std::size_t covered_width() const { return cols * patch_side; }
  std::size_t covered_height() const { return rows * patch_side; }
};

PatchGrid make_patch_grid(std::size_t width, std::size_t height, std::size_t patch_side);

std::pair<std::vector<RasterImage>, PatchGrid> split_into_patches(const RasterImage& image,
                                                                  std::size_t patch_side);
std::pair<std::vector<BinaryMask>, PatchGrid> split_mask_into_patches(const BinaryMask& mask,
                                                                      std::size_t patch_side);

// Inverse of splitting on the grid-covered area: the result measures
// (cols*p) x (rows*p) and pixel-for-pixel equals the source patches.
BinaryMask reassemble_mask(const std::vector<BinaryMask>& patches, const PatchGrid& grid);

// Crops to the grid-covered area (used to align ground truth with
// reassembled predictions).
BinaryMask crop_mask(const BinaryMask& mask, std::size_t width, std::size_t height);
RasterImage crop_image(const RasterImage& image, std::size_t width, std::size_t height);

// bit = 1 iff probability > threshold (strict).
BinaryMask binarize(const Tensor<float>& prob_map, double threshold = 0.5);

// Inclusive bounding box in pixel coordinates.
struct Box {
  std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  std::size_t width() const { return x_max - x_min + 1; }
  std::size_t height() const { return y_max - y_min + 1; }
};

// Horizontal run of foreground pixels.
struct Run {
  std::size_t y, x0, len;
};

// 8-connected foreground component; pixels stored run-length encoded.
struct Region {
  std::size_t id = 0;
  std::vector<Run> runs;
  std::size_t area = 0;
  Box bbox;
};

// Maximal 8-connected components, ordered by first pixel in row-major scan.
std::vector<Region> connected_components(const BinaryMask& mask);

// Keeps regions with area strictly above min_area.
std::vector<Region> filter_regions_by_area(const std::vector<Region>& regions, double min_area);

// Scales the reference area threshold (defined at a 256-pixel patch side)
// quadratically to the working patch side.
double scaled_min_area(double min_area_at_256, std::size_t patch_side);

// Candidate detection: a region's crop plus labels filled in downstream.
// Class convention: 1 = bacilli, 0 = non-bacilli.
struct ROI {
  std::size_t region_id = 0;
  Box bbox;
  RasterImage crop;
  std::optional<int> truth_label;
  std::optional<int> predicted_label;
  std::optional<double> score;
};

std::vector<ROI> extract_rois(const RasterImage& image, const std::vector<Region>& regions);

// Histogram-based threshold selection maximizing between-class variance
// (ties resolved to the smallest threshold). A constant image yields
// threshold 0 and an empty foreground.
int otsu_select_threshold(const std::vector<std::size_t>& histogram);
BinaryMask otsu_threshold(const RasterImage& image, bool dark_foreground = true,
                          int* chosen_threshold = nullptr);

// Draws ROI bounding-box perimeters on a copy: green for predicted bacilli,
// red otherwise.
RasterImage overlay_render(const RasterImage& image, const std::vector<ROI>& rois);

RasterImage resize_bilinear(const RasterImage& image, std::size_t new_width,
                            std::size_t new_height);

// Bridges to the tensor core; samples scaled to [0,1].
Tensor<float> image_to_tensor(const RasterImage& image);                 // [3,H,W]
Tensor<float> patches_to_batch(const std::vector<RasterImage>& patches); // [N,3,p,p]
Tensor<float> mask_to_tensor(const BinaryMask& mask);                    // [1,H,W]

// ROI crop -> classifier input: bilinear resize to roi_side, scaled to [0,1].
Tensor<float> roi_to_input(const RasterImage& crop, std::size_t roi_side);

}  // namespace tb
