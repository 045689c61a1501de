#include "tbdetect/detect.hpp"

#include <thread>

namespace tb {

namespace {

// Runs fn(i) for i in [0, count) across `threads` workers on contiguous
// chunks. Output slots are disjoint, so the result is order-independent.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count == 0 ? 1 : count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

BinaryMask run_segmentation(const UNetModel<float>& segmenter, const RasterImage& image,
                            const ImagingConfig& imaging, std::size_t threads) {
  auto [patches, grid] = split_into_patches(image, imaging.patch_side);
  std::vector<BinaryMask> mask_patches(patches.size());
  parallel_for(patches.size(), threads, [&](std::size_t i) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    Tensor<float> x = patches_to_batch({patches[i]});
    Var<float> prob = segmenter.infer(tape, tape.leaf(std::move(x)));
    mask_patches[i] = binarize(tape.value(prob), imaging.binarize_threshold);
  });
  return reassemble_mask(mask_patches, grid);
}

DetectionResult run_detection(const UNetModel<float>& segmenter,
                              const TbVitModel<float>& classifier, const RasterImage& image,
                              const ImagingConfig& imaging, std::size_t threads) {
  DetectionResult result;
  result.grid = make_patch_grid(image.width, image.height, imaging.patch_side);
  result.predicted_mask = run_segmentation(segmenter, image, imaging, threads);
  result.regions = filter_regions_by_area(connected_components(result.predicted_mask),
                                          imaging.effective_min_area());
  const RasterImage covered =
      crop_image(image, result.grid.covered_width(), result.grid.covered_height());
  result.rois = extract_rois(covered, result.regions);
  const std::size_t roi_side = classifier.config().roi_side;
  parallel_for(result.rois.size(), threads, [&](std::size_t i) {
    ROI& roi = result.rois[i];
    Tensor<float> input = roi_to_input(roi.crop, roi_side);
    Tensor<float> batch({1, 3, roi_side, roi_side},
                        std::vector<float>(input.data().begin(), input.data().end()));
    Tape<float> tape;
    tape.set_grad_enabled(false);
    Var<float> probs = classifier.infer(tape, tape.leaf(std::move(batch)));
    const Tensor<float>& p = tape.value(probs);
    roi.score = static_cast<double>(p[1]);
    roi.predicted_label = p[1] > p[0] ? 1 : 0;
  });
  return result;
}

}  // namespace tb
