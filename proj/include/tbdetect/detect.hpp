#pragma once

#include "tbdetect/config.hpp"
#include "tbdetect/pipeline.hpp"
#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

namespace tb {

struct DetectionResult {
  PatchGrid grid;
  BinaryMask predicted_mask;    // reassembled over the grid-covered area
  std::vector<Region> regions;  // area-filtered components of the mask
  std::vector<ROI> rois;        // predicted labels and scores filled in
};

// Tiles the image, segments each patch in infer mode, reassembles and
// binarizes. Patches are independent, so `threads` > 1 changes nothing but
// wall time.
BinaryMask run_segmentation(const UNetModel<float>& segmenter, const RasterImage& image,
                            const ImagingConfig& imaging, std::size_t threads = 1);

// Full pipeline: tile -> segment -> reassemble -> components -> area filter
// -> ROI crops -> classify.
DetectionResult run_detection(const UNetModel<float>& segmenter,
                              const TbVitModel<float>& classifier, const RasterImage& image,
                              const ImagingConfig& imaging, std::size_t threads = 1);

}  // namespace tb
