#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tbdetect/pipeline.hpp"

namespace tb {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

// Rates with zero denominators are reported as absent, never coerced to 0.
struct Rates {
  std::optional<double> accuracy, precision, recall, f1;
};

Rates rates(const ConfusionCounts& counts);
double f1_from_precision_recall(double precision, double recall);

// Set-overlap similarity of equally sized masks. Two empty masks compare as
// identical (1.0); the 0/0 case is defined that way because the sets are
// equal.
double jaccard(const BinaryMask& pred, const BinaryMask& truth);
double dice(const BinaryMask& pred, const BinaryMask& truth);

struct SegScores {
  double jaccard = 0.0;
  double dice = 0.0;
};

SegScores seg_scores(const BinaryMask& pred, const BinaryMask& truth);

// ROI-level detection tally. Pairs rois[i] with regions[i] (the filtered
// region list the ROIs were extracted from). An ROI counts as truly bacilli
// when at least `overlap_threshold` of its region's pixels lie on truth
// foreground; predictions come from roi.predicted_label. Ground-truth
// components that intersect no extracted region each add one false negative
// (a segmentation miss). Truth labels are written back onto the ROIs.
ConfusionCounts match_rois_to_truth(std::vector<ROI>& rois, const std::vector<Region>& regions,
                                    const BinaryMask& truth, double overlap_threshold = 0.5);

struct ImageDetection {
  std::string name;
  ConfusionCounts counts;
};

struct DetReport {
  ConfusionCounts counts;
  Rates metrics;
  std::vector<ImageDetection> per_image;
};

DetReport make_det_report(const std::vector<ImageDetection>& per_image);

}  // namespace tb
