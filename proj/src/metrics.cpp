#include "tbdetect/metrics.hpp"

namespace tb {

Rates rates(const ConfusionCounts& c) {
  Rates r;
  const std::size_t total = c.total();
  if (total > 0) {
    r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
  }
  if (c.tp + c.fp > 0) {
    r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  }
  if (c.tp + c.fn > 0) {
    r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  }
  if (r.precision && r.recall && (*r.precision + *r.recall) > 0.0) {
    r.f1 = f1_from_precision_recall(*r.precision, *r.recall);
  }
  return r;
}

double f1_from_precision_recall(double precision, double recall) {
  return 2.0 * precision * recall / (precision + recall);
}

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.width != b.width || a.height != b.height) {
    throw ContractViolation(std::string(op) + " mask dimension mismatch: " +
                            std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                            std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

struct Overlap {
  std::size_t inter = 0, a = 0, b = 0;
};

Overlap overlap_counts(const BinaryMask& pred, const BinaryMask& truth) {
  Overlap o;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    o.inter += pred.bits[i] & truth.bits[i];
    o.a += pred.bits[i];
    o.b += truth.bits[i];
  }
  return o;
}

}  // namespace

double jaccard(const BinaryMask& pred, const BinaryMask& truth) {
  require_same_dims(pred, truth, "jaccard");
  const Overlap o = overlap_counts(pred, truth);
  const std::size_t uni = o.a + o.b - o.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dice(const BinaryMask& pred, const BinaryMask& truth) {
  require_same_dims(pred, truth, "dice");
  const Overlap o = overlap_counts(pred, truth);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.a + o.b);
}

SegScores seg_scores(const BinaryMask& pred, const BinaryMask& truth) {
  return SegScores{jaccard(pred, truth), dice(pred, truth)};
}

ConfusionCounts match_rois_to_truth(std::vector<ROI>& rois, const std::vector<Region>& regions,
                                    const BinaryMask& truth, double overlap_threshold) {
  if (rois.size() != regions.size()) {
    throw ContractViolation("match_rois_to_truth: " + std::to_string(rois.size()) +
                            " rois but " + std::to_string(regions.size()) + " regions");
  }
  ConfusionCounts counts;
  // footprint of all extracted regions, for the missed-component rule
  BinaryMask covered(truth.width == 0 ? 1 : truth.width, truth.height == 0 ? 1 : truth.height);
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const Region& region = regions[i];
    if (region.area == 0) throw ContractViolation("match_rois_to_truth: empty region");
    std::size_t on_truth = 0;
    for (const Run& run : region.runs) {
      if (run.y >= truth.height || run.x0 + run.len > truth.width) {
        throw ContractViolation("match_rois_to_truth: region extends outside the truth mask; "
                                "masks are misaligned");
      }
      const std::uint8_t* row = truth.bits.data() + run.y * truth.width;
      std::uint8_t* cov = covered.bits.data() + run.y * covered.width;
      for (std::size_t k = 0; k < run.len; ++k) {
        on_truth += row[run.x0 + k];
        cov[run.x0 + k] = 1;
      }
    }
    const double frac = static_cast<double>(on_truth) / static_cast<double>(region.area);
    const int truth_label = frac >= overlap_threshold ? 1 : 0;
    rois[i].truth_label = truth_label;
    if (!rois[i].predicted_label.has_value()) {
      throw ContractViolation("match_rois_to_truth: roi " + std::to_string(i) +
                              " has no predicted label");
    }
    const int pred = *rois[i].predicted_label;
    if (truth_label == 1 && pred == 1) ++counts.tp;
    if (truth_label == 1 && pred == 0) ++counts.fn;
    if (truth_label == 0 && pred == 1) ++counts.fp;
    if (truth_label == 0 && pred == 0) ++counts.tn;
  }
  // every ground-truth component untouched by any extracted region is a miss
  for (const Region& comp : connected_components(truth)) {
    bool touched = false;
    for (const Run& run : comp.runs) {
      const std::uint8_t* cov = covered.bits.data() + run.y * covered.width;
      for (std::size_t k = 0; k < run.len && !touched; ++k) touched = cov[run.x0 + k] != 0;
      if (touched) break;
    }
    if (!touched) ++counts.fn;
  }
  return counts;
}

DetReport make_det_report(const std::vector<ImageDetection>& per_image) {
  DetReport report;
  report.per_image = per_image;
  for (const auto& d : per_image) report.counts += d.counts;
  report.metrics = rates(report.counts);
  return report;
}

}  // namespace tb
