#pragma once

#include <limits>
#include <string>
#include <vector>

#include "tbdetect/config.hpp"
#include "tbdetect/dataset.hpp"
#include "tbdetect/metrics.hpp"
#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

namespace tb {

// One record per completed epoch. Accuracy is pixel accuracy for the
// segmenter and classification accuracy for the classifier; lr is the rate
// in effect during the epoch.
struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0, lr = 0;
};

// Both callbacks track a metric where larger is better.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}

  // Returns true when training should halt.
  bool update(double metric) {
    if (metric >= best_ + min_delta_ || !seen_) {
      best_ = std::max(metric, seen_ ? best_ : metric);
      seen_ = true;
      since_ = 0;
      return false;
    }
    ++since_;
    return since_ >= patience_;
  }

  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return since_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = -std::numeric_limits<double>::infinity();
  bool seen_ = false;
  std::size_t since_ = 0;
};

class ReduceLrOnPlateau {
 public:
  ReduceLrOnPlateau(double factor, std::size_t patience, double min_lr, double min_delta = 0.0)
      : factor_(factor), patience_(patience), min_lr_(min_lr), min_delta_(min_delta) {}

  // Returns the learning rate to use next.
  double update(double metric, double current_lr) {
    if (metric >= best_ + min_delta_ || !seen_) {
      best_ = std::max(metric, seen_ ? best_ : metric);
      seen_ = true;
      since_ = 0;
      return current_lr;
    }
    ++since_;
    if (since_ >= patience_) {
      since_ = 0;
      return std::max(min_lr_, current_lr * factor_);
    }
    return current_lr;
  }

 private:
  double factor_;
  std::size_t patience_;
  double min_lr_;
  double min_delta_;
  double best_ = -std::numeric_limits<double>::infinity();
  bool seen_ = false;
  std::size_t since_ = 0;
};

struct CallbackState {
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::string checkpoint_path;
};

struct TrainResult {
  std::vector<EpochLog> logs;
  CallbackState best;  // metric: validation Jaccard (segmenter) / accuracy (classifier)
  bool stopped_early = false;
};

// Trains on the patch grid of every sample, minimizing pixelwise binary
// cross-entropy. Validation Jaccard drives early stopping, learning-rate
// reduction and best-checkpoint selection; the model is left holding the
// best-epoch parameters. checkpoint_dir may be empty to skip saving.
TrainResult train_segmenter(UNetModel<float>& model, const std::vector<Sample>& samples,
                            const TrainConfig& cfg, const ImagingConfig& imaging,
                            const std::string& checkpoint_dir);

struct LabeledRoi {
  RasterImage crop;
  int label = 0;  // 1 = bacilli
};

// Positives are the area-filtered truth components; negatives are an equal
// number of seeded background crops with the same size distribution and
// under 10% foreground overlap. Output order is deterministically shuffled.
std::vector<LabeledRoi> build_balanced_roi_set(const std::vector<Sample>& samples,
                                               const ImagingConfig& imaging, std::uint64_t seed);

// Trains the classifier with focal loss and adaptive class weights computed
// from the training-split label counts. Validation accuracy drives the
// callbacks; the model is left holding the best-epoch parameters.
TrainResult train_classifier(TbVitModel<float>& model, const std::vector<LabeledRoi>& rois,
                             const TrainConfig& cfg, const std::string& checkpoint_dir);

}  // namespace tb
