#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "tbdetect/metrics.hpp"
#include "tbdetect/train.hpp"

namespace tb {

// File exports are byte-stable: fixed field order, doubles printed with
// enough digits to parse back exactly.

// CSV header: epoch,train_loss,train_acc,val_loss,val_acc,lr
void export_epoch_logs(const std::vector<EpochLog>& logs, const std::string& csv_path);
std::vector<EpochLog> parse_epoch_logs(const std::string& csv_path);

struct ImageSegScore {
  std::string name;
  SegScores scores;
};

// JSON detail plus a CSV summary (name,jaccard,dice with a final mean row).
void export_seg_scores(const std::vector<ImageSegScore>& per_image, const std::string& json_path,
                       const std::string& csv_path);
std::vector<ImageSegScore> parse_seg_scores(const std::string& json_path);

// JSON detail (counts, metrics, per-image breakdown, configuration used)
// plus a one-row CSV summary. Undefined rates serialize as null / empty.
void export_det_report(const DetReport& report, const nlohmann::json& config_used,
                       const std::string& json_path, const std::string& csv_path);
DetReport parse_det_report(const std::string& json_path);

std::string format_double(double v);

}  // namespace tb
