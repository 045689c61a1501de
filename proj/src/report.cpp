#include "tbdetect/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tb {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

using nlohmann::json;

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

json rate_json(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

void export_epoch_logs(const std::vector<EpochLog>& logs, const std::string& csv_path) {
  std::ofstream out = open_out(csv_path);
  out << "epoch,train_loss,train_acc,val_loss,val_acc,lr\n";
  for (const auto& l : logs) {
    out << l.epoch << ',' << format_double(l.train_loss) << ',' << format_double(l.train_acc)
        << ',' << format_double(l.val_loss) << ',' << format_double(l.val_acc) << ','
        << format_double(l.lr) << '\n';
  }
  if (!out) throw IoError("short write to " + csv_path);
}

std::vector<EpochLog> parse_epoch_logs(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open: " + csv_path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,train_acc,val_loss,val_acc,lr") {
    throw IoError("unexpected epoch-log header in " + csv_path);
  }
  std::vector<EpochLog> logs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochLog l;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    if (!(ss >> l.epoch >> l.train_loss >> l.train_acc >> l.val_loss >> l.val_acc >> l.lr)) {
      throw IoError("malformed epoch-log row in " + csv_path + ": " + line);
    }
    logs.push_back(l);
  }
  return logs;
}

void export_seg_scores(const std::vector<ImageSegScore>& per_image, const std::string& json_path,
                       const std::string& csv_path) {
  double mean_j = 0, mean_d = 0;
  json rows = json::array();
  for (const auto& r : per_image) {
    mean_j += r.scores.jaccard;
    mean_d += r.scores.dice;
    rows.push_back({{"name", r.name}, {"jaccard", r.scores.jaccard}, {"dice", r.scores.dice}});
  }
  const double n = per_image.empty() ? 1.0 : static_cast<double>(per_image.size());
  mean_j /= n;
  mean_d /= n;
  {
    std::ofstream out = open_out(json_path);
    json j = {{"per_image", rows}, {"mean_jaccard", mean_j}, {"mean_dice", mean_d}};
    out << j.dump(2) << "\n";
  }
  std::ofstream out = open_out(csv_path);
  out << "name,jaccard,dice\n";
  for (const auto& r : per_image) {
    out << r.name << ',' << format_double(r.scores.jaccard) << ','
        << format_double(r.scores.dice) << '\n';
  }
  out << "mean," << format_double(mean_j) << ',' << format_double(mean_d) << '\n';
}

std::vector<ImageSegScore> parse_seg_scores(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open: " + json_path);
  json j;
  in >> j;
  std::vector<ImageSegScore> out;
  for (const auto& e : j.at("per_image")) {
    out.push_back(ImageSegScore{e.at("name").get<std::string>(),
                                SegScores{e.at("jaccard").get<double>(),
                                          e.at("dice").get<double>()}});
  }
  return out;
}

void export_det_report(const DetReport& report, const nlohmann::json& config_used,
                       const std::string& json_path, const std::string& csv_path) {
  json per_image = json::array();
  for (const auto& d : report.per_image) {
    per_image.push_back({{"name", d.name},
                         {"tp", d.counts.tp},
                         {"tn", d.counts.tn},
                         {"fp", d.counts.fp},
                         {"fn", d.counts.fn}});
  }
  json j = {{"counts",
             {{"tp", report.counts.tp},
              {"tn", report.counts.tn},
              {"fp", report.counts.fp},
              {"fn", report.counts.fn}}},
            {"metrics",
             {{"accuracy", rate_json(report.metrics.accuracy)},
              {"precision", rate_json(report.metrics.precision)},
              {"recall", rate_json(report.metrics.recall)},
              {"f1", rate_json(report.metrics.f1)}}},
            {"per_image", per_image},
            {"config", config_used}};
  {
    std::ofstream out = open_out(json_path);
    out << j.dump(2) << "\n";
  }
  std::ofstream out = open_out(csv_path);
  out << "tp,tn,fp,fn,accuracy,precision,recall,f1\n";
  const auto cell = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  out << report.counts.tp << ',' << report.counts.tn << ',' << report.counts.fp << ','
      << report.counts.fn << ',' << cell(report.metrics.accuracy) << ','
      << cell(report.metrics.precision) << ',' << cell(report.metrics.recall) << ','
      << cell(report.metrics.f1) << '\n';
}

DetReport parse_det_report(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open: " + json_path);
  json j;
  in >> j;
  DetReport report;
  const json& c = j.at("counts");
  report.counts = ConfusionCounts{c.at("tp").get<std::size_t>(), c.at("tn").get<std::size_t>(),
                                  c.at("fp").get<std::size_t>(), c.at("fn").get<std::size_t>()};
  const json& m = j.at("metrics");
  const auto opt = [&](const char* key) -> std::optional<double> {
    if (m.at(key).is_null()) return std::nullopt;
    return m.at(key).get<double>();
  };
  report.metrics.accuracy = opt("accuracy");
  report.metrics.precision = opt("precision");
  report.metrics.recall = opt("recall");
  report.metrics.f1 = opt("f1");
  for (const auto& e : j.at("per_image")) {
    report.per_image.push_back(
        ImageDetection{e.at("name").get<std::string>(),
                       ConfusionCounts{e.at("tp").get<std::size_t>(),
                                       e.at("tn").get<std::size_t>(),
                                       e.at("fp").get<std::size_t>(),
                                       e.at("fn").get<std::size_t>()}});
  }
  return report;
}

}  // namespace tb
