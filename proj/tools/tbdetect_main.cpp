// Command-line front end: synthetic data generation, training, segmentation,
// end-to-end detection, evaluation, the Otsu baseline and the gradient-check
// suite. All randomness flows from --seed (or the config file).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "tbdetect/checkpoint.hpp"
#include "tbdetect/config.hpp"
#include "tbdetect/dataset.hpp"
#include "tbdetect/detect.hpp"
#include "tbdetect/gradcheck.hpp"
#include "tbdetect/report.hpp"
#include "tbdetect/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tb;

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

PipelineConfig resolve_config(const CommonOpts& opts) {
  PipelineConfig cfg;
  if (!opts.config_path.empty()) cfg = load_pipeline_config(opts.config_path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.synth.seed = *opts.seed;
    cfg.train_seg.seed = *opts.seed;
    cfg.train_cls.seed = *opts.seed;
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Pipeline configuration file (JSON)");
  cmd->add_option("--seed", opts.seed, "Master random seed (overrides the config)");
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string rate_str(const std::optional<double>& v) {
  return v ? fmt4(*v) : std::string("undefined");
}

int run_synth_gen(const CommonOpts& common, const std::string& out_dir, std::size_t train_count,
                  std::size_t test_count) {
  PipelineConfig cfg = resolve_config(common);
  const DatasetManifest manifest =
      generate_synth_dataset(cfg.synth, train_count, test_count, out_dir);
  std::cout << "wrote " << manifest.samples.size() << " image/mask pairs under " << out_dir
            << " (train " << train_count << ", test " << test_count << ")\n";
  return 0;
}

int run_train_seg(const CommonOpts& common, const std::string& data, const std::string& out) {
  PipelineConfig cfg = resolve_config(common);
  const auto samples = filter_split(load_dataset(read_manifest(data)), "train");
  if (samples.empty()) throw IoError("no train-split samples in " + data);
  UNetModel<float> model(cfg.unet, SplitMix64::derive(cfg.seed, 11).next_u64());
  const TrainResult result = train_segmenter(model, samples, cfg.train_seg, cfg.imaging, out);
  export_epoch_logs(result.logs, out + "/logs.csv");
  save_pipeline_config(cfg, out + "/pipeline_config.json");
  std::cout << "trained " << result.logs.size() << " epochs"
            << (result.stopped_early ? " (stopped early)" : "") << "; best val jaccard "
            << fmt4(result.best.best_metric) << " at epoch " << result.best.best_epoch
            << "; checkpoint in " << out << "\n";
  return 0;
}

int run_train_cls(const CommonOpts& common, const std::string& data, const std::string& out) {
  PipelineConfig cfg = resolve_config(common);
  const auto samples = filter_split(load_dataset(read_manifest(data)), "train");
  if (samples.empty()) throw IoError("no train-split samples in " + data);
  const auto rois = build_balanced_roi_set(samples, cfg.imaging, cfg.seed);
  TbVitModel<float> model(cfg.vit, SplitMix64::derive(cfg.seed, 13).next_u64());
  const TrainResult result = train_classifier(model, rois, cfg.train_cls, out);
  export_epoch_logs(result.logs, out + "/logs.csv");
  save_pipeline_config(cfg, out + "/pipeline_config.json");
  std::cout << "trained " << result.logs.size() << " epochs on " << rois.size() << " rois"
            << (result.stopped_early ? " (stopped early)" : "") << "; best val accuracy "
            << fmt4(result.best.best_metric) << " at epoch " << result.best.best_epoch
            << "; checkpoint in " << out << "\n";
  return 0;
}

int run_segment(const CommonOpts& common, const std::string& model_dir, const std::string& image,
                const std::string& out, std::optional<std::size_t> patch_side,
                std::optional<double> threshold, std::size_t threads) {
  PipelineConfig cfg = resolve_config(common);
  if (patch_side) cfg.imaging.patch_side = *patch_side;
  if (threshold) cfg.imaging.binarize_threshold = *threshold;
  const UNetModel<float> model = load_unet_checkpoint(model_dir);
  const RasterImage img = read_ppm(image);
  const BinaryMask mask = run_segmentation(model, img, cfg.imaging, threads);
  write_pgm(mask, out);
  std::cout << "segmented " << image << " -> " << out << " (" << mask.foreground_count()
            << " foreground pixels)\n";
  return 0;
}

int run_detect(const CommonOpts& common, const std::string& seg_dir, const std::string& cls_dir,
               const std::string& image, const std::string& out_dir,
               std::optional<std::size_t> patch_side, std::optional<double> min_area,
               std::optional<double> threshold, std::size_t threads) {
  PipelineConfig cfg = resolve_config(common);
  if (patch_side) cfg.imaging.patch_side = *patch_side;
  if (min_area) cfg.imaging.min_area_at_256 = *min_area;
  if (threshold) cfg.imaging.binarize_threshold = *threshold;
  const UNetModel<float> seg = load_unet_checkpoint(seg_dir);
  const TbVitModel<float> cls = load_tbvit_checkpoint(cls_dir);
  const RasterImage img = read_ppm(image);
  const DetectionResult det = run_detection(seg, cls, img, cfg.imaging, threads);

  fs::create_directories(out_dir);
  write_pgm(det.predicted_mask, out_dir + "/mask.pgm");
  const RasterImage covered =
      crop_image(img, det.grid.covered_width(), det.grid.covered_height());
  write_ppm(overlay_render(covered, det.rois), out_dir + "/overlay.ppm");

  nlohmann::json rois = nlohmann::json::array();
  std::size_t bacilli = 0;
  for (std::size_t i = 0; i < det.rois.size(); ++i) {
    const auto& roi = det.rois[i];
    bacilli += roi.predicted_label.value_or(0) == 1;
    rois.push_back({{"bbox", {roi.bbox.x_min, roi.bbox.y_min, roi.bbox.x_max, roi.bbox.y_max}},
                    {"area", det.regions[i].area},
                    {"predicted_label", roi.predicted_label.value_or(0)},
                    {"score", roi.score.value_or(0.0)}});
  }
  nlohmann::json report = {{"image", image},
                           {"patch_grid", {{"cols", det.grid.cols}, {"rows", det.grid.rows}}},
                           {"roi_count", det.rois.size()},
                           {"predicted_bacilli", bacilli},
                           {"rois", rois},
                           {"config", to_json(cfg)}};
  std::ofstream json_out(out_dir + "/report.json");
  if (!json_out) throw IoError("cannot open for writing: " + out_dir + "/report.json");
  json_out << report.dump(2) << "\n";
  std::cout << "detected " << bacilli << " bacilli among " << det.rois.size()
            << " rois; outputs in " << out_dir << "\n";
  return 0;
}

int run_eval_seg(const std::string& pred, const std::string& truth,
                 const std::string& out_prefix) {
  std::vector<ImageSegScore> scores;
  if (fs::is_directory(pred) && fs::is_directory(truth)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(pred)) {
      if (e.path().extension() == ".pgm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const fs::path t = fs::path(truth) / f.filename();
      if (!fs::exists(t)) throw IoError("missing truth mask: " + t.string());
      scores.push_back(ImageSegScore{f.stem().string(),
                                     seg_scores(read_pgm(f.string()), read_pgm(t.string()))});
    }
    if (scores.empty()) throw IoError("no .pgm masks found in " + pred);
  } else {
    scores.push_back(ImageSegScore{fs::path(pred).stem().string(),
                                   seg_scores(read_pgm(pred), read_pgm(truth))});
  }
  double mj = 0, md = 0;
  for (const auto& s : scores) {
    mj += s.scores.jaccard;
    md += s.scores.dice;
  }
  mj /= static_cast<double>(scores.size());
  md /= static_cast<double>(scores.size());
  std::cout << "jaccard=" << fmt4(mj) << " dice=" << fmt4(md) << " (" << scores.size()
            << (scores.size() == 1 ? " pair" : " pairs") << ")\n";
  if (!out_prefix.empty()) {
    export_seg_scores(scores, out_prefix + ".json", out_prefix + ".csv");
  }
  return 0;
}

int run_eval_det(const CommonOpts& common, const std::string& data, const std::string& seg_dir,
                 const std::string& cls_dir, const std::string& out_dir, const std::string& split,
                 std::size_t threads) {
  PipelineConfig cfg = resolve_config(common);
  const auto samples = filter_split(load_dataset(read_manifest(data)), split);
  if (samples.empty()) throw IoError("no '" + split + "'-split samples in " + data);
  const UNetModel<float> seg = load_unet_checkpoint(seg_dir);
  const TbVitModel<float> cls = load_tbvit_checkpoint(cls_dir);
  std::vector<ImageDetection> per_image;
  std::vector<ImageSegScore> seg_per_image;
  for (const auto& sample : samples) {
    DetectionResult det = run_detection(seg, cls, sample.image, cfg.imaging, threads);
    const BinaryMask truth =
        crop_mask(sample.mask, det.grid.covered_width(), det.grid.covered_height());
    const ConfusionCounts counts =
        match_rois_to_truth(det.rois, det.regions, truth, cfg.imaging.roi_overlap_threshold);
    per_image.push_back(ImageDetection{sample.name, counts});
    seg_per_image.push_back(ImageSegScore{sample.name, seg_scores(det.predicted_mask, truth)});
  }
  const DetReport report = make_det_report(per_image);
  fs::create_directories(out_dir);
  export_det_report(report, to_json(cfg), out_dir + "/report.json", out_dir + "/report.csv");
  export_seg_scores(seg_per_image, out_dir + "/seg_scores.json", out_dir + "/seg_scores.csv");
  std::cout << "tp=" << report.counts.tp << " tn=" << report.counts.tn
            << " fp=" << report.counts.fp << " fn=" << report.counts.fn
            << " accuracy=" << rate_str(report.metrics.accuracy)
            << " precision=" << rate_str(report.metrics.precision)
            << " recall=" << rate_str(report.metrics.recall)
            << " f1=" << rate_str(report.metrics.f1) << "\n";
  return 0;
}

int run_baseline_otsu(const CommonOpts& common, const std::string& image,
                      const std::string& truth, const std::string& out, bool light_foreground) {
  PipelineConfig cfg = resolve_config(common);
  const RasterImage img = read_ppm(image);
  int threshold = 0;
  const bool dark = light_foreground ? false : cfg.imaging.otsu_dark_foreground;
  const BinaryMask mask = otsu_threshold(img, dark, &threshold);
  if (!out.empty()) write_pgm(mask, out);
  std::cout << "otsu threshold=" << threshold << " foreground=" << mask.foreground_count()
            << " pixels\n";
  if (!truth.empty()) {
    const SegScores s = seg_scores(mask, read_pgm(truth));
    std::cout << "jaccard=" << fmt4(s.jaccard) << " dice=" << fmt4(s.dice) << "\n";
  }
  return 0;
}

int run_gradcheck(std::size_t seeds, double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(seeds, tolerance);
  for (const auto& c : cases) {
    std::printf("%-24s %s  max_rel_err=%.3e  coords=%zu\n", c.name.c_str(),
                c.result.passed ? "PASS" : "FAIL", c.result.max_rel_err,
                c.result.coords_checked);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool ok = all_passed(cases);
  std::printf("%zu checks over %zu seeds in %.1fs: %s\n", cases.size(), seeds, secs,
              ok ? "all passed" : "FAILURES");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage bacilli detection: attention residual U-Net segmentation followed by "
               "transformer ROI classification"};
  app.require_subcommand(1);

  CommonOpts synth_common;
  std::string synth_out;
  std::size_t train_count = 40, test_count = 10;
  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic labeled dataset");
  add_common(synth, synth_common);
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--train-count", train_count, "Training images to generate");
  synth->add_option("--test-count", test_count, "Test images to generate");

  CommonOpts tseg_common;
  std::string tseg_data, tseg_out;
  auto* tseg = app.add_subcommand("train-seg", "Train the segmentation network");
  add_common(tseg, tseg_common);
  tseg->add_option("--data", tseg_data, "Dataset manifest (JSON)")->required();
  tseg->add_option("--out", tseg_out, "Checkpoint/output directory")->required();

  CommonOpts tcls_common;
  std::string tcls_data, tcls_out;
  auto* tcls = app.add_subcommand("train-cls", "Train the ROI classifier");
  add_common(tcls, tcls_common);
  tcls->add_option("--data", tcls_data, "Dataset manifest (JSON)")->required();
  tcls->add_option("--out", tcls_out, "Checkpoint/output directory")->required();

  CommonOpts seg_common;
  std::string seg_model, seg_image, seg_out;
  std::optional<std::size_t> seg_patch;
  std::optional<double> seg_thresh;
  std::size_t seg_threads = 1;
  auto* seg = app.add_subcommand("segment", "Segment one image into a foreground mask");
  add_common(seg, seg_common);
  seg->add_option("--model", seg_model, "Segmenter checkpoint directory")->required();
  seg->add_option("--image", seg_image, "Input image (PPM)")->required();
  seg->add_option("--out", seg_out, "Output mask (PGM)")->required();
  seg->add_option("--patch-side", seg_patch, "Tile size in pixels");
  seg->add_option("--threshold", seg_thresh, "Binarization threshold");
  seg->add_option("--threads", seg_threads, "Worker threads for per-patch inference");

  CommonOpts det_common;
  std::string det_seg, det_cls, det_image, det_out;
  std::optional<std::size_t> det_patch;
  std::optional<double> det_min_area, det_thresh;
  std::size_t det_threads = 1;
  auto* det = app.add_subcommand("detect", "Run the full detection pipeline on one image");
  add_common(det, det_common);
  det->add_option("--seg-model", det_seg, "Segmenter checkpoint directory")->required();
  det->add_option("--cls-model", det_cls, "Classifier checkpoint directory")->required();
  det->add_option("--image", det_image, "Input image (PPM)")->required();
  det->add_option("--out", det_out, "Output directory")->required();
  det->add_option("--patch-side", det_patch, "Tile size in pixels");
  det->add_option("--min-area", det_min_area, "Region area threshold at 256-pixel patch scale");
  det->add_option("--threshold", det_thresh, "Binarization threshold");
  det->add_option("--threads", det_threads, "Worker threads");

  std::string es_pred, es_truth, es_out;
  auto* eseg = app.add_subcommand("eval-seg", "Jaccard/Dice between predicted and truth masks");
  eseg->add_option("--pred", es_pred, "Predicted mask (PGM) or directory")->required();
  eseg->add_option("--truth", es_truth, "Ground-truth mask (PGM) or directory")->required();
  eseg->add_option("--out", es_out, "Write <out>.json and <out>.csv score files");

  CommonOpts ed_common;
  std::string ed_data, ed_seg, ed_cls, ed_out = "eval_det", ed_split = "test";
  std::size_t ed_threads = 1;
  auto* edet = app.add_subcommand("eval-det", "ROI-level detection metrics over a dataset split");
  add_common(edet, ed_common);
  edet->add_option("--data", ed_data, "Dataset manifest (JSON)")->required();
  edet->add_option("--seg-model", ed_seg, "Segmenter checkpoint directory")->required();
  edet->add_option("--cls-model", ed_cls, "Classifier checkpoint directory")->required();
  edet->add_option("--out", ed_out, "Output directory");
  edet->add_option("--split", ed_split, "Dataset split to evaluate");
  edet->add_option("--threads", ed_threads, "Worker threads");

  CommonOpts ot_common;
  std::string ot_image, ot_truth, ot_out;
  bool ot_light = false;
  auto* otsu = app.add_subcommand("baseline-otsu", "Otsu-threshold baseline segmentation");
  add_common(otsu, ot_common);
  otsu->add_option("--image", ot_image, "Input image (PPM)")->required();
  otsu->add_option("--truth", ot_truth, "Optional truth mask for scoring");
  otsu->add_option("--out", ot_out, "Output mask (PGM)");
  otsu->add_flag("--light-foreground", ot_light, "Mark the lighter class as foreground");

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference verification of every primitive");
  gc->add_option("--seeds", gc_seeds, "Number of deterministic seeds");
  gc->add_option("--tolerance", gc_tol, "Maximum allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return run_synth_gen(synth_common, synth_out, train_count, test_count);
    if (*tseg) return run_train_seg(tseg_common, tseg_data, tseg_out);
    if (*tcls) return run_train_cls(tcls_common, tcls_data, tcls_out);
    if (*seg) {
      return run_segment(seg_common, seg_model, seg_image, seg_out, seg_patch, seg_thresh,
                         seg_threads);
    }
    if (*det) {
      return run_detect(det_common, det_seg, det_cls, det_image, det_out, det_patch, det_min_area,
                        det_thresh, det_threads);
    }
    if (*eseg) return run_eval_seg(es_pred, es_truth, es_out);
    if (*edet) {
      return run_eval_det(ed_common, ed_data, ed_seg, ed_cls, ed_out, ed_split, ed_threads);
    }
    if (*otsu) return run_baseline_otsu(ot_common, ot_image, ot_truth, ot_out, ot_light);
    if (*gc) return run_gradcheck(gc_seeds, gc_tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
