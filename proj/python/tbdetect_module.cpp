// Python bindings over the core pipeline: synthetic scenes, tiling, Otsu,
// connected components, metrics, focal loss, training and detection.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tbdetect/checkpoint.hpp"
#include "tbdetect/config.hpp"
#include "tbdetect/dataset.hpp"
#include "tbdetect/detect.hpp"
#include "tbdetect/gradcheck.hpp"
#include "tbdetect/report.hpp"
#include "tbdetect/train.hpp"

namespace py = pybind11;
using namespace tb;

namespace {

RasterImage image_from_array(const py::array_t<std::uint8_t>& arr) {
  const auto buf = arr.request();
  if (buf.ndim != 3 || buf.shape[2] != 3) {
    throw ContractViolation("image array must have shape [H,W,3]");
  }
  RasterImage img(static_cast<std::size_t>(buf.shape[1]),
                  static_cast<std::size_t>(buf.shape[0]));
  const auto view = arr.unchecked<3>();
  for (py::ssize_t y = 0; y < buf.shape[0]; ++y) {
    for (py::ssize_t x = 0; x < buf.shape[1]; ++x) {
      for (py::ssize_t c = 0; c < 3; ++c) {
        img.data[3 * (static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) +
                 static_cast<std::size_t>(c)] = view(y, x, c);
      }
    }
  }
  return img;
}

py::array_t<std::uint8_t> image_to_array(const RasterImage& img) {
  py::array_t<std::uint8_t> arr({img.height, img.width, std::size_t(3)});
  std::copy(img.data.begin(), img.data.end(), arr.mutable_data());
  return arr;
}

BinaryMask mask_from_array(const py::array_t<std::uint8_t>& arr) {
  const auto buf = arr.request();
  if (buf.ndim != 2) throw ContractViolation("mask array must have shape [H,W]");
  BinaryMask mask(static_cast<std::size_t>(buf.shape[1]),
                  static_cast<std::size_t>(buf.shape[0]));
  const auto view = arr.unchecked<2>();
  for (py::ssize_t y = 0; y < buf.shape[0]; ++y) {
    for (py::ssize_t x = 0; x < buf.shape[1]; ++x) {
      mask.bits[static_cast<std::size_t>(y) * mask.width + static_cast<std::size_t>(x)] =
          view(y, x) ? 1 : 0;
    }
  }
  return mask;
}

py::array_t<std::uint8_t> mask_to_array(const BinaryMask& mask) {
  py::array_t<std::uint8_t> arr({mask.height, mask.width});
  std::copy(mask.bits.begin(), mask.bits.end(), arr.mutable_data());
  return arr;
}

py::dict rates_dict(const Rates& r) {
  py::dict d;
  d["accuracy"] = r.accuracy ? py::object(py::float_(*r.accuracy)) : py::none();
  d["precision"] = r.precision ? py::object(py::float_(*r.precision)) : py::none();
  d["recall"] = r.recall ? py::object(py::float_(*r.recall)) : py::none();
  d["f1"] = r.f1 ? py::object(py::float_(*r.f1)) : py::none();
  return d;
}

PipelineConfig config_from_json_str(const std::string& config_json) {
  if (config_json.empty()) return PipelineConfig{};
  return pipeline_config_from_json(nlohmann::json::parse(config_json));
}

}  // namespace

PYBIND11_MODULE(tbdetect, m) {
  m.doc() = "Bacilli detection pipeline: attention residual U-Net segmentation plus "
            "transformer ROI classification over a self-contained autodiff core";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  m.def(
      "generate_scene",
      [](std::size_t size, std::uint64_t seed, std::uint64_t image_index) {
        SynthConfig cfg;
        cfg.image_size = size;
        cfg.seed = seed;
        const SynthScene scene = synth_generate(cfg, image_index);
        py::list rods;
        for (const auto& r : scene.rods) {
          py::dict d;
          d["area"] = r.area;
          d["bbox"] = py::make_tuple(r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max);
          rods.append(d);
        }
        return py::make_tuple(image_to_array(scene.image), mask_to_array(scene.mask), rods);
      },
      py::arg("size") = 256, py::arg("seed") = 0, py::arg("image_index") = 0,
      "Render one synthetic smear scene; returns (image, mask, rods)");

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, std::size_t train_count, std::size_t test_count,
         std::size_t size, std::uint64_t seed) {
        SynthConfig cfg;
        cfg.image_size = size;
        cfg.seed = seed;
        const DatasetManifest manifest =
            generate_synth_dataset(cfg, train_count, test_count, out_dir);
        return out_dir + "/manifest.json";
      },
      py::arg("out_dir"), py::arg("train_count") = 8, py::arg("test_count") = 2,
      py::arg("size") = 256, py::arg("seed") = 0,
      "Write a synthetic dataset and return the manifest path");

  m.def(
      "patch_grid",
      [](std::size_t width, std::size_t height, std::size_t patch_side) {
        const PatchGrid g = make_patch_grid(width, height, patch_side);
        return py::make_tuple(g.cols, g.rows);
      },
      py::arg("width"), py::arg("height"), py::arg("patch_side"),
      "Tiling grid (cols, rows); right/bottom remainders are excluded");

  m.def(
      "otsu",
      [](const py::array_t<std::uint8_t>& image, bool dark_foreground) {
        int threshold = 0;
        const BinaryMask mask =
            otsu_threshold(image_from_array(image), dark_foreground, &threshold);
        return py::make_tuple(mask_to_array(mask), threshold);
      },
      py::arg("image"), py::arg("dark_foreground") = true,
      "Otsu baseline segmentation; returns (mask, threshold)");

  m.def(
      "connected_regions",
      [](const py::array_t<std::uint8_t>& mask) {
        py::list out;
        for (const auto& r : connected_components(mask_from_array(mask))) {
          py::dict d;
          d["id"] = r.id;
          d["area"] = r.area;
          d["bbox"] = py::make_tuple(r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max);
          out.append(d);
        }
        return out;
      },
      py::arg("mask"), "8-connected components ordered by first row-major pixel");

  m.def(
      "jaccard",
      [](const py::array_t<std::uint8_t>& pred, const py::array_t<std::uint8_t>& truth) {
        return jaccard(mask_from_array(pred), mask_from_array(truth));
      },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "dice",
      [](const py::array_t<std::uint8_t>& pred, const py::array_t<std::uint8_t>& truth) {
        return dice(mask_from_array(pred), mask_from_array(truth));
      },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "rates",
      [](std::size_t tp, std::size_t tn, std::size_t fp, std::size_t fn) {
        return rates_dict(rates(ConfusionCounts{tp, tn, fp, fn}));
      },
      py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"),
      "Accuracy/precision/recall/F1; undefined rates come back as None");

  m.def(
      "focal_loss_value",
      [](const py::array_t<double>& probs, const std::vector<int>& labels, double gamma,
         double w0, double w1) {
        const auto buf = probs.request();
        if (buf.ndim != 2 || buf.shape[1] != 2) {
          throw ContractViolation("probs must have shape [N,2]");
        }
        const auto view = probs.unchecked<2>();
        Tensor<double> t({static_cast<std::size_t>(buf.shape[0]), 2});
        for (py::ssize_t i = 0; i < buf.shape[0]; ++i) {
          t[2 * static_cast<std::size_t>(i)] = view(i, 0);
          t[2 * static_cast<std::size_t>(i) + 1] = view(i, 1);
        }
        Tape<double> tape;
        Var<double> loss = ops::focal_mean(tape.leaf(std::move(t)), labels, gamma,
                                           std::vector<double>{w0, w1});
        return tape.value(loss)[0];
      },
      py::arg("probs"), py::arg("labels"), py::arg("gamma") = 2.0, py::arg("w0") = 1.0,
      py::arg("w1") = 1.0);

  m.def("adaptive_class_weights",
        [](std::size_t count0, std::size_t count1) {
          const auto w = adaptive_class_weights(count0, count1);
          return py::make_tuple(w[0], w[1]);
        },
        py::arg("count0"), py::arg("count1"));

  m.def(
      "grad_check_suite",
      [](std::size_t seeds, double tolerance) {
        py::list out;
        for (const auto& c : run_gradcheck_suite(seeds, tolerance)) {
          py::dict d;
          d["name"] = c.name;
          d["passed"] = c.result.passed;
          d["max_rel_err"] = c.result.max_rel_err;
          out.append(d);
        }
        return out;
      },
      py::arg("seeds") = 3, py::arg("tolerance") = 1e-4,
      "Finite-difference verification of every differentiable primitive and both models");

  m.def(
      "train_segmenter",
      [](const std::string& manifest_path, const std::string& out_dir,
         const std::string& config_json) {
        PipelineConfig cfg = config_from_json_str(config_json);
        const auto samples = filter_split(load_dataset(read_manifest(manifest_path)), "train");
        UNetModel<float> model(cfg.unet, SplitMix64::derive(cfg.seed, 11).next_u64());
        const TrainResult r = train_segmenter(model, samples, cfg.train_seg, cfg.imaging, out_dir);
        export_epoch_logs(r.logs, out_dir + "/logs.csv");
        py::dict d;
        d["epochs"] = r.logs.size();
        d["best_val_jaccard"] = r.best.best_metric;
        d["best_epoch"] = r.best.best_epoch;
        d["checkpoint"] = out_dir;
        return d;
      },
      py::arg("manifest_path"), py::arg("out_dir"), py::arg("config_json") = "");

  m.def(
      "train_classifier",
      [](const std::string& manifest_path, const std::string& out_dir,
         const std::string& config_json) {
        PipelineConfig cfg = config_from_json_str(config_json);
        const auto samples = filter_split(load_dataset(read_manifest(manifest_path)), "train");
        const auto rois = build_balanced_roi_set(samples, cfg.imaging, cfg.seed);
        TbVitModel<float> model(cfg.vit, SplitMix64::derive(cfg.seed, 13).next_u64());
        const TrainResult r = train_classifier(model, rois, cfg.train_cls, out_dir);
        export_epoch_logs(r.logs, out_dir + "/logs.csv");
        py::dict d;
        d["epochs"] = r.logs.size();
        d["best_val_accuracy"] = r.best.best_metric;
        d["best_epoch"] = r.best.best_epoch;
        d["roi_count"] = rois.size();
        d["checkpoint"] = out_dir;
        return d;
      },
      py::arg("manifest_path"), py::arg("out_dir"), py::arg("config_json") = "");

  m.def(
      "segment_image",
      [](const std::string& checkpoint_dir, const py::array_t<std::uint8_t>& image,
         const std::string& config_json) {
        const PipelineConfig cfg = config_from_json_str(config_json);
        const UNetModel<float> model = load_unet_checkpoint(checkpoint_dir);
        return mask_to_array(run_segmentation(model, image_from_array(image), cfg.imaging));
      },
      py::arg("checkpoint_dir"), py::arg("image"), py::arg("config_json") = "");

  m.def(
      "detect_image",
      [](const std::string& seg_dir, const std::string& cls_dir,
         const py::array_t<std::uint8_t>& image, const std::string& config_json) {
        const PipelineConfig cfg = config_from_json_str(config_json);
        const UNetModel<float> seg = load_unet_checkpoint(seg_dir);
        const TbVitModel<float> cls = load_tbvit_checkpoint(cls_dir);
        const DetectionResult det = run_detection(seg, cls, image_from_array(image), cfg.imaging);
        py::list rois;
        for (std::size_t i = 0; i < det.rois.size(); ++i) {
          const auto& roi = det.rois[i];
          py::dict d;
          d["bbox"] = py::make_tuple(roi.bbox.x_min, roi.bbox.y_min, roi.bbox.x_max,
                                     roi.bbox.y_max);
          d["area"] = det.regions[i].area;
          d["predicted_label"] = roi.predicted_label.value_or(0);
          d["score"] = roi.score.value_or(0.0);
          rois.append(d);
        }
        py::dict out;
        out["mask"] = mask_to_array(det.predicted_mask);
        out["rois"] = rois;
        return out;
      },
      py::arg("seg_checkpoint"), py::arg("cls_checkpoint"), py::arg("image"),
      py::arg("config_json") = "");
}
