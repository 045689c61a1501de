#include "tbdetect/dataset.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace tb {

namespace {

using nlohmann::json;

std::string join(const std::string& root, const std::string& rel) {
  if (rel.empty()) return root;
  if (rel.front() == '/') return rel;
  return root.empty() ? rel : root + "/" + rel;
}

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

}  // namespace

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path + ": " + e.what());
  }
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  m.patch_side = j.value("patch_side", std::size_t(64));
  m.provenance = j.value("provenance", "");
  if (!j.contains("samples") || !j.at("samples").is_array()) {
    throw IoError("manifest " + path + " lacks a 'samples' array");
  }
  for (const auto& e : j.at("samples")) {
    SampleRecord rec;
    rec.image_path = e.at("image").get<std::string>();
    rec.mask_path = e.at("mask").get<std::string>();
    rec.split = e.value("split", "train");
    if (rec.split != "train" && rec.split != "test") {
      throw IoError("manifest " + path + ": sample split must be 'train' or 'test', got '" +
                    rec.split + "'");
    }
    m.samples.push_back(std::move(rec));
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  json samples = json::array();
  for (const auto& s : manifest.samples) {
    samples.push_back({{"image", s.image_path}, {"mask", s.mask_path}, {"split", s.split}});
  }
  json j = {{"patch_side", manifest.patch_side},
            {"provenance", manifest.provenance},
            {"samples", samples}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

std::vector<Sample> load_dataset(const DatasetManifest& manifest) {
  std::vector<Sample> samples;
  samples.reserve(manifest.samples.size());
  for (const auto& rec : manifest.samples) {
    const std::string image_path = join(manifest.root, rec.image_path);
    const std::string mask_path = join(manifest.root, rec.mask_path);
    Sample s;
    s.name = stem_of(rec.image_path);
    s.image = read_ppm(image_path);
    s.mask = read_pgm(mask_path);
    s.split = rec.split;
    if (s.image.width != s.mask.width || s.image.height != s.mask.height) {
      throw IoError("dimension mismatch: " + image_path + " is " + std::to_string(s.image.width) +
                    "x" + std::to_string(s.image.height) + " but " + mask_path + " is " +
                    std::to_string(s.mask.width) + "x" + std::to_string(s.mask.height));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> filter_split(const std::vector<Sample>& samples, const std::string& split) {
  std::vector<Sample> out;
  for (const auto& s : samples) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

DatasetManifest generate_synth_dataset(const SynthConfig& cfg, std::size_t train_count,
                                       std::size_t test_count, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/images");
  fs::create_directories(out_dir + "/masks");

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.patch_side = 64;
  manifest.provenance = "synthetic smear scenes, seed " + std::to_string(cfg.seed);

  json scenes = json::array();
  const std::size_t total = train_count + test_count;
  for (std::size_t i = 0; i < total; ++i) {
    const SynthScene scene = synth_generate(cfg, i);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04zu", i);
    SampleRecord rec;
    rec.image_path = std::string("images/") + name + ".ppm";
    rec.mask_path = std::string("masks/") + name + ".pgm";
    rec.split = i < train_count ? "train" : "test";
    write_ppm(scene.image, join(out_dir, rec.image_path));
    write_pgm(scene.mask, join(out_dir, rec.mask_path));
    manifest.samples.push_back(rec);

    json objects = json::array();
    for (const auto& o : scene.rods) {
      objects.push_back({{"kind", "rod"},
                         {"area", o.area},
                         {"bbox", {o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max}}});
    }
    for (const auto& o : scene.distractors) {
      objects.push_back({{"kind", "distractor"},
                         {"area", o.area},
                         {"bbox", {o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max}}});
    }
    scenes.push_back({{"name", name},
                      {"split", rec.split},
                      {"requested_rods", scene.requested_rods},
                      {"placed_rods", scene.rods.size()},
                      {"objects", objects}});
  }
  write_manifest(manifest, out_dir + "/manifest.json");
  std::ofstream out(out_dir + "/scenes.json");
  if (!out) throw IoError("cannot open for writing: " + out_dir + "/scenes.json");
  out << scenes.dump(2) << "\n";
  return manifest;
}

}  // namespace tb
