#include "tbdetect/train.hpp"

#include <algorithm>
#include <cmath>

#include "tbdetect/checkpoint.hpp"
#include "tbdetect/optimizer.hpp"

namespace tb {

namespace {

struct SegPatch {
  Tensor<float> image;  // [3,p,p]
  Tensor<float> mask;   // [1,p,p]
};

std::vector<SegPatch> build_seg_patches(const std::vector<Sample>& samples,
                                        std::size_t patch_side) {
  std::vector<SegPatch> out;
  for (const auto& s : samples) {
    auto [img_patches, grid] = split_into_patches(s.image, patch_side);
    auto [mask_patches, grid2] = split_mask_into_patches(s.mask, patch_side);
    (void)grid2;
    for (std::size_t i = 0; i < grid.count(); ++i) {
      out.push_back(SegPatch{image_to_tensor(img_patches[i]), mask_to_tensor(mask_patches[i])});
    }
  }
  return out;
}

// Deterministic train/validation split: shuffle indices, take the first
// chunk as validation.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 rng = SplitMix64::derive(seed, 0x5011ULL);
  deterministic_shuffle(idx, rng);
  std::size_t nv = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
  nv = std::max<std::size_t>(1, std::min(nv, n - 1));
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
  return {train, val};
}

Tensor<float> stack_batch(const std::vector<const Tensor<float>*>& items) {
  Shape shape = items[0]->shape();
  shape.insert(shape.begin(), items.size());
  Tensor<float> out(shape);
  const std::size_t stride = items[0]->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy_n(items[i]->raw(), stride, out.raw() + i * stride);
  }
  return out;
}

struct PixelStats {
  double loss_sum = 0;      // loss * sample count
  std::size_t samples = 0;
  std::size_t correct = 0;
  std::size_t pixels = 0;
  std::size_t inter = 0;
  std::size_t uni = 0;

  double mean_loss() const { return samples ? loss_sum / static_cast<double>(samples) : 0.0; }
  double accuracy() const {
    return pixels ? static_cast<double>(correct) / static_cast<double>(pixels) : 0.0;
  }
  double pooled_jaccard() const {
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
  }
};

void tally_pixels(PixelStats& stats, const Tensor<float>& probs, const Tensor<float>& targets,
                  double threshold) {
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool p = static_cast<double>(probs[i]) > threshold;
    const bool t = targets[i] > 0.5f;
    stats.correct += p == t;
    stats.inter += p && t;
    stats.uni += p || t;
  }
  stats.pixels += probs.size();
}

// Snapshot/restore of every parameter value (including running statistics),
// used for best-epoch checkpointing.
std::vector<Tensor<float>> snapshot(const ParamStore<float>& store) {
  std::vector<Tensor<float>> vals;
  vals.reserve(store.size());
  for (const auto& p : store.entries()) vals.push_back(p.value);
  return vals;
}

void restore(ParamStore<float>& store, const std::vector<Tensor<float>>& vals) {
  for (std::size_t i = 0; i < store.size(); ++i) store[i].value = vals[i];
}

Tensor<float> flip_plane_tensor(const Tensor<float>& t, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return t;
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<float> out(t.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t sy = vertical ? H - 1 - y : y;
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sx = horizontal ? W - 1 - x : x;
        out[(c * H + y) * W + x] = t[(c * H + sy) * W + sx];
      }
    }
  }
  return out;
}

}  // namespace

TrainResult train_segmenter(UNetModel<float>& model, const std::vector<Sample>& samples,
                            const TrainConfig& cfg, const ImagingConfig& imaging,
                            const std::string& checkpoint_dir) {
  cfg.validate();
  imaging.validate();
  const std::vector<SegPatch> patches = build_seg_patches(samples, imaging.patch_side);
  if (patches.empty()) throw ContractViolation("segmenter training set is empty");
  if (patches.size() < 2) {
    throw ContractViolation("segmenter training needs at least 2 patches for a validation split");
  }
  auto [train_idx, val_idx] = split_indices(patches.size(), cfg.val_fraction, cfg.seed);

  AdamOptimizer<float> adam(cfg.learning_rate);
  SplitMix64 dropout_rng = SplitMix64::derive(cfg.seed, 0xD0ULL);
  EarlyStopping stopper(cfg.early_stop_patience, cfg.min_delta);
  ReduceLrOnPlateau plateau(cfg.lr_factor, cfg.lr_patience, cfg.min_lr);

  TrainResult result;
  std::vector<Tensor<float>> best_params = snapshot(model.params());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr_in_effect = adam.learning_rate();
    SplitMix64 order_rng = SplitMix64::derive(cfg.seed, 0xE000ULL + epoch);
    std::vector<std::size_t> order = train_idx;
    deterministic_shuffle(order, order_rng);

    PixelStats train_stats;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Tensor<float>*> xs, ys;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(&patches[order[i]].image);
        ys.push_back(&patches[order[i]].mask);
      }
      Tensor<float> x = stack_batch(xs);
      Tensor<float> y = stack_batch(ys);
      Tape<float> tape;
      Var<float> probs = model.forward(tape, tape.leaf(std::move(x)), Mode::Train, &dropout_rng);
      Var<float> loss = ops::bce_mean(probs, y);
      tape.backward(loss);
      adam.step(model.params(), tape, model.bound_vars());
      const std::size_t bsz = end - start;
      train_stats.loss_sum += static_cast<double>(tape.value(loss)[0]) * bsz;
      train_stats.samples += bsz;
      tally_pixels(train_stats, tape.value(probs), y, imaging.binarize_threshold);
    }

    PixelStats val_stats;
    for (std::size_t start = 0; start < val_idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(val_idx.size(), start + cfg.batch_size);
      std::vector<const Tensor<float>*> xs, ys;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(&patches[val_idx[i]].image);
        ys.push_back(&patches[val_idx[i]].mask);
      }
      Tensor<float> x = stack_batch(xs);
      Tensor<float> y = stack_batch(ys);
      Tape<float> tape;
      tape.set_grad_enabled(false);
      Var<float> probs = model.infer(tape, tape.leaf(std::move(x)));
      Var<float> loss = ops::bce_mean(probs, y);
      const std::size_t bsz = end - start;
      val_stats.loss_sum += static_cast<double>(tape.value(loss)[0]) * bsz;
      val_stats.samples += bsz;
      tally_pixels(val_stats, tape.value(probs), y, imaging.binarize_threshold);
    }

    result.logs.push_back(EpochLog{epoch, train_stats.mean_loss(), train_stats.accuracy(),
                                   val_stats.mean_loss(), val_stats.accuracy(), lr_in_effect});

    const double metric = val_stats.pooled_jaccard();
    if (metric >= result.best.best_metric) {
      result.best.best_metric = metric;
      result.best.best_epoch = epoch;
      best_params = snapshot(model.params());
      if (!checkpoint_dir.empty()) {
        save_unet_checkpoint(model, checkpoint_dir, metric, "val_jaccard");
        result.best.checkpoint_path = checkpoint_dir;
      }
    }
    adam.set_learning_rate(plateau.update(metric, adam.learning_rate()));
    if (stopper.update(metric)) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model.params(), best_params);
  return result;
}

std::vector<LabeledRoi> build_balanced_roi_set(const std::vector<Sample>& samples,
                                               const ImagingConfig& imaging, std::uint64_t seed) {
  imaging.validate();
  SplitMix64 rng = SplitMix64::derive(seed, 0xBA1AULL);
  std::vector<LabeledRoi> rois;
  const double min_area = imaging.effective_min_area();
  for (const auto& sample : samples) {
    const std::vector<Region> regions =
        filter_regions_by_area(connected_components(sample.mask), min_area);
    if (regions.empty()) continue;
    std::vector<ROI> crops = extract_rois(sample.image, regions);
    std::vector<std::pair<std::size_t, std::size_t>> sizes;
    for (auto& roi : crops) {
      sizes.emplace_back(roi.crop.width, roi.crop.height);
      rois.push_back(LabeledRoi{std::move(roi.crop), 1});
    }
    // one background crop per positive, size-matched, < 10% foreground
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const auto [w, h] = sizes[rng.next_below(sizes.size())];
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        if (w > sample.image.width || h > sample.image.height) break;
        const std::size_t x0 = rng.next_below(sample.image.width - w + 1);
        const std::size_t y0 = rng.next_below(sample.image.height - h + 1);
        std::size_t fg = 0;
        for (std::size_t y = 0; y < h; ++y) {
          const std::uint8_t* row = sample.mask.bits.data() + (y0 + y) * sample.mask.width + x0;
          for (std::size_t x = 0; x < w; ++x) fg += row[x];
        }
        if (static_cast<double>(fg) >= 0.10 * static_cast<double>(w * h)) continue;
        RasterImage crop(w, h);
        for (std::size_t y = 0; y < h; ++y) {
          std::copy_n(sample.image.pixel(x0, y0 + y), w * 3, crop.data.data() + y * w * 3);
        }
        rois.push_back(LabeledRoi{std::move(crop), 0});
        placed = true;
      }
      if (!placed) {
        throw IoError("insufficient background area for negative sampling in image '" +
                      sample.name + "'");
      }
    }
  }
  SplitMix64 shuffle_rng = SplitMix64::derive(seed, 0x5FFULL);
  deterministic_shuffle(rois, shuffle_rng);
  return rois;
}

TrainResult train_classifier(TbVitModel<float>& model, const std::vector<LabeledRoi>& rois,
                             const TrainConfig& cfg, const std::string& checkpoint_dir) {
  cfg.validate();
  if (rois.empty()) throw ContractViolation("classifier training set is empty");
  if (rois.size() < 2) {
    throw ContractViolation("classifier training needs at least 2 rois for a validation split");
  }
  const std::size_t roi_side = model.config().roi_side;
  std::vector<Tensor<float>> inputs;
  std::vector<int> labels;
  inputs.reserve(rois.size());
  for (const auto& r : rois) {
    inputs.push_back(roi_to_input(r.crop, roi_side));
    labels.push_back(r.label);
  }
  auto [train_idx, val_idx] = split_indices(rois.size(), cfg.val_fraction, cfg.seed);

  std::size_t count0 = 0, count1 = 0;
  for (std::size_t i : train_idx) (labels[i] == 1 ? count1 : count0) += 1;
  if (count0 == 0 || count1 == 0) {
    throw ContractViolation("classifier training split holds a single class; "
                            "class weights are degenerate");
  }
  FocalLossConfig focal;
  focal.gamma = cfg.focal_gamma;
  focal.class_weights = adaptive_class_weights(count0, count1);

  AdamOptimizer<float> adam(cfg.learning_rate);
  SplitMix64 dropout_rng = SplitMix64::derive(cfg.seed, 0xD1ULL);
  SplitMix64 aug_rng = SplitMix64::derive(cfg.seed, 0xA6ULL);
  EarlyStopping stopper(cfg.early_stop_patience, cfg.min_delta);
  ReduceLrOnPlateau plateau(cfg.lr_factor, cfg.lr_patience, cfg.min_lr);

  TrainResult result;
  std::vector<Tensor<float>> best_params = snapshot(model.params());

  const auto batch_accuracy = [&](const Tensor<float>& probs, const std::vector<int>& lab) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const int pred = probs[2 * i + 1] > probs[2 * i] ? 1 : 0;
      correct += pred == lab[i];
    }
    return correct;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr_in_effect = adam.learning_rate();
    SplitMix64 order_rng = SplitMix64::derive(cfg.seed, 0xE100ULL + epoch);
    std::vector<std::size_t> order = train_idx;
    deterministic_shuffle(order, order_rng);

    double train_loss_sum = 0;
    std::size_t train_correct = 0, train_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor<float>> flipped;
      std::vector<const Tensor<float>*> xs;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        if (cfg.flip_augment) {
          const bool fh = aug_rng.next_u64() & 1;
          const bool fv = aug_rng.next_u64() & 1;
          flipped.push_back(flip_plane_tensor(inputs[order[i]], fh, fv));
        }
        batch_labels.push_back(labels[order[i]]);
      }
      if (cfg.flip_augment) {
        for (const auto& t : flipped) xs.push_back(&t);
      } else {
        for (std::size_t i = start; i < end; ++i) xs.push_back(&inputs[order[i]]);
      }
      Tensor<float> x = stack_batch(xs);
      Tape<float> tape;
      Var<float> probs = model.forward(tape, tape.leaf(std::move(x)), Mode::Train, &dropout_rng);
      Var<float> loss = focal_loss(probs, batch_labels, focal);
      tape.backward(loss);
      adam.step(model.params(), tape, model.bound_vars());
      const std::size_t bsz = end - start;
      train_loss_sum += static_cast<double>(tape.value(loss)[0]) * bsz;
      train_correct += batch_accuracy(tape.value(probs), batch_labels);
      train_seen += bsz;
    }

    double val_loss_sum = 0;
    std::size_t val_correct = 0, val_seen = 0;
    for (std::size_t start = 0; start < val_idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(val_idx.size(), start + cfg.batch_size);
      std::vector<const Tensor<float>*> xs;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(&inputs[val_idx[i]]);
        batch_labels.push_back(labels[val_idx[i]]);
      }
      Tensor<float> x = stack_batch(xs);
      Tape<float> tape;
      tape.set_grad_enabled(false);
      Var<float> probs = model.infer(tape, tape.leaf(std::move(x)));
      Var<float> loss = focal_loss(probs, batch_labels, focal);
      const std::size_t bsz = end - start;
      val_loss_sum += static_cast<double>(tape.value(loss)[0]) * bsz;
      val_correct += batch_accuracy(tape.value(probs), batch_labels);
      val_seen += bsz;
    }

    const double train_acc =
        train_seen ? static_cast<double>(train_correct) / static_cast<double>(train_seen) : 0.0;
    const double val_acc =
        val_seen ? static_cast<double>(val_correct) / static_cast<double>(val_seen) : 0.0;
    result.logs.push_back(EpochLog{epoch,
                                   train_seen ? train_loss_sum / train_seen : 0.0, train_acc,
                                   val_seen ? val_loss_sum / val_seen : 0.0, val_acc,
                                   lr_in_effect});

    if (val_acc >= result.best.best_metric) {
      result.best.best_metric = val_acc;
      result.best.best_epoch = epoch;
      best_params = snapshot(model.params());
      if (!checkpoint_dir.empty()) {
        save_tbvit_checkpoint(model, checkpoint_dir, val_acc, "val_accuracy");
        result.best.checkpoint_path = checkpoint_dir;
      }
    }
    adam.set_learning_rate(plateau.update(val_acc, adam.learning_rate()));
    if (stopper.update(val_acc)) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model.params(), best_params);
  return result;
}

}  // namespace tb
