#include <doctest.h>

#include <cmath>

#include "tbdetect/optimizer.hpp"
#include "tbdetect/synth.hpp"
#include "tbdetect/pipeline.hpp"
#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

using namespace tb;

namespace {

template <typename T>
void zero_all_params(ParamStore<T>& store) {
  for (auto& p : store.entries()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = T(0);
  }
}

Tensor<float> random_tensor(Shape shape, SplitMix64& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("residual block reduces to relu(x) when the main path is zeroed") {
  UNetConfig cfg;
  cfg.in_channels = 4;
  cfg.base_channels = 4;  // no projection on the first encoder block
  cfg.depth = 1;
  cfg.dropout_rate = 0.0;
  cfg.patch_side = 8;
  UNetModel<float> model(cfg, 1);
  zero_all_params(model.params());
  // running variance must stay 1 for a clean infer-mode identity
  for (auto& p : model.params().entries()) {
    if (p.name.find("running_var") != std::string::npos) {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = 1.0f;
    }
  }
  SplitMix64 rng(2);
  Tensor<float> xv = random_tensor({1, 4, 8, 8}, rng, -1.0f, 1.0f);
  Tape<float> tape;
  auto y = model.residual_block(tape, 0, false, tape.leaf(xv), Mode::Infer);
  const Tensor<float>& out = y.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i] == (xv[i] > 0.0f ? xv[i] : 0.0f));
  }
}

TEST_CASE("residual block changes channel count through the projection") {
  UNetConfig cfg;
  cfg.in_channels = 16;
  cfg.base_channels = 32;
  cfg.depth = 1;
  cfg.dropout_rate = 0.0;
  cfg.patch_side = 32;
  UNetModel<float> model(cfg, 3);
  SplitMix64 rng(4);
  Tape<float> tape;
  auto y = model.residual_block(tape, 0, false, tape.leaf(random_tensor({1, 16, 32, 32}, rng)),
                                Mode::Infer);
  CHECK(y.value().shape() == Shape{1, 32, 32, 32});
}

TEST_CASE("attention gate with zero psi gives alpha 0.5 everywhere") {
  Tape<float> t;
  SplitMix64 rng(5);
  Tensor<float> skip_v = random_tensor({1, 4, 6, 6}, rng, -1.0f, 1.0f);
  auto skip = t.leaf(skip_v);
  auto gate = t.leaf(random_tensor({1, 4, 6, 6}, rng));
  auto wg_w = t.leaf(random_tensor({2, 4, 1, 1}, rng, -0.5f, 0.5f));
  auto wg_b = t.leaf(random_tensor({2}, rng, -0.5f, 0.5f));
  auto wx_w = t.leaf(random_tensor({2, 4, 1, 1}, rng, -0.5f, 0.5f));
  auto psi_w = t.leaf(Tensor<float>({1, 2, 1, 1}));
  auto psi_b = t.leaf(Tensor<float>({1}));
  auto [gated, alpha] = attention_gate_forward(skip, gate, wg_w, wg_b, wx_w, psi_w, psi_b);
  for (std::size_t i = 0; i < alpha.value().size(); ++i) CHECK(alpha.value()[i] == 0.5f);
  for (std::size_t i = 0; i < gated.value().size(); ++i) {
    CHECK(gated.value()[i] == doctest::Approx(0.5f * skip_v[i]));
  }
}

TEST_CASE("attention gate alpha maps stay strictly inside (0,1)") {
  Tape<float> t;
  SplitMix64 rng(6);
  auto skip = t.leaf(random_tensor({2, 4, 5, 5}, rng, -2.0f, 2.0f));
  auto gate = t.leaf(random_tensor({2, 4, 5, 5}, rng, -2.0f, 2.0f));
  auto wg_w = t.leaf(random_tensor({2, 4, 1, 1}, rng, -1.0f, 1.0f));
  auto wg_b = t.leaf(random_tensor({2}, rng, -1.0f, 1.0f));
  auto wx_w = t.leaf(random_tensor({2, 4, 1, 1}, rng, -1.0f, 1.0f));
  auto psi_w = t.leaf(random_tensor({1, 2, 1, 1}, rng, -1.0f, 1.0f));
  auto psi_b = t.leaf(random_tensor({1}, rng, -1.0f, 1.0f));
  auto [gated, alpha] = attention_gate_forward(skip, gate, wg_w, wg_b, wx_w, psi_w, psi_b);
  float amin = 1.0f, amax = 0.0f;
  for (std::size_t i = 0; i < alpha.value().size(); ++i) {
    amin = std::min(amin, alpha.value()[i]);
    amax = std::max(amax, alpha.value()[i]);
  }
  CHECK(amin > 0.0f);
  CHECK(amax < 1.0f);
  // gated features are elementwise bounded by the skip magnitude
  for (std::size_t i = 0; i < gated.value().size(); ++i) {
    CHECK(std::abs(gated.value()[i]) <= std::abs(t.value(skip)[i]));
  }

  auto misaligned = t.leaf(random_tensor({2, 4, 4, 4}, rng));
  CHECK_THROWS_AS(attention_gate_forward(skip, misaligned, wg_w, wg_b, wx_w, psi_w, psi_b),
                  ContractViolation);
}

TEST_CASE("segmenter maps [N,3,S,S] to [N,1,S,S] probabilities") {
  UNetConfig cfg;  // defaults: base 16, depth 3
  UNetModel<float> model(cfg, 7);
  SplitMix64 rng(8);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto y = model.infer(tape, tape.leaf(random_tensor({2, 3, 64, 64}, rng)));
  CHECK(y.value().shape() == Shape{2, 1, 64, 64});
  for (std::size_t i = 0; i < y.value().size(); ++i) {
    CHECK(y.value()[i] > 0.0f);
    CHECK(y.value()[i] < 1.0f);
  }
}

TEST_CASE("segmenter with all-zero weights outputs 0.5 everywhere") {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.dropout_rate = 0.0;
  cfg.patch_side = 16;
  UNetModel<float> model(cfg, 9);
  zero_all_params(model.params());
  SplitMix64 rng(10);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto y = model.infer(tape, tape.leaf(random_tensor({1, 3, 16, 16}, rng)));
  for (std::size_t i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == 0.5f);
}

TEST_CASE("segmenter rejects an indivisible input side") {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 3;
  cfg.dropout_rate = 0.0;
  cfg.patch_side = 16;
  UNetModel<float> model(cfg, 11);
  Tape<float> tape;
  SplitMix64 rng(12);
  CHECK_THROWS_AS(model.infer(tape, tape.leaf(random_tensor({1, 3, 20, 20}, rng))),
                  ContractViolation);
  CHECK_THROWS_AS(UNetConfig{3, 4, 3, 0.1, 20}.validate(), ContractViolation);
}

TEST_CASE("segmenter infer-mode forward is bitwise reproducible") {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.patch_side = 16;
  UNetModel<float> model(cfg, 13);
  SplitMix64 rng(14);
  Tensor<float> x = random_tensor({1, 3, 16, 16}, rng);
  auto run = [&]() {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    return model.infer(tape, tape.leaf(x)).value();
  };
  CHECK(run() == run());
}

TEST_CASE("segmenter overfits a single synthetic patch") {
  SynthConfig synth;
  synth.image_size = 32;
  synth.min_bacilli = 2;
  synth.max_bacilli = 3;
  synth.distractor_count = 0;
  synth.seed = 99;
  const SynthScene scene = synth_generate(synth);
  REQUIRE(scene.mask.foreground_count() > 0);

  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.dropout_rate = 0.0;
  cfg.patch_side = 32;
  UNetModel<float> model(cfg, 15);
  AdamOptimizer<float> adam(5e-3);
  Tensor<float> img = image_to_tensor(scene.image);
  Tensor<float> x({1, 3, 32, 32}, std::vector<float>(img.data().begin(), img.data().end()));
  Tensor<float> m = mask_to_tensor(scene.mask);
  Tensor<float> target({1, 1, 32, 32}, std::vector<float>(m.data().begin(), m.data().end()));
  double loss = 1.0;
  for (int step = 0; step < 300 && loss >= 0.05; ++step) {
    Tape<float> tape;
    auto probs = model.forward(tape, tape.leaf(x), Mode::Train, nullptr);
    auto l = ops::bce_mean(probs, target);
    loss = tape.value(l)[0];
    tape.backward(l);
    adam.step(model.params(), tape, model.bound_vars());
  }
  CHECK(loss < 0.05);
}

TEST_CASE("patch embedding produces the configured token count") {
  ViTConfig cfg;  // defaults: roi 32, patch 8 -> 16 tokens
  TbVitModel<float> model(cfg, 17);
  SplitMix64 rng(18);
  Tape<float> tape;
  auto tokens = model.patchify_and_embed(tape, tape.leaf(random_tensor({2, 3, 32, 32}, rng)));
  CHECK(tokens.value().shape() == Shape{2, 16, 64});

  CHECK_THROWS_AS(model.patchify_and_embed(tape, tape.leaf(random_tensor({1, 3, 16, 16}, rng))),
                  ContractViolation);
}

TEST_CASE("zero projection makes every token its positional embedding") {
  ViTConfig cfg;
  cfg.roi_side = 16;
  cfg.vit_patch = 8;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.mlp_dim = 16;
  TbVitModel<float> model(cfg, 19);
  auto& store = model.params();
  for (auto& p : store.entries()) {
    if (p.name == "embed.weight" || p.name == "embed.bias") {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = 0.0f;
    }
  }
  const Tensor<float>& pos = store[store.id_of("embed.positions")].value;
  SplitMix64 rng(20);
  Tape<float> tape;
  auto tokens = model.patchify_and_embed(tape, tape.leaf(random_tensor({1, 3, 16, 16}, rng)));
  const Tensor<float>& tv = tokens.value();
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t d = 0; d < 8; ++d) CHECK(tv[t * 8 + d] == pos[t * 8 + d]);
  }
}

TEST_CASE("swapping input patches swaps the corresponding tokens") {
  SplitMix64 rng(21);
  Tensor<float> a = random_tensor({1, 3, 8, 8}, rng);
  // swap the two top patches (4x4 blocks) of every channel
  Tensor<float> b = a;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        std::swap(b[(c * 8 + y) * 8 + x], b[(c * 8 + y) * 8 + x + 4]);
      }
    }
  }
  Tape<float> tape;
  const Tensor<float>& ta = ops::extract_patches(tape.leaf(a), 4).value();
  const Tensor<float>& tb = ops::extract_patches(tape.leaf(b), 4).value();
  const std::size_t feat = 48;
  for (std::size_t f = 0; f < feat; ++f) {
    CHECK(ta[0 * feat + f] == tb[1 * feat + f]);
    CHECK(ta[1 * feat + f] == tb[0 * feat + f]);
    CHECK(ta[2 * feat + f] == tb[2 * feat + f]);
  }
}

TEST_CASE("attention over a single token is the identity weighting") {
  ViTConfig cfg;
  cfg.roi_side = 8;
  cfg.vit_patch = 8;  // one token
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.mlp_dim = 16;
  TbVitModel<float> model(cfg, 23);
  SplitMix64 rng(24);
  Tape<float> tape;
  Var<float> probs;
  model.attention(tape, tape.leaf(random_tensor({1, 1, 8}, rng)), 0, Mode::Infer, nullptr,
                  &probs);
  CHECK(probs.value().size() == 2);  // one per head
  CHECK(probs.value()[0] == 1.0f);
  CHECK(probs.value()[1] == 1.0f);
}

TEST_CASE("identical tokens attend uniformly and weights are row-stochastic") {
  ViTConfig cfg;
  cfg.roi_side = 16;
  cfg.vit_patch = 8;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.mlp_dim = 16;
  TbVitModel<float> model(cfg, 25);
  SplitMix64 rng(26);

  Tensor<float> row = random_tensor({8}, rng);
  Tensor<float> same({1, 4, 8});
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t d = 0; d < 8; ++d) same[t * 8 + d] = row[d];
  }
  Tape<float> tape;
  Var<float> probs;
  model.attention(tape, tape.leaf(same), 0, Mode::Infer, nullptr, &probs);
  for (std::size_t i = 0; i < probs.value().size(); ++i) {
    CHECK(probs.value()[i] == doctest::Approx(0.25).epsilon(1e-6));
  }

  Tape<float> tape2;
  Var<float> probs2;
  model.attention(tape2, tape2.leaf(random_tensor({2, 4, 8}, rng)), 0, Mode::Infer, nullptr,
                  &probs2);
  const Tensor<float>& pv = probs2.value();  // [N*H, T, T]
  for (std::size_t row_i = 0; row_i < pv.dim(0) * pv.dim(1); ++row_i) {
    double sum = 0;
    for (std::size_t j = 0; j < pv.dim(2); ++j) sum += pv[row_i * pv.dim(2) + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("classifier outputs probability rows that sum to one") {
  ViTConfig cfg;  // defaults
  TbVitModel<float> model(cfg, 27);
  SplitMix64 rng(28);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto probs = model.infer(tape, tape.leaf(random_tensor({5, 3, 32, 32}, rng)));
  CHECK(probs.value().shape() == Shape{5, 2});
  for (std::size_t n = 0; n < 5; ++n) {
    const double sum = probs.value()[2 * n] + probs.value()[2 * n + 1];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(ViTConfig{32, 8, 65, 4, 4, 128, 0.1, 2}.validate(), ContractViolation);
}

TEST_CASE("focal loss collapses to cross-entropy at gamma zero") {
  SplitMix64 rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.next_below(16);
    Tensor<double> probs({n, 2});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double p = rng.uniform(0.02, 0.98);
      probs[2 * i] = p;
      probs[2 * i + 1] = 1.0 - p;
      labels[i] = static_cast<int>(rng.next_below(2));
    }
    Tape<double> tape;
    FocalLossConfig cfg;
    cfg.gamma = 0.0;
    cfg.class_weights = {1.0, 1.0};
    const double loss = tape.value(focal_loss(tape.leaf(probs), labels, cfg))[0];
    double ce = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ce -= std::log(probs[2 * i + static_cast<std::size_t>(labels[i])]);
    }
    ce /= static_cast<double>(n);
    CHECK(std::abs(loss - ce) < 1e-9);
  }
}

TEST_CASE("focal loss spot values") {
  Tape<double> tape;
  FocalLossConfig cfg;  // gamma 2, unit weights

  // a perfectly confident row contributes (numerically) nothing
  Tensor<double> sure({1, 2}, {1.0, 0.0});
  CHECK(tape.value(focal_loss(tape.leaf(sure), {0}, cfg))[0] < 1e-12);

  Tensor<double> half({1, 2}, {0.5, 0.5});
  const double expected = 0.25 * std::log(2.0);
  CHECK(std::abs(tape.value(focal_loss(tape.leaf(half), {0}, cfg))[0] - expected) < 1e-9);
}

TEST_CASE("focal loss decreases as the true-class probability grows") {
  FocalLossConfig cfg;  // gamma 2
  double prev = 1e9;
  for (double p = 0.01; p <= 0.99; p += 0.01) {
    Tape<double> tape;
    Tensor<double> probs({1, 2}, {p, 1.0 - p});
    const double loss = tape.value(focal_loss(tape.leaf(probs), {0}, cfg))[0];
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("scaling both class weights scales the loss") {
  SplitMix64 rng(31);
  Tensor<double> probs({4, 2});
  std::vector<int> labels{0, 1, 0, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = rng.uniform(0.1, 0.9);
    probs[2 * i] = p;
    probs[2 * i + 1] = 1.0 - p;
  }
  FocalLossConfig base;
  base.class_weights = {0.7, 1.9};
  FocalLossConfig scaled = base;
  scaled.class_weights = {0.7 * 3.5, 1.9 * 3.5};
  Tape<double> t1, t2;
  const double l1 = t1.value(focal_loss(t1.leaf(probs), labels, base))[0];
  const double l2 = t2.value(focal_loss(t2.leaf(probs), labels, scaled))[0];
  CHECK(std::abs(l2 - 3.5 * l1) < 1e-9);
}

TEST_CASE("adaptive class weights") {
  const auto balanced = adaptive_class_weights(50, 50);
  CHECK(balanced[0] == 1.0);
  CHECK(balanced[1] == 1.0);
  const auto skewed = adaptive_class_weights(90, 10);
  CHECK(skewed[0] == doctest::Approx(100.0 / 180.0).epsilon(1e-12));
  CHECK(skewed[1] == doctest::Approx(5.0).epsilon(1e-12));
  const auto guard = adaptive_class_weights(0, 10);
  CHECK(std::isfinite(guard[0]));
  CHECK(std::isfinite(guard[1]));
  CHECK(guard[0] > 0.0);
}

TEST_CASE("classifier overfits sixteen labeled synthetic rois") {
  SynthConfig synth;
  synth.image_size = 64;
  synth.min_bacilli = 8;
  synth.max_bacilli = 8;
  synth.distractor_count = 8;
  synth.seed = 5;
  const SynthScene scene = synth_generate(synth);
  REQUIRE(scene.rods.size() == 8);
  REQUIRE(scene.distractors.size() == 8);

  ViTConfig cfg;
  cfg.roi_side = 16;
  cfg.vit_patch = 4;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.mlp_dim = 32;
  cfg.dropout_rate = 0.0;
  TbVitModel<float> model(cfg, 33);

  std::vector<Tensor<float>> inputs;
  std::vector<int> labels;
  auto crop_box = [&](const Box& b) {
    RasterImage crop(b.width(), b.height());
    for (std::size_t y = 0; y < crop.height; ++y) {
      std::copy_n(scene.image.pixel(b.x_min, b.y_min + y), crop.width * 3,
                  crop.data.data() + y * crop.width * 3);
    }
    return roi_to_input(crop, cfg.roi_side);
  };
  for (const auto& rod : scene.rods) {
    inputs.push_back(crop_box(rod.bbox));
    labels.push_back(1);
  }
  for (const auto& blob : scene.distractors) {
    inputs.push_back(crop_box(blob.bbox));
    labels.push_back(0);
  }

  Tensor<float> batch({16, 3, 16, 16});
  for (std::size_t i = 0; i < 16; ++i) {
    std::copy_n(inputs[i].raw(), inputs[i].size(), batch.raw() + i * inputs[i].size());
  }
  AdamOptimizer<float> adam(2e-3);
  FocalLossConfig focal;
  std::size_t correct = 0;
  for (int step = 0; step < 500 && correct < 15; ++step) {
    Tape<float> tape;
    auto probs = model.forward(tape, tape.leaf(batch), Mode::Train, nullptr);
    auto loss = focal_loss(probs, labels, focal);
    tape.backward(loss);
    adam.step(model.params(), tape, model.bound_vars());
    correct = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      const int pred = tape.value(probs)[2 * i + 1] > tape.value(probs)[2 * i] ? 1 : 0;
      correct += pred == labels[i];
    }
  }
  CHECK(correct >= 15);
}
