#include "tbdetect/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_set>

#include "tbdetect/ops.hpp"
#include "tbdetect/rng.hpp"
#include "tbdetect/tbvit.hpp"
#include "tbdetect/unet.hpp"

namespace tb {

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> point, double step,
                           double tolerance, std::size_t max_coords_per_tensor,
                           std::uint64_t coord_seed) {
  std::vector<Tensor<double>> analytic;
  f(point, &analytic);
  if (analytic.size() != point.size()) {
    throw ContractViolation("grad_check: function returned wrong gradient count");
  }
  GradCheckResult r;
  r.tolerance = tolerance;
  for (std::size_t ti = 0; ti < point.size(); ++ti) {
    std::vector<std::size_t> coords;
    const std::size_t n = point[ti].size();
    if (max_coords_per_tensor == 0 || n <= max_coords_per_tensor) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      SplitMix64 rng = SplitMix64::derive(coord_seed, ti + 1);
      std::unordered_set<std::size_t> picked;
      while (picked.size() < max_coords_per_tensor) {
        picked.insert(static_cast<std::size_t>(rng.next_below(n)));
      }
      coords.assign(picked.begin(), picked.end());
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double orig = point[ti][c];
      point[ti][c] = orig + step;
      const double fp = f(point, nullptr);
      point[ti][c] = orig - step;
      const double fm = f(point, nullptr);
      point[ti][c] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[ti][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-2});
      const double err = std::abs(a - numeric) / denom;
      r.max_rel_err = std::max(r.max_rel_err, err);
      ++r.coords_checked;
    }
  }
  r.passed = r.max_rel_err < tolerance;
  return r;
}

namespace {

using Builder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

// Wraps a tape-building function (ending in a scalar) as a ScalarFn.
ScalarFn tape_fn(Builder build) {
  return [build](const std::vector<Tensor<double>>& point,
                 std::vector<Tensor<double>>* grads) -> double {
    Tape<double> tape;
    tape.set_grad_enabled(grads != nullptr);
    std::vector<Var<double>> leaves;
    leaves.reserve(point.size());
    for (const auto& p : point) leaves.push_back(tape.leaf(p, grads != nullptr));
    Var<double> loss = build(tape, leaves);
    const double val = tape.value(loss)[0];
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (std::size_t i = 0; i < point.size(); ++i) {
        const Tensor<double>* g = tape.grad_ptr(leaves[i]);
        grads->push_back(g ? *g : Tensor<double>(point[i].shape()));
      }
    }
    return val;
  };
}

Tensor<double> rand_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values with guaranteed distance from zero, for kinked activations.
Tensor<double> rand_tensor_away_from_zero(Shape shape, SplitMix64& rng, double margin = 0.2) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double mag = margin + rng.uniform(0.0, 1.0);
    t[i] = rng.next_u64() & 1 ? mag : -mag;
  }
  return t;
}

// Distinct, well-separated dyadic values so max-pooling windows have a clear
// winner under finite-difference perturbation.
Tensor<double> separated_tensor(Shape shape, SplitMix64& rng) {
  Tensor<double> t(std::move(shape));
  std::vector<double> vals(t.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i) * 0.0625 - 1.0;
  deterministic_shuffle(vals, rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = vals[i];
  return t;
}

// Contracts a non-scalar output against fixed weights to obtain the scalar
// the finite differences act on. The weight leaf never needs a gradient.
Var<double> contract(Tape<double>& tape, Var<double> y, const Tensor<double>& w) {
  Var<double> wl = tape.leaf(w, false);
  return ops::sum_all(ops::mul(y, wl));
}

struct Case {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor<double>> point;
  std::size_t max_coords = 0;
};

std::vector<Case> build_op_cases(std::uint64_t seed) {
  SplitMix64 rng = SplitMix64::derive(seed, 0x9c5aULL);
  std::vector<Case> cases;

  {
    Tensor<double> cw = rand_tensor({1, 3, 5, 5}, rng);
    cases.push_back(
        {"conv2d_same",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           return contract(t, ops::conv2d(in[0], in[1], in[2], 1, Padding::Same), cw);
         }),
         {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
          rand_tensor({3}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 3, 3, 3}, rng);
    cases.push_back(
        {"conv2d_valid",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           return contract(t, ops::conv2d(in[0], in[1], in[2], 1, Padding::Valid), cw);
         }),
         {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
          rand_tensor({3}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 2, 3, 3}, rng);
    cases.push_back(
        {"conv2d_stride2",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           return contract(t, ops::conv2d(in[0], in[1], in[2], 2, Padding::Valid), cw);
         }),
         {rand_tensor({2, 1, 7, 7}, rng), rand_tensor({2, 1, 3, 3}, rng),
          rand_tensor({2}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 2, 8, 8}, rng);
    cases.push_back({"conv_transpose2d",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::conv_transpose2d(in[0], in[1]), cw);
                     }),
                     {rand_tensor({1, 3, 4, 4}, rng), rand_tensor({3, 2, 2, 2}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 1, 3, 3}, rng);
    cases.push_back({"maxpool2d",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::maxpool2d(in[0]), cw);
                     }),
                     {separated_tensor({1, 1, 6, 6}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 3, 4, 4}, rng);
    cases.push_back(
        {"batchnorm2d_train",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           Tensor<double> rm({3}), rv = Tensor<double>::full({3}, 1.0);
           Var<double> y = ops::batchnorm2d(in[0], in[1], in[2], &rm, &rv, Mode::Train, 0.9,
                                            1e-5);
           return contract(t, y, cw);
         }),
         {rand_tensor({2, 3, 4, 4}, rng), rand_tensor({3}, rng, 0.5, 1.5),
          rand_tensor({3}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 5}, rng);
    cases.push_back({"relu",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::relu(in[0]), cw);
                     }),
                     {rand_tensor_away_from_zero({2, 5}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 5}, rng);
    cases.push_back({"sigmoid",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::sigmoid(in[0]), cw);
                     }),
                     {rand_tensor({2, 5}, rng, -3.0, 3.0)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 5}, rng);
    cases.push_back({"gelu",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::gelu(in[0]), cw);
                     }),
                     {rand_tensor({2, 5}, rng, -2.0, 2.0)}});
  }
  {
    Tensor<double> cw = rand_tensor({3, 4}, rng);
    cases.push_back({"softmax",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::softmax(in[0], 1), cw);
                     }),
                     {rand_tensor({3, 4}, rng, -2.0, 2.0)}});
  }
  {
    Tensor<double> cw = rand_tensor({3, 2}, rng);
    cases.push_back({"dense",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::dense(in[0], in[1], in[2]), cw);
                     }),
                     {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng),
                      rand_tensor({2}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 3, 3}, rng);
    cases.push_back({"bmm",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::bmm(in[0], in[1]), cw);
                     }),
                     {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 4, 3}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 3, 5}, rng);
    cases.push_back({"bmm_transposed",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::bmm(in[0], in[1], true), cw);
                     }),
                     {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 5, 4}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({4, 3, 2}, rng);
    cases.push_back({"permute_reshape",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       Var<double> y = ops::permute(in[0], {2, 1, 0});
                       y = ops::reshape(y, {4, 3, 2});
                       return contract(t, y, cw);
                     }),
                     {rand_tensor({2, 3, 4}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({4, 6}, rng);
    cases.push_back(
        {"layernorm",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           return contract(t, ops::layernorm(in[0], in[1], in[2]), cw);
         }),
         {rand_tensor({4, 6}, rng), rand_tensor({6}, rng, 0.5, 1.5), rand_tensor({6}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 4, 3, 3}, rng);
    cases.push_back({"concat_channels",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::concat_channels(in[0], in[1]), cw);
                     }),
                     {rand_tensor({1, 2, 3, 3}, rng), rand_tensor({1, 2, 3, 3}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 4, 12}, rng);
    cases.push_back({"extract_patches",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::extract_patches(in[0], 2), cw);
                     }),
                     {rand_tensor({1, 3, 4, 4}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 3, 4}, rng);
    cases.push_back({"add_rows",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::add_rows(in[0], in[1]), cw);
                     }),
                     {rand_tensor({2, 3, 4}, rng), rand_tensor({3, 4}, rng)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 3, 4, 4}, rng);
    cases.push_back({"mul_channel_broadcast",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::mul_channel_broadcast(in[0], in[1]), cw);
                     }),
                     {rand_tensor({1, 3, 4, 4}, rng), rand_tensor({1, 1, 4, 4}, rng, 0.1, 0.9)}});
  }
  {
    Tensor<double> cw = rand_tensor({2, 4}, rng);
    cases.push_back({"mean_tokens",
                     tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       return contract(t, ops::mean_tokens(in[0]), cw);
                     }),
                     {rand_tensor({2, 3, 4}, rng)}});
  }
  {
    Tensor<double> targets({2, 6});
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = rng.next_u64() & 1 ? 1.0 : 0.0;
    cases.push_back({"bce_mean",
                     tape_fn([targets](Tape<double>& t, std::vector<Var<double>>& in) {
                       (void)t;
                       return ops::bce_mean(in[0], targets);
                     }),
                     {rand_tensor({2, 6}, rng, 0.05, 0.95)}});
  }
  {
    std::vector<int> labels{0, 1, 1, 0};
    const std::vector<double> weights{0.6, 5.0};
    cases.push_back({"focal_mean",
                     tape_fn([labels, weights](Tape<double>& t, std::vector<Var<double>>& in) {
                       (void)t;
                       return ops::focal_mean(in[0], labels, 2.0, weights);
                     }),
                     {rand_tensor({4, 2}, rng, 0.1, 0.9)}});
  }
  {
    Tensor<double> cw = rand_tensor({1, 4, 4, 4}, rng);
    cases.push_back(
        {"attention_gate",
         tape_fn([cw](Tape<double>& t, std::vector<Var<double>>& in) {
           auto [gated, alpha] =
               attention_gate_forward(in[0], in[1], in[2], in[3], in[4], in[5], in[6]);
           (void)alpha;
           return contract(t, gated, cw);
         }),
         {rand_tensor({1, 4, 4, 4}, rng), rand_tensor({1, 4, 4, 4}, rng),
          rand_tensor({2, 4, 1, 1}, rng), rand_tensor({2}, rng), rand_tensor({2, 4, 1, 1}, rng),
          rand_tensor({1, 2, 1, 1}, rng), rand_tensor({1}, rng)}});
  }
  return cases;
}

// Gradient check of a whole model: the point is [input, trainable params...]
// and evaluation writes the params back before each forward pass.
template <typename ModelT>
ScalarFn model_fn(std::shared_ptr<ModelT> model, Tensor<double> contraction) {
  return [model, contraction](const std::vector<Tensor<double>>& point,
                              std::vector<Tensor<double>>* grads) -> double {
    std::size_t pi = 1;
    for (auto& p : model->params().entries()) {
      if (p.trainable) p.value = point[pi++];
    }
    Tape<double> tape;
    tape.set_grad_enabled(grads != nullptr);
    Var<double> x = tape.leaf(point[0], grads != nullptr);
    Var<double> y = model->forward(tape, x, Mode::Train, nullptr);
    Var<double> loss = contract(tape, y, contraction);
    const double val = tape.value(loss)[0];
    if (grads) {
      tape.backward(loss);
      grads->clear();
      const Tensor<double>* gx = tape.grad_ptr(x);
      grads->push_back(gx ? *gx : Tensor<double>(point[0].shape()));
      const auto& bound = model->bound_vars();
      for (std::size_t i = 0; i < model->params().size(); ++i) {
        if (!model->params()[i].trainable) continue;
        const Tensor<double>* g = tape.grad_ptr(bound[i]);
        grads->push_back(g ? *g : Tensor<double>(model->params()[i].value.shape()));
      }
    }
    return val;
  };
}

template <typename ModelT>
std::vector<Tensor<double>> model_point(const ModelT& model, Tensor<double> input) {
  std::vector<Tensor<double>> point;
  point.push_back(std::move(input));
  for (const auto& p : model.params().entries()) {
    if (p.trainable) point.push_back(p.value);
  }
  return point;
}

std::vector<Case> build_model_cases(std::uint64_t seed) {
  SplitMix64 rng = SplitMix64::derive(seed, 0x40deULL);
  std::vector<Case> cases;
  {
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.base_channels = 4;
    cfg.depth = 2;
    cfg.dropout_rate = 0.0;
    cfg.patch_side = 16;
    auto model = std::make_shared<UNetModel<double>>(cfg, seed * 31 + 7);
    Tensor<double> input = rand_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tensor<double> cw = rand_tensor({1, 1, 16, 16}, rng);
    cases.push_back({"unet_full", model_fn(model, cw), model_point(*model, input), 2});
  }
  {
    ViTConfig cfg;
    cfg.roi_side = 8;
    cfg.vit_patch = 4;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.num_layers = 2;
    cfg.mlp_dim = 32;
    cfg.dropout_rate = 0.0;
    auto model = std::make_shared<TbVitModel<double>>(cfg, seed * 17 + 3);
    Tensor<double> input = rand_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
    Tensor<double> cw = rand_tensor({2, 2}, rng);
    cases.push_back({"tbvit_full", model_fn(model, cw), model_point(*model, input), 2});
  }
  {
    // residual block through a one-level model, verified end to end
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 2;
    cfg.depth = 1;
    cfg.dropout_rate = 0.0;
    cfg.patch_side = 8;
    auto model = std::make_shared<UNetModel<double>>(cfg, seed * 13 + 1);
    Tensor<double> input = rand_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
    Tensor<double> cw = rand_tensor({1, 1, 8, 8}, rng);
    cases.push_back({"unet_onelevel", model_fn(model, cw), model_point(*model, input), 3});
  }
  {
    // one attention layer, gradient w.r.t. the token input
    ViTConfig cfg;
    cfg.roi_side = 8;
    cfg.vit_patch = 4;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.mlp_dim = 16;
    cfg.dropout_rate = 0.0;
    auto model = std::make_shared<TbVitModel<double>>(cfg, seed * 11 + 5);
    Tensor<double> tokens = rand_tensor({1, 4, 8}, rng);
    Tensor<double> cw = rand_tensor({1, 4, 8}, rng);
    cases.push_back({"attention_layer",
                     tape_fn([model, cw](Tape<double>& t, std::vector<Var<double>>& in) {
                       Var<double> y = model->attention(t, in[0], 0, Mode::Infer);
                       return contract(t, y, cw);
                     }),
                     {tokens}});
  }
  return cases;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::size_t num_seeds, double tolerance) {
  std::vector<GradCheckCase> out;
  for (std::size_t s = 1; s <= num_seeds; ++s) {
    std::vector<Case> cases = build_op_cases(s);
    std::vector<Case> models = build_model_cases(s);
    cases.insert(cases.end(), models.begin(), models.end());
    for (auto& c : cases) {
      GradCheckResult r =
          grad_check(c.fn, c.point, 1e-5, tolerance, c.max_coords, /*coord_seed=*/s);
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const GradCheckCase& g) { return g.name == c.name; });
      if (it == out.end()) {
        out.push_back(GradCheckCase{c.name, r});
      } else {
        it->result.max_rel_err = std::max(it->result.max_rel_err, r.max_rel_err);
        it->result.coords_checked += r.coords_checked;
        it->result.passed = it->result.passed && r.passed;
      }
    }
  }
  return out;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
  for (const auto& c : cases) {
    if (!c.result.passed) return false;
  }
  return !cases.empty();
}

}  // namespace tb
