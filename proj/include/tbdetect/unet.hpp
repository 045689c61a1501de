#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "tbdetect/ops.hpp"
#include "tbdetect/params.hpp"

namespace tb {

struct UNetConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 16;
  std::size_t depth = 3;            // number of down/up levels
  double dropout_rate = 0.1;
  std::size_t patch_side = 64;      // training patch size in pixels

  void validate() const;
  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
};

// Parameter handles for one residual conv block: two 3x3 convolutions, each
// normalized, plus a 1x1 projection on the identity path when the channel
// count changes.
struct ResBlockRefs {
  std::size_t w1, b1, g1, be1, rm1, rv1;
  std::size_t w2, b2, g2, be2, rm2, rv2;
  bool has_proj = false;
  std::size_t pw = 0, pb = 0;
};

struct GateRefs {
  std::size_t wg_w, wg_b;  // 1x1 conv on the gating signal (with bias)
  std::size_t wx_w;        // 1x1 conv on the skip features
  std::size_t psi_w, psi_b;
};

// Additive attention gate: alpha = sigmoid(psi(relu(Wg*gate + Wx*skip))),
// output = skip * alpha broadcast over channels. Returns (gated, alpha).
template <typename T>
std::pair<Var<T>, Var<T>> attention_gate_forward(Var<T> skip, Var<T> gate, Var<T> wg_w,
                                                 Var<T> wg_b, Var<T> wx_w, Var<T> psi_w,
                                                 Var<T> psi_b);

// Encoder/decoder segmentation network: residual blocks with max-pooling on
// the way down, learned stride-2 upsampling with attention-gated skip
// concatenation on the way up, and a sigmoid 1x1 head. Input [N,3,S,S] maps
// to per-pixel foreground probabilities [N,1,S,S].
template <typename T>
class UNetModel {
 public:
  UNetModel(UNetConfig cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Records the forward pass on `tape`. Train mode uses batch statistics and
  // live dropout (rng required when dropout_rate > 0); infer mode is fully
  // deterministic. Binds every parameter as a tape leaf; the binding is
  // exposed for the optimizer via bound_vars().
  Var<T> forward(Tape<T>& tape, Var<T> input, Mode mode, SplitMix64* rng = nullptr);

  // Infer-mode forward without touching model state; safe to run from
  // several threads at once on a frozen model.
  Var<T> infer(Tape<T>& tape, Var<T> input) const;

  const std::vector<Var<T>>& bound_vars() const { return bound_; }

  // Standalone block application for verification; binds only that block.
  Var<T> residual_block(Tape<T>& tape, std::size_t level, bool decoder, Var<T> x, Mode mode);

  static constexpr T kBnMomentum = T(0.9);
  static constexpr T kBnEpsilon = T(1e-5);

 private:
  ResBlockRefs make_res_block(const std::string& prefix, std::size_t in_c, std::size_t out_c,
                              SplitMix64& rng);
  GateRefs make_gate(const std::string& prefix, std::size_t channels, SplitMix64& rng);
  Var<T> run_network(Tape<T>& tape, const std::vector<Var<T>>& bound, Var<T> input, Mode mode,
                     SplitMix64* rng);
  Var<T> run_res_block(Tape<T>& tape, const std::vector<Var<T>>& bound, const ResBlockRefs& rb,
                       Var<T> x, Mode mode);
  std::pair<Var<T>, Var<T>> run_gate(Tape<T>& tape, const std::vector<Var<T>>& bound,
                                     const GateRefs& g, Var<T> skip, Var<T> gate);

  UNetConfig cfg_;
  ParamStore<T> params_;
  std::vector<ResBlockRefs> encoder_;
  ResBlockRefs bottleneck_;
  std::vector<std::size_t> up_weights_;  // one transposed-conv weight per level
  std::vector<GateRefs> gates_;
  std::vector<ResBlockRefs> decoder_;
  std::size_t head_w_ = 0, head_b_ = 0;
  std::vector<Var<T>> bound_;
};

extern template class UNetModel<float>;
extern template class UNetModel<double>;
extern template std::pair<Var<float>, Var<float>> attention_gate_forward(
    Var<float>, Var<float>, Var<float>, Var<float>, Var<float>, Var<float>, Var<float>);
extern template std::pair<Var<double>, Var<double>> attention_gate_forward(
    Var<double>, Var<double>, Var<double>, Var<double>, Var<double>, Var<double>, Var<double>);

}  // namespace tb
