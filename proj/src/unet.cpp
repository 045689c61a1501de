#include "tbdetect/unet.hpp"

#include <cmath>
#include <string>

namespace tb {

void UNetConfig::validate() const {
  if (base_channels < 1) throw ContractViolation("base_channels must be >= 1");
  if (depth < 1) throw ContractViolation("depth must be >= 1");
  if (in_channels < 1) throw ContractViolation("in_channels must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ContractViolation("dropout_rate must lie in [0,1)");
  }
  const std::size_t div = std::size_t(1) << depth;
  if (patch_side == 0 || patch_side % div != 0) {
    throw ContractViolation("patch_side " + std::to_string(patch_side) +
                            " must be divisible by 2^depth = " + std::to_string(div));
  }
}

namespace {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, SplitMix64& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
  return t;
}

}  // namespace

template <typename T>
std::pair<Var<T>, Var<T>> attention_gate_forward(Var<T> skip, Var<T> gate, Var<T> wg_w,
                                                 Var<T> wg_b, Var<T> wx_w, Var<T> psi_w,
                                                 Var<T> psi_b) {
  Tape<T>& t = *skip.tape;
  const Tensor<T>& sv = t.value(skip);
  const Tensor<T>& gv = t.value(gate);
  if (sv.rank() != 4 || gv.rank() != 4 || sv.dim(0) != gv.dim(0) || sv.dim(2) != gv.dim(2) ||
      sv.dim(3) != gv.dim(3)) {
    throw ContractViolation("attention gate needs spatially aligned skip " +
                            shape_str(sv.shape()) + " and gate " + shape_str(gv.shape()));
  }
  const std::size_t inter = t.value(wx_w).dim(0);
  Var<T> zero_b = t.leaf(Tensor<T>({inter}), false);
  Var<T> g_proj = ops::conv2d(gate, wg_w, wg_b, 1, Padding::Same);
  Var<T> x_proj = ops::conv2d(skip, wx_w, zero_b, 1, Padding::Same);
  Var<T> act = ops::relu(ops::add(g_proj, x_proj));
  Var<T> alpha = ops::sigmoid(ops::conv2d(act, psi_w, psi_b, 1, Padding::Same));
  Var<T> gated = ops::mul_channel_broadcast(skip, alpha);
  return {gated, alpha};
}

template <typename T>
UNetModel<T>::UNetModel(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  SplitMix64 rng = SplitMix64::derive(seed, 0x5e67u);
  std::size_t in_c = cfg_.in_channels;
  for (std::size_t level = 0; level < cfg_.depth; ++level) {
    const std::size_t out_c = cfg_.channels_at(level);
    encoder_.push_back(make_res_block("enc" + std::to_string(level), in_c, out_c, rng));
    in_c = out_c;
  }
  const std::size_t bott_c = cfg_.channels_at(cfg_.depth);
  bottleneck_ = make_res_block("bottleneck", in_c, bott_c, rng);

  up_weights_.resize(cfg_.depth);
  gates_.resize(cfg_.depth);
  decoder_.resize(cfg_.depth);
  for (std::size_t level = cfg_.depth; level-- > 0;) {
    const std::size_t from_c = cfg_.channels_at(level + 1);
    const std::size_t to_c = cfg_.channels_at(level);
    const std::string dec = "dec" + std::to_string(level);
    up_weights_[level] = params_.add(
        dec + ".up.weight", fan_in_uniform<T>({from_c, to_c, 2, 2}, from_c * 4, rng));
    gates_[level] = make_gate(dec + ".gate", to_c, rng);
    decoder_[level] = make_res_block(dec, 2 * to_c, to_c, rng);
  }
  head_w_ = params_.add("head.weight",
                        fan_in_uniform<T>({1, cfg_.base_channels, 1, 1}, cfg_.base_channels, rng));
  head_b_ = params_.add("head.bias", Tensor<T>({1}));
}

template <typename T>
ResBlockRefs UNetModel<T>::make_res_block(const std::string& prefix, std::size_t in_c,
                                          std::size_t out_c, SplitMix64& rng) {
  ResBlockRefs rb;
  rb.w1 = params_.add(prefix + ".conv1.weight",
                      fan_in_uniform<T>({out_c, in_c, 3, 3}, in_c * 9, rng));
  rb.b1 = params_.add(prefix + ".conv1.bias", Tensor<T>({out_c}));
  rb.g1 = params_.add(prefix + ".bn1.gamma", Tensor<T>::full({out_c}, T(1)));
  rb.be1 = params_.add(prefix + ".bn1.beta", Tensor<T>({out_c}));
  rb.rm1 = params_.add(prefix + ".bn1.running_mean", Tensor<T>({out_c}), false);
  rb.rv1 = params_.add(prefix + ".bn1.running_var", Tensor<T>::full({out_c}, T(1)), false);
  rb.w2 = params_.add(prefix + ".conv2.weight",
                      fan_in_uniform<T>({out_c, out_c, 3, 3}, out_c * 9, rng));
  rb.b2 = params_.add(prefix + ".conv2.bias", Tensor<T>({out_c}));
  rb.g2 = params_.add(prefix + ".bn2.gamma", Tensor<T>::full({out_c}, T(1)));
  rb.be2 = params_.add(prefix + ".bn2.beta", Tensor<T>({out_c}));
  rb.rm2 = params_.add(prefix + ".bn2.running_mean", Tensor<T>({out_c}), false);
  rb.rv2 = params_.add(prefix + ".bn2.running_var", Tensor<T>::full({out_c}, T(1)), false);
  rb.has_proj = in_c != out_c;
  if (rb.has_proj) {
    rb.pw = params_.add(prefix + ".proj.weight", fan_in_uniform<T>({out_c, in_c, 1, 1}, in_c, rng));
    rb.pb = params_.add(prefix + ".proj.bias", Tensor<T>({out_c}));
  }
  return rb;
}

template <typename T>
GateRefs UNetModel<T>::make_gate(const std::string& prefix, std::size_t channels,
                                 SplitMix64& rng) {
  const std::size_t inter = std::max<std::size_t>(channels / 2, 1);
  GateRefs g;
  g.wg_w = params_.add(prefix + ".wg.weight",
                       fan_in_uniform<T>({inter, channels, 1, 1}, channels, rng));
  g.wg_b = params_.add(prefix + ".wg.bias", Tensor<T>({inter}));
  g.wx_w = params_.add(prefix + ".wx.weight",
                       fan_in_uniform<T>({inter, channels, 1, 1}, channels, rng));
  g.psi_w = params_.add(prefix + ".psi.weight", fan_in_uniform<T>({1, inter, 1, 1}, inter, rng));
  g.psi_b = params_.add(prefix + ".psi.bias", Tensor<T>({1}));
  return g;
}

template <typename T>
Var<T> UNetModel<T>::run_res_block(Tape<T>&, const std::vector<Var<T>>& bound,
                                   const ResBlockRefs& rb, Var<T> x, Mode mode) {
  Tensor<T>& rm1 = params_[rb.rm1].value;
  Tensor<T>& rv1 = params_[rb.rv1].value;
  Tensor<T>& rm2 = params_[rb.rm2].value;
  Tensor<T>& rv2 = params_[rb.rv2].value;
  Var<T> h = ops::conv2d(x, bound[rb.w1], bound[rb.b1], 1, Padding::Same);
  h = ops::batchnorm2d(h, bound[rb.g1], bound[rb.be1], &rm1, &rv1, mode, kBnMomentum, kBnEpsilon);
  h = ops::relu(h);
  h = ops::conv2d(h, bound[rb.w2], bound[rb.b2], 1, Padding::Same);
  h = ops::batchnorm2d(h, bound[rb.g2], bound[rb.be2], &rm2, &rv2, mode, kBnMomentum, kBnEpsilon);
  Var<T> identity = x;
  if (rb.has_proj) identity = ops::conv2d(x, bound[rb.pw], bound[rb.pb], 1, Padding::Same);
  return ops::relu(ops::add(h, identity));
}

template <typename T>
std::pair<Var<T>, Var<T>> UNetModel<T>::run_gate(Tape<T>&, const std::vector<Var<T>>& bound,
                                                 const GateRefs& g, Var<T> skip, Var<T> gate) {
  return attention_gate_forward(skip, gate, bound[g.wg_w], bound[g.wg_b], bound[g.wx_w],
                                bound[g.psi_w], bound[g.psi_b]);
}

template <typename T>
Var<T> UNetModel<T>::run_network(Tape<T>& tape, const std::vector<Var<T>>& bound, Var<T> input,
                                 Mode mode, SplitMix64* rng) {
  const Tensor<T>& xv = tape.value(input);
  if (xv.rank() != 4 || xv.dim(1) != cfg_.in_channels) {
    throw ContractViolation("segmenter input must be [N," + std::to_string(cfg_.in_channels) +
                            ",S,S], got " + shape_str(xv.shape()));
  }
  const std::size_t div = std::size_t(1) << cfg_.depth;
  if (xv.dim(2) % div != 0 || xv.dim(3) % div != 0) {
    throw ContractViolation("input side " + std::to_string(xv.dim(2)) + "x" +
                            std::to_string(xv.dim(3)) + " must be divisible by " +
                            std::to_string(div));
  }
  std::vector<Var<T>> skips;
  Var<T> h = input;
  for (std::size_t level = 0; level < cfg_.depth; ++level) {
    h = run_res_block(tape, bound, encoder_[level], h, mode);
    skips.push_back(h);
    h = ops::maxpool2d(h);
  }
  h = run_res_block(tape, bound, bottleneck_, h, mode);
  h = ops::dropout(h, cfg_.dropout_rate, mode, rng);
  for (std::size_t level = cfg_.depth; level-- > 0;) {
    Var<T> up = ops::conv_transpose2d(h, bound[up_weights_[level]]);
    auto [gated, alpha] = run_gate(tape, bound, gates_[level], skips[level], up);
    (void)alpha;
    h = ops::concat_channels(gated, up);
    h = ops::dropout(h, cfg_.dropout_rate, mode, rng);
    h = run_res_block(tape, bound, decoder_[level], h, mode);
  }
  Var<T> logits = ops::conv2d(h, bound[head_w_], bound[head_b_], 1, Padding::Same);
  return ops::sigmoid(logits);
}

template <typename T>
Var<T> UNetModel<T>::forward(Tape<T>& tape, Var<T> input, Mode mode, SplitMix64* rng) {
  bound_ = params_.bind(tape, tape.grad_enabled());
  return run_network(tape, bound_, input, mode, rng);
}

template <typename T>
Var<T> UNetModel<T>::infer(Tape<T>& tape, Var<T> input) const {
  std::vector<Var<T>> bound = params_.bind(tape, tape.grad_enabled());
  // infer mode only reads the running statistics, so this cast is safe
  return const_cast<UNetModel<T>*>(this)->run_network(tape, bound, input, Mode::Infer, nullptr);
}

template <typename T>
Var<T> UNetModel<T>::residual_block(Tape<T>& tape, std::size_t level, bool decoder, Var<T> x,
                                    Mode mode) {
  const ResBlockRefs& rb = decoder ? decoder_.at(level) : encoder_.at(level);
  std::vector<Var<T>> bound = params_.bind(tape, tape.grad_enabled());
  return run_res_block(tape, bound, rb, x, mode);
}

template class UNetModel<float>;
template class UNetModel<double>;
template std::pair<Var<float>, Var<float>> attention_gate_forward(
    Var<float>, Var<float>, Var<float>, Var<float>, Var<float>, Var<float>, Var<float>);
template std::pair<Var<double>, Var<double>> attention_gate_forward(
    Var<double>, Var<double>, Var<double>, Var<double>, Var<double>, Var<double>, Var<double>);

}  // namespace tb
