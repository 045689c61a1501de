#include "tbdetect/tbvit.hpp"

#include <cmath>
#include <string>

namespace tb {

void ViTConfig::validate() const {
  if (vit_patch == 0 || roi_side == 0 || roi_side % vit_patch != 0) {
    throw ContractViolation("roi_side " + std::to_string(roi_side) +
                            " must be divisible by vit_patch " + std::to_string(vit_patch));
  }
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw ContractViolation("embed_dim " + std::to_string(embed_dim) +
                            " must be divisible by num_heads " + std::to_string(num_heads));
  }
  if (num_layers < 1) throw ContractViolation("num_layers must be >= 1");
  if (mlp_dim < 1) throw ContractViolation("mlp_dim must be >= 1");
  if (num_classes != 2) throw ContractViolation("classifier is binary; num_classes must be 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ContractViolation("dropout_rate must lie in [0,1)");
  }
}

std::array<double, 2> adaptive_class_weights(std::size_t count0, std::size_t count1) {
  const double total = static_cast<double>(count0 + count1);
  if (total == 0.0) return {1.0, 1.0};
  const double c0 = static_cast<double>(count0 == 0 ? 1 : count0);
  const double c1 = static_cast<double>(count1 == 0 ? 1 : count1);
  return {total / (2.0 * c0), total / (2.0 * c1)};
}

template <typename T>
Var<T> focal_loss(Var<T> probs, const std::vector<int>& labels, const FocalLossConfig& cfg) {
  if (cfg.gamma < 0.0) throw ContractViolation("focal gamma must be >= 0");
  if (cfg.class_weights[0] <= 0.0 || cfg.class_weights[1] <= 0.0) {
    throw ContractViolation("focal class weights must be positive");
  }
  const std::vector<T> w{static_cast<T>(cfg.class_weights[0]),
                         static_cast<T>(cfg.class_weights[1])};
  return ops::focal_mean(probs, labels, static_cast<T>(cfg.gamma), w);
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
TbVitModel<T>::TbVitModel(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  SplitMix64 rng = SplitMix64::derive(seed, 0x717bu);
  const std::size_t feat = 3 * cfg_.vit_patch * cfg_.vit_patch;
  const std::size_t D = cfg_.embed_dim;
  proj_w_ = params_.add("embed.weight", fan_in_uniform<T>({feat, D}, feat, rng));
  proj_b_ = params_.add("embed.bias", Tensor<T>({D}));
  Tensor<T> pos({cfg_.token_count(), D});
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<T>(rng.uniform(-0.02, 0.02));
  pos_ = params_.add("embed.positions", std::move(pos));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    LayerRefs refs;
    refs.ln1_g = params_.add(p + ".ln1.gamma", Tensor<T>::full({D}, T(1)));
    refs.ln1_b = params_.add(p + ".ln1.beta", Tensor<T>({D}));
    refs.q = make_dense(p + ".attn.q", D, D, rng);
    refs.k = make_dense(p + ".attn.k", D, D, rng);
    refs.v = make_dense(p + ".attn.v", D, D, rng);
    refs.o = make_dense(p + ".attn.out", D, D, rng);
    refs.ln2_g = params_.add(p + ".ln2.gamma", Tensor<T>::full({D}, T(1)));
    refs.ln2_b = params_.add(p + ".ln2.beta", Tensor<T>({D}));
    refs.fc1 = make_dense(p + ".mlp.fc1", D, cfg_.mlp_dim, rng);
    refs.fc2 = make_dense(p + ".mlp.fc2", cfg_.mlp_dim, D, rng);
    layers_.push_back(refs);
  }
  lnf_g_ = params_.add("final_norm.gamma", Tensor<T>::full({D}, T(1)));
  lnf_b_ = params_.add("final_norm.beta", Tensor<T>({D}));
  head_ = make_dense("head", D, cfg_.num_classes, rng);
}

template <typename T>
typename TbVitModel<T>::DenseRefs TbVitModel<T>::make_dense(const std::string& name,
                                                            std::size_t in, std::size_t out,
                                                            SplitMix64& rng) {
  DenseRefs d;
  d.w = params_.add(name + ".weight", fan_in_uniform<T>({in, out}, in, rng));
  d.b = params_.add(name + ".bias", Tensor<T>({out}));
  return d;
}

template <typename T>
Var<T> TbVitModel<T>::dense_tokens(const std::vector<Var<T>>& bound, Var<T> tokens,
                                   const DenseRefs& d) const {
  const Tensor<T>& tv = tokens.value();
  const std::size_t N = tv.dim(0), Tk = tv.dim(1), D_in = tv.dim(2);
  Var<T> flat = ops::reshape(tokens, {N * Tk, D_in});
  Var<T> out = ops::dense(flat, bound[d.w], bound[d.b]);
  return ops::reshape(out, {N, Tk, out.value().dim(1)});
}

template <typename T>
Var<T> TbVitModel<T>::embed_with(const std::vector<Var<T>>& bound, Var<T> rois) const {
  const Tensor<T>& xv = rois.value();
  if (xv.rank() != 4 || xv.dim(1) != 3 || xv.dim(2) != cfg_.roi_side ||
      xv.dim(3) != cfg_.roi_side) {
    throw ContractViolation("classifier input must be [N,3," + std::to_string(cfg_.roi_side) +
                            "," + std::to_string(cfg_.roi_side) + "], got " +
                            shape_str(xv.shape()));
  }
  Var<T> patches = ops::extract_patches(rois, cfg_.vit_patch);  // [N,T,feat]
  const std::size_t N = xv.dim(0), Tk = cfg_.token_count();
  Var<T> flat = ops::reshape(patches, {N * Tk, patches.value().dim(2)});
  Var<T> proj = ops::dense(flat, bound[proj_w_], bound[proj_b_]);
  Var<T> tokens = ops::reshape(proj, {N, Tk, cfg_.embed_dim});
  return ops::add_rows(tokens, bound[pos_]);
}

template <typename T>
Var<T> TbVitModel<T>::attention_with(const std::vector<Var<T>>& bound, Var<T> tokens,
                                     std::size_t layer, Mode mode, SplitMix64* rng,
                                     Var<T>* attn_probs) const {
  const LayerRefs& L = layers_.at(layer);
  const Tensor<T>& tv = tokens.value();
  if (tv.rank() != 3 || tv.dim(2) != cfg_.embed_dim) {
    throw ContractViolation("attention expects [N,T," + std::to_string(cfg_.embed_dim) +
                            "] tokens, got " + shape_str(tv.shape()));
  }
  const std::size_t N = tv.dim(0), Tk = tv.dim(1);
  const std::size_t H = cfg_.num_heads, D = cfg_.embed_dim, Dh = D / H;

  auto split_heads = [&](Var<T> x) {
    x = ops::reshape(x, {N, Tk, H, Dh});
    x = ops::permute(x, {0, 2, 1, 3});
    return ops::reshape(x, {N * H, Tk, Dh});
  };
  Var<T> q = split_heads(dense_tokens(bound, tokens, L.q));
  Var<T> k = split_heads(dense_tokens(bound, tokens, L.k));
  Var<T> v = split_heads(dense_tokens(bound, tokens, L.v));

  Var<T> scores = ops::bmm(q, k, /*transpose_b=*/true);  // [N*H,T,T]
  scores = ops::scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh))));
  Var<T> probs = ops::softmax(scores, 2);
  if (attn_probs) *attn_probs = probs;
  probs = ops::dropout(probs, cfg_.dropout_rate, mode, rng);
  Var<T> ctx = ops::bmm(probs, v);  // [N*H,T,Dh]
  ctx = ops::reshape(ctx, {N, H, Tk, Dh});
  ctx = ops::permute(ctx, {0, 2, 1, 3});
  ctx = ops::reshape(ctx, {N, Tk, D});
  return dense_tokens(bound, ctx, L.o);
}

template <typename T>
Var<T> TbVitModel<T>::run_network(const std::vector<Var<T>>& bound, Var<T> rois, Mode mode,
                                  SplitMix64* rng) const {
  Var<T> tokens = embed_with(bound, rois);
  tokens = ops::dropout(tokens, cfg_.dropout_rate, mode, rng);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const LayerRefs& L = layers_[l];
    Var<T> normed = ops::layernorm(tokens, bound[L.ln1_g], bound[L.ln1_b]);
    Var<T> att = attention_with(bound, normed, l, mode, rng, nullptr);
    att = ops::dropout(att, cfg_.dropout_rate, mode, rng);
    tokens = ops::add(tokens, att);
    Var<T> normed2 = ops::layernorm(tokens, bound[L.ln2_g], bound[L.ln2_b]);
    const Tensor<T>& tv = normed2.value();
    const std::size_t N = tv.dim(0), Tk = tv.dim(1);
    Var<T> flat = ops::reshape(normed2, {N * Tk, cfg_.embed_dim});
    Var<T> hidden = ops::gelu(ops::dense(flat, bound[L.fc1.w], bound[L.fc1.b]));
    hidden = ops::dropout(hidden, cfg_.dropout_rate, mode, rng);
    Var<T> out = ops::dense(hidden, bound[L.fc2.w], bound[L.fc2.b]);
    tokens = ops::add(tokens, ops::reshape(out, {N, Tk, cfg_.embed_dim}));
  }
  tokens = ops::layernorm(tokens, bound[lnf_g_], bound[lnf_b_]);
  Var<T> pooled = ops::mean_tokens(tokens);  // [N,D]
  Var<T> logits = ops::dense(pooled, bound[head_.w], bound[head_.b]);
  return ops::softmax(logits, 1);
}

template <typename T>
Var<T> TbVitModel<T>::forward(Tape<T>& tape, Var<T> rois, Mode mode, SplitMix64* rng) {
  bound_ = params_.bind(tape, tape.grad_enabled());
  return run_network(bound_, rois, mode, rng);
}

template <typename T>
Var<T> TbVitModel<T>::infer(Tape<T>& tape, Var<T> rois) const {
  std::vector<Var<T>> bound = params_.bind(tape, tape.grad_enabled());
  return run_network(bound, rois, Mode::Infer, nullptr);
}

template <typename T>
Var<T> TbVitModel<T>::patchify_and_embed(Tape<T>& tape, Var<T> rois) const {
  std::vector<Var<T>> bound = params_.bind(tape, tape.grad_enabled());
  return embed_with(bound, rois);
}

template <typename T>
Var<T> TbVitModel<T>::attention(Tape<T>& tape, Var<T> tokens, std::size_t layer, Mode mode,
                                SplitMix64* rng, Var<T>* attn_probs) const {
  std::vector<Var<T>> bound = params_.bind(tape, tape.grad_enabled());
  return attention_with(bound, tokens, layer, mode, rng, attn_probs);
}

template class TbVitModel<float>;
template class TbVitModel<double>;
template Var<float> focal_loss(Var<float>, const std::vector<int>&, const FocalLossConfig&);
template Var<double> focal_loss(Var<double>, const std::vector<int>&, const FocalLossConfig&);

}  // namespace tb
