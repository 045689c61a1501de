#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tbdetect/ops.hpp"
#include "tbdetect/params.hpp"

namespace tb {

struct ViTConfig {
  std::size_t roi_side = 32;    // classifier input resolution
  std::size_t vit_patch = 8;    // token patch side
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t mlp_dim = 128;
  double dropout_rate = 0.1;
  std::size_t num_classes = 2;

  void validate() const;
  std::size_t token_count() const {
    const std::size_t g = roi_side / vit_patch;
    return g * g;
  }
};

struct FocalLossConfig {
  double gamma = 2.0;
  std::array<double, 2> class_weights{1.0, 1.0};
};

// Inverse-frequency weights normalized so balanced counts give (1,1). A class
// with zero samples is weighted as if it had one (keeps the result finite).
std::array<double, 2> adaptive_class_weights(std::size_t count0, std::size_t count1);

// Mean focal loss over [N,2] probability rows; gamma = 0 with unit weights
// reduces exactly to cross-entropy.
template <typename T>
Var<T> focal_loss(Var<T> probs, const std::vector<int>& labels, const FocalLossConfig& cfg);

// Compact vision transformer for ROI classification: linear patch embedding
// with learned positional embeddings, pre-norm attention/MLP blocks with
// residual adds, mean-pooled tokens and a softmax head. Outputs [N,2] class
// probabilities (index 1 = bacilli).
template <typename T>
class TbVitModel {
 public:
  TbVitModel(ViTConfig cfg, std::uint64_t seed);

  const ViTConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  Var<T> forward(Tape<T>& tape, Var<T> rois, Mode mode, SplitMix64* rng = nullptr);

  // Infer-mode forward without touching model state; thread-safe on a
  // frozen model.
  Var<T> infer(Tape<T>& tape, Var<T> rois) const;

  const std::vector<Var<T>>& bound_vars() const { return bound_; }

  // Standalone pieces for verification. Each binds only what it needs.
  Var<T> patchify_and_embed(Tape<T>& tape, Var<T> rois) const;
  Var<T> attention(Tape<T>& tape, Var<T> tokens, std::size_t layer, Mode mode,
                   SplitMix64* rng = nullptr, Var<T>* attn_probs = nullptr) const;

 private:
  struct DenseRefs {
    std::size_t w, b;
  };
  struct LayerRefs {
    std::size_t ln1_g, ln1_b, ln2_g, ln2_b;
    DenseRefs q, k, v, o, fc1, fc2;
  };

  DenseRefs make_dense(const std::string& name, std::size_t in, std::size_t out,
                       SplitMix64& rng);
  Var<T> run_network(const std::vector<Var<T>>& bound, Var<T> rois, Mode mode,
                     SplitMix64* rng) const;
  Var<T> embed_with(const std::vector<Var<T>>& bound, Var<T> rois) const;
  Var<T> attention_with(const std::vector<Var<T>>& bound, Var<T> tokens, std::size_t layer,
                        Mode mode, SplitMix64* rng, Var<T>* attn_probs) const;
  Var<T> dense_tokens(const std::vector<Var<T>>& bound, Var<T> tokens,
                      const DenseRefs& d) const;

  ViTConfig cfg_;
  ParamStore<T> params_;
  std::size_t proj_w_, proj_b_, pos_;
  std::vector<LayerRefs> layers_;
  std::size_t lnf_g_, lnf_b_;
  DenseRefs head_;
  std::vector<Var<T>> bound_;
};

extern template class TbVitModel<float>;
extern template class TbVitModel<double>;
extern template Var<float> focal_loss(Var<float>, const std::vector<int>&,
                                      const FocalLossConfig&);
extern template Var<double> focal_loss(Var<double>, const std::vector<int>&,
                                       const FocalLossConfig&);

}  // namespace tb
