#pragma once

#include <cmath>
#include <vector>

#include "tbdetect/params.hpp"

namespace tb {

// Adaptive-moment optimizer. Moment buffers are kept per parameter index in
// the store; the step counter drives bias correction and must only grow.
template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                         double epsilon = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::size_t step_count() const { return step_; }

  // Applies one update using the gradients accumulated on `tape` for the
  // leaves in `bound` (as produced by ParamStore::bind). Every trainable
  // parameter must have received a gradient.
  void step(ParamStore<T>& store, const Tape<T>& tape, const std::vector<Var<T>>& bound) {
    if (bound.size() != store.size()) {
      throw ContractViolation("optimizer: bound variable count does not match parameter store");
    }
    ensure_state(store);
    ++step_;
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(step_)));
    const T lr = static_cast<T>(lr_), eps = static_cast<T>(epsilon_);
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter<T>& p = store[i];
      if (!p.trainable) continue;
      const Tensor<T>* g = tape.grad_ptr(bound[i]);
      if (!g) throw ContractViolation("optimizer: missing gradient for parameter " + p.name);
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      T* pm = m.raw();
      T* pv = v.raw();
      T* pw = p.value.raw();
      const T* pg = g->raw();
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        pm[j] = b1 * pm[j] + (T(1) - b1) * pg[j];
        pv[j] = b2 * pv[j] + (T(1) - b2) * pg[j] * pg[j];
        const T mhat = pm[j] / bc1;
        const T vhat = pv[j] / bc2;
        pw[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  void ensure_state(const ParamStore<T>& store) {
    if (m_.size() == store.size()) return;
    if (!m_.empty()) throw ContractViolation("optimizer: parameter store changed size");
    m_.reserve(store.size());
    v_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.emplace_back(store[i].value.shape());
      v_.emplace_back(store[i].value.shape());
    }
  }

  double lr_, beta1_, beta2_, epsilon_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace tb
