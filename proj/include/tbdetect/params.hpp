#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tbdetect/tape.hpp"
#include "tbdetect/tensor.hpp"

namespace tb {

// Named model parameter. Non-trainable entries (running statistics) are
// carried through checkpoints but never touched by the optimizer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

// Ordered parameter collection. Registration order defines enumeration and
// checkpoint order; names are unique.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<T>{std::move(name), std::move(value), trainable});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t id) { return params_.at(id); }
  const Parameter<T>& operator[](std::size_t id) const { return params_.at(id); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<Parameter<T>>& entries() const { return params_; }
  std::vector<Parameter<T>>& entries() { return params_; }

  // Creates one leaf per parameter on the tape, in registration order.
  std::vector<Var<T>> bind(Tape<T>& tape, bool with_grad) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p.value, with_grad && p.trainable));
    return vars;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace tb
