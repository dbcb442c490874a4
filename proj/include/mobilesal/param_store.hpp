#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mobilesal/tensor.hpp"

namespace mobilesal {

enum class ParamKind {
  trainable,  // updated by the optimizer
  buffer      // state carried by the model (BN running stats); checkpointed
};

// Named, ordered collection of parameter tensors. Iteration order is the
// registration order, which is deterministic across runs.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
    ParamKind kind = ParamKind::trainable;
    bool no_decay = false;
  };

  Tensor<S>& add(std::string name, Tensor<S> t,
                 ParamKind kind = ParamKind::trainable, bool no_decay = false) {
    if (index_.count(name)) {
      throw StateError("duplicate parameter name: " + name);
    }
    index_[name] = entries_.size();
    entries_.push_back(Entry{std::move(name), std::move(t), kind, no_decay});
    return entries_.back().tensor;
  }

  bool contains(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
  }

  Tensor<S>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      throw StateError("unknown parameter: " + std::string(name));
    }
    return entries_[it->second].tensor;
  }

  const Tensor<S>& at(std::string_view name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void clear_grads() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

  // Materializes a zero gradient for every trainable parameter that did not
  // receive one; parameters with no path to the loss end up with exact zeros.
  void ensure_grads() {
    for (auto& e : entries_) {
      if (e.kind == ParamKind::trainable) e.tensor.grad();
    }
  }

  // Element count of trainable parameters whose name starts with `prefix`
  // (empty prefix = everything).
  long long count_elements(std::string_view prefix = {}) const {
    long long total = 0;
    for (const auto& e : entries_) {
      if (e.kind != ParamKind::trainable) continue;
      if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
      total += static_cast<long long>(e.tensor.size());
    }
    return total;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// He-normal initialization: zero-mean normal with variance 2/fan_in.
template <typename S>
Tensor<S> he_normal(TensorShape shape, Eigen::Index fan_in, Pcg32& rng) {
  return Tensor<S>::randn(shape, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace mobilesal
