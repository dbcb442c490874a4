#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mobilesal/error.hpp"
#include "mobilesal/tensor.hpp"

namespace mobilesal {

// Reverse-mode tape. Operations append a backward closure as they execute;
// backward() seeds the loss gradient and replays the closures in reverse.
//
// A Graph instance belongs to one training thread. Independent graphs may run
// concurrently.
template <typename Scalar>
class Graph {
 public:
  void record(const char* name, std::function<void()> backward) {
    nodes_.push_back({name, std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Propagates d(loss)/d(tensor) to everything the loss depends on and
  // consumes the tape.
  void backward(Tensor<Scalar>& loss) {
    if (nodes_.empty()) {
      throw StateError("backward called before any forward op was recorded");
    }
    if (loss.size() != 1) {
      throw ShapeError("backward expects a scalar loss, got shape " +
                       loss.shape().str());
    }
    loss.grad()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->fn();
    }
    nodes_.clear();
  }

 private:
  struct Node {
    const char* name;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace mobilesal
