#pragma once

#include <cmath>
#include <vector>

#include "mobilesal/param_store.hpp"

namespace mobilesal {

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 60;
  int batch = 10;
  double poly_power = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double weight_decay = 1e-4;
  double adam_eps = 1e-8;
  std::vector<int> scales{256, 288, 320};
  double lambda = 0.3;
  uint64_t seed = 1;
  bool augment = true;
  int checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (lr <= 0 || epochs <= 0 || batch <= 0 || poly_power <= 0 ||
        adam_beta1 <= 0 || adam_beta2 <= 0 || adam_eps <= 0) {
      throw StateError("train config: all schedule values must be positive");
    }
    if (weight_decay < 0 || lambda < 0) {
      throw StateError("train config: weight_decay and lambda must be >= 0");
    }
    if (scales.empty()) throw StateError("train config: no training scales");
    for (int s : scales) {
      if (s <= 0 || s % 32 != 0) {
        throw StateError("train config: scales must be positive multiples of 32");
      }
    }
  }
};

// Poly schedule: lr * (1 - cur_epoch/epochs)^power.
inline double poly_lr(int cur_epoch, const TrainConfig& cfg) {
  if (cur_epoch < 0 || cur_epoch >= cfg.epochs) {
    throw StateError("poly_lr: epoch " + std::to_string(cur_epoch) +
                     " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  return cfg.lr * std::pow(1.0 - static_cast<double>(cur_epoch) / cfg.epochs,
                           cfg.poly_power);
}

// First/second moment state per trainable parameter, in store order.
template <typename S>
struct AdamState {
  struct Slot {
    typename Tensor<S>::Buffer m, v;
  };
  std::vector<Slot> slots;
  long long step = 0;
};

template <typename S>
AdamState<S> make_adam_state(const ParamStore<S>& store) {
  AdamState<S> st;
  for (const auto& e : store.entries()) {
    if (e.kind != ParamKind::trainable) continue;
    st.slots.push_back({Tensor<S>::Buffer::Zero(e.tensor.size()),
                        Tensor<S>::Buffer::Zero(e.tensor.size())});
  }
  return st;
}

// One Adam step with bias correction. Weight decay is decoupled (applied
// directly to the weights, excluded from the moments) and skipped for
// parameters flagged no_decay (BN gamma/beta). Gradients are cleared after
// the update.
template <typename S>
void adam_step(ParamStore<S>& store, AdamState<S>& state, double lr,
               const TrainConfig& cfg) {
  std::size_t slot = 0;
  for (auto& e : store.entries()) {
    if (e.kind != ParamKind::trainable) continue;
    if (!e.tensor.has_grad()) {
      throw StateError("adam_step: no gradient for " + e.name +
                       " (backward not run?)");
    }
    ++slot;
  }
  if (slot != state.slots.size()) {
    throw StateError("adam_step: optimizer state does not match the store");
  }
  ++state.step;
  const S b1 = static_cast<S>(cfg.adam_beta1);
  const S b2 = static_cast<S>(cfg.adam_beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(cfg.adam_beta1, state.step));
  const S bc2 = static_cast<S>(1.0 - std::pow(cfg.adam_beta2, state.step));
  const S eps = static_cast<S>(cfg.adam_eps);
  slot = 0;
  for (auto& e : store.entries()) {
    if (e.kind != ParamKind::trainable) continue;
    auto& m = state.slots[slot].m;
    auto& v = state.slots[slot].v;
    ++slot;
    auto theta = e.tensor.array();
    const auto& g = e.tensor.grad();
    if (cfg.weight_decay > 0 && !e.no_decay) {
      theta *= (S(1) - static_cast<S>(lr * cfg.weight_decay));
    }
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    theta -= static_cast<S>(lr) * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
  store.clear_grads();
}

}  // namespace mobilesal
