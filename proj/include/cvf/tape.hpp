#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cvf/tensor.hpp"

namespace cvf {

// Ordered record of differentiable ops executed while the tape is active.
// Entries are appended in execution order, which is a topological order of
// the graph, so backward is a single reverse sweep. A tape belongs to one
// thread.
template <typename T>
class GradTape {
 public:
  // Called with the output node once its gradient is populated.
  using BackwardFn = std::function<void(const TensorNode<T>& out)>;

  void record(std::shared_ptr<TensorNode<T>> out, BackwardFn fn) {
    entries_.push_back(Entry{std::move(out), std::move(fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays entries in reverse. Leaf gradients
  // accumulate into existing buffers, so call zero_grad between steps.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward on a tensor that was not produced under an active tape");
    }
    auto& root = *loss.node();
    root.grad.assign(1, T{1});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // not reachable from loss
      it->fn(*it->out);
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

namespace detail {
template <typename T>
GradTape<T>*& active_tape_slot() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <typename T>
GradTape<T>* active_tape() noexcept {
  return detail::active_tape_slot<T>();
}

// Makes `tape` the active tape for this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

// Disables recording for the scope (evaluation, finite differences).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* previous_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace cvf
