#pragma once

#include <functional>
#include <vector>

#include "slora/tensor.h"

namespace slora {

// Define-by-run gradient tape. Ops append backward closures as they execute;
// backward() runs them in reverse. Rebuilt from scratch every step.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse order.
  void backward(Tensor<S>& loss) {
    SLORA_CHECK(loss.defined() && loss.numel() == 1,
                "backward: loss must be a defined scalar");
    loss.ensure_grad();
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

}  // namespace slora
