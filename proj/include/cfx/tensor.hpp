#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <vector>

namespace cfx::ad {

using Arr = Eigen::ArrayXf;
using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct Node;
using Var = std::shared_ptr<Node>;

// One value in a dynamically built computation graph. Data is stored flat in
// row-major order with the last shape dimension fastest.
struct Node {
  Arr val;
  Arr grad;  // allocated lazily by backward()
  std::vector<int> shape;
  bool needs_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad into parents

  Eigen::Index size() const { return val.size(); }
  int dim(int i) const { return shape[std::size_t(i)]; }
  void ensure_grad() {
    if (grad.size() != val.size()) grad = Arr::Zero(val.size());
  }
};

inline Eigen::Index shape_size(const std::vector<int>& s) {
  Eigen::Index n = 1;
  for (int d : s) n *= d;
  return n;
}

Var constant(Arr v, std::vector<int> shape);
Var constant_scalar(float v);
Var leaf(Arr v, std::vector<int> shape, bool needs_grad);

// Reverse-mode sweep from `root` (must be a scalar node).
void backward(const Var& root);

// While alive, newly created ops record no graph (inference mode).
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
};
bool grad_enabled();

Var detach(const Var& x);

}  // namespace cfx::ad
