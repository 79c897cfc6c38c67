#include "cfx/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace cfx::ad {

namespace {
thread_local int no_grad_depth = 0;
}

NoGrad::NoGrad() { ++no_grad_depth; }
NoGrad::~NoGrad() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

Var constant(Arr v, std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  if (v.size() != shape_size(shape)) throw std::logic_error("constant: shape/size mismatch");
  n->val = std::move(v);
  n->shape = std::move(shape);
  return n;
}

Var constant_scalar(float v) {
  Arr a(1);
  a[0] = v;
  return constant(std::move(a), {1});
}

Var leaf(Arr v, std::vector<int> shape, bool needs_grad) {
  auto n = constant(std::move(v), std::move(shape));
  n->needs_grad = needs_grad;
  return n;
}

void backward(const Var& root) {
  if (root->size() != 1) throw std::logic_error("backward: root must be scalar");
  // iterative topological order
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_set<Node*> visited;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->needs_grad) n->backprop(*n);
  }
}

Var detach(const Var& x) {
  auto n = std::make_shared<Node>();
  n->val = x->val;
  n->shape = x->shape;
  return n;
}

}  // namespace cfx::ad
