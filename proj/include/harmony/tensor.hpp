#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "harmony/errors.hpp"
#include "harmony/rng.hpp"

namespace harmony {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// One recorded operation (or leaf) of the define-by-run tape. The graph is
// rebuilt on every forward pass; backward() walks it in reverse topological
// order exactly once.
template <class S>
struct NodeT {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized during backward; leaves keep it afterwards
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(NodeT<S>&)> backprop;
};

template <class S>
using NodePtr = std::shared_ptr<NodeT<S>>;

// Value-semantics handle to a graph node. Copies share the node.
template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;
  explicit TensorT(NodePtr<S> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static TensorT filled(Shape shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<S>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(shape));
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return filled(Shape{1}, v, requires_grad);
  }

  // Zero-mean Gaussian init, consumed from the given stream.
  static TensorT randn(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.values()) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<S>& values() { return node_->value; }
  const std::vector<S>& values() const { return node_->value; }
  std::vector<S>& grad() { return node_->grad; }
  const std::vector<S>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Copies values into a fresh leaf with no history.
  TensorT detach() const {
    auto n = std::make_shared<NodeT<S>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return TensorT(std::move(n));
  }

  NodePtr<S> node() const { return node_; }

  bool all_finite() const {
    for (S v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Debug dump: one line of shape, then row-major values, 9 significant digits.
  void dump(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw DataError("cannot open " + path + " for writing");
    for (size_t i = 0; i < node_->shape.size(); ++i)
      std::fprintf(f, "%s%d", i ? " " : "", node_->shape[i]);
    std::fprintf(f, "\n");
    for (S v : node_->value) std::fprintf(f, "%.9g\n", static_cast<double>(v));
    std::fclose(f);
  }

 private:
  NodePtr<S> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

// Reverse topological order of the grad-requiring subgraph reachable from root.
template <class S>
std::vector<NodeT<S>*> topo_order(const NodePtr<S>& root) {
  std::vector<NodeT<S>*> order;
  std::unordered_set<NodeT<S>*> seen;
  // Iterative DFS; parents are visited in their recorded order so the
  // resulting order is deterministic.
  struct Frame {
    NodeT<S>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root->requires_grad) stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      NodeT<S>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;  // children after their parents; walk backwards for backprop
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Grad buffers in the reachable graph
// are zeroed first, so leaf gradients reflect exactly this loss.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ConfigError("backward() on a loss with no grad-enabled inputs");
  auto order = detail::topo_order<S>(loss.node());
  for (NodeT<S>* n : order) n->grad.assign(n->value.size(), S(0));
  loss.node()->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace harmony
