#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "enp/tensor.hpp"

namespace enp {

// Reverse-mode autodiff over Tensor. Graphs are built eagerly (values are
// computed at construction) and rebuilt per training step; backward() fills
// the grad field of every node reachable from the root. Gradients accumulate
// additively across fan-out.

enum class Op {
  Leaf,
  MatMul,
  Add,
  Multiply,
  Tanh,
  Relu,
  Softmax,
  LogSumExp,
  Sum,
  Mean,
  IndexSelect,
  Concatenate,
  ScalarScale,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Multiply: return "multiply";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Softmax: return "softmax";
    case Op::LogSumExp: return "logsumexp";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::IndexSelect: return "index_select";
    case Op::Concatenate: return "concatenate";
    case Op::ScalarScale: return "scalar_scale";
  }
  return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Op op = Op::Leaf;
  std::vector<NodePtr> inputs;
  Tensor value;
  Tensor grad;
  int axis = -1;                      // Sum / Mean / Concatenate
  double scale = 1.0;                 // ScalarScale
  std::vector<std::size_t> indices;   // IndexSelect (rows)
};

[[noreturn]] inline void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("shape mismatch in ") + op_name(op) + ": " +
                              shape_str(a) + " vs " + shape_str(b));
}

inline NodePtr make_node(Op op, std::vector<NodePtr> inputs, Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->inputs = std::move(inputs);
  n->value = std::move(value);
  return n;
}

inline NodePtr leaf(Tensor t) { return make_node(Op::Leaf, {}, std::move(t)); }

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.cols() != B.rows()) shape_error(Op::MatMul, A, B);
  Tensor C(A.rows(), B.cols());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = A.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B.data[p * m];
      double* crow = &C.data[i * m];
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  return make_node(Op::MatMul, {a, b}, std::move(C));
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) shape_error(Op::Add, a->value, b->value);
  Tensor c = a->value;
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b->value.data[i];
  return make_node(Op::Add, {a, b}, std::move(c));
}

inline NodePtr multiply(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) shape_error(Op::Multiply, a->value, b->value);
  Tensor c = a->value;
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] *= b->value.data[i];
  return make_node(Op::Multiply, {a, b}, std::move(c));
}

inline NodePtr tanh_op(const NodePtr& a) {
  Tensor c = a->value;
  for (double& v : c.data) v = std::tanh(v);
  return make_node(Op::Tanh, {a}, std::move(c));
}

inline NodePtr relu(const NodePtr& a) {
  Tensor c = a->value;
  for (double& v : c.data) v = v > 0.0 ? v : 0.0;
  return make_node(Op::Relu, {a}, std::move(c));
}

// Softmax over all entries; shape preserved.
inline NodePtr softmax(const NodePtr& a) {
  Tensor c = a->value;
  double mx = c.data[0];
  for (double v : c.data) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : c.data) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : c.data) v /= s;
  return make_node(Op::Softmax, {a}, std::move(c));
}

// log(sum(exp(x))) over all entries -> {1,1}. Max-subtraction keeps it finite
// for any finite input.
inline NodePtr logsumexp(const NodePtr& a) {
  const Tensor& x = a->value;
  double mx = x.data[0];
  for (double v : x.data) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x.data) s += std::exp(v - mx);
  return make_node(Op::LogSumExp, {a}, Tensor::scalar(mx + std::log(s)));
}

// axis = -1: all entries -> {1,1}; axis = 0: column sums -> {1,cols};
// axis = 1: row sums -> {rows,1}.
inline NodePtr sum(const NodePtr& a, int axis = -1) {
  const Tensor& x = a->value;
  Tensor c;
  if (axis == -1) {
    double s = 0.0;
    for (double v : x.data) s += v;
    c = Tensor::scalar(s);
  } else if (axis == 0) {
    c = Tensor(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) c.data[j] += x.at(i, j);
  } else if (axis == 1) {
    c = Tensor(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) c.data[i] += x.at(i, j);
  } else {
    throw std::invalid_argument("sum: bad axis");
  }
  auto n = make_node(Op::Sum, {a}, std::move(c));
  n->axis = axis;
  return n;
}

inline NodePtr mean(const NodePtr& a, int axis = -1) {
  auto s = sum(a, axis);
  double denom = axis == -1 ? static_cast<double>(a->value.size())
                            : static_cast<double>(axis == 0 ? a->value.rows() : a->value.cols());
  Tensor c = s->value;
  for (double& v : c.data) v /= denom;
  auto n = make_node(Op::Mean, {a}, std::move(c));
  n->axis = axis;
  return n;
}

// Gather rows (axis 0).
inline NodePtr index_select(const NodePtr& a, const std::vector<std::size_t>& rows) {
  const Tensor& x = a->value;
  for (std::size_t r : rows)
    if (r >= x.rows())
      throw std::out_of_range("index_select: row " + std::to_string(r) + " out of " +
                              std::to_string(x.rows()));
  Tensor c(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) c.at(i, j) = x.at(rows[i], j);
  auto n = make_node(Op::IndexSelect, {a}, std::move(c));
  n->indices = rows;
  return n;
}

inline NodePtr concatenate(const std::vector<NodePtr>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concatenate: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concatenate: bad axis");
  std::size_t r = parts[0]->value.rows(), c = parts[0]->value.cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (axis == 0 && p->value.cols() != c) shape_error(Op::Concatenate, parts[0]->value, p->value);
    if (axis == 1 && p->value.rows() != r) shape_error(Op::Concatenate, parts[0]->value, p->value);
    total += axis == 0 ? p->value.rows() : p->value.cols();
  }
  Tensor out(axis == 0 ? total : r, axis == 0 ? c : total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& x = p->value;
    if (axis == 0) {
      std::copy(x.data.begin(), x.data.end(), out.data.begin() + off * c);
      off += x.rows();
    } else {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, off + j) = x.at(i, j);
      off += x.cols();
    }
  }
  auto n = make_node(Op::Concatenate, parts, std::move(out));
  n->axis = axis;
  return n;
}

inline NodePtr scalar_scale(const NodePtr& a, double s) {
  Tensor c = a->value;
  for (double& v : c.data) v *= s;
  auto n = make_node(Op::ScalarScale, {a}, std::move(c));
  n->scale = s;
  return n;
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) { return add(a, scalar_scale(b, -1.0)); }

// Value of the root. Values are computed eagerly at construction; this exists
// as the named entry point and re-checks that leaves were assigned.
inline const Tensor& forward(const NodePtr& root) { return root->value; }

// Iterative post-order topological sort (graphs can be deep).
inline std::vector<Node*> topo_order(const NodePtr& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* child = n->inputs[i].get();
      ++i;
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

// Reverse-mode sweep. Root must be scalar-shaped. Fills node->grad for every
// node in the graph; leaf gradients are read off the leaf nodes afterwards.
inline void backward(const NodePtr& root) {
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root->value));
  std::vector<Node*> order = topo_order(root);
  for (Node* n : order) {
    n->grad = Tensor(n->value.rows(), n->value.cols());
  }
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    const Tensor& g = n->grad;
    switch (n->op) {
      case Op::Leaf:
        break;
      case Op::MatMul: {
        const Tensor& A = n->inputs[0]->value;
        const Tensor& B = n->inputs[1]->value;
        Tensor& dA = n->inputs[0]->grad;
        Tensor& dB = n->inputs[1]->grad;
        const std::size_t nn = A.rows(), k = A.cols(), m = B.cols();
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = &g.data[i * m];
            const double* brow = &B.data[p * m];
            for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
            dA.data[i * k + p] += acc;
          }
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < nn; ++i) acc += A.data[i * k + p] * g.data[i * m + j];
            dB.data[p * m + j] += acc;
          }
        break;
      }
      case Op::Add:
        for (std::size_t i = 0; i < g.size(); ++i) {
          n->inputs[0]->grad.data[i] += g.data[i];
          n->inputs[1]->grad.data[i] += g.data[i];
        }
        break;
      case Op::Multiply:
        for (std::size_t i = 0; i < g.size(); ++i) {
          n->inputs[0]->grad.data[i] += g.data[i] * n->inputs[1]->value.data[i];
          n->inputs[1]->grad.data[i] += g.data[i] * n->inputs[0]->value.data[i];
        }
        break;
      case Op::Tanh:
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n->value.data[i];
          n->inputs[0]->grad.data[i] += g.data[i] * (1.0 - y * y);
        }
        break;
      case Op::Relu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (n->inputs[0]->value.data[i] > 0.0) n->inputs[0]->grad.data[i] += g.data[i];
        break;
      case Op::Softmax: {
        const Tensor& y = n->value;
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g.data[i] * y.data[i];
        for (std::size_t i = 0; i < g.size(); ++i)
          n->inputs[0]->grad.data[i] += y.data[i] * (g.data[i] - dot);
        break;
      }
      case Op::LogSumExp: {
        const Tensor& x = n->inputs[0]->value;
        double mx = x.data[0];
        for (double v : x.data) mx = std::max(mx, v);
        double s = 0.0;
        for (double v : x.data) s += std::exp(v - mx);
        double g0 = g.data[0];
        for (std::size_t i = 0; i < x.size(); ++i)
          n->inputs[0]->grad.data[i] += g0 * std::exp(x.data[i] - mx) / s;
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        Tensor& dx = n->inputs[0]->grad;
        const Tensor& x = n->inputs[0]->value;
        double denom = 1.0;
        if (n->op == Op::Mean)
          denom = n->axis == -1 ? static_cast<double>(x.size())
                                : static_cast<double>(n->axis == 0 ? x.rows() : x.cols());
        if (n->axis == -1) {
          double g0 = g.data[0] / denom;
          for (double& v : dx.data) v += g0;
        } else if (n->axis == 0) {
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) dx.at(i, j) += g.data[j] / denom;
        } else {
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) dx.at(i, j) += g.data[i] / denom;
        }
        break;
      }
      case Op::IndexSelect: {
        Tensor& dx = n->inputs[0]->grad;
        std::size_t c = dx.cols();
        for (std::size_t i = 0; i < n->indices.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) dx.at(n->indices[i], j) += g.at(i, j);
        break;
      }
      case Op::Concatenate: {
        std::size_t off = 0;
        for (const auto& inp : n->inputs) {
          Tensor& dx = inp->grad;
          if (n->axis == 0) {
            for (std::size_t i = 0; i < dx.rows(); ++i)
              for (std::size_t j = 0; j < dx.cols(); ++j) dx.at(i, j) += g.at(off + i, j);
            off += dx.rows();
          } else {
            for (std::size_t i = 0; i < dx.rows(); ++i)
              for (std::size_t j = 0; j < dx.cols(); ++j) dx.at(i, j) += g.at(i, off + j);
            off += dx.cols();
          }
        }
        break;
      }
      case Op::ScalarScale:
        for (std::size_t i = 0; i < g.size(); ++i)
          n->inputs[0]->grad.data[i] += g.data[i] * n->scale;
        break;
    }
  }
}

}  // namespace enp
