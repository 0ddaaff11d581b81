// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "msunet/tensor.hpp"

namespace msunet {

/// Named learnable tensor. Lives outside any graph; graphs bind to it via
/// leaf nodes so gradients accumulate here across backward passes.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  explicit Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

/// Ordered, name-addressed parameter container. Registration order is the
/// canonical iteration order used by the optimizer and the checkpoint format.
template <typename T>
class ParamStore {
public:
  Param<T>& create(const std::string& name, Tensor<T> init) {
    MSUNET_CHECK(by_name_.find(name) == by_name_.end(), "duplicate parameter name: " << name);
    owned_.push_back(std::make_unique<Param<T>>(name, std::move(init)));
    by_name_[name] = owned_.back().get();
    return *owned_.back();
  }

  Param<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  Param<T>& at(const std::string& name) const {
    Param<T>* p = find(name);
    MSUNET_CHECK(p != nullptr, "unknown parameter: " << name);
    return *p;
  }

  const std::vector<std::unique_ptr<Param<T>>>& all() const { return owned_; }
  size_t size() const { return owned_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& p : owned_) n += p->value.numel();
    return n;
  }

  int64_t trainable_scalar_count() const {
    int64_t n = 0;
    for (const auto& p : owned_)
      if (p->trainable) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : owned_) p->zero_grad();
  }

  /// Sum of parameter counts of every name starting with `prefix`.
  int64_t scalar_count_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& p : owned_)
      if (p->name.rfind(prefix, 0) == 0) n += p->value.numel();
    return n;
  }

private:
  std::vector<std::unique_ptr<Param<T>>> owned_;
  std::map<std::string, Param<T>*> by_name_;
};

template <typename T>
class Graph;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use during backward
  bool requires_grad = false;
  std::vector<Node*> parents;
  std::function<void(Node&)> backward;  // pushes this->grad into parents
  Param<T>* bound_param = nullptr;
  size_t index = 0;  // creation index; creation order is a topological order

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
  }
};

/// Lightweight handle into the graph arena.
template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  Node<T>* n = nullptr;

  const Tensor<T>& val() const { return n->value; }
  const Shape& shape() const { return n->value.shape; }
  int64_t numel() const { return n->value.numel(); }
  bool requires_grad() const { return n->requires_grad; }

  /// Value of a scalar (rank-0 or single-element) node.
  T item() const {
    MSUNET_CHECK(n->value.numel() == 1, "item() on non-scalar of shape " << shape_str(shape()));
    return n->value.data[0];
  }
};

/// Tape of one forward evaluation. Nodes are appended in evaluation order, so
/// the arena order doubles as a topological order for the backward sweep.
template <typename T>
class Graph {
public:
  Var<T> make_node(Tensor<T> value, std::vector<Node<T>*> parents,
                   std::function<void(Node<T>&)> backward) {
    auto node = std::make_unique<Node<T>>();
    node->value = std::move(value);
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    node->index = nodes_.size();
    for (Node<T>* p : node->parents) {
      if (p->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.back().get()};
  }

  Var<T> constant(Tensor<T> value) {
    return make_node(std::move(value), {}, nullptr);
  }

  Var<T> leaf(Param<T>& p) {
    Var<T> v = make_node(p.value, {}, nullptr);
    v.n->bound_param = &p;
    v.n->requires_grad = p.trainable;
    return v;
  }

  /// Reverse sweep from `loss` (must be scalar). Accumulates into bound
  /// parameter gradients; node gradients live only as long as the graph.
  void backward(Var<T> loss) {
    MSUNET_CHECK(loss.g == this, "backward on a Var from a different graph");
    MSUNET_CHECK(loss.n->value.numel() == 1, "backward requires a scalar loss");
    if (!loss.n->requires_grad) return;

    loss.n->ensure_grad();
    loss.n->grad.data[0] = T(1);

    std::vector<char> reachable(nodes_.size(), 0);
    reachable[loss.n->index] = 1;
    for (size_t i = loss.n->index + 1; i-- > 0;) {
      Node<T>& node = *nodes_[i];
      if (!reachable[i] || !node.requires_grad) continue;
      for (Node<T>* p : node.parents)
        if (p->requires_grad) reachable[p->index] = 1;
      if (node.backward) {
        node.ensure_grad();
        node.backward(node);
      }
      if (node.bound_param != nullptr && node.bound_param->trainable) {
        node.ensure_grad();
        auto& pg = node.bound_param->grad.data;
        const auto& ng = node.grad.data;
        for (size_t k = 0; k < pg.size(); ++k) pg[k] += ng[k];
      }
    }
  }

  size_t node_count() const { return nodes_.size(); }

private:
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

}  // namespace msunet
