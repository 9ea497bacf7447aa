#include "hyperens/tape.hpp"

#include <algorithm>

namespace hyperens {

Var Tape::constant(Tensor value, std::string_view name) {
  Node n;
  n.op = std::string(name);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& param) {
  Node n;
  n.op = "param:" + param.name;
  n.value = param.value;
  n.param = &param;
  n.requires_grad = true;
  if (param.grad.shape() != param.value.shape()) param.zero_grad();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward,
                 bool differentiable) {
  if (consumed_) throw TapeError("record on consumed tape (op " + std::string(op) + ")");
  if (check_finite_ && !value.all_finite()) {
    throw NonFiniteError("non-finite output from node " + std::to_string(nodes_.size()) + " (" + std::string(op) + ")");
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  n.differentiable = differentiable;
  if (differentiable) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(), [&](std::size_t p) { return nodes_[p].requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.tape != this) throw TapeError("backward: variable belongs to another tape");
  if (consumed_) throw TapeError("backward called twice on the same tape");
  if (value(out.id).size() != 1) {
    throw TapeError("backward on non-scalar output of shape " + shape_string(value(out.id).shape()));
  }
  consumed_ = true;
  grad(out.id)[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      auto& pg = n.param->grad.data();
      const auto& g = n.grad.data();
      for (std::size_t j = 0; j < g.size(); ++j) pg[j] += g[j];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

std::vector<Parameter*> Tape::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& n : nodes_) {
    if (n.param && std::find(out.begin(), out.end(), n.param) == out.end()) out.push_back(n.param);
  }
  return out;
}

std::vector<const Parameter*> Tape::parameters_behind_nondifferentiable() const {
  std::vector<char> reaches(nodes_.size(), 0);
  // Mark every ancestor of a non-differentiable node.
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].differentiable) stack.push_back(i);
  }
  while (!stack.empty()) {
    std::size_t i = stack.back();
    stack.pop_back();
    if (reaches[i]) continue;
    reaches[i] = 1;
    for (std::size_t p : nodes_[i].parents) stack.push_back(p);
  }
  std::vector<const Parameter*> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (reaches[i] && nodes_[i].param && std::find(out.begin(), out.end(), nodes_[i].param) == out.end()) {
      out.push_back(nodes_[i].param);
    }
  }
  return out;
}

}  // namespace hyperens
