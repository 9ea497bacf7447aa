#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hyperens/tensor.hpp"

namespace hyperens {

class Tape;

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Reverse-mode tape. Built by one forward pass, consumed by one backward().
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, std::string_view name = "const");
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  Var parameter(Parameter& param);

  /// Records an op node. `backward` may be empty for non-differentiable ops.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward,
             bool differentiable = true);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id);

  /// Seeds d(out)/d(out) = 1 and propagates to every parameter leaf.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Parameters whose value reaches a non-differentiable node.
  std::vector<const Parameter*> parameters_behind_nondifferentiable() const;
  std::vector<Parameter*> parameters() const;

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool differentiable = true;
  };

  std::vector<Node> nodes_;
  bool check_finite_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace hyperens
