#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hyperens/tape.hpp"

namespace hyperens {

using NamedVars = std::map<std::string, Var>;

/// A computation over named inputs, replayed onto a fresh tape per call.
struct Graph {
  std::vector<std::string> inputs;
  std::function<Var(Tape&, const NamedVars&)> body;
};

/// Binds every declared input as a constant and runs the graph body. Throws
/// std::invalid_argument naming the first unbound input.
Var forward(Tape& tape, const Graph& graph, const std::map<std::string, Tensor>& inputs);

}  // namespace hyperens
