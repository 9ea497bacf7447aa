#include "hyperens/graph.hpp"

#include <stdexcept>

namespace hyperens {

Var forward(Tape& tape, const Graph& graph, const std::map<std::string, Tensor>& inputs) {
  NamedVars bound;
  for (const auto& name : graph.inputs) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw std::invalid_argument("forward: input '" + name + "' is not bound");
    bound.emplace(name, tape.constant(it->second, name));
  }
  return graph.body(tape, bound);
}

}  // namespace hyperens
