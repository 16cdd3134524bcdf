#pragma once

#include <map>
#include <set>
#include <string>

#include "hsb/graph.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

// Named parameter tensors shared by any number of graphs. Graphs reference
// parameters by name only; the store owns the values.
template <typename T>
struct ParamStore {
    std::map<std::string, Tensor<T>> values;

    Tensor<T>& at(const std::string& name) {
        auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("param store: missing '" + name + "'");
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("param store: missing '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return values.count(name) != 0; }
};

// Forward evaluation state: one value per graph node.
template <typename T>
struct Eval {
    const Graph* graph = nullptr;
    std::vector<Tensor<T>> vals;

    const Tensor<T>& value(int id) const { return vals[static_cast<size_t>(id)]; }
    const Tensor<T>& out(const std::string& name) const {
        return vals[static_cast<size_t>(graph->output(name))];
    }
};

struct GradRequest {
    bool all_params = true;
    std::set<std::string> params;  // consulted when !all_params
    std::set<std::string> extra_inputs;  // gradients for these inputs in addition to differentiable ones

    bool wants_param(const std::string& name) const {
        return all_params || params.count(name) != 0;
    }
};

template <typename T>
struct Grads {
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, Tensor<T>> inputs;
};

template <typename T>
Eval<T> forward(const Graph& g, const ParamStore<T>& store,
                const std::map<std::string, Tensor<T>>& inputs);

// Reverse-mode sweep from the named output. The seed defaults to 1 for scalar
// outputs; non-scalar outputs require an explicit seed of matching shape.
template <typename T>
Grads<T> backward(const Graph& g, const ParamStore<T>& store, const Eval<T>& ev,
                  const std::string& output_name, const Tensor<T>* seed = nullptr,
                  const GradRequest& req = {});

template <typename T>
bool all_finite(const Tensor<T>& t);

}  // namespace hsb
