#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hsb/executor.hpp"
#include "hsb/graph.hpp"

namespace hsb {

// Central-difference gradient verification, always in double precision.
// Relative error per element is |a - n| / max(1, |a|, |n|); each entry
// reports the max over the tensor.

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Entry> entries;
    double worst = 0.0;
    bool pass(double tol) const { return worst <= tol; }
};

// Compares a caller-supplied gradient map against central differences of the
// named scalar output. Exposed separately so tests can feed it deliberately
// corrupted gradients.
GradCheckReport compare_to_numeric(const Graph& g, const ParamStore<double>& store,
                                   const std::map<std::string, Tensor<double>>& inputs,
                                   const std::string& output, const Grads<double>& analytic,
                                   double step = 1e-5, const GradRequest& req = {});

// Runs backward, then compare_to_numeric on the result.
GradCheckReport grad_check(const Graph& g, const ParamStore<double>& store,
                           const std::map<std::string, Tensor<double>>& inputs,
                           const std::string& output, double step = 1e-5,
                           const GradRequest& req = {});

// One miniature scalar-valued graph per differentiable op, random weights and
// inputs drawn from the seed. Used by the command-line checker and the tests.
struct OpCheck {
    std::string op;
    double max_rel_err = 0.0;
};
std::vector<OpCheck> check_all_ops(uint64_t seed);

}  // namespace hsb
