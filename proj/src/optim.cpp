#include "hsb/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hsb {

void Adam::step(ParamStore<float>& params, const std::map<std::string, Tensor<float>>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto it = params.values.find(name);
        if (it == params.values.end()) {
            throw std::invalid_argument("adam: gradient for unknown parameter '" + name + "'");
        }
        Tensor<float>& p = it->second;
        if (p.shape != g.shape) {
            throw std::invalid_argument("adam: gradient shape mismatch for '" + name + "'");
        }
        Tensor<float>& m = m_.try_emplace(name, p.shape).first->second;
        Tensor<float>& v = v_.try_emplace(name, p.shape).first->second;
        for (size_t i = 0; i < p.data.size(); ++i) {
            double gi = g.data[i];
            double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
            double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double update = cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
            p.data[i] = static_cast<float>(p.data[i] - update);
        }
    }
}

}  // namespace hsb
