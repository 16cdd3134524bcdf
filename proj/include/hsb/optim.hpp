#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hsb/executor.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are created lazily per parameter
// and updates run in name order, so a step is deterministic.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore<float>& params, const std::map<std::string, Tensor<float>>& grads);

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const AdamConfig& config() const { return cfg_; }

    int64_t steps_taken() const { return t_; }

    // Exposed for checkpointing.
    std::map<std::string, Tensor<float>>& moment1() { return m_; }
    std::map<std::string, Tensor<float>>& moment2() { return v_; }
    const std::map<std::string, Tensor<float>>& moment1() const { return m_; }
    const std::map<std::string, Tensor<float>>& moment2() const { return v_; }
    void restore_step_count(int64_t t) { t_ = t; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Tensor<float>> m_;
    std::map<std::string, Tensor<float>> v_;
};

}  // namespace hsb
