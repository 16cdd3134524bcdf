#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsb/executor.hpp"
#include "hsb/graph.hpp"
#include "hsb/rng.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

struct ChainConfig {
    int steps = 5;         // N
    double tau_sb = 0.01;  // noise scale shared with the transport entropy term

    void validate() const;
};

// Uniform partition t_j = j/N, N+1 entries.
std::vector<double> make_partition(int N);

// s = (t_j1 - t_j) / (1 - t_j)
double interp_coeff(double t_j, double t_j1);

// sigma = sqrt(tau * s * (1 - s)); vanishes at the final step where s = 1.
double noise_sigma(double s, double tau_sb);
double noise_sigma_at(int j, const ChainConfig& cfg);  // step j -> j+1

// s*x1 + (1-s)*x_tj + sigma*eps, elementwise. Never clamps; the caller clamps
// the final output only.
Tensor<float> chain_step(const Tensor<float>& x_tj, const Tensor<float>& x1, double s,
                         double sigma, const Tensor<float>& eps);

struct GeneratorConfig {
    int image_channels = 3;
    int base_width = 32;   // first down block; doubles once, then holds
    int res_blocks = 4;    // at the bottleneck, feature width F
    int emb_dim = 16;      // sinusoidal time embedding size
};

// Bottleneck width (the F of the F x w x h feature map).
inline int generator_feature_width(const GeneratorConfig& cfg) { return cfg.base_width * 2; }

// Sinusoidal embedding of a scalar time in [0,1].
std::vector<float> time_embedding(double t, int emb_dim);

struct GenNodes {
    int x1 = -1;    // {B,3,H,W}, sigmoid-squashed
    int feat = -1;  // {B,F,H/8,W/8} bottleneck feature map
};

// Appends the translator network to the graph: 3 strided down blocks, res
// blocks at the bottleneck (time embedding added after the second down
// block), 3 nearest-neighbor upsample blocks, sigmoid output. Parameters are
// named under `prefix`, so two builds with one prefix share weights.
// Encoder trunk only (down blocks, time conditioning, res blocks); returns
// the bottleneck feature node. Shares parameters with build_generator under
// the same prefix. Used for feature extraction without the decoder cost.
int build_generator_features(Graph& g, int x, int temb, const GeneratorConfig& cfg = {},
                             const std::string& prefix = "gen");

GenNodes build_generator(Graph& g, int x, int temb, const GeneratorConfig& cfg = {},
                         const std::string& prefix = "gen");

// Gaussian(0, 0.02) weights, zero biases/shifts, unit scales for any graph
// parameter the store lacks. Deterministic: parameters are visited in name
// order and each gets its own stream.
void init_missing_params(const Graph& g, ParamStore<float>& store, uint64_t seed);

using PredictFn = std::function<Tensor<float>(const Tensor<float>& x, double t)>;

struct RolloutResult {
    std::vector<Tensor<float>> states;  // x_{t_0} .. x_{t_stop}
    Tensor<float> prediction;           // x1(x_{t_stop}); inference: the final image
    int stop_index = 0;
    double t_stop = 0.0;
};

// stop_at in [0, N-1]: deterministic stop; stop_at = kSampleStop: i sampled
// uniformly from {0..N-1}; stop_at = N: full chain, returns the final image
// (clamped) in `prediction` with states covering every t_j.
constexpr int kSampleStop = -1;
RolloutResult rollout(const Tensor<float>& x0, const PredictFn& gen, const ChainConfig& cfg,
                      Rng& rng, int stop_at);

// Convenience wrapper owning a cached graph per input shape.
class Generator {
public:
    explicit Generator(GeneratorConfig cfg = {}) : cfg_(cfg) {}

    const GeneratorConfig& config() const { return cfg_; }
    const Graph& graph_for(int batch, int height, int width);

    // Returns (prediction, bottleneck features).
    std::pair<Tensor<float>, Tensor<float>> forward(const ParamStore<float>& store,
                                                    const Tensor<float>& x, double t);
    PredictFn as_predict_fn(const ParamStore<float>& store);

private:
    GeneratorConfig cfg_;
    Shape cached_shape_;
    Graph graph_;
    bool built_ = false;
};

}  // namespace hsb
