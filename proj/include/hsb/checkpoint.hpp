#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hsb/discriminator.hpp"
#include "hsb/executor.hpp"
#include "hsb/hallucination.hpp"
#include "hsb/sbchain.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

// Container format: magic "HSB1", version (u32 LE), then a sequence of named
// arrays. Each array: name length (u32 LE), UTF-8 name, dtype (u8; 0 = f32,
// 1 = f64), rank (u32 LE), one u32 LE extent per dimension, raw
// little-endian payload.
constexpr uint32_t kCheckpointVersion = 1;

struct ArrayFile {
    std::map<std::string, Tensor<float>> f32;
    std::map<std::string, Tensor<double>> f64;
};

void write_array_file(const std::string& path, const ArrayFile& arrays);
ArrayFile read_array_file(const std::string& path);

// Full training state: model parameters (generator, frozen encoder, both
// discriminator heads, projection head), the prototype bank, both Adam
// moment sets, and the iteration counter.
struct Checkpoint {
    int64_t iteration = 0;
    GeneratorConfig gen_cfg;
    ChainConfig chain;
    int num_classes = 3;
    ParamStore<float> params;
    PrototypeBank bank;
    std::map<std::string, Tensor<float>> opt_g_m, opt_g_v;
    std::map<std::string, Tensor<float>> opt_d_m, opt_d_v;
    int64_t opt_g_steps = 0, opt_d_steps = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Pretrained encoder as its own artifact (same container format).
void save_encoder(const std::string& path, const SharedEncoder& encoder);
SharedEncoder load_encoder(const std::string& path);

// Copy of the parameters whose names start with `prefix`.
ParamStore<float> filter_params(const ParamStore<float>& store, const std::string& prefix);

}  // namespace hsb
