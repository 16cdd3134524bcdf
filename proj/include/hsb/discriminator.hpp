#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsb/executor.hpp"
#include "hsb/graph.hpp"
#include "hsb/pseudolabel.hpp"
#include "hsb/scene.hpp"

namespace hsb {

struct EncoderConfig {
    int image_channels = 3;
    int w1 = 32;
    int w2 = 64;
    int w3 = 128;
};

struct EncNodes {
    int e1 = -1;  // {B,w1,H/2,W/2}
    int e2 = -1;  // {B,w2,H/4,W/4}
    int e3 = -1;  // {B,w3,H/8,W/8}
};

// Three stride-2 conv stages. Parameters live under `prefix`.
EncNodes build_encoder(Graph& g, int x, const EncoderConfig& cfg = {},
                       const std::string& prefix = "enc");

// FNV-1a over parameter bytes in name order; detects any weight drift.
uint64_t params_checksum(const ParamStore<float>& params);

struct SharedEncoder {
    EncoderConfig cfg;
    ParamStore<float> params;  // names under "enc."
    bool frozen = false;

    uint64_t checksum() const { return params_checksum(params); }
};

struct PretrainReport {
    double heldout_loss_initial = 0.0;
    double heldout_loss_final = 0.0;
    int train_count = 0;
    int heldout_count = 0;
};

// Trains encoder + throwaway decoder as an autoencoder on the corpus images
// (pixel reconstruction), then discards the decoder and freezes the encoder.
// A ~10% held-out slice measures reconstruction before and after.
SharedEncoder pretrain_encoder(const std::vector<AnnotatedScene>& corpus, int epochs,
                               uint64_t seed, PretrainReport* report = nullptr);

// Patch realness scores on top of the deepest encoder stage: two stride-2
// convs, linear output, {B,1,H/32,W/32}.
int build_style_head(Graph& g, int e3, const std::string& prefix = "dsty");

// UNet-style decoder over all three encoder stages; full-resolution
// (num_classes+1)-channel logits, channel 0 = background.
int build_seg_head(Graph& g, const EncNodes& enc, int num_classes,
                   const std::string& prefix = "dseg");

// Least-squares GAN objectives on patch score maps.
//   discriminator: mean((real-1)^2) + mean(fake^2)
//   generator:     mean((fake-1)^2)
int build_lsgan_d_loss(Graph& g, int real_scores, int fake_scores);
int build_lsgan_g_loss(Graph& g, int fake_scores);

struct SegLossStats {
    int64_t all_ignore_warnings = 0;
};

// Mean softmax cross-entropy over non-IGNORE pixels of a batch. `pseudo`
// holds one map per batch element, each matching the logits' spatial size.
// Every pixel IGNORE: the loss is a constant 0 and the warning counter ticks.
int build_seg_loss(Graph& g, int logits, const std::vector<SemanticMap>& pseudo,
                   SegLossStats* stats = nullptr);

}  // namespace hsb
