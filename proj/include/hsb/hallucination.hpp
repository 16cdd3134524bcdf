#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hsb/executor.hpp"
#include "hsb/graph.hpp"
#include "hsb/pseudolabel.hpp"
#include "hsb/rng.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

// A background pixel is hallucinated when some foreground class outscores the
// background channel of the segmentation output. Logits may be {C+1,H,W} or
// {1,C+1,H,W}; the mask restricts flags to background pixels.
BoolMask detect_hallucination(const Tensor<float>& logits, const BoolMask& bg);

struct HallucinationStats {
    int64_t empty_background_warnings = 0;
};

// (1/|S_bg|) sum over background pixels of sum_{c>=1} softmax(logits)_c^2.
// One mask per batch element. Empty background: constant 0 plus a warning.
int build_hallucination_loss(Graph& g, int logits, const std::vector<BoolMask>& bg,
                             HallucinationStats* stats = nullptr);

// Feature-grid cells whose centers fall inside the bbox after proportional
// scaling; never empty (falls back to the cell nearest the bbox center).
std::vector<std::pair<int, int>> instance_feature_cells(const Bbox& bbox, int img_w, int img_h,
                                                        int feat_w, int feat_h);

// Unit-normalized feature vectors at those cells. featmap {F,h,w} or {1,F,h,w}.
std::vector<std::vector<float>> extract_instance_features(const Tensor<float>& featmap,
                                                          const Bbox& bbox, int img_w,
                                                          int img_h);

// Arithmetic mean of the vectors, unit-normalized. Throws on an empty list.
std::vector<float> batch_prototype(const std::vector<std::vector<float>>& feats);

struct PrototypeBank {
    int num_classes = 0;  // classes 1..C map to slots 0..C-1
    int dim = 0;
    double alpha = 0.99;
    std::vector<std::vector<float>> protos;
    std::vector<int64_t> seen;
    std::vector<uint8_t> initialized;

    PrototypeBank() = default;
    PrototypeBank(int num_classes_, int dim_, double alpha_ = 0.99);

    int initialized_count() const;
    // Rows of initialized prototypes (in slot order) plus their class ids.
    std::pair<std::vector<float>, std::vector<int>> initialized_rows() const;
};

// p_c <- normalize(alpha p_c + (1-alpha) mean_c) for classes present in
// batch_means (keyed by class id 1..C); first sighting adopts the mean;
// absent classes stay untouched. Means are expected unit-length (as
// batch_prototype produces); the boundary paths adopt them bit-exactly.
void ema_update(PrototypeBank& bank, const std::map<int, std::vector<float>>& batch_means);

// Constant node {n_init, dim} holding the bank's initialized prototypes, or
// -1 when none are initialized yet.
int bank_proto_node(Graph& g, const PrototypeBank& bank);

struct SuppressionConfig {
    double tau_temp = 0.07;
    int n_neg = 64;
    int proj_dim = 64;
};

// Two-layer perceptron + row normalization. Parameters under `prefix`.
int build_projection_head(Graph& g, int rows, int out_dim, const std::string& prefix = "proj");

// InfoNCE over projected rows: anchors {m,F} vs positives {m,F} against
// negatives {n,F} and the initialized prototypes {c,F} (protos = -1 for
// none). Every input passes through one shared projection head.
int build_suppression_loss(Graph& g, int anchors, int positives, int negatives, int protos,
                           const SuppressionConfig& cfg, const std::string& prefix = "proj");

// K distinct locations; fewer than K available clamps to all of them.
std::vector<std::pair<int, int>> sample_locations(int w, int h, int k, Rng& rng);

// Patch-level InfoNCE on normalized feature rows gathered at `locs` of both
// maps ({B,F,h,w} each): anchor = translated row, positive = source row at
// the same location, negatives = the other sampled source rows of the same
// image. Mean over batch elements.
int build_contrastive_reg(Graph& g, int src_feat, int trans_feat,
                          const std::vector<std::vector<std::pair<int, int>>>& locs,
                          double tau_temp);

}  // namespace hsb
