#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsb/checkpoint.hpp"
#include "hsb/discriminator.hpp"
#include "hsb/graph.hpp"
#include "hsb/hallucination.hpp"
#include "hsb/pseudolabel.hpp"
#include "hsb/sbchain.hpp"
#include "hsb/scene.hpp"

namespace hsb {

struct SBLossConfig {
    double tau_sb = 0.01;         // entropy weight, shared with the chain schedule
    int entropy_downsample = 16;  // images pooled to at most this extent for the estimate
    void validate() const;
};

struct SBLossNodes {
    int loss = -1;
    int transport = -1;
    int entropy = -1;  // -1 when the entropy term is inactive
};

struct SBLossStats {
    int entropy_skipped = 0;  // single-element batches with tau_sb > 0
};

// Mean squared transport cost between the current state x_ti and the
// prediction x1, minus 2 tau (1 - t_i) times a 1-NN entropy estimate over
// the batch of pooled (x_ti, x1) pairs. Gradients reach the entropy term
// through x1 only; x_ti stays a non-differentiable input.
SBLossNodes build_sb_loss(Graph& g, int x_ti, int x1, double t_i, const SBLossConfig& cfg,
                          SBLossStats* stats = nullptr);

struct LossWeights {
    double adv = 1.0;
    double sb = 1.0;
    double seg = 1.0;
    double cont = 1.0;
    double supp = 1.0;
    double hl = 0.2;
};

struct LossTerms {
    double adv = 0, sb = 0, seg = 0, cont = 0, supp = 0, hl = 0;
};

struct NonFiniteLoss : std::runtime_error {
    std::string term;
    explicit NonFiniteLoss(const std::string& term_)
        : std::runtime_error("non-finite loss term: " + term_), term(term_) {}
};

// Weighted sum of the six terms; throws NonFiniteLoss naming the first
// non-finite one.
double total_loss(const LossTerms& t, const LossWeights& w);

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 8;
    double lr = 1e-4;  // halved once past 40% and again past 80% of the run
    uint64_t seed = 1;
    int num_classes = 3;
    ChainConfig chain;
    GeneratorConfig generator;
    SuppressionConfig suppression;
    LossWeights weights;
    bool use_hl = true;
    bool use_supp = true;
    int cont_patches = 64;  // sampled feature locations per image for the structure term
    int ref_batch = 4;      // real night references per prototype update
    double proto_alpha = 0.99;
    int entropy_downsample = 16;
    std::string out_dir = "runs/default";
    int checkpoint_every = 0;  // additional periodic saves; 0 = final only

    void validate() const;
    LossWeights effective_weights() const;  // disabled terms get weight zero
    double lr_at(int iter) const;           // iter is 1-based
};

// JSON object mirroring the TrainConfig field names; missing fields keep
// their defaults, unknown fields are rejected.
TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

inline constexpr char kMetricsHeader[] =
    "iter,L_adv,L_SB,L_seg,L_cont,L_supp,L_hl,total_G,total_D,halluc_px,proto_updates,lr";

struct TrainResult {
    int iterations_run = 0;
    int missing_pseudolabels = 0;  // night samples skipped for lack of a label map
    int entropy_skipped = 0;
    int empty_background = 0;
    int64_t proto_updates_total = 0;
    std::string metrics_path;
    std::string checkpoint_path;
};

// Alternates one discriminator step and one generator step per iteration.
// `pseudo` maps night scene ids to label maps; unlabeled night scenes are
// skipped and counted. Writes <out_dir>/metrics.csv plus
// <out_dir>/checkpoint.hsb, and saves <out_dir>/abort.hsb before rethrowing
// if a loss term turns non-finite.
TrainResult train(const TrainConfig& cfg, const std::vector<AnnotatedScene>& day,
                  const std::vector<AnnotatedScene>& night,
                  const std::map<std::string, SemanticMap>& pseudo, const SharedEncoder& encoder);

// Full-length noisy rollout for each image, clamped to [0,1]. Deterministic
// for a fixed seed, and bitwise repeatable when chain.tau_sb == 0.
std::vector<Tensor<float>> translate(const Checkpoint& ckpt,
                                     const std::vector<Tensor<float>>& images, uint64_t seed);

}  // namespace hsb
