#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hsb/discriminator.hpp"
#include "hsb/pseudolabel.hpp"
#include "hsb/scene.hpp"
#include "hsb/trainer.hpp"

namespace hsb {

struct OracleConfig {
    int iterations = 400;
    int batch_size = 4;
    double lr = 1e-3;
    uint64_t seed = 7;
    int num_classes = 3;
    // Fraction of batch elements whose annotation-background pixels are
    // zeroed during training. Keeps the net from drifting on featureless
    // regions it never saw (instance norm ties every pixel to global image
    // statistics, so dark out-of-distribution backgrounds otherwise pick up
    // spurious foreground scores).
    double black_bg_prob = 0.5;
    EncoderConfig encoder;
};

// Reference segmenter trained on real night scenes against masks rasterized
// straight from the annotations; pseudo labels are never involved.
struct OracleSeg {
    OracleConfig cfg;
    ParamStore<float> params;
};

OracleSeg train_oracle_seg(const std::vector<AnnotatedScene>& night, const OracleConfig& cfg);

void save_oracle(const std::string& path, const OracleSeg& oracle);
OracleSeg load_oracle(const std::string& path);

Tensor<float> oracle_logits(const OracleSeg& oracle, const Tensor<float>& image);  // {1,C+1,H,W}
SemanticMap oracle_predict(const OracleSeg& oracle, const Tensor<float>& image);

// Ground-truth label map for a scene (argmax over instance masks; later
// instances win overlaps, matching raster order elsewhere).
SemanticMap ground_truth_map(const AnnotatedScene& scene);

struct EvalMetrics {
    double halluc_pixel_rate = 0;  // background pixels the oracle calls foreground
    double annotation_iou = 0;     // oracle foreground vs ground truth inside boxes
    double domain_distance = 0;    // mean per-channel histogram L1
    int64_t background_pixels = 0;
    int64_t flagged_pixels = 0;
    int instances_scored = 0;
};

// Fraction of background pixels (per the source annotations) that the
// oracle labels as foreground.
double hallucination_rate(const std::vector<Tensor<float>>& translated,
                          const std::vector<AnnotatedScene>& sources, const OracleSeg& oracle,
                          int64_t* bg_total = nullptr, int64_t* flagged_total = nullptr);

// translated[i] must correspond to sources[i]; real_night supplies the
// reference corpus for the domain distance.
EvalMetrics evaluate(const std::vector<Tensor<float>>& translated,
                     const std::vector<AnnotatedScene>& sources, const OracleSeg& oracle,
                     const std::vector<Tensor<float>>& real_night);

// Mean over channels of the L1 distance between normalized per-channel
// histograms (bins over [0,1]); 0 for identical corpora.
double histogram_domain_distance(const std::vector<Tensor<float>>& a,
                                 const std::vector<Tensor<float>>& b, int bins = 32);

double mean_luminance(const std::vector<Tensor<float>>& images);

struct AblationVariant {
    std::string name;
    bool use_supp = true;
    bool use_hl = true;
};

// full, no_supp, no_hl, no_both.
std::vector<AblationVariant> ablation_grid();

struct AblationRun {
    std::string variant;
    uint64_t seed = 0;
    double halluc_rate = 0;
    double translated_luminance = 0;
    double source_luminance = 0;
    double train_seconds = 0;  // wall clock of the training + scoring pass
};

struct AblationReport {
    std::vector<AblationRun> runs;
    std::map<std::string, double> medians;  // by variant name
    bool ordering_holds = false;            // full < each single drop < no_both
    bool separation_ok = false;             // every required gap >= 5% relative
    std::string verdict;
};

// Trains each variant for every seed, translates eval_day, and scores
// hallucination rates with the oracle. Finished runs are cached as small
// JSON files under cache_dir keyed by variant and seed, so a rerun resumes
// where it stopped. Deterministic for fixed inputs.
AblationReport run_ablation(const TrainConfig& base, const std::vector<AnnotatedScene>& day,
                            const std::vector<AnnotatedScene>& night,
                            const std::map<std::string, SemanticMap>& pseudo,
                            const SharedEncoder& encoder,
                            const std::vector<AnnotatedScene>& eval_day, const OracleSeg& oracle,
                            const std::vector<uint64_t>& seeds, const std::string& cache_dir);

// The standard study: fixed synthetic corpora, pseudo labels, a pretrained
// encoder and an oracle segmenter (both cached under cache_dir alongside the
// per-run results), then run_ablation over all four variants.
struct DeskAblationSetup {
    int size = 64;
    int scenes_per_domain = 600;
    int eval_scenes = 100;
    int iterations = 2000;
    int batch_size = 8;
    double pseudo_perturb = 0.1;
    int pretrain_epochs = 3;
    int oracle_iterations = 2400;
    std::vector<uint64_t> seeds = {1, 2, 3};
};

AblationReport run_desk_ablation(const DeskAblationSetup& setup, const std::string& cache_dir);

}  // namespace hsb
