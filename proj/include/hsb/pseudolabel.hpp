#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsb/scene.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

// Label values are class ids 0..C, with 255 marking pixels excluded from
// segmentation supervision.
constexpr int kIgnoreLabel = 255;

struct Bbox {
    int x = 0, y = 0, w = 0, h = 0;
};

struct SemanticMap {
    int w = 0, h = 0;
    std::vector<int> labels;  // 0..C or kIgnoreLabel

    SemanticMap() = default;
    SemanticMap(int w_, int h_) : w(w_), h(h_), labels(static_cast<size_t>(w_) * h_, 0) {}
    int& at(int x, int y) { return labels[static_cast<size_t>(y) * w + x]; }
    int at(int x, int y) const { return labels[static_cast<size_t>(y) * w + x]; }
};

struct SegInstance {
    int class_id = 0;
    BoolMask mask;
    float confidence = 0.0f;
};

// |A∩B| / |A∪B|; 1 when both masks are empty. Throws on shape mismatch.
double iou(const BoolMask& a, const BoolMask& b);

// Returns the ground-truth mask of the instance whose bbox best matches the
// prompt, degraded by seed-deterministic boundary erosion/dilation with
// magnitude proportional to perturb; confidence is the IoU of the returned
// mask against the clean one. No overlapping instance: empty mask, confidence 0.
std::pair<BoolMask, float> oracle_segment(const AnnotatedScene& scene, const Bbox& bbox,
                                          double perturb, uint64_t seed);

// Confidence-resolved label painting; ties go to the lower class id.
SemanticMap build_semantic_map(const std::vector<SegInstance>& instances, int w, int h);

// +10% of width and height, centered, clamped to the image.
Bbox enlarge_bbox(const Bbox& b, int img_w, int img_h);

// Re-prompts with the enlarged box; keep iff IoU(original, re-query) > 0.9.
bool consistency_keep(const AnnotatedScene& scene, const Bbox& bbox, const BoolMask& original,
                      double perturb, uint64_t seed);

// True outside the union of annotated bboxes.
BoolMask background_mask(const std::vector<Instance>& annotations, int w, int h);

struct PseudoLabelResult {
    SemanticMap map;
    std::vector<bool> kept;           // per input instance
    std::vector<int> ignore_owner;    // per pixel: discarded instance index, or -1
    int instances_total = 0;
    int instances_discarded = 0;
};

PseudoLabelResult make_pseudolabels(const AnnotatedScene& scene, double perturb, uint64_t seed);

// Writes <dir>/pseudolabels/<id>.png (8-bit gray class map, 255 = excluded)
// and <dir>/pseudostats.csv with columns id,instances_total,instances_discarded.
void write_pseudolabels(const std::vector<AnnotatedScene>& scenes, const std::string& dir,
                        double perturb, uint64_t seed);
SemanticMap read_pseudolabel(const std::string& dir, const std::string& id);

}  // namespace hsb
