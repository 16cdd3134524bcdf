#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hsb/tensor.hpp"

namespace hsb {

enum class Domain { Day, Night };

inline const char* domain_name(Domain d) { return d == Domain::Day ? "day" : "night"; }
Domain domain_from_name(const std::string& s);

// Class ids: 1 = light, 2 = vehicle, 3 = sign; 0 is background.
struct SceneSpec {
    int width = 64;
    int height = 64;
    int num_classes = 3;
    std::vector<std::pair<int, int>> count_ranges{{1, 4}, {1, 4}, {1, 4}};  // per class
    double day_sky_lum[2] = {0.60, 0.80};
    double day_ground_lum[2] = {0.45, 0.60};
    double night_sky_lum[2] = {0.03, 0.10};
    double night_ground_lum[2] = {0.06, 0.18};
    double glow_intensity[2] = {0.30, 0.60};  // night light halos
    int max_distractors = 3;                  // unannotated night glow blobs
    uint64_t seed = 1;

    void validate() const;
};

struct Instance {
    int class_id = 0;
    int bx = 0, by = 0, bw = 0, bh = 0;  // pixel bbox, tight around the mask
    BoolMask gt_mask;                    // full image size
    float confidence = 1.0f;
};

struct AnnotatedScene {
    std::string id;
    Domain domain = Domain::Day;
    ImageTensor image;  // {3, H, W}, values quantized to the 8-bit grid
    std::vector<Instance> instances;

    int width() const { return image.dim(3); }
    int height() const { return image.dim(2); }
};

AnnotatedScene gen_scene(const SceneSpec& spec, Domain domain, uint64_t seed);

// Scene i uses seed_for(spec.seed, domain, i); identical output regardless of
// worker count.
std::vector<AnnotatedScene> gen_corpus(const SceneSpec& spec, Domain domain, int count,
                                       int workers = 1);

}  // namespace hsb
