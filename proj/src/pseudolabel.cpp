#include "hsb/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "hsb/dataset_io.hpp"
#include "hsb/rng.hpp"

namespace fs = std::filesystem;

namespace hsb {

double iou(const BoolMask& a, const BoolMask& b) {
    if (a.w != b.w || a.h != b.h) throw std::invalid_argument("iou: mask shapes differ");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

int64_t bbox_overlap(const Bbox& a, int bx, int by, int bw, int bh) {
    int x0 = std::max(a.x, bx), x1 = std::min(a.x + a.w, bx + bw);
    int y0 = std::max(a.y, by), y1 = std::min(a.y + a.h, by + bh);
    if (x1 <= x0 || y1 <= y0) return 0;
    return static_cast<int64_t>(x1 - x0) * (y1 - y0);
}

double bbox_iou(const Bbox& a, int bx, int by, int bw, int bh) {
    int64_t inter = bbox_overlap(a, bx, by, bw, bh);
    int64_t uni = static_cast<int64_t>(a.w) * a.h + static_cast<int64_t>(bw) * bh - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

bool has_neighbor(const BoolMask& m, int x, int y, uint8_t value) {
    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
        int nx = x + dx[k], ny = y + dy[k];
        if (nx < 0 || nx >= m.w || ny < 0 || ny >= m.h) continue;
        if (m.at(nx, ny) == value) return true;
    }
    return false;
}

}  // namespace

std::pair<BoolMask, float> oracle_segment(const AnnotatedScene& scene, const Bbox& bbox,
                                          double perturb, uint64_t seed) {
    int W = scene.width(), H = scene.height();
    if (bbox.x < 0 || bbox.y < 0 || bbox.w <= 0 || bbox.h <= 0 || bbox.x + bbox.w > W ||
        bbox.y + bbox.h > H) {
        throw std::invalid_argument("oracle_segment: bbox outside image");
    }
    if (perturb < 0 || perturb > 1) {
        throw std::invalid_argument("oracle_segment: perturb must lie in [0,1]");
    }

    const Instance* best = nullptr;
    double best_score = 0.0;
    for (const Instance& inst : scene.instances) {
        double score = bbox_iou(bbox, inst.bx, inst.by, inst.bw, inst.bh);
        if (score > best_score) {
            best_score = score;
            best = &inst;
        }
    }
    if (!best) return {BoolMask(W, H), 0.0f};

    const BoolMask& gt = best->gt_mask;
    BoolMask out = gt;
    if (perturb > 0) {
        Rng rng(seed_for(seed, "oracle",
                         (static_cast<uint64_t>(static_cast<uint32_t>(bbox.x)) << 32) |
                             static_cast<uint32_t>(bbox.y),
                         (static_cast<uint64_t>(static_cast<uint32_t>(bbox.w)) << 32) |
                             static_cast<uint32_t>(bbox.h)));
        double p = 0.5 * perturb;
        // Candidates are taken from the clean mask so erosion and dilation do
        // not cascade within one call.
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                if (gt.at(x, y)) {
                    if (has_neighbor(gt, x, y, 0) && rng.uniform() < p) out.at(x, y) = 0;
                } else {
                    if (has_neighbor(gt, x, y, 1) && rng.uniform() < p) out.at(x, y) = 1;
                }
            }
        }
    }
    float conf = static_cast<float>(iou(out, gt));
    return {std::move(out), conf};
}

SemanticMap build_semantic_map(const std::vector<SegInstance>& instances, int w, int h) {
    SemanticMap map(w, h);
    std::vector<float> best_conf(static_cast<size_t>(w) * h, -1.0f);
    for (const SegInstance& inst : instances) {
        if (inst.mask.w != w || inst.mask.h != h) {
            throw std::invalid_argument("build_semantic_map: mask size mismatch");
        }
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!inst.mask.at(x, y)) continue;
                size_t i = static_cast<size_t>(y) * w + x;
                if (inst.confidence > best_conf[i] ||
                    (inst.confidence == best_conf[i] && inst.class_id < map.labels[i])) {
                    best_conf[i] = inst.confidence;
                    map.labels[i] = inst.class_id;
                }
            }
        }
    }
    return map;
}

Bbox enlarge_bbox(const Bbox& b, int img_w, int img_h) {
    double half_dx = 0.05 * b.w, half_dy = 0.05 * b.h;
    int x0 = static_cast<int>(std::lround(b.x - half_dx));
    int y0 = static_cast<int>(std::lround(b.y - half_dy));
    int x1 = static_cast<int>(std::lround(b.x + b.w + half_dx));
    int y1 = static_cast<int>(std::lround(b.y + b.h + half_dy));
    x0 = std::max(0, x0);
    y0 = std::max(0, y0);
    x1 = std::min(img_w, x1);
    y1 = std::min(img_h, y1);
    return {x0, y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
}

bool consistency_keep(const AnnotatedScene& scene, const Bbox& bbox, const BoolMask& original,
                      double perturb, uint64_t seed) {
    Bbox big = enlarge_bbox(bbox, scene.width(), scene.height());
    auto [second, conf] = oracle_segment(scene, big, perturb, seed);
    (void)conf;
    return iou(original, second) > 0.9;
}

BoolMask background_mask(const std::vector<Instance>& annotations, int w, int h) {
    BoolMask bg(w, h);
    std::fill(bg.data.begin(), bg.data.end(), uint8_t(1));
    for (const Instance& inst : annotations) {
        for (int y = inst.by; y < inst.by + inst.bh; ++y) {
            for (int x = inst.bx; x < inst.bx + inst.bw; ++x) {
                bg.at(x, y) = 0;
            }
        }
    }
    return bg;
}

PseudoLabelResult make_pseudolabels(const AnnotatedScene& scene, double perturb, uint64_t seed) {
    int W = scene.width(), H = scene.height();
    PseudoLabelResult res;
    res.instances_total = static_cast<int>(scene.instances.size());
    res.ignore_owner.assign(static_cast<size_t>(W) * H, -1);

    std::vector<SegInstance> kept_instances;
    std::vector<BoolMask> discarded_masks;
    std::vector<int> discarded_index;
    for (size_t i = 0; i < scene.instances.size(); ++i) {
        const Instance& inst = scene.instances[i];
        Bbox prompt{inst.bx, inst.by, inst.bw, inst.bh};
        auto [mask, conf] = oracle_segment(scene, prompt, perturb, seed);
        bool keep = consistency_keep(scene, prompt, mask, perturb, seed);
        res.kept.push_back(keep);
        if (keep) {
            kept_instances.push_back({inst.class_id, std::move(mask), conf});
        } else {
            discarded_masks.push_back(std::move(mask));
            discarded_index.push_back(static_cast<int>(i));
            ++res.instances_discarded;
        }
    }

    res.map = build_semantic_map(kept_instances, W, H);
    for (size_t d = 0; d < discarded_masks.size(); ++d) {
        const BoolMask& m = discarded_masks[d];
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                if (!m.at(x, y)) continue;
                size_t i = static_cast<size_t>(y) * W + x;
                if (res.ignore_owner[i] < 0) res.ignore_owner[i] = discarded_index[d];
                res.map.labels[i] = kIgnoreLabel;
            }
        }
    }
    return res;
}

void write_pseudolabels(const std::vector<AnnotatedScene>& scenes, const std::string& dir,
                        double perturb, uint64_t seed) {
    fs::create_directories(fs::path(dir) / "pseudolabels");
    std::ofstream csv(fs::path(dir) / "pseudostats.csv");
    if (!csv) throw IoError("write_pseudolabels: cannot write pseudostats.csv");
    csv << "id,instances_total,instances_discarded\n";
    for (const AnnotatedScene& s : scenes) {
        PseudoLabelResult res = make_pseudolabels(s, perturb, seed_for(seed, s.id));
        std::vector<uint8_t> pixels(res.map.labels.size());
        for (size_t i = 0; i < pixels.size(); ++i) {
            pixels[i] = static_cast<uint8_t>(res.map.labels[i]);
        }
        write_png_gray((fs::path(dir) / "pseudolabels" / (s.id + ".png")).string(), res.map.w,
                       res.map.h, pixels);
        csv << s.id << "," << res.instances_total << "," << res.instances_discarded << "\n";
    }
}

SemanticMap read_pseudolabel(const std::string& dir, const std::string& id) {
    int w = 0, h = 0;
    std::vector<uint8_t> pixels =
        read_png_gray((fs::path(dir) / "pseudolabels" / (id + ".png")).string(), w, h);
    SemanticMap map(w, h);
    for (size_t i = 0; i < pixels.size(); ++i) map.labels[i] = pixels[i];
    return map;
}

}  // namespace hsb
