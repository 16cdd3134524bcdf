#include "hsb/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <thread>

#include "hsb/rng.hpp"

namespace hsb {

Domain domain_from_name(const std::string& s) {
    if (s == "day") return Domain::Day;
    if (s == "night") return Domain::Night;
    throw std::invalid_argument("unknown domain '" + s + "' (expected day or night)");
}

void SceneSpec::validate() const {
    if (width < 32 || height < 32) {
        throw std::invalid_argument("scene spec: image must be at least 32x32");
    }
    if (num_classes < 1) throw std::invalid_argument("scene spec: need at least one class");
    if (static_cast<int>(count_ranges.size()) != num_classes) {
        throw std::invalid_argument("scene spec: one count range per class required");
    }
    for (const auto& [lo, hi] : count_ranges) {
        if (lo < 0 || hi < lo) throw std::invalid_argument("scene spec: bad count range");
    }
}

namespace {

struct Painter {
    ImageTensor& img;
    int w, h;

    Painter(ImageTensor& image) : img(image), w(image.dim(3)), h(image.dim(2)) {}

    void set(int x, int y, double r, double g, double b) {
        img.at4(0, 0, y, x) = static_cast<float>(r);
        img.at4(0, 1, y, x) = static_cast<float>(g);
        img.at4(0, 2, y, x) = static_cast<float>(b);
    }
    void add(int x, int y, double r, double g, double b) {
        img.at4(0, 0, y, x) += static_cast<float>(r);
        img.at4(0, 1, y, x) += static_cast<float>(g);
        img.at4(0, 2, y, x) += static_cast<float>(b);
    }
};

// Diffuse radial falloff, additive. Used for annotated light halos and for
// the unannotated night distractor blobs; distractors have no solid core, so
// telling the two apart requires looking at local structure, not brightness.
void paint_glow(Painter& p, double cx, double cy, double sigma, double amp, double r, double g,
                double b) {
    int rad = static_cast<int>(std::ceil(3 * sigma));
    int x0 = std::max(0, static_cast<int>(cx) - rad), x1 = std::min(p.w - 1, static_cast<int>(cx) + rad);
    int y0 = std::max(0, static_cast<int>(cy) - rad), y1 = std::min(p.h - 1, static_cast<int>(cy) + rad);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            double v = amp * std::exp(-d2 / (2 * sigma * sigma));
            p.add(x, y, v * r, v * g, v * b);
        }
    }
}

struct Prim {
    BoolMask mask;
    int class_id;
    float confidence;
};

void bbox_of(const BoolMask& m, int& bx, int& by, int& bw, int& bh) {
    int x0 = m.w, y0 = m.h, x1 = -1, y1 = -1;
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(x, y)) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    bx = x0;
    by = y0;
    bw = x1 - x0 + 1;
    bh = y1 - y0 + 1;
}

}  // namespace

AnnotatedScene gen_scene(const SceneSpec& spec, Domain domain, uint64_t seed) {
    spec.validate();
    const int W = spec.width, H = spec.height;
    const bool night = domain == Domain::Night;
    Rng rng(seed_for(seed, night ? "scene/night" : "scene/day"));

    AnnotatedScene scene;
    scene.id = std::string(domain_name(domain)) + "_" + std::to_string(seed);
    scene.domain = domain;
    scene.image = ImageTensor({1, 3, H, W});
    Painter p(scene.image);

    int horizon = static_cast<int>(std::lround(H * rng.uniform(0.40, 0.60)));
    const double* sky_range = night ? spec.night_sky_lum : spec.day_sky_lum;
    const double* ground_range = night ? spec.night_ground_lum : spec.day_ground_lum;
    double sky = rng.uniform(sky_range[0], sky_range[1]);
    double skr = sky * rng.uniform(0.80, 0.95);
    double skg = sky * rng.uniform(0.90, 1.05);
    double skb = sky * rng.uniform(1.05, 1.25);
    double ground = rng.uniform(ground_range[0], ground_range[1]);
    double gr = ground * rng.uniform(0.95, 1.10);
    double gg = ground * rng.uniform(0.90, 1.05);
    double gb = ground * rng.uniform(0.85, 1.00);
    double noise_amp = rng.uniform(0.01, 0.03);

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (y < horizon) {
                p.set(x, y, skr, skg, skb);
            } else {
                p.set(x, y, gr, gg, gb);
            }
        }
    }

    std::vector<int> counts(static_cast<size_t>(spec.num_classes), 0);
    for (int c = 0; c < spec.num_classes; ++c) {
        counts[static_cast<size_t>(c)] =
            rng.uniform_int(spec.count_ranges[static_cast<size_t>(c)].first,
                            spec.count_ranges[static_cast<size_t>(c)].second);
    }
    auto count_for = [&](int class_id) {
        return class_id <= spec.num_classes ? counts[static_cast<size_t>(class_id - 1)] : 0;
    };

    std::vector<Prim> shapes;

    // Vehicles: filled rectangles; saturated body by day, dark silhouette by night.
    for (int i = 0; i < count_for(2); ++i) {
        int bw = rng.uniform_int(8, std::min(16, W / 3));
        int bh = rng.uniform_int(4, 8);
        int x = rng.uniform_int(1, W - bw - 2);
        int y = rng.uniform_int(std::max(1, horizon - bh / 2), H - bh - 2);
        double lum = night ? rng.uniform(0.08, 0.20) : rng.uniform(0.35, 0.75);
        double cr = lum * rng.uniform(0.6, 1.4);
        double cg = lum * rng.uniform(0.6, 1.4);
        double cb = lum * rng.uniform(0.6, 1.4);
        float conf = static_cast<float>(rng.uniform(0.7, 1.0));

        Prim s{BoolMask(W, H), 2, conf};
        for (int yy = y; yy < y + bh; ++yy) {
            for (int xx = x; xx < x + bw; ++xx) {
                p.set(xx, yy, cr, cg, cb);
                s.mask.at(xx, yy) = 1;
            }
        }
        shapes.push_back(std::move(s));
    }

    // Signs: upward triangles; bright warm by day, dim by night.
    for (int i = 0; i < count_for(3); ++i) {
        int size = rng.uniform_int(6, 10);
        int cx = rng.uniform_int(size / 2 + 1, W - size / 2 - 2);
        int y = rng.uniform_int(1, H - size - 2);
        double lum = night ? rng.uniform(0.15, 0.30) : rng.uniform(0.60, 0.85);
        double cr = lum * rng.uniform(1.05, 1.25);
        double cg = lum * rng.uniform(0.75, 0.95);
        double cb = lum * rng.uniform(0.20, 0.45);
        float conf = static_cast<float>(rng.uniform(0.7, 1.0));

        Prim s{BoolMask(W, H), 3, conf};
        for (int j = 0; j < size; ++j) {
            int halfw = (j * (size / 2)) / std::max(1, size - 1);
            for (int xx = cx - halfw; xx <= cx + halfw; ++xx) {
                p.set(xx, y + j, cr, cg, cb);
                s.mask.at(xx, y + j) = 1;
            }
        }
        shapes.push_back(std::move(s));
    }

    // Lights: solid discs; off (grayish) by day, bright core plus halo by night.
    for (int i = 0; i < count_for(1); ++i) {
        int r = rng.uniform_int(2, 4);
        int cx = rng.uniform_int(r + 1, W - r - 2);
        int cy = rng.uniform_int(r + 1, H - r - 2);
        double core = night ? rng.uniform(0.85, 1.0) : rng.uniform(0.30, 0.45);
        double glow_amp = rng.uniform(spec.glow_intensity[0], spec.glow_intensity[1]);
        double glow_sigma = r * rng.uniform(1.2, 2.0);
        float conf = static_cast<float>(rng.uniform(0.7, 1.0));

        if (night) paint_glow(p, cx, cy, glow_sigma, glow_amp, 1.0, 0.92, 0.72);

        Prim s{BoolMask(W, H), 1, conf};
        for (int yy = cy - r; yy <= cy + r; ++yy) {
            for (int xx = cx - r; xx <= cx + r; ++xx) {
                if ((xx - cx) * (xx - cx) + (yy - cy) * (yy - cy) > r * r) continue;
                if (night) {
                    p.set(xx, yy, core, core * 0.95, core * 0.75);
                } else {
                    p.set(xx, yy, core, core * 0.97, core * 0.90);
                }
                s.mask.at(xx, yy) = 1;
            }
        }
        shapes.push_back(std::move(s));
    }

    // Unannotated distractor blobs, night only: diffuse glow with no core.
    if (night && spec.max_distractors > 0) {
        int nd = rng.uniform_int(0, spec.max_distractors);
        for (int i = 0; i < nd; ++i) {
            double cx = rng.uniform(3, W - 4);
            double cy = rng.uniform(3, H - 4);
            double sigma = rng.uniform(1.5, 3.5);
            double amp = rng.uniform(0.25, 0.50);
            double tr = rng.uniform(0.9, 1.0);
            double tg = rng.uniform(0.75, 0.95);
            double tb = rng.uniform(0.5, 0.8);
            paint_glow(p, cx, cy, sigma, amp, tr, tg, tb);
        }
    }

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < 3; ++c) {
                float& v = scene.image.at4(0, c, y, x);
                v += static_cast<float>(rng.uniform(-noise_amp, noise_amp));
                v = std::clamp(v, 0.0f, 1.0f);
                // snap to the 8-bit grid so the PNG round trip is exact
                v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
            }
        }
    }

    for (Prim& s : shapes) {
        if (s.mask.count() == 0) continue;
        Instance inst;
        inst.class_id = s.class_id;
        inst.confidence = s.confidence;
        bbox_of(s.mask, inst.bx, inst.by, inst.bw, inst.bh);
        inst.gt_mask = std::move(s.mask);
        scene.instances.push_back(std::move(inst));
    }
    return scene;
}

std::vector<AnnotatedScene> gen_corpus(const SceneSpec& spec, Domain domain, int count,
                                       int workers) {
    spec.validate();
    if (count < 0) throw std::invalid_argument("gen_corpus: negative count");
    std::vector<AnnotatedScene> out(static_cast<size_t>(count));
    auto make = [&](int i) {
        out[static_cast<size_t>(i)] =
            gen_scene(spec, domain, seed_for(spec.seed, domain_name(domain), static_cast<uint64_t>(i)));
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%06d", domain_name(domain), i);
        out[static_cast<size_t>(i)].id = buf;
    };
    workers = std::max(1, workers);
    if (workers == 1 || count <= 1) {
        for (int i = 0; i < count; ++i) make(i);
    } else {
        std::vector<std::thread> pool;
        int chunk = (count + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            int lo = w * chunk, hi = std::min(count, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] {
                for (int i = lo; i < hi; ++i) make(i);
            });
        }
        for (auto& t : pool) t.join();
    }
    return out;
}

}  // namespace hsb
