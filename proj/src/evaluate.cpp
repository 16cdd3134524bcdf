#include "hsb/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "hsb/optim.hpp"
#include "json.hpp"

namespace hsb {

namespace fs = std::filesystem;
using nlohmann::json;

SemanticMap ground_truth_map(const AnnotatedScene& scene) {
    SemanticMap map(scene.width(), scene.height());
    for (const Instance& inst : scene.instances) {
        for (int y = 0; y < map.h; ++y) {
            for (int x = 0; x < map.w; ++x) {
                if (inst.gt_mask.at(x, y)) map.at(x, y) = inst.class_id;
            }
        }
    }
    return map;
}

namespace {

struct OracleGraph {
    Graph g;
    int logits = -1;

    OracleGraph(int batch, int h, int w, const OracleConfig& cfg) {
        int x = g.input("x", {batch, 3, h, w});
        EncNodes enc = build_encoder(g, x, cfg.encoder, "oenc");
        logits = build_seg_head(g, enc, cfg.num_classes, "oseg");
        g.mark_output("logits", logits);
    }
};

Tensor<float> stack_scene_images(const std::vector<AnnotatedScene>& scenes,
                                 const std::vector<int>& idx) {
    const Tensor<float>& first = scenes[static_cast<size_t>(idx[0])].image;
    int c = first.dim(1), h = first.dim(2), w = first.dim(3);
    Tensor<float> out({static_cast<int>(idx.size()), c, h, w});
    size_t per = static_cast<size_t>(c) * h * w;
    for (size_t b = 0; b < idx.size(); ++b) {
        const Tensor<float>& img = scenes[static_cast<size_t>(idx[b])].image;
        std::copy(img.data.begin(), img.data.end(), out.data.begin() + b * per);
    }
    return out;
}

}  // namespace

OracleSeg train_oracle_seg(const std::vector<AnnotatedScene>& night, const OracleConfig& cfg) {
    if (night.empty()) throw std::invalid_argument("oracle: empty training corpus");
    if (cfg.iterations < 1 || cfg.batch_size < 1) {
        throw std::invalid_argument("oracle: iterations and batch_size must be >= 1");
    }
    if (cfg.black_bg_prob < 0.0 || cfg.black_bg_prob > 1.0) {
        throw std::invalid_argument("oracle: black_bg_prob must lie in [0, 1]");
    }
    const int H = night[0].height(), W = night[0].width();
    for (const auto& s : night) {
        if (s.height() != H || s.width() != W) {
            throw std::invalid_argument("oracle: scenes must share one size");
        }
    }
    const int B = std::min<int>(cfg.batch_size, static_cast<int>(night.size()));

    std::vector<SemanticMap> gt;
    gt.reserve(night.size());
    for (const auto& s : night) gt.push_back(ground_truth_map(s));
    std::vector<BoolMask> box_bg;
    box_bg.reserve(night.size());
    for (const auto& s : night) box_bg.push_back(background_mask(s.instances, W, H));

    OracleSeg oracle;
    oracle.cfg = cfg;
    {
        OracleGraph tmpl(B, H, W, cfg);
        init_missing_params(tmpl.g, oracle.params, seed_for(cfg.seed, "oracle/init"));
    }

    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    Rng order(seed_for(cfg.seed, "oracle/order"));
    Rng aug(seed_for(cfg.seed, "oracle/aug"));
    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        std::vector<int> idx(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            idx[static_cast<size_t>(b)] = order.uniform_int(0, static_cast<int>(night.size()) - 1);
        }
        Graph g;
        int x = g.input("x", {B, 3, H, W});
        EncNodes enc = build_encoder(g, x, cfg.encoder, "oenc");
        int logits = build_seg_head(g, enc, cfg.num_classes, "oseg");
        std::vector<SemanticMap> labels;
        labels.reserve(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) labels.push_back(gt[static_cast<size_t>(idx[static_cast<size_t>(b)])]);
        int loss = build_seg_loss(g, logits, labels);
        g.mark_output("loss", loss);

        Tensor<float> batch = stack_scene_images(night, idx);
        for (int b = 0; b < B; ++b) {
            if (aug.uniform() >= cfg.black_bg_prob) continue;
            // Alternate between zeroing outside the enlarged boxes (matches
            // how evaluation isolates backgrounds) and outside the masks
            // themselves (puts black directly against bright object pixels).
            bool by_box = aug.uniform() < 0.5;
            size_t scene = static_cast<size_t>(idx[static_cast<size_t>(b)]);
            const BoolMask& bg = box_bg[scene];
            const SemanticMap& m = gt[scene];
            for (int y = 0; y < H; ++y) {
                for (int x2 = 0; x2 < W; ++x2) {
                    bool zero = by_box ? bg.at(x2, y) : m.at(x2, y) == 0;
                    if (!zero) continue;
                    for (int ch = 0; ch < 3; ++ch) batch.at4(b, ch, y, x2) = 0.0f;
                }
            }
        }
        Eval<float> ev = forward(g, oracle.params, {{"x", batch}});
        if (!std::isfinite(ev.out("loss").data[0])) {
            throw std::runtime_error("oracle: non-finite training loss");
        }
        Grads<float> gr = backward(g, oracle.params, ev, "loss");
        adam.step(oracle.params, gr.params);
    }
    return oracle;
}

void save_oracle(const std::string& path, const OracleSeg& oracle) {
    ArrayFile a;
    for (const auto& [name, t] : oracle.params.values) a.f32.emplace("param/" + name, t);
    Tensor<double> meta({8});
    meta.data[0] = oracle.cfg.iterations;
    meta.data[1] = oracle.cfg.batch_size;
    meta.data[2] = oracle.cfg.lr;
    meta.data[3] = static_cast<double>(oracle.cfg.seed);
    meta.data[4] = oracle.cfg.num_classes;
    meta.data[5] = oracle.cfg.encoder.w1;
    meta.data[6] = oracle.cfg.encoder.w3;
    meta.data[7] = oracle.cfg.black_bg_prob;
    a.f64.emplace("meta/oracle", std::move(meta));
    Tensor<double> w2({1});
    w2.data[0] = oracle.cfg.encoder.w2;
    a.f64.emplace("meta/oracle_w2", std::move(w2));
    write_array_file(path, a);
}

OracleSeg load_oracle(const std::string& path) {
    ArrayFile a = read_array_file(path);
    auto it = a.f64.find("meta/oracle");
    if (it == a.f64.end() || it->second.data.size() != 8) {
        throw std::runtime_error("oracle: missing metadata in '" + path + "'");
    }
    OracleSeg o;
    o.cfg.iterations = static_cast<int>(it->second.data[0]);
    o.cfg.batch_size = static_cast<int>(it->second.data[1]);
    o.cfg.lr = it->second.data[2];
    o.cfg.seed = static_cast<uint64_t>(it->second.data[3]);
    o.cfg.num_classes = static_cast<int>(it->second.data[4]);
    o.cfg.encoder.w1 = static_cast<int>(it->second.data[5]);
    o.cfg.encoder.w3 = static_cast<int>(it->second.data[6]);
    o.cfg.black_bg_prob = it->second.data[7];
    auto itw = a.f64.find("meta/oracle_w2");
    if (itw == a.f64.end() || itw->second.data.size() != 1) {
        throw std::runtime_error("oracle: missing metadata in '" + path + "'");
    }
    o.cfg.encoder.w2 = static_cast<int>(itw->second.data[0]);
    for (auto& [name, t] : a.f32) {
        if (name.rfind("param/", 0) == 0) o.params.values.emplace(name.substr(6), std::move(t));
    }
    return o;
}

Tensor<float> oracle_logits(const OracleSeg& oracle, const Tensor<float>& image) {
    if (image.shape.size() != 4 || image.dim(0) != 1) {
        throw std::invalid_argument("oracle: image must be {1,3,H,W}");
    }
    OracleGraph og(1, image.dim(2), image.dim(3), oracle.cfg);
    Eval<float> ev = forward(og.g, oracle.params, {{"x", image}});
    return ev.out("logits");
}

SemanticMap oracle_predict(const OracleSeg& oracle, const Tensor<float>& image) {
    Tensor<float> logits = oracle_logits(oracle, image);
    int c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    SemanticMap map(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int best = 0;
            float bv = logits.at4(0, 0, y, x);
            for (int k = 1; k < c; ++k) {
                float v = logits.at4(0, k, y, x);
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            map.at(x, y) = best;
        }
    }
    return map;
}

double histogram_domain_distance(const std::vector<Tensor<float>>& a,
                                 const std::vector<Tensor<float>>& b, int bins) {
    if (a.empty() || b.empty()) throw std::invalid_argument("domain distance: empty corpus");
    if (bins < 1) throw std::invalid_argument("domain distance: bins must be >= 1");
    auto hist = [&](const std::vector<Tensor<float>>& imgs, int channel) {
        std::vector<double> h(static_cast<size_t>(bins), 0.0);
        int64_t total = 0;
        for (const auto& img : imgs) {
            if (img.shape.size() != 4 || img.dim(1) <= channel) {
                throw std::invalid_argument("domain distance: images must be {1,C,H,W}");
            }
            int hh = img.dim(2), ww = img.dim(3);
            for (int y = 0; y < hh; ++y) {
                for (int x = 0; x < ww; ++x) {
                    double v = img.at4(0, channel, y, x);
                    int bin = std::clamp(static_cast<int>(v * bins), 0, bins - 1);
                    h[static_cast<size_t>(bin)] += 1.0;
                    ++total;
                }
            }
        }
        for (double& v : h) v /= static_cast<double>(total);
        return h;
    };
    int channels = a[0].dim(1);
    double sum = 0;
    for (int c = 0; c < channels; ++c) {
        std::vector<double> ha = hist(a, c), hb = hist(b, c);
        double l1 = 0;
        for (int i = 0; i < bins; ++i) {
            l1 += std::abs(ha[static_cast<size_t>(i)] - hb[static_cast<size_t>(i)]);
        }
        sum += l1;
    }
    return sum / channels;
}

double mean_luminance(const std::vector<Tensor<float>>& images) {
    if (images.empty()) throw std::invalid_argument("mean luminance: empty corpus");
    double sum = 0;
    int64_t n = 0;
    for (const auto& img : images) {
        for (float v : img.data) sum += v;
        n += static_cast<int64_t>(img.data.size());
    }
    return sum / static_cast<double>(n);
}

double hallucination_rate(const std::vector<Tensor<float>>& translated,
                          const std::vector<AnnotatedScene>& sources, const OracleSeg& oracle,
                          int64_t* bg_total, int64_t* flagged_total) {
    if (translated.size() != sources.size() || translated.empty()) {
        throw std::invalid_argument("hallucination rate: corpus mismatch");
    }
    int64_t bg_px = 0, flagged = 0;
    for (size_t i = 0; i < translated.size(); ++i) {
        const AnnotatedScene& src = sources[i];
        BoolMask bg = background_mask(src.instances, src.width(), src.height());
        SemanticMap pred = oracle_predict(oracle, translated[i]);
        if (pred.w != bg.w || pred.h != bg.h) {
            throw std::invalid_argument("hallucination rate: size mismatch");
        }
        for (int y = 0; y < bg.h; ++y) {
            for (int x = 0; x < bg.w; ++x) {
                if (!bg.at(x, y)) continue;
                ++bg_px;
                if (pred.at(x, y) > 0) ++flagged;
            }
        }
    }
    if (bg_total) *bg_total = bg_px;
    if (flagged_total) *flagged_total = flagged;
    return bg_px > 0 ? static_cast<double>(flagged) / static_cast<double>(bg_px) : 0.0;
}

EvalMetrics evaluate(const std::vector<Tensor<float>>& translated,
                     const std::vector<AnnotatedScene>& sources, const OracleSeg& oracle,
                     const std::vector<Tensor<float>>& real_night) {
    if (translated.size() != sources.size() || translated.empty()) {
        throw std::invalid_argument("evaluate: translated and sources must align");
    }
    EvalMetrics m;
    m.halluc_pixel_rate =
        hallucination_rate(translated, sources, oracle, &m.background_pixels, &m.flagged_pixels);

    double iou_sum = 0;
    int iou_count = 0;
    for (size_t i = 0; i < translated.size(); ++i) {
        const AnnotatedScene& src = sources[i];
        SemanticMap pred = oracle_predict(oracle, translated[i]);
        for (const Instance& inst : src.instances) {
            int64_t inter = 0, uni = 0;
            int x0 = std::max(0, inst.bx), y0 = std::max(0, inst.by);
            int x1 = std::min(src.width(), inst.bx + inst.bw);
            int y1 = std::min(src.height(), inst.by + inst.bh);
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    bool p = pred.at(x, y) > 0;
                    bool t = inst.gt_mask.at(x, y) != 0;
                    if (p && t) ++inter;
                    if (p || t) ++uni;
                }
            }
            if (uni == 0) continue;
            iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
            ++iou_count;
        }
    }
    m.annotation_iou = iou_count > 0 ? iou_sum / iou_count : 0.0;
    m.instances_scored = iou_count;
    m.domain_distance = histogram_domain_distance(translated, real_night, 32);
    return m;
}

std::vector<AblationVariant> ablation_grid() {
    return {{"full", true, true}, {"no_supp", false, true}, {"no_hl", true, false},
            {"no_both", false, false}};
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n == 0) return 0;
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// a must sit below b by at least 5% of b to count as separated.
bool separated(double a, double b) {
    double scale = std::max(std::abs(b), 1e-12);
    return (b - a) / scale >= 0.05;
}

}  // namespace

AblationReport run_ablation(const TrainConfig& base, const std::vector<AnnotatedScene>& day,
                            const std::vector<AnnotatedScene>& night,
                            const std::map<std::string, SemanticMap>& pseudo,
                            const SharedEncoder& encoder,
                            const std::vector<AnnotatedScene>& eval_day, const OracleSeg& oracle,
                            const std::vector<uint64_t>& seeds, const std::string& cache_dir) {
    if (seeds.empty()) throw std::invalid_argument("ablation: need at least one seed");
    if (eval_day.empty()) throw std::invalid_argument("ablation: empty evaluation set");
    fs::create_directories(cache_dir);

    std::vector<Tensor<float>> eval_images;
    eval_images.reserve(eval_day.size());
    for (const auto& s : eval_day) eval_images.push_back(s.image);

    AblationReport report;
    std::map<std::string, std::vector<double>> rates;
    for (const AblationVariant& variant : ablation_grid()) {
        for (uint64_t seed : seeds) {
            std::string tag = variant.name + "_" + std::to_string(seed);
            std::string cache_path = cache_dir + "/run_" + tag + ".json";
            AblationRun run;
            run.variant = variant.name;
            run.seed = seed;
            if (fs::exists(cache_path)) {
                std::ifstream is(cache_path);
                json j = json::parse(is);
                run.halluc_rate = j.at("halluc_rate").get<double>();
                run.translated_luminance = j.at("translated_luminance").get<double>();
                run.source_luminance = j.at("source_luminance").get<double>();
                run.train_seconds = j.at("train_seconds").get<double>();
            } else {
                std::fprintf(stderr, "[ablate] training %s (seed %llu)\n", variant.name.c_str(),
                             static_cast<unsigned long long>(seed));
                auto started = std::chrono::steady_clock::now();
                TrainConfig cfg = base;
                cfg.use_supp = variant.use_supp;
                cfg.use_hl = variant.use_hl;
                cfg.seed = seed;
                cfg.out_dir = cache_dir + "/" + tag;
                TrainResult tr = train(cfg, day, night, pseudo, encoder);
                Checkpoint ckpt = load_checkpoint(tr.checkpoint_path);
                std::vector<Tensor<float>> translated = translate(ckpt, eval_images, seed);
                run.halluc_rate = hallucination_rate(translated, eval_day, oracle, nullptr,
                                                     nullptr);
                run.translated_luminance = mean_luminance(translated);
                run.source_luminance = mean_luminance(eval_images);
                run.train_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                        .count();
                json j;
                j["variant"] = variant.name;
                j["seed"] = seed;
                j["halluc_rate"] = run.halluc_rate;
                j["translated_luminance"] = run.translated_luminance;
                j["source_luminance"] = run.source_luminance;
                j["train_seconds"] = run.train_seconds;
                std::ofstream os(cache_path, std::ios::trunc);
                os << j.dump(2) << "\n";
            }
            rates[variant.name].push_back(run.halluc_rate);
            report.runs.push_back(run);
        }
    }

    for (const auto& [name, v] : rates) report.medians[name] = median(v);
    double full = report.medians.at("full");
    double no_supp = report.medians.at("no_supp");
    double no_hl = report.medians.at("no_hl");
    double no_both = report.medians.at("no_both");
    report.ordering_holds =
        full < no_supp && full < no_hl && no_supp < no_both && no_hl < no_both;
    report.separation_ok = separated(full, no_supp) && separated(full, no_hl) &&
                           separated(no_supp, no_both) && separated(no_hl, no_both);
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "medians: full=%.6g no_supp=%.6g no_hl=%.6g no_both=%.6g ordering=%s "
                  "separation=%s",
                  full, no_supp, no_hl, no_both, report.ordering_holds ? "yes" : "no",
                  report.separation_ok ? "yes" : "no");
    report.verdict = buf;
    return report;
}

AblationReport run_desk_ablation(const DeskAblationSetup& setup, const std::string& cache_dir) {
    if (setup.size < 16 || setup.size % 8 != 0) {
        throw std::invalid_argument("ablation: size must be >= 16 and divisible by 8");
    }
    if (setup.scenes_per_domain < 1 || setup.eval_scenes < 1 || setup.iterations < 1 ||
        setup.batch_size < 1 || setup.pretrain_epochs < 1 || setup.oracle_iterations < 1 ||
        setup.seeds.empty()) {
        throw std::invalid_argument("ablation: counts must be positive");
    }
    fs::create_directories(cache_dir);

    SceneSpec spec;
    spec.width = setup.size;
    spec.height = setup.size;
    spec.seed = 1001;
    std::vector<AnnotatedScene> day = gen_corpus(spec, Domain::Day, setup.scenes_per_domain);
    spec.seed = 1002;
    std::vector<AnnotatedScene> night = gen_corpus(spec, Domain::Night, setup.scenes_per_domain);
    spec.seed = 1003;
    std::vector<AnnotatedScene> eval_day = gen_corpus(spec, Domain::Day, setup.eval_scenes);

    std::map<std::string, SemanticMap> pseudo;
    for (const auto& s : night) {
        pseudo.emplace(s.id, make_pseudolabels(s, setup.pseudo_perturb, 77).map);
    }

    std::string enc_path = cache_dir + "/encoder.hsb";
    SharedEncoder encoder;
    if (fs::exists(enc_path)) {
        encoder = load_encoder(enc_path);
    } else {
        std::fprintf(stderr, "[ablate] pretraining encoder\n");
        encoder = pretrain_encoder(night, setup.pretrain_epochs, 5);
        save_encoder(enc_path, encoder);
    }

    std::string oracle_path = cache_dir + "/oracle.hsb";
    OracleSeg oracle;
    if (fs::exists(oracle_path)) {
        oracle = load_oracle(oracle_path);
    } else {
        std::fprintf(stderr, "[ablate] training oracle segmenter\n");
        OracleConfig ocfg;
        ocfg.iterations = setup.oracle_iterations;
        ocfg.batch_size = 4;
        ocfg.seed = 11;
        oracle = train_oracle_seg(night, ocfg);
        save_oracle(oracle_path, oracle);
    }

    TrainConfig base;
    base.iterations = setup.iterations;
    base.batch_size = setup.batch_size;
    return run_ablation(base, day, night, pseudo, encoder, eval_day, oracle, setup.seeds,
                        cache_dir);
}

}  // namespace hsb
