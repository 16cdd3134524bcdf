#include "hsb/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "hsb/optim.hpp"
#include "json.hpp"

namespace hsb {

namespace fs = std::filesystem;
using nlohmann::json;

void SBLossConfig::validate() const {
    if (tau_sb < 0) throw std::invalid_argument("sb loss: tau_sb must be >= 0");
    if (entropy_downsample < 1) throw std::invalid_argument("sb loss: downsample must be >= 1");
}

namespace {

int pool_extent(int full, int target) {
    if (full > target && full % target == 0) return target;
    return full;
}

}  // namespace

SBLossNodes build_sb_loss(Graph& g, int x_ti, int x1, double t_i, const SBLossConfig& cfg,
                          SBLossStats* stats) {
    cfg.validate();
    if (!(t_i >= 0.0 && t_i <= 1.0)) throw std::invalid_argument("sb loss: t_i must be in [0,1]");
    Shape xs = g.shape_of(x_ti);
    Shape ps = g.shape_of(x1);
    if (xs.size() != 4 || ps != xs) {
        throw GraphError("sb loss: state and prediction must share a 4-D shape");
    }
    SBLossNodes out;
    out.transport = g.mean_all(g.square(g.sub(x1, x_ti)));
    bool want_entropy = cfg.tau_sb > 0;
    if (want_entropy && xs[0] < 2) {
        if (stats) stats->entropy_skipped++;
        want_entropy = false;
    }
    if (!want_entropy) {
        out.loss = out.transport;
        return out;
    }
    int th = pool_extent(xs[2], cfg.entropy_downsample);
    int tw = pool_extent(xs[3], cfg.entropy_downsample);
    int pair = g.concat_channels(g.avgpool_to(x_ti, th, tw), g.avgpool_to(x1, th, tw));
    int rows = g.reshape(pair, {xs[0], 2 * xs[1] * th * tw});
    out.entropy = g.knn_entropy(rows);
    out.loss = g.sub(out.transport, g.scale(out.entropy, 2.0 * cfg.tau_sb * (1.0 - t_i)));
    return out;
}

double total_loss(const LossTerms& t, const LossWeights& w) {
    const std::pair<const char*, double> named[] = {{"L_adv", t.adv},   {"L_SB", t.sb},
                                                    {"L_seg", t.seg},   {"L_cont", t.cont},
                                                    {"L_supp", t.supp}, {"L_hl", t.hl}};
    for (const auto& [name, v] : named) {
        if (!std::isfinite(v)) throw NonFiniteLoss(name);
    }
    double total = w.adv * t.adv + w.sb * t.sb + w.seg * t.seg + w.cont * t.cont +
                   w.supp * t.supp + w.hl * t.hl;
    if (!std::isfinite(total)) throw NonFiniteLoss("total");
    return total;
}

void TrainConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("train config: iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train config: lr must be > 0");
    if (num_classes < 1) throw std::invalid_argument("train config: num_classes must be >= 1");
    if (cont_patches < 1) throw std::invalid_argument("train config: cont_patches must be >= 1");
    if (ref_batch < 1) throw std::invalid_argument("train config: ref_batch must be >= 1");
    if (!(proto_alpha >= 0 && proto_alpha <= 1)) {
        throw std::invalid_argument("train config: proto_alpha must be in [0,1]");
    }
    if (entropy_downsample < 1) {
        throw std::invalid_argument("train config: entropy_downsample must be >= 1");
    }
    chain.validate();
    const double ws[] = {weights.adv, weights.sb, weights.seg, weights.cont, weights.supp,
                         weights.hl};
    for (double w : ws) {
        if (!std::isfinite(w) || w < 0) {
            throw std::invalid_argument("train config: loss weights must be finite and >= 0");
        }
    }
}

LossWeights TrainConfig::effective_weights() const {
    LossWeights w = weights;
    if (!use_supp) w.supp = 0;
    if (!use_hl) w.hl = 0;
    return w;
}

double TrainConfig::lr_at(int iter) const {
    int m1 = static_cast<int>(0.4 * iterations);
    int m2 = static_cast<int>(0.8 * iterations);
    double f = iter > m2 ? 0.25 : iter > m1 ? 0.5 : 1.0;
    return lr * f;
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw std::invalid_argument(std::string("train config: unknown field '") + it.key() +
                                        "' in " + where);
        }
    }
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
    reject_unknown(j,
                   {"iterations", "batch_size", "lr", "seed", "num_classes", "chain", "generator",
                    "suppression", "weights", "use_hl", "use_supp", "cont_patches", "ref_batch",
                    "proto_alpha", "entropy_downsample", "out_dir", "checkpoint_every"},
                   "the top level");
    TrainConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.num_classes = j.value("num_classes", c.num_classes);
    if (j.contains("chain")) {
        const json& s = j.at("chain");
        reject_unknown(s, {"steps", "tau_sb"}, "chain");
        c.chain.steps = s.value("steps", c.chain.steps);
        c.chain.tau_sb = s.value("tau_sb", c.chain.tau_sb);
    }
    if (j.contains("generator")) {
        const json& s = j.at("generator");
        reject_unknown(s, {"image_channels", "base_width", "res_blocks", "emb_dim"}, "generator");
        c.generator.image_channels = s.value("image_channels", c.generator.image_channels);
        c.generator.base_width = s.value("base_width", c.generator.base_width);
        c.generator.res_blocks = s.value("res_blocks", c.generator.res_blocks);
        c.generator.emb_dim = s.value("emb_dim", c.generator.emb_dim);
    }
    if (j.contains("suppression")) {
        const json& s = j.at("suppression");
        reject_unknown(s, {"tau_temp", "n_neg", "proj_dim"}, "suppression");
        c.suppression.tau_temp = s.value("tau_temp", c.suppression.tau_temp);
        c.suppression.n_neg = s.value("n_neg", c.suppression.n_neg);
        c.suppression.proj_dim = s.value("proj_dim", c.suppression.proj_dim);
    }
    if (j.contains("weights")) {
        const json& s = j.at("weights");
        reject_unknown(s, {"adv", "sb", "seg", "cont", "supp", "hl"}, "weights");
        c.weights.adv = s.value("adv", c.weights.adv);
        c.weights.sb = s.value("sb", c.weights.sb);
        c.weights.seg = s.value("seg", c.weights.seg);
        c.weights.cont = s.value("cont", c.weights.cont);
        c.weights.supp = s.value("supp", c.weights.supp);
        c.weights.hl = s.value("hl", c.weights.hl);
    }
    c.use_hl = j.value("use_hl", c.use_hl);
    c.use_supp = j.value("use_supp", c.use_supp);
    c.cont_patches = j.value("cont_patches", c.cont_patches);
    c.ref_batch = j.value("ref_batch", c.ref_batch);
    c.proto_alpha = j.value("proto_alpha", c.proto_alpha);
    c.entropy_downsample = j.value("entropy_downsample", c.entropy_downsample);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    json j;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["seed"] = c.seed;
    j["num_classes"] = c.num_classes;
    j["chain"] = {{"steps", c.chain.steps}, {"tau_sb", c.chain.tau_sb}};
    j["generator"] = {{"image_channels", c.generator.image_channels},
                      {"base_width", c.generator.base_width},
                      {"res_blocks", c.generator.res_blocks},
                      {"emb_dim", c.generator.emb_dim}};
    j["suppression"] = {{"tau_temp", c.suppression.tau_temp},
                        {"n_neg", c.suppression.n_neg},
                        {"proj_dim", c.suppression.proj_dim}};
    j["weights"] = {{"adv", c.weights.adv},   {"sb", c.weights.sb},     {"seg", c.weights.seg},
                    {"cont", c.weights.cont}, {"supp", c.weights.supp}, {"hl", c.weights.hl}};
    j["use_hl"] = c.use_hl;
    j["use_supp"] = c.use_supp;
    j["cont_patches"] = c.cont_patches;
    j["ref_batch"] = c.ref_batch;
    j["proto_alpha"] = c.proto_alpha;
    j["entropy_downsample"] = c.entropy_downsample;
    j["out_dir"] = c.out_dir;
    j["checkpoint_every"] = c.checkpoint_every;
    return j.dump(2);
}

namespace {

std::string fmt_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

Tensor<float> emb_rows(int batch, double t, int dim) {
    std::vector<float> e = time_embedding(t, dim);
    Tensor<float> out({batch, dim});
    for (int b = 0; b < batch; ++b) {
        for (int k = 0; k < dim; ++k) out.at2(b, k) = e[static_cast<size_t>(k)];
    }
    return out;
}

Tensor<float> stack_images(const std::vector<AnnotatedScene>& scenes,
                           const std::vector<int>& idx) {
    const Tensor<float>& first = scenes[static_cast<size_t>(idx[0])].image;
    int c = first.dim(1), h = first.dim(2), w = first.dim(3);
    Tensor<float> out({static_cast<int>(idx.size()), c, h, w});
    size_t per = static_cast<size_t>(c) * h * w;
    for (size_t b = 0; b < idx.size(); ++b) {
        const Tensor<float>& img = scenes[static_cast<size_t>(idx[b])].image;
        std::memcpy(out.data.data() + b * per, img.data.data(), per * sizeof(float));
    }
    return out;
}

Tensor<float> slice_elem(const Tensor<float>& t, int b) {
    int c = t.dim(1), h = t.dim(2), w = t.dim(3);
    Tensor<float> out({c, h, w});
    size_t per = static_cast<size_t>(c) * h * w;
    std::memcpy(out.data.data(), t.data.data() + static_cast<size_t>(b) * per,
                per * sizeof(float));
    return out;
}

void copy_into_batch(Tensor<float>& dst, int b, const Tensor<float>& src) {
    size_t per = src.data.size();
    std::memcpy(dst.data.data() + static_cast<size_t>(b) * per, src.data.data(),
                per * sizeof(float));
}

std::set<std::string> graph_params_with_prefixes(const Graph& g,
                                                 const std::vector<std::string>& prefixes) {
    std::set<std::string> out;
    for (const auto& [name, id] : g.params()) {
        (void)id;
        for (const auto& p : prefixes) {
            if (name.rfind(p, 0) == 0) {
                out.insert(name);
                break;
            }
        }
    }
    return out;
}

int weighted_sum(Graph& g, const std::vector<std::pair<int, double>>& terms,
                 const std::string& tag) {
    int total = -1;
    for (const auto& [node, w] : terms) {
        if (node < 0 || w == 0.0) continue;
        int s = g.scale(node, w);
        total = total < 0 ? s : g.add(total, s);
    }
    if (total < 0) total = g.constant_scalar(0.0, tag);
    return total;
}

double scalar_out(const Eval<float>& ev, const char* name) {
    return static_cast<double>(ev.out(name).data[0]);
}

struct EncFeatureCache {
    const Graph* graph = nullptr;
    Graph storage;
    std::map<int, std::array<Tensor<float>, 3>> by_scene;

    void build(int h, int w, const EncoderConfig& cfg) {
        int x = storage.input("x", {1, 3, h, w});
        EncNodes e = build_encoder(storage, x, cfg, "enc");
        storage.mark_output("e1", e.e1);
        storage.mark_output("e2", e.e2);
        storage.mark_output("e3", e.e3);
        graph = &storage;
    }

    const std::array<Tensor<float>, 3>& features(int scene_idx, const AnnotatedScene& scene,
                                                 const ParamStore<float>& params) {
        auto it = by_scene.find(scene_idx);
        if (it != by_scene.end()) return it->second;
        Eval<float> ev = forward(*graph, params, {{"x", scene.image}});
        auto [ins, ok] =
            by_scene.emplace(scene_idx, std::array<Tensor<float>, 3>{ev.out("e1"), ev.out("e2"),
                                                                     ev.out("e3")});
        (void)ok;
        return ins->second;
    }
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<AnnotatedScene>& day,
                  const std::vector<AnnotatedScene>& night,
                  const std::map<std::string, SemanticMap>& pseudo, const SharedEncoder& encoder) {
    cfg.validate();
    if (day.empty() || night.empty()) throw std::invalid_argument("train: empty corpus");
    if (!encoder.frozen) throw std::invalid_argument("train: encoder must be frozen");
    const int H = day[0].height(), W = day[0].width();
    if (H < 16 || W < 16 || H % 8 != 0 || W % 8 != 0) {
        throw std::invalid_argument("train: image extents must be multiples of 8, at least 16");
    }
    for (const auto& s : day) {
        if (s.height() != H || s.width() != W) {
            throw std::invalid_argument("train: day scenes must share one size");
        }
    }
    for (const auto& s : night) {
        if (s.height() != H || s.width() != W) {
            throw std::invalid_argument("train: night scenes must share one size");
        }
    }
    bool any_labeled = false;
    for (const auto& s : night) {
        if (pseudo.count(s.id)) {
            any_labeled = true;
            break;
        }
    }
    if (!any_labeled) throw std::invalid_argument("train: no night scene has a pseudo label");

    const int B = cfg.batch_size;
    const int R = cfg.ref_batch;
    const int N = cfg.chain.steps;
    const int C = cfg.num_classes;
    const int F = generator_feature_width(cfg.generator);
    const int fh = H / 8, fw = W / 8;
    const LossWeights wEff = cfg.effective_weights();
    const SBLossConfig sb_cfg{cfg.chain.tau_sb, cfg.entropy_downsample};
    const std::vector<double> part = make_partition(N);

    TrainResult res;
    fs::create_directories(cfg.out_dir);

    // Parameter store: frozen encoder weights plus everything a template
    // graph of all components declares.
    ParamStore<float> params = encoder.params;
    {
        Graph tmpl;
        int x = tmpl.input("x", {B, 3, H, W});
        int temb = tmpl.input("temb", {B, cfg.generator.emb_dim});
        GenNodes gen = build_generator(tmpl, x, temb, cfg.generator, "gen");
        EncNodes enc = build_encoder(tmpl, gen.x1, encoder.cfg, "enc");
        build_style_head(tmpl, enc.e3, "dsty");
        build_seg_head(tmpl, enc, C, "dseg");
        int rows = tmpl.input("rows", {1, F});
        build_projection_head(tmpl, rows, cfg.suppression.proj_dim, "proj");
        init_missing_params(tmpl, params, seed_for(cfg.seed, "train/init"));
    }

    Adam adam_g(AdamConfig{cfg.lr, 0.5, 0.999, 1e-8});
    Adam adam_d(AdamConfig{cfg.lr, 0.5, 0.999, 1e-8});

    Generator rollgen(cfg.generator);  // forward-only helper for the rollout prefix

    // The encoder is frozen, so real-night features are constants; cache them
    // per scene instead of recomputing each step.
    EncFeatureCache enc_cache;
    enc_cache.build(H, W, encoder.cfg);

    // Forward-only pass: prediction, its frozen-encoder features, and the
    // segmentation logits that drive hallucination detection.
    Graph pass1;
    {
        int x = pass1.input("x_ti", {B, 3, H, W});
        int temb = pass1.input("temb_i", {B, cfg.generator.emb_dim});
        GenNodes gen = build_generator(pass1, x, temb, cfg.generator, "gen");
        EncNodes enc = build_encoder(pass1, gen.x1, encoder.cfg, "enc");
        int logits = build_seg_head(pass1, enc, C, "dseg");
        pass1.mark_output("x1", gen.x1);
        pass1.mark_output("e3f", enc.e3);
        pass1.mark_output("logits", logits);
    }

    // Bottleneck features of real night references, for prototype updates.
    Graph proto_graph;
    {
        int x = proto_graph.input("x", {R, 3, H, W});
        int temb = proto_graph.input("temb", {R, cfg.generator.emb_dim});
        int feat = build_generator_features(proto_graph, x, temb, cfg.generator, "gen");
        proto_graph.mark_output("feat", feat);
    }

    PrototypeBank bank(C, F, cfg.proto_alpha);
    SBLossStats sb_stats;
    HallucinationStats hl_stats;
    SegLossStats seg_stats;

    std::string metrics_path = cfg.out_dir + "/metrics.csv";
    std::ofstream csv(metrics_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("train: cannot write " + metrics_path);
    csv << kMetricsHeader << "\n";

    auto make_checkpoint = [&](int iter) {
        Checkpoint c;
        c.iteration = iter;
        c.gen_cfg = cfg.generator;
        c.chain = cfg.chain;
        c.num_classes = C;
        c.params = params;
        c.bank = bank;
        c.opt_g_m = adam_g.moment1();
        c.opt_g_v = adam_g.moment2();
        c.opt_d_m = adam_d.moment1();
        c.opt_d_v = adam_d.moment2();
        c.opt_g_steps = adam_g.steps_taken();
        c.opt_d_steps = adam_d.steps_taken();
        return c;
    };

    const Tensor<float> temb_i0 = emb_rows(B, 0.0, cfg.generator.emb_dim);

    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        Rng rng(seed_for(cfg.seed, "train/iter", static_cast<uint64_t>(iter)));
        double lr_now = cfg.lr_at(iter);
        adam_g.set_lr(lr_now);
        adam_d.set_lr(lr_now);

        std::vector<int> di(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) di[static_cast<size_t>(b)] = rng.uniform_int(0, (int)day.size() - 1);
        std::vector<int> ni(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            while (true) {
                int idx = rng.uniform_int(0, (int)night.size() - 1);
                if (pseudo.count(night[static_cast<size_t>(idx)].id)) {
                    ni[static_cast<size_t>(b)] = idx;
                    break;
                }
                res.missing_pseudolabels++;
            }
        }
        std::vector<int> ri(static_cast<size_t>(R));
        for (int r = 0; r < R; ++r) ri[static_cast<size_t>(r)] = rng.uniform_int(0, (int)night.size() - 1);
        int stop = rng.uniform_int(0, N - 1);
        double t_i = part[static_cast<size_t>(stop)];

        // Rollout prefix without gradients; the training step sees x_ti as a
        // plain input.
        Tensor<float> x0 = stack_images(day, di);
        Tensor<float> x_ti = x0;
        for (int j = 0; j < stop; ++j) {
            Tensor<float> pred = rollgen.forward(params, x_ti, part[static_cast<size_t>(j)]).first;
            double s = interp_coeff(part[static_cast<size_t>(j)], part[static_cast<size_t>(j) + 1]);
            double sigma = noise_sigma(s, cfg.chain.tau_sb);
            Tensor<float> eps(x_ti.shape);
            if (sigma > 0) {
                for (float& v : eps.data) v = static_cast<float>(rng.gaussian());
            }
            x_ti = chain_step(x_ti, pred, s, sigma, eps);
        }

        Tensor<float> temb_i = emb_rows(B, t_i, cfg.generator.emb_dim);
        Eval<float> ev1 = forward(pass1, params,
                                  {{"x_ti", x_ti}, {"temb_i", temb_i}});
        const Tensor<float>& x1_data = ev1.out("x1");
        const Tensor<float>& e3_fake = ev1.out("e3f");
        const Tensor<float>& logits1 = ev1.out("logits");

        // Hallucination sites on the current prediction.
        std::vector<BoolMask> bg(static_cast<size_t>(B));
        std::vector<std::vector<std::pair<int, int>>> flagged(static_cast<size_t>(B));  // (cy,cx)
        int64_t halluc_px = 0;
        for (int b = 0; b < B; ++b) {
            const AnnotatedScene& sc = day[static_cast<size_t>(di[static_cast<size_t>(b)])];
            bg[static_cast<size_t>(b)] = background_mask(sc.instances, W, H);
            BoolMask flag = detect_hallucination(slice_elem(logits1, b), bg[static_cast<size_t>(b)]);
            halluc_px += flag.count();
            std::vector<uint8_t> mark(static_cast<size_t>(fh) * fw, 0);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    if (flag.at(x, y)) {
                        mark[static_cast<size_t>(y * fh / H) * fw + (x * fw / W)] = 1;
                    }
                }
            }
            for (int cy = 0; cy < fh; ++cy) {
                for (int cx = 0; cx < fw; ++cx) {
                    if (mark[static_cast<size_t>(cy) * fw + cx]) {
                        flagged[static_cast<size_t>(b)].emplace_back(cy, cx);
                    }
                }
            }
        }

        // ---- Discriminator step ----
        double v_d_adv = 0, v_seg = 0, v_total_d = 0;
        {
            Tensor<float> re1({B, encoder.cfg.w1, H / 2, W / 2});
            Tensor<float> re2({B, encoder.cfg.w2, H / 4, W / 4});
            Tensor<float> re3({B, encoder.cfg.w3, H / 8, W / 8});
            std::vector<SemanticMap> labels;
            labels.reserve(static_cast<size_t>(B));
            for (int b = 0; b < B; ++b) {
                int idx = ni[static_cast<size_t>(b)];
                const auto& feats = enc_cache.features(idx, night[static_cast<size_t>(idx)], params);
                copy_into_batch(re1, b, feats[0]);
                copy_into_batch(re2, b, feats[1]);
                copy_into_batch(re3, b, feats[2]);
                labels.push_back(pseudo.at(night[static_cast<size_t>(idx)].id));
            }

            Graph dg;
            EncNodes enc_real;
            enc_real.e1 = dg.input("re1", re1.shape);
            enc_real.e2 = dg.input("re2", re2.shape);
            enc_real.e3 = dg.input("re3", re3.shape);
            int fe3 = dg.input("fe3", e3_fake.shape);
            int d_adv = build_lsgan_d_loss(dg, build_style_head(dg, enc_real.e3, "dsty"),
                                           build_style_head(dg, fe3, "dsty"));
            int seg_logits = build_seg_head(dg, enc_real, C, "dseg");
            int seg = build_seg_loss(dg, seg_logits, labels, &seg_stats);
            int total_d =
                weighted_sum(dg, {{d_adv, 1.0}, {seg, wEff.seg}}, "total_d_zero");
            dg.mark_output("L_D", d_adv);
            dg.mark_output("L_seg", seg);
            dg.mark_output("total_D", total_d);

            Eval<float> evd = forward(dg, params,
                                      {{"re1", re1}, {"re2", re2}, {"re3", re3}, {"fe3", e3_fake}});
            v_d_adv = scalar_out(evd, "L_D");
            v_seg = scalar_out(evd, "L_seg");
            v_total_d = scalar_out(evd, "total_D");
            if (!std::isfinite(v_d_adv) || !std::isfinite(v_seg)) {
                save_checkpoint(cfg.out_dir + "/abort.hsb", make_checkpoint(iter));
                throw NonFiniteLoss(std::isfinite(v_d_adv) ? "L_seg" : "L_D");
            }

            GradRequest req;
            req.all_params = false;
            req.params = graph_params_with_prefixes(dg, {"dsty.", "dseg."});
            Grads<float> gd = backward<float>(dg, params, evd, "total_D", nullptr, req);
            adam_d.step(params, gd.params);
        }

        // ---- Generator step ----
        // Sites were fixed from the forward pass; the loss graph bakes them in.
        std::vector<std::vector<std::pair<int, int>>> locs(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            locs[static_cast<size_t>(b)] = sample_locations(fw, fh, cfg.cont_patches, rng);
        }
        std::vector<int64_t> anchor_sites, neg_sites;
        for (int b = 0; b < B; ++b) {
            for (auto [cy, cx] : flagged[static_cast<size_t>(b)]) {
                anchor_sites.push_back(b);
                anchor_sites.push_back(cy);
                anchor_sites.push_back(cx);
            }
        }
        if (!anchor_sites.empty() && cfg.use_supp) {
            std::vector<std::array<int, 3>> candidates;
            for (int b = 0; b < B; ++b) {
                std::set<std::pair<int, int>> hot(flagged[static_cast<size_t>(b)].begin(),
                                                  flagged[static_cast<size_t>(b)].end());
                for (int cy = 0; cy < fh; ++cy) {
                    for (int cx = 0; cx < fw; ++cx) {
                        if (!hot.count({cy, cx})) candidates.push_back({b, cy, cx});
                    }
                }
            }
            if (candidates.empty()) {
                // Every cell flagged; fall back to the full grid.
                for (int b = 0; b < B; ++b) {
                    for (int cy = 0; cy < fh; ++cy) {
                        for (int cx = 0; cx < fw; ++cx) candidates.push_back({b, cy, cx});
                    }
                }
            }
            int take = std::min<int>(cfg.suppression.n_neg, (int)candidates.size());
            for (int i = 0; i < take; ++i) {
                int j = rng.uniform_int(i, (int)candidates.size() - 1);
                std::swap(candidates[static_cast<size_t>(i)], candidates[static_cast<size_t>(j)]);
                neg_sites.push_back(candidates[static_cast<size_t>(i)][0]);
                neg_sites.push_back(candidates[static_cast<size_t>(i)][1]);
                neg_sites.push_back(candidates[static_cast<size_t>(i)][2]);
            }
        }

        double v_adv = 0, v_sb = 0, v_cont = 0, v_supp = 0, v_hl = 0, v_total_g = 0;
        {
            Graph gg;
            int x = gg.input("x_ti", {B, 3, H, W});
            int temb = gg.input("temb_i", {B, cfg.generator.emb_dim});
            int x0n = gg.input("x0", {B, 3, H, W});
            int temb0 = gg.input("temb0", {B, cfg.generator.emb_dim});
            int temb1 = gg.input("temb1", {B, cfg.generator.emb_dim});
            GenNodes gen = build_generator(gg, x, temb, cfg.generator, "gen");
            EncNodes enc = build_encoder(gg, gen.x1, encoder.cfg, "enc");
            int adv = build_lsgan_g_loss(gg, build_style_head(gg, enc.e3, "dsty"));
            SBLossNodes sbn = build_sb_loss(gg, x, gen.x1, t_i, sb_cfg, &sb_stats);
            // Source features live at the chain start, translated ones at the
            // end; the embedding encodes that.
            int src_feat = build_generator_features(gg, x0n, temb0, cfg.generator, "gen");
            int trans_feat = build_generator_features(gg, gen.x1, temb1, cfg.generator, "gen");
            int cont = build_contrastive_reg(gg, src_feat, trans_feat, locs,
                                             cfg.suppression.tau_temp);
            int hl = -1;
            if (cfg.use_hl) {
                int logits = build_seg_head(gg, enc, C, "dseg");
                hl = build_hallucination_loss(gg, logits, bg, &hl_stats);
            }
            int supp = -1;
            if (cfg.use_supp && !anchor_sites.empty()) {
                int a = gg.l2_normalize_rows(gg.gather_pixels(trans_feat, anchor_sites));
                int p = gg.l2_normalize_rows(gg.gather_pixels(src_feat, anchor_sites));
                int n = gg.l2_normalize_rows(gg.gather_pixels(trans_feat, neg_sites));
                int protos = bank_proto_node(gg, bank);
                supp = build_suppression_loss(gg, a, p, n, protos, cfg.suppression, "proj");
            }
            int total_g = weighted_sum(gg,
                                       {{adv, wEff.adv},
                                        {sbn.loss, wEff.sb},
                                        {cont, wEff.cont},
                                        {supp, wEff.supp},
                                        {hl, wEff.hl}},
                                       "total_g_zero");
            gg.mark_output("L_adv", adv);
            gg.mark_output("L_SB", sbn.loss);
            gg.mark_output("L_cont", cont);
            if (supp >= 0) gg.mark_output("L_supp", supp);
            if (hl >= 0) gg.mark_output("L_hl", hl);
            gg.mark_output("total_G", total_g);

            Eval<float> evg = forward(gg, params,
                                      {{"x_ti", x_ti},
                                       {"temb_i", temb_i},
                                       {"x0", x0},
                                       {"temb0", temb_i0},
                                       {"temb1", emb_rows(B, 1.0, cfg.generator.emb_dim)}});
            v_adv = scalar_out(evg, "L_adv");
            v_sb = scalar_out(evg, "L_SB");
            v_cont = scalar_out(evg, "L_cont");
            v_supp = supp >= 0 ? scalar_out(evg, "L_supp") : 0.0;
            v_hl = hl >= 0 ? scalar_out(evg, "L_hl") : 0.0;
            LossTerms terms;
            terms.adv = v_adv;
            terms.sb = v_sb;
            terms.cont = v_cont;
            terms.supp = v_supp;
            terms.hl = v_hl;
            try {
                LossWeights wg = wEff;
                wg.seg = 0;  // the segmentation term charges the discriminator phase
                v_total_g = total_loss(terms, wg);
            } catch (const NonFiniteLoss&) {
                save_checkpoint(cfg.out_dir + "/abort.hsb", make_checkpoint(iter));
                throw;
            }

            GradRequest req;
            req.all_params = false;
            req.params = graph_params_with_prefixes(gg, {"gen.", "proj."});
            Grads<float> gr = backward<float>(gg, params, evg, "total_G", nullptr, req);
            adam_g.step(params, gr.params);
        }

        // ---- Prototype update from real night references ----
        int proto_updates = 0;
        {
            Tensor<float> refs = stack_images(night, ri);
            Eval<float> evr = forward(proto_graph, params,
                                      {{"x", refs}, {"temb", emb_rows(R, 1.0, cfg.generator.emb_dim)}});
            const Tensor<float>& featv = evr.out("feat");
            std::map<int, std::vector<std::vector<float>>> rows_by_class;
            for (int r = 0; r < R; ++r) {
                Tensor<float> fslice = slice_elem(featv, r);
                const AnnotatedScene& sc = night[static_cast<size_t>(ri[static_cast<size_t>(r)])];
                for (const Instance& inst : sc.instances) {
                    Bbox box{inst.bx, inst.by, inst.bw, inst.bh};
                    auto feats = extract_instance_features(fslice, box, W, H);
                    auto& rows = rows_by_class[inst.class_id];
                    rows.insert(rows.end(), feats.begin(), feats.end());
                }
            }
            std::map<int, std::vector<float>> means;
            for (const auto& [cls, rows] : rows_by_class) {
                if (cls < 1 || cls > C || rows.empty()) continue;
                means[cls] = batch_prototype(rows);
            }
            if (!means.empty()) ema_update(bank, means);
            proto_updates = static_cast<int>(means.size());
            res.proto_updates_total += proto_updates;
        }

        csv << iter << ',' << fmt_value(v_adv) << ',' << fmt_value(v_sb) << ','
            << fmt_value(v_seg) << ',' << fmt_value(v_cont) << ',' << fmt_value(v_supp) << ','
            << fmt_value(v_hl) << ',' << fmt_value(v_total_g) << ',' << fmt_value(v_total_d)
            << ',' << halluc_px << ',' << proto_updates << ',' << fmt_value(lr_now) << "\n";
        csv.flush();
        res.iterations_run = iter;

        if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 &&
            iter != cfg.iterations) {
            save_checkpoint(cfg.out_dir + "/ckpt_" + std::to_string(iter) + ".hsb",
                            make_checkpoint(iter));
        }
    }

    res.entropy_skipped = sb_stats.entropy_skipped;
    res.empty_background = hl_stats.empty_background_warnings;
    res.metrics_path = metrics_path;
    res.checkpoint_path = cfg.out_dir + "/checkpoint.hsb";
    save_checkpoint(res.checkpoint_path, make_checkpoint(cfg.iterations));
    return res;
}

std::vector<Tensor<float>> translate(const Checkpoint& ckpt,
                                     const std::vector<Tensor<float>>& images, uint64_t seed) {
    Generator gen(ckpt.gen_cfg);
    PredictFn predict = gen.as_predict_fn(ckpt.params);
    std::vector<Tensor<float>> out;
    out.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        const Tensor<float>& img = images[i];
        if (img.shape.size() != 4 || img.dim(0) != 1) {
            throw std::invalid_argument("translate: images must be {1,C,H,W}");
        }
        Rng rng(seed_for(seed, "translate", static_cast<uint64_t>(i)));
        RolloutResult r = rollout(img, predict, ckpt.chain, rng, ckpt.chain.steps);
        out.push_back(std::move(r.prediction));
    }
    return out;
}

}  // namespace hsb
