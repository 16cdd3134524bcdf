#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hsb/checkpoint.hpp"
#include "hsb/dataset_io.hpp"
#include "hsb/evaluate.hpp"
#include "hsb/gradcheck.hpp"
#include "hsb/optim.hpp"
#include "hsb/trainer.hpp"

using namespace hsb;
namespace fs = std::filesystem;

namespace {

constexpr long double kPi = 3.14159265358979323846264338327950288L;

// Kozachenko-Leonenko 1-NN estimate, written directly from the formula:
// H = psi(n) - psi(1) + ln V_d + (d/n) sum_i ln r_i.
long double kl_entropy_oracle(const std::vector<std::vector<long double>>& pts) {
    size_t n = pts.size(), d = pts[0].size();
    long double sum_log = 0;
    for (size_t i = 0; i < n; ++i) {
        long double best = 0;
        bool have = false;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            long double s = 0;
            for (size_t k = 0; k < d; ++k) {
                long double diff = pts[i][k] - pts[j][k];
                s += diff * diff;
            }
            if (!have || s < best) {
                best = s;
                have = true;
            }
        }
        sum_log += 0.5L * std::log(best);  // log of the euclidean distance
    }
    long double harmonic = 0;  // psi(n) - psi(1)
    for (size_t k = 1; k < n; ++k) harmonic += 1.0L / static_cast<long double>(k);
    long double ln_vd =
        (static_cast<long double>(d) / 2) * std::log(kPi) - std::lgamma(static_cast<long double>(d) / 2 + 1);
    return harmonic + ln_vd + (static_cast<long double>(d) / static_cast<long double>(n)) * sum_log;
}

// Mean pooling to th x tw, mirroring avgpool_to.
std::vector<long double> pooled_rows(const Tensor<double>& t, int b, int th, int tw) {
    int c = t.dim(1), h = t.dim(2), w = t.dim(3);
    int rh = h / th, rw = w / tw;
    std::vector<long double> out;
    out.reserve(static_cast<size_t>(c) * th * tw);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < th; ++y) {
            for (int x = 0; x < tw; ++x) {
                long double s = 0;
                for (int dy = 0; dy < rh; ++dy) {
                    for (int dx = 0; dx < rw; ++dx) {
                        s += t.at4(b, ch, y * rh + dy, x * rw + dx);
                    }
                }
                out.push_back(s / (static_cast<long double>(rh) * rw));
            }
        }
    }
    return out;
}

Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<AnnotatedScene> night_corpus(int count, int size, uint64_t seed) {
    SceneSpec spec;
    spec.width = size;
    spec.height = size;
    spec.seed = seed;
    return gen_corpus(spec, Domain::Night, count);
}

std::vector<AnnotatedScene> day_corpus(int count, int size, uint64_t seed) {
    SceneSpec spec;
    spec.width = size;
    spec.height = size;
    spec.seed = seed;
    return gen_corpus(spec, Domain::Day, count);
}

std::map<std::string, SemanticMap> label_all(const std::vector<AnnotatedScene>& scenes,
                                             uint64_t seed) {
    std::map<std::string, SemanticMap> out;
    for (const auto& s : scenes) out.emplace(s.id, make_pseudolabels(s, 0.0, seed).map);
    return out;
}

const std::string kTmp = "build/test_trainer_tmp";

}  // namespace

TEST_CASE("adam minimizes a quadratic deterministically") {
    Graph g;
    int w = g.param("w", {1});
    int target = g.constant_scalar(3.0, "target");
    int loss = g.mean_all(g.square(g.sub(w, target)));
    g.mark_output("loss", loss);

    auto run = [&](double init) {
        ParamStore<float> store;
        store.values["w"] = Tensor<float>({1});
        store.values["w"].data[0] = static_cast<float>(init);
        Adam adam(AdamConfig{0.1, 0.9, 0.999, 1e-8});
        for (int i = 0; i < 300; ++i) {
            Eval<float> ev = forward(g, store, {});
            Grads<float> gr = backward(g, store, ev, "loss");
            adam.step(store, gr.params);
        }
        return store.values["w"].data[0];
    };
    float a = run(-2.0), b = run(-2.0);
    CHECK(std::abs(a - 3.0f) < 1e-3);
    CHECK(a == b);  // bitwise repeatable

    Adam adam;
    CHECK(adam.steps_taken() == 0);
}

TEST_CASE("sb loss transport closed forms") {
    Rng rng(41);
    Shape s{3, 3, 16, 16};

    // tau = 0: pure mean squared transport, no entropy node.
    {
        Graph g;
        int x_ti = g.input("x_ti", s);
        int x1 = g.input("x1", s);
        SBLossStats stats;
        SBLossNodes n = build_sb_loss(g, x_ti, x1, 0.3, SBLossConfig{0.0, 16}, &stats);
        CHECK(n.entropy == -1);
        CHECK(n.loss == n.transport);
        CHECK(stats.entropy_skipped == 0);
        g.mark_output("loss", n.loss);

        Tensor<double> a = random_tensor(s, rng);
        Tensor<double> b = random_tensor(s, rng);
        ParamStore<double> store;
        Eval<double> ev = forward(g, store, {{"x_ti", a}, {"x1", b}});
        long double want = 0;
        for (size_t i = 0; i < a.data.size(); ++i) {
            long double diff = b.data[i] - a.data[i];
            want += diff * diff;
        }
        want /= static_cast<long double>(a.data.size());
        CHECK(std::abs(ev.out("loss").data[0] - static_cast<double>(want)) <
              1e-12 * std::abs(static_cast<double>(want)) + 1e-15);

        // identical tensors: exactly zero
        Eval<double> ev0 = forward(g, store, {{"x_ti", a}, {"x1", a}});
        CHECK(ev0.out("loss").data[0] == 0.0);
    }

    // t_i = 1: the entropy weight vanishes, so loss equals transport.
    {
        Graph g;
        int x_ti = g.input("x_ti", s);
        int x1 = g.input("x1", s);
        SBLossNodes n = build_sb_loss(g, x_ti, x1, 1.0, SBLossConfig{0.01, 16});
        CHECK(n.entropy != -1);
        g.mark_output("loss", n.loss);
        g.mark_output("transport", n.transport);
        Tensor<double> a = random_tensor(s, rng);
        Tensor<double> b = random_tensor(s, rng);
        ParamStore<double> store;
        Eval<double> ev = forward(g, store, {{"x_ti", a}, {"x1", b}});
        CHECK(ev.out("loss").data[0] == doctest::Approx(ev.out("transport").data[0]).epsilon(1e-12));
    }

    // mismatched shapes and bad t rejected
    {
        Graph g;
        int x_ti = g.input("x_ti", s);
        int x1 = g.input("x1", {3, 3, 16, 8});
        CHECK_THROWS_AS(build_sb_loss(g, x_ti, x1, 0.5, SBLossConfig{}), GraphError);
        Graph g2;
        int p = g2.input("a", s);
        int q = g2.input("b", s);
        CHECK_THROWS_AS(build_sb_loss(g2, p, q, 1.5, SBLossConfig{}), std::invalid_argument);
    }
}

TEST_CASE("sb loss entropy matches a direct estimator") {
    Shape s{4, 3, 32, 32};
    double t_i = 0.4, tau = 0.01;
    Rng rng(57);
    Tensor<double> a = random_tensor(s, rng);
    Tensor<double> b = random_tensor(s, rng);

    Graph g;
    int x_ti = g.input("x_ti", s);
    int x1 = g.input("x1", s);
    SBLossNodes n = build_sb_loss(g, x_ti, x1, t_i, SBLossConfig{tau, 16});
    REQUIRE(n.entropy != -1);
    g.mark_output("loss", n.loss);
    g.mark_output("transport", n.transport);
    g.mark_output("entropy", n.entropy);
    ParamStore<double> store;
    Eval<double> ev = forward(g, store, {{"x_ti", a}, {"x1", b}});

    std::vector<std::vector<long double>> pts;
    for (int i = 0; i < 4; ++i) {
        std::vector<long double> row = pooled_rows(a, i, 16, 16);
        std::vector<long double> x1row = pooled_rows(b, i, 16, 16);
        row.insert(row.end(), x1row.begin(), x1row.end());
        pts.push_back(std::move(row));
    }
    long double h_want = kl_entropy_oracle(pts);
    double h_got = ev.out("entropy").data[0];
    CHECK(std::abs(h_got - static_cast<double>(h_want)) <=
          1e-9 * std::max(1.0, std::abs(static_cast<double>(h_want))));

    double want_loss = ev.out("transport").data[0] - 2.0 * tau * (1.0 - t_i) * h_got;
    CHECK(ev.out("loss").data[0] == doctest::Approx(want_loss).epsilon(1e-12));
}

TEST_CASE("sb loss batch of one skips the entropy term") {
    Shape s{1, 3, 16, 16};
    Graph g;
    int x_ti = g.input("x_ti", s);
    int x1 = g.input("x1", s);
    SBLossStats stats;
    SBLossNodes n = build_sb_loss(g, x_ti, x1, 0.2, SBLossConfig{0.01, 16}, &stats);
    CHECK(n.entropy == -1);
    CHECK(n.loss == n.transport);
    CHECK(stats.entropy_skipped == 1);
}

TEST_CASE("sb loss gradient check includes the entropy path") {
    for (uint64_t trial = 0; trial < 5; ++trial) {
        Rng rng(seed_for(600, "sbgrad", trial));
        Shape s{2, 3, 8, 8};
        Graph g;
        int x_ti = g.input("x_ti", s);
        int x1 = g.input("x1", s, /*differentiable=*/true);
        SBLossNodes n = build_sb_loss(g, x_ti, x1, 0.4, SBLossConfig{0.05, 16});
        REQUIRE(n.entropy != -1);
        g.mark_output("loss", n.loss);
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> inputs{{"x_ti", random_tensor(s, rng)},
                                                     {"x1", random_tensor(s, rng)}};
        GradCheckReport rep = grad_check(g, store, inputs, "loss");
        CHECK(rep.pass(1e-4));
    }
}

TEST_CASE("entropy estimator calibrated on a known gaussian") {
    // 2-D gaussian with covariance diag(1, 0.25): H = 0.5 ln((2 pi e)^2 |S|).
    const double h_true = 0.5 * std::log(std::pow(2.0 * kPi * std::exp(1.0), 2.0) * 0.25);
    std::vector<double> estimates;
    for (uint64_t s = 0; s < 10; ++s) {
        Rng rng(seed_for(123, "calib", s));
        int n = 256;
        Tensor<double> pts({n, 2});
        for (int i = 0; i < n; ++i) {
            pts.at2(i, 0) = rng.gaussian();
            pts.at2(i, 1) = 0.5 * rng.gaussian();
        }
        Graph g;
        int p = g.input("p", {n, 2});
        g.mark_output("h", g.knn_entropy(p));
        ParamStore<double> store;
        Eval<double> ev = forward(g, store, {{"p", pts}});
        estimates.push_back(ev.out("h").data[0]);
    }
    std::sort(estimates.begin(), estimates.end());
    double median = 0.5 * (estimates[4] + estimates[5]);
    CHECK(std::abs(median - h_true) <= 0.15);
}

TEST_CASE("total loss arithmetic and finiteness") {
    LossWeights defaults;
    LossTerms t;
    t.hl = 0.5;
    CHECK(total_loss(t, defaults) == doctest::Approx(0.1).epsilon(1e-12));

    LossTerms zero;
    CHECK(total_loss(zero, defaults) == 0.0);

    LossTerms mixed{1, 2, 3, 4, 5, 6};
    CHECK(total_loss(mixed, defaults) == doctest::Approx(1 + 2 + 3 + 4 + 5 + 6 * 0.2).epsilon(1e-12));

    LossWeights all_zero{0, 0, 0, 0, 0, 0};
    CHECK(total_loss(mixed, all_zero) == 0.0);

    LossTerms bad;
    bad.sb = std::nan("");
    CHECK_THROWS_WITH_AS(total_loss(bad, defaults), "non-finite loss term: L_SB", NonFiniteLoss);
    LossTerms inf_hl;
    inf_hl.hl = std::numeric_limits<double>::infinity();
    try {
        total_loss(inf_hl, defaults);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.term == "L_hl");
    }
}

TEST_CASE("train config schedules, switches, validation") {
    TrainConfig cfg;
    cfg.iterations = 2000;
    cfg.lr = 1e-4;
    CHECK(cfg.lr_at(1) == doctest::Approx(1e-4));
    CHECK(cfg.lr_at(800) == doctest::Approx(1e-4));
    CHECK(cfg.lr_at(801) == doctest::Approx(5e-5));
    CHECK(cfg.lr_at(1600) == doctest::Approx(5e-5));
    CHECK(cfg.lr_at(1601) == doctest::Approx(2.5e-5));
    CHECK(cfg.lr_at(2000) == doctest::Approx(2.5e-5));

    cfg.use_supp = false;
    LossWeights w = cfg.effective_weights();
    CHECK(w.supp == 0.0);
    CHECK(w.hl == doctest::Approx(0.2));
    cfg.use_hl = false;
    w = cfg.effective_weights();
    CHECK(w.hl == 0.0);
    CHECK(w.adv == 1.0);

    TrainConfig bad;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = TrainConfig{};
    bad.lr = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = TrainConfig{};
    bad.proto_alpha = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = TrainConfig{};
    bad.weights.cont = -1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("train config json round trip") {
    TrainConfig cfg;
    cfg.iterations = 123;
    cfg.batch_size = 3;
    cfg.lr = 2.5e-4;
    cfg.seed = 99;
    cfg.chain.steps = 7;
    cfg.chain.tau_sb = 0.125;
    cfg.generator.base_width = 16;
    cfg.suppression.n_neg = 17;
    cfg.weights.hl = 0.4;
    cfg.use_supp = false;
    cfg.out_dir = "runs/x";
    TrainConfig back = train_config_from_json(train_config_to_json(cfg));
    CHECK(back.iterations == cfg.iterations);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.lr == cfg.lr);
    CHECK(back.seed == cfg.seed);
    CHECK(back.chain.steps == 7);
    CHECK(back.chain.tau_sb == 0.125);
    CHECK(back.generator.base_width == 16);
    CHECK(back.suppression.n_neg == 17);
    CHECK(back.weights.hl == 0.4);
    CHECK(back.use_supp == false);
    CHECK(back.out_dir == "runs/x");

    // partial document keeps defaults
    TrainConfig partial = train_config_from_json(R"({"iterations": 5})");
    CHECK(partial.iterations == 5);
    CHECK(partial.batch_size == TrainConfig{}.batch_size);
    CHECK(partial.chain.steps == TrainConfig{}.chain.steps);

    CHECK_THROWS_AS(train_config_from_json(R"({"iterations": 5, "bogus": 1})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"chain": {"steps": 3, "oops": 1}})"),
                    std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bitwise") {
    fs::create_directories(kTmp);
    std::string path = kTmp + "/roundtrip.hsb";

    Checkpoint c;
    c.iteration = 41;
    c.gen_cfg.base_width = 16;
    c.gen_cfg.emb_dim = 8;
    c.chain.steps = 4;
    c.chain.tau_sb = 0.03;
    c.num_classes = 3;
    Rng rng(7);
    auto rand_f32 = [&](Shape s) {
        Tensor<float> t(s);
        for (auto& v : t.data) v = static_cast<float>(rng.gaussian());
        return t;
    };
    c.params.values["gen.a.w"] = rand_f32({4, 3, 3, 3});
    c.params.values["enc.s1.w"] = rand_f32({8, 3, 3, 3});
    c.params.values["proj.l1.b"] = rand_f32({5});
    c.opt_g_m["gen.a.w"] = rand_f32({4, 3, 3, 3});
    c.opt_g_v["gen.a.w"] = rand_f32({4, 3, 3, 3});
    c.opt_d_m["dsty.c1.w"] = rand_f32({4, 4, 3, 3});
    c.opt_d_v["dsty.c1.w"] = rand_f32({4, 4, 3, 3});
    c.opt_g_steps = 17;
    c.opt_d_steps = 19;
    c.bank = PrototypeBank(3, 4, 0.75);
    std::map<int, std::vector<float>> means{{2, {0.5f, 0.5f, 0.5f, 0.5f}}};
    ema_update(c.bank, means);
    ema_update(c.bank, means);

    save_checkpoint(path, c);
    Checkpoint r = load_checkpoint(path);
    CHECK(r.iteration == 41);
    CHECK(r.gen_cfg.base_width == 16);
    CHECK(r.gen_cfg.emb_dim == 8);
    CHECK(r.chain.steps == 4);
    CHECK(r.chain.tau_sb == 0.03);  // f64 payload: exact
    CHECK(r.num_classes == 3);
    CHECK(r.opt_g_steps == 17);
    CHECK(r.opt_d_steps == 19);
    REQUIRE(r.params.values.size() == c.params.values.size());
    for (const auto& [name, t] : c.params.values) {
        REQUIRE(r.params.values.count(name) == 1);
        const Tensor<float>& u = r.params.values.at(name);
        REQUIRE(u.shape == t.shape);
        CHECK(std::memcmp(u.data.data(), t.data.data(), t.data.size() * sizeof(float)) == 0);
    }
    CHECK(r.opt_g_m.at("gen.a.w").data == c.opt_g_m.at("gen.a.w").data);
    CHECK(r.opt_d_v.at("dsty.c1.w").data == c.opt_d_v.at("dsty.c1.w").data);
    CHECK(r.bank.alpha == 0.75);
    CHECK(r.bank.num_classes == 3);
    CHECK(r.bank.dim == 4);
    CHECK(r.bank.initialized == c.bank.initialized);
    CHECK(r.bank.seen == c.bank.seen);
    for (int i = 0; i < 3; ++i) CHECK(r.bank.protos[i] == c.bank.protos[i]);

    // corrupt magic
    {
        std::ofstream os(kTmp + "/bad_magic.hsb", std::ios::binary);
        os << "NOPE" << std::string(16, '\0');
    }
    CHECK_THROWS_AS(load_checkpoint(kTmp + "/bad_magic.hsb"), std::runtime_error);

    // truncated payload
    {
        std::string whole = slurp(path);
        std::ofstream os(kTmp + "/truncated.hsb", std::ios::binary);
        os.write(whole.data(), static_cast<std::streamsize>(whole.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(kTmp + "/truncated.hsb"), std::runtime_error);

    CHECK_THROWS_AS(load_checkpoint(kTmp + "/does_not_exist.hsb"), std::runtime_error);
}

TEST_CASE("oracle segmenter, evaluation metrics") {
    auto night = night_corpus(768, 32, 301);
    OracleConfig ocfg;
    ocfg.iterations = 2400;
    ocfg.batch_size = 4;
    ocfg.seed = 11;
    OracleSeg oracle = train_oracle_seg(night, ocfg);

    // quality on held-out night scenes
    auto held = night_corpus(8, 32, 302);
    int64_t correct = 0, total = 0, fg_hit = 0, fg_total = 0;
    for (const auto& s : held) {
        SemanticMap gt = ground_truth_map(s);
        SemanticMap pred = oracle_predict(oracle, s.image);
        for (int y = 0; y < gt.h; ++y) {
            for (int x = 0; x < gt.w; ++x) {
                ++total;
                if (pred.at(x, y) == gt.at(x, y)) ++correct;
                if (gt.at(x, y) > 0) {
                    ++fg_total;
                    if (pred.at(x, y) > 0) ++fg_hit;
                }
            }
        }
    }
    double acc = static_cast<double>(correct) / total;
    double recall = fg_total ? static_cast<double>(fg_hit) / fg_total : 0.0;
    INFO("oracle accuracy ", acc, " fg recall ", recall);
    CHECK(acc > 0.9);
    CHECK(recall > 0.7);

    // save / load round trip keeps predictions bitwise
    fs::create_directories(kTmp);
    save_oracle(kTmp + "/oracle.hsb", oracle);
    OracleSeg loaded = load_oracle(kTmp + "/oracle.hsb");
    Tensor<float> probe = held[0].image;
    CHECK(oracle_logits(oracle, probe).data == oracle_logits(loaded, probe).data);

    // domain distance: identity is exactly zero, day vs night is far
    std::vector<Tensor<float>> night_imgs;
    for (const auto& s : held) night_imgs.push_back(s.image);
    CHECK(histogram_domain_distance(night_imgs, night_imgs) == 0.0);
    auto day = day_corpus(8, 32, 303);
    std::vector<Tensor<float>> day_imgs;
    for (const auto& s : day) day_imgs.push_back(s.image);
    CHECK(histogram_domain_distance(day_imgs, night_imgs) > 0.3);
    CHECK(mean_luminance(day_imgs) > mean_luminance(night_imgs));

    // black background: no foreground evidence, so no hallucinated pixels
    std::vector<Tensor<float>> blacked;
    for (const auto& s : held) {
        Tensor<float> img = s.image;
        BoolMask bg = background_mask(s.instances, s.width(), s.height());
        for (int y = 0; y < bg.h; ++y) {
            for (int x = 0; x < bg.w; ++x) {
                if (!bg.at(x, y)) continue;
                for (int ch = 0; ch < 3; ++ch) img.at4(0, ch, y, x) = 0.0f;
            }
        }
        blacked.push_back(std::move(img));
    }
    double black_rate = hallucination_rate(blacked, held, oracle);
    CHECK(black_rate == 0.0);

    // full metric bundle on real night scenes as a self-check: IoU inside
    // boxes should be solid for a usable oracle
    EvalMetrics m = evaluate(night_imgs, held, oracle, night_imgs);
    INFO("annotation iou ", m.annotation_iou);
    CHECK(m.annotation_iou > 0.45);
    CHECK(m.domain_distance == 0.0);
    CHECK(m.instances_scored > 0);

    CHECK_THROWS_AS(evaluate({}, {}, oracle, night_imgs), std::invalid_argument);
    CHECK_THROWS_AS(train_oracle_seg({}, ocfg), std::invalid_argument);
}

TEST_CASE("training mini run: metrics, frozen encoder, checkpoint, determinism") {
    auto day = day_corpus(10, 32, 401);
    auto night = night_corpus(10, 32, 402);
    auto labels = label_all(night, 21);
    SharedEncoder enc = pretrain_encoder(night, 1, 5);
    uint64_t frozen_sum = enc.checksum();

    TrainConfig cfg;
    cfg.iterations = 6;
    cfg.batch_size = 2;
    cfg.seed = 33;
    cfg.cont_patches = 8;
    cfg.ref_batch = 2;
    cfg.suppression.n_neg = 16;
    cfg.suppression.proj_dim = 16;
    cfg.out_dir = kTmp + "/run_a";
    TrainResult res = train(cfg, day, night, labels, enc);
    CHECK(res.iterations_run == 6);
    CHECK(res.proto_updates_total > 0);

    // metrics: exact header, 12 columns, strictly monotone iterations
    std::string metrics = slurp(res.metrics_path);
    std::istringstream lines(metrics);
    std::string line;
    REQUIRE(std::getline(lines, line));
    CHECK(line == kMetricsHeader);
    int prev = 0, rows = 0;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        ++rows;
        int commas = static_cast<int>(std::count(line.begin(), line.end(), ','));
        CHECK(commas == 11);
        int iter = std::stoi(line.substr(0, line.find(',')));
        CHECK(iter == prev + 1);
        prev = iter;
    }
    CHECK(rows == 6);

    // frozen encoder untouched by D and G steps
    Checkpoint ckpt = load_checkpoint(res.checkpoint_path);
    CHECK(params_checksum(filter_params(ckpt.params, "enc.")) == frozen_sum);
    CHECK(ckpt.iteration == 6);
    CHECK(ckpt.bank.num_classes == 3);
    CHECK(ckpt.bank.dim == generator_feature_width(cfg.generator));
    CHECK(ckpt.bank.initialized_count() > 0);
    bool has_gen = false, has_dsty = false, has_dseg = false, has_proj = false;
    for (const auto& [name, t] : ckpt.params.values) {
        (void)t;
        has_gen |= name.rfind("gen.", 0) == 0;
        has_dsty |= name.rfind("dsty.", 0) == 0;
        has_dseg |= name.rfind("dseg.", 0) == 0;
        has_proj |= name.rfind("proj.", 0) == 0;
    }
    CHECK(has_gen);
    CHECK(has_dsty);
    CHECK(has_dseg);
    CHECK(has_proj);
    CHECK(!ckpt.opt_g_m.empty());
    CHECK(!ckpt.opt_d_m.empty());

    // checkpoint round trip: identical forward outputs on a fixed probe
    {
        Generator gen(ckpt.gen_cfg);
        Rng prng(99);
        Tensor<float> probe({1, 3, 32, 32});
        for (auto& v : probe.data) v = static_cast<float>(prng.uniform());
        Tensor<float> before = gen.forward(ckpt.params, probe, 0.4).first;
        save_checkpoint(kTmp + "/resave.hsb", ckpt);
        Checkpoint again = load_checkpoint(kTmp + "/resave.hsb");
        Tensor<float> after = gen.forward(again.params, probe, 0.4).first;
        CHECK(before.data == after.data);
    }

    // same config and seed reproduce the metrics file byte for byte
    TrainConfig cfg2 = cfg;
    cfg2.out_dir = kTmp + "/run_b";
    TrainResult res2 = train(cfg2, day, night, labels, enc);
    CHECK(slurp(res.metrics_path) == slurp(res2.metrics_path));

    // translation: shapes, bounds, determinism
    std::vector<Tensor<float>> inputs{day[0].image, day[1].image, day[2].image};
    std::vector<Tensor<float>> t1 = translate(ckpt, inputs, 5);
    REQUIRE(t1.size() == 3);
    for (const auto& img : t1) {
        CHECK(img.shape == Shape{1, 3, 32, 32});
        for (float v : img.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    std::vector<Tensor<float>> t2 = translate(ckpt, inputs, 5);
    for (size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].data == t2[i].data);
    std::vector<Tensor<float>> t3 = translate(ckpt, inputs, 6);
    CHECK(t3[0].data != t1[0].data);  // tau_sb > 0: seed matters

    Checkpoint quiet = ckpt;
    quiet.chain.tau_sb = 0.0;
    std::vector<Tensor<float>> q1 = translate(quiet, inputs, 5);
    std::vector<Tensor<float>> q2 = translate(quiet, inputs, 991);
    for (size_t i = 0; i < q1.size(); ++i) CHECK(q1[i].data == q2[i].data);
}

TEST_CASE("unlabeled night scenes are skipped and counted") {
    auto day = day_corpus(6, 32, 411);
    auto night = night_corpus(6, 32, 412);
    std::map<std::string, SemanticMap> labels;
    for (size_t i = 0; i < night.size(); i += 2) {
        labels.emplace(night[i].id, make_pseudolabels(night[i], 0.0, 3).map);
    }
    SharedEncoder enc = pretrain_encoder(night, 1, 5);

    TrainConfig cfg;
    cfg.iterations = 3;
    cfg.batch_size = 2;
    cfg.seed = 12;
    cfg.cont_patches = 4;
    cfg.ref_batch = 2;
    cfg.suppression.n_neg = 8;
    cfg.suppression.proj_dim = 8;
    cfg.out_dir = kTmp + "/run_skip";
    TrainResult res = train(cfg, day, night, labels, enc);
    CHECK(res.iterations_run == 3);
    CHECK(res.missing_pseudolabels > 0);

    std::map<std::string, SemanticMap> none;
    CHECK_THROWS_AS(train(cfg, day, night, none, enc), std::invalid_argument);

    SharedEncoder thawed = enc;
    thawed.frozen = false;
    CHECK_THROWS_AS(train(cfg, day, night, labels, thawed), std::invalid_argument);
}
