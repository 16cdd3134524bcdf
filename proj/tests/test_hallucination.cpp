#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "hsb/gradcheck.hpp"
#include "hsb/hallucination.hpp"
#include "hsb/sbchain.hpp"

using namespace hsb;

namespace {

Tensor<float> logits_from_probs(const std::vector<std::vector<float>>& probs, int h, int w) {
    int channels = (int)probs.size();
    Tensor<float> t({channels, h, w});
    for (int c = 0; c < channels; ++c) {
        for (int i = 0; i < h * w; ++i) {
            t.data[(size_t)(c * h * w + i)] = std::log(probs[(size_t)c][(size_t)i]);
        }
    }
    return t;
}

// Rule evaluated the slow way: double-precision softmax per pixel, then the
// literal comparison from the definition.
BoolMask brute_force_detect(const Tensor<float>& logits, const BoolMask& bg) {
    int channels = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    BoolMask out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!bg.at(x, y)) continue;
            std::vector<double> sm((size_t)channels);
            double total = 0.0;
            for (int c = 0; c < channels; ++c) {
                double z = logits.data[((size_t)c * h + y) * w + x];
                sm[(size_t)c] = std::exp(z);
                total += sm[(size_t)c];
            }
            for (double& v : sm) v /= total;
            double best_fg = 0.0;
            for (int c = 1; c < channels; ++c) best_fg = std::max(best_fg, sm[(size_t)c]);
            out.data[(size_t)y * w + x] = best_fg > sm[0] ? 1 : 0;
        }
    }
    return out;
}

ParamStore<double> to_double(const ParamStore<float>& src) {
    ParamStore<double> out;
    for (const auto& [name, t] : src.values) out.values[name] = t.cast<double>();
    return out;
}

double dot_d(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("hallucination flag follows the softmax comparison rule") {
    // One pixel, bg prob 0.6 vs best fg 0.3: clean.
    std::vector<std::vector<float>> probs{{0.6f}, {0.3f}, {0.1f}};
    BoolMask bg(1, 1);
    bg.data[0] = 1;
    BoolMask m = detect_hallucination(logits_from_probs(probs, 1, 1), bg);
    CHECK(m.at(0, 0) == false);

    // bg 0.4 vs fg class-2 0.5: flagged.
    probs = {{0.4f}, {0.1f}, {0.5f}};
    m = detect_hallucination(logits_from_probs(probs, 1, 1), bg);
    CHECK(m.at(0, 0) == true);

    // Same logits but the pixel sits inside an annotated box: never flagged.
    BoolMask fg_px(1, 1);
    fg_px.data[0] = 0;
    m = detect_hallucination(logits_from_probs(probs, 1, 1), fg_px);
    CHECK(m.at(0, 0) == false);
}

TEST_CASE("detection matches brute force on fuzzed maps") {
    Rng rng(400);
    for (int trial = 0; trial < 500; ++trial) {
        int w = (int)rng.uniform_int(1, 16);
        int h = (int)rng.uniform_int(1, 16);
        int classes = (int)rng.uniform_int(1, 4);
        Tensor<float> logits({classes + 1, h, w});
        for (float& v : logits.data) v = (float)rng.uniform(-6.0, 6.0);
        BoolMask bg(w, h);
        for (auto& b : bg.data) b = rng.uniform() < 0.7 ? 1 : 0;

        BoolMask fast = detect_hallucination(logits, bg);
        BoolMask slow = brute_force_detect(logits, bg);
        REQUIRE(fast == slow);

        // Flags are a subset of the background mask.
        for (size_t i = 0; i < fast.data.size(); ++i) {
            if (fast.data[i]) CHECK(bg.data[i]);
        }
    }
}

TEST_CASE("raising the background logit never creates a new flag") {
    Rng rng(401);
    for (int trial = 0; trial < 50; ++trial) {
        int w = (int)rng.uniform_int(2, 12);
        int h = (int)rng.uniform_int(2, 12);
        Tensor<float> logits({4, h, w});
        for (float& v : logits.data) v = (float)rng.uniform(-4.0, 4.0);
        BoolMask bg(w, h);
        for (auto& b : bg.data) b = rng.uniform() < 0.8 ? 1 : 0;
        BoolMask before = detect_hallucination(logits, bg);

        Tensor<float> raised = logits;
        for (int i = 0; i < h * w; ++i) {
            raised.data[(size_t)i] += (float)rng.uniform(0.0, 3.0);
        }
        BoolMask after = detect_hallucination(raised, bg);
        for (size_t i = 0; i < after.data.size(); ++i) {
            if (after.data[i]) CHECK(before.data[i]);
        }
    }
}

TEST_CASE("hallucination loss closed forms") {
    // Certain background everywhere: zero.
    {
        Graph g;
        int logits = g.input("logits", {1, 3, 2, 2});
        BoolMask bg(2, 2);
        std::fill(bg.data.begin(), bg.data.end(), 1);
        g.mark_output("loss", build_hallucination_loss(g, logits, {bg}));
        Tensor<double> lt({1, 3, 2, 2});
        for (int i = 0; i < 4; ++i) lt.data[(size_t)i] = 1000.0;  // channel 0 saturated
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"logits", lt}};
        CHECK(forward(g, store, in).out("loss").data[0] == 0.0);
    }

    // Uniform softmax over C+1 = 3 channels: per pixel 2*(1/3)^2 = 2/9.
    {
        Graph g;
        int logits = g.input("logits", {1, 3, 4, 4});
        BoolMask bg(4, 4);
        std::fill(bg.data.begin(), bg.data.end(), 1);
        g.mark_output("loss", build_hallucination_loss(g, logits, {bg}));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"logits", Tensor<double>({1, 3, 4, 4})}};
        CHECK(std::abs(forward(g, store, in).out("loss").data[0] - 2.0 / 9.0) < 1e-9);
    }

    // Single background pixel fully convinced of a foreground class: 1.
    {
        Graph g;
        int logits = g.input("logits", {1, 3, 1, 2});
        BoolMask bg(2, 1);
        bg.data = {1, 0};
        g.mark_output("loss", build_hallucination_loss(g, logits, {bg}));
        Tensor<double> lt({1, 3, 1, 2});
        lt.data = {-1000.0, 0.0, 1000.0, 0.0, -1000.0, 0.0};
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"logits", lt}};
        CHECK(std::abs(forward(g, store, in).out("loss").data[0] - 1.0) < 1e-12);
    }

    // No background at all: constant zero plus a warning tick.
    {
        Graph g;
        int logits = g.input("logits", {1, 3, 2, 2});
        BoolMask bg(2, 2);  // all false
        HallucinationStats stats;
        g.mark_output("loss", build_hallucination_loss(g, logits, {bg}, &stats));
        CHECK(stats.empty_background_warnings == 1);
        ParamStore<float> store;
        std::map<std::string, Tensor<float>> in{{"logits", Tensor<float>({1, 3, 2, 2})}};
        CHECK(forward(g, store, in).out("loss").data[0] == 0.0f);
    }
}

TEST_CASE("hallucination loss stays inside [0,1] and vanishes only without foreground mass") {
    Rng rng(402);
    for (int trial = 0; trial < 1000; ++trial) {
        int w = (int)rng.uniform_int(1, 6);
        int h = (int)rng.uniform_int(1, 6);
        int classes = (int)rng.uniform_int(1, 4);
        Graph g;
        int logits = g.input("logits", {1, classes + 1, h, w});
        BoolMask bg(w, h);
        for (auto& b : bg.data) b = rng.uniform() < 0.8 ? 1 : 0;
        if (bg.count() == 0) bg.data[0] = 1;
        g.mark_output("loss", build_hallucination_loss(g, logits, {bg}));
        Tensor<float> lt({1, classes + 1, h, w});
        for (float& v : lt.data) v = (float)rng.uniform(-8.0, 8.0);
        ParamStore<float> store;
        std::map<std::string, Tensor<float>> in{{"logits", lt}};
        float loss = forward(g, store, in).out("loss").data[0];
        CHECK(loss >= 0.0f);
        CHECK(loss <= 1.0f + 1e-6f);
    }
}

TEST_CASE("hallucination loss gradient matches finite differences") {
    Graph g;
    int logits = g.input("logits", {1, 4, 5, 5}, true);
    Rng rng(403);
    BoolMask bg(5, 5);
    for (auto& b : bg.data) b = rng.uniform() < 0.6 ? 1 : 0;
    if (bg.count() == 0) bg.data[0] = 1;
    g.mark_output("loss", build_hallucination_loss(g, logits, {bg}));

    Tensor<double> lt({1, 4, 5, 5});
    for (double& v : lt.data) v = rng.uniform(-2.0, 2.0);
    ParamStore<double> store;
    std::map<std::string, Tensor<double>> in{{"logits", lt}};
    GradCheckReport rep = grad_check(g, store, in, "loss");
    CAPTURE(rep.worst);
    CHECK(rep.pass(1e-4));
}

TEST_CASE("feature cells cover boxes proportionally") {
    // Whole image: every cell.
    CHECK(instance_feature_cells({0, 0, 64, 64}, 64, 64, 8, 8).size() == 64);
    // Left half with even width: exactly half the cells.
    auto half = instance_feature_cells({0, 0, 32, 64}, 64, 64, 8, 8);
    CHECK(half.size() == 32);
    for (auto [x, y] : half) CHECK(x < 4);
    // Tiny box: the nearest-cell fallback fires.
    auto tiny = instance_feature_cells({63, 0, 1, 1}, 64, 64, 8, 8);
    REQUIRE(tiny.size() == 1);
    CHECK(tiny[0] == std::pair<int, int>(7, 0));

    CHECK_THROWS_AS(instance_feature_cells({60, 0, 10, 4}, 64, 64, 8, 8),
                    std::invalid_argument);

    // Exact-rational counting oracle over fuzzed geometry.
    Rng rng(404);
    for (int trial = 0; trial < 300; ++trial) {
        int iw = (int)rng.uniform_int(8, 64);
        int ih = (int)rng.uniform_int(8, 64);
        int fw = (int)rng.uniform_int(1, 12);
        int fh = (int)rng.uniform_int(1, 12);
        int bw = (int)rng.uniform_int(1, iw);
        int bh = (int)rng.uniform_int(1, ih);
        int bx = (int)rng.uniform_int(0, iw - bw);
        int by = (int)rng.uniform_int(0, ih - bh);
        auto cells = instance_feature_cells({bx, by, bw, bh}, iw, ih, fw, fh);

        std::vector<std::pair<int, int>> want;
        for (int cy = 0; cy < fh; ++cy) {
            for (int cx = 0; cx < fw; ++cx) {
                // Center back in image coordinates: (cx+0.5)*iw/fw, compared
                // against [bx, bx+bw) with integers.
                int64_t mx = (2LL * cx + 1) * iw;
                int64_t my = (2LL * cy + 1) * ih;
                bool in_x = mx >= 2LL * bx * fw && mx < 2LL * (bx + bw) * fw;
                bool in_y = my >= 2LL * by * fh && my < 2LL * (by + bh) * fh;
                if (in_x && in_y) want.emplace_back(cx, cy);
            }
        }
        if (want.empty()) {
            REQUIRE(cells.size() == 1);
        } else {
            REQUIRE(cells == want);
        }
    }
}

TEST_CASE("instance features are unit rows read at the right cells") {
    Tensor<float> fm({1, 3, 2, 2});
    // Channel-major planes: cell (x,y) holds (x+1, 10(y+1), 100).
    fm.data = {1, 2, 1, 2, 10, 10, 20, 20, 100, 100, 100, 100};
    auto feats = extract_instance_features(fm, {0, 0, 8, 8}, 8, 8);
    REQUIRE(feats.size() == 4);
    for (const auto& v : feats) {
        double n = 0.0;
        for (float x : v) n += (double)x * x;
        CHECK(std::abs(n - 1.0) < 1e-6);
    }
    // First cell (0,0): direction of (1,10,100).
    double norm = std::sqrt(1.0 + 100.0 + 10000.0);
    CHECK(std::abs(feats[0][0] - 1.0 / norm) < 1e-6);
    CHECK(std::abs(feats[0][1] - 10.0 / norm) < 1e-6);
    CHECK(std::abs(feats[0][2] - 100.0 / norm) < 1e-6);
}

TEST_CASE("batch prototype is the normalized mean") {
    std::vector<float> single = batch_prototype({{3.0f, 4.0f}});
    CHECK(std::abs(single[0] - 0.6f) < 1e-6);
    CHECK(std::abs(single[1] - 0.8f) < 1e-6);

    std::vector<float> sym = batch_prototype({{1.0f, 0.0f}, {0.0f, 1.0f}});
    CHECK(std::abs(sym[0] - std::sqrt(2.0) / 2.0) < 1e-6);
    CHECK(std::abs(sym[1] - std::sqrt(2.0) / 2.0) < 1e-6);

    Rng rng(405);
    std::vector<std::vector<float>> feats(3, std::vector<float>(5));
    for (auto& f : feats) {
        for (float& v : f) v = (float)rng.uniform(-1.0, 1.0);
    }
    std::vector<float> got = batch_prototype(feats);
    // Long-double mean-and-normalize oracle.
    std::vector<long double> mean(5, 0.0L);
    for (const auto& f : feats) {
        for (size_t i = 0; i < 5; ++i) mean[i] += (long double)f[i];
    }
    long double n = 0.0L;
    for (auto& v : mean) {
        v /= 3.0L;
        n += v * v;
    }
    n = sqrtl(n);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(std::abs((double)got[i] - (double)(mean[i] / n)) < 1e-6);
    }

    CHECK_THROWS_AS(batch_prototype({}), std::invalid_argument);
}

TEST_CASE("prototype momentum boundaries are exact and the fixed point holds") {
    std::vector<float> p0 = batch_prototype({{1.0f, 2.0f, 2.0f}});
    std::vector<float> m1 = batch_prototype({{-2.0f, 1.0f, 0.5f}});

    // First sighting adopts the mean bit for bit.
    PrototypeBank bank(3, 3, 0.99);
    ema_update(bank, {{1, p0}});
    CHECK(bank.protos[0] == p0);
    CHECK(bank.initialized[0] == 1);
    CHECK(bank.seen[0] == 1);
    CHECK(bank.initialized[1] == 0);

    // Momentum 1: another sighting changes nothing.
    PrototypeBank keep(1, 3, 1.0);
    ema_update(keep, {{1, p0}});
    ema_update(keep, {{1, m1}});
    CHECK(keep.protos[0] == p0);
    CHECK(keep.seen[0] == 2);

    // Momentum 0: the prototype is the latest mean.
    PrototypeBank track(1, 3, 0.0);
    ema_update(track, {{1, p0}});
    ema_update(track, {{1, m1}});
    CHECK(track.protos[0] == m1);

    // Fixed point: updating with the prototype itself is a no-op, repeatedly.
    PrototypeBank fp(1, 3, 0.9);
    ema_update(fp, {{1, p0}});
    for (int i = 0; i < 5; ++i) ema_update(fp, {{1, fp.protos[0]}});
    CHECK(fp.protos[0] == p0);
    CHECK(fp.seen[0] == 6);

    // General blend against a long-double oracle (pre-normalization mix
    // alpha*p + (1-alpha)*mean, then normalize).
    PrototypeBank blend(1, 3, 0.9);
    ema_update(blend, {{1, p0}});
    ema_update(blend, {{1, m1}});
    std::vector<long double> mix(3);
    long double n = 0.0L;
    for (size_t i = 0; i < 3; ++i) {
        mix[i] = 0.9L * (long double)p0[i] + 0.1L * (long double)m1[i];
        n += mix[i] * mix[i];
    }
    n = sqrtl(n);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(std::abs((double)blend.protos[0][i] - (double)(mix[i] / n)) < 1e-6);
    }

    // Scalarized blend from the same arithmetic: 0.9*1 + 0.1*2 = 1.1 before
    // normalization, which collapses to 1 after.
    PrototypeBank scalar(1, 1, 0.9);
    ema_update(scalar, {{1, {1.0f}}});
    ema_update(scalar, {{1, {2.0f}}});
    CHECK(std::abs(scalar.protos[0][0] - 1.0f) < 1e-6);

    // Classes absent from the update stay untouched; order across classes is
    // irrelevant because slots are independent.
    PrototypeBank multi(3, 3, 0.5);
    ema_update(multi, {{1, p0}, {3, m1}});
    PrototypeBank multi2(3, 3, 0.5);
    ema_update(multi2, {{3, m1}});
    ema_update(multi2, {{1, p0}});
    CHECK(multi.protos[0] == multi2.protos[0]);
    CHECK(multi.protos[2] == multi2.protos[2]);
    CHECK(multi.initialized[1] == 0);

    CHECK_THROWS_AS(ema_update(multi, {{4, m1}}), std::invalid_argument);
    CHECK_THROWS_AS(ema_update(multi, {{1, {1.0f}}}), std::invalid_argument);
}

TEST_CASE("only initialized prototypes are exposed to the distance term") {
    PrototypeBank bank(3, 4, 0.99);
    std::vector<float> a = batch_prototype({{1.0f, 0.0f, 0.0f, 0.0f}});
    std::vector<float> c = batch_prototype({{0.0f, 0.0f, 1.0f, 1.0f}});
    ema_update(bank, {{1, a}, {3, c}});
    CHECK(bank.initialized_count() == 2);

    auto [rows, ids] = bank.initialized_rows();
    REQUIRE(ids == std::vector<int>{1, 3});
    REQUIRE(rows.size() == 8);
    for (int i = 0; i < 4; ++i) CHECK(rows[(size_t)i] == a[(size_t)i]);
    for (int i = 0; i < 4; ++i) CHECK(rows[(size_t)(4 + i)] == c[(size_t)i]);

    Graph g;
    int node = bank_proto_node(g, bank);
    REQUIRE(node >= 0);
    CHECK(g.shape_of(node) == Shape{2, 4});

    PrototypeBank empty(3, 4, 0.99);
    Graph g2;
    CHECK(bank_proto_node(g2, empty) == -1);
}

TEST_CASE("suppression loss symmetry closed form") {
    // One raw vector everywhere: after the shared projection every row is the
    // same unit vector, all dots are equal, and the loss is ln(1+N+C).
    const int kF = 6;
    const int kNeg = 4;
    Rng rng(406);
    std::vector<double> v((size_t)kF);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);

    auto rows_of = [&](int m) {
        std::vector<double> d;
        for (int i = 0; i < m; ++i) d.insert(d.end(), v.begin(), v.end());
        return d;
    };

    SuppressionConfig cfg;  // tau 0.07, proj dim 64
    cfg.n_neg = kNeg;

    for (int protos_count : {2, 0}) {
        Graph g;
        int a = g.input("anchors", {3, kF});
        int p = g.input("positives", {3, kF});
        int n = g.input("negatives", {kNeg, kF});
        int c = protos_count > 0
                    ? g.constant({protos_count, kF}, rows_of(protos_count), "protos")
                    : -1;
        g.mark_output("loss", build_suppression_loss(g, a, p, n, c, cfg));

        ParamStore<float> init;
        init_missing_params(g, init, 19);
        ParamStore<double> store = to_double(init);
        std::map<std::string, Tensor<double>> in{
            {"anchors", Tensor<double>({3, kF}, rows_of(3))},
            {"positives", Tensor<double>({3, kF}, rows_of(3))},
            {"negatives", Tensor<double>({kNeg, kF}, rows_of(kNeg))}};
        double loss = forward(g, store, in).out("loss").data[0];
        double want = std::log(1.0 + kNeg + protos_count);
        CAPTURE(protos_count);
        CHECK(std::abs(loss - want) < 1e-9);
    }
}

TEST_CASE("suppression InfoNCE limit and direct-summation oracle") {
    // Dominant positive: loss collapses toward zero.
    {
        Graph g;
        std::vector<double> e1{1, 0, 0};
        std::vector<double> ne1{-1, 0, 0};
        int a = g.constant({1, 3}, e1, "a");
        int p = g.constant({1, 3}, e1, "p");
        std::vector<double> negs;
        for (int i = 0; i < 4; ++i) negs.insert(negs.end(), ne1.begin(), ne1.end());
        int n = g.constant({4, 3}, negs, "n");
        g.mark_output("loss", g.infonce(a, p, n, -1, 0.07));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in;
        CHECK(forward(g, store, in).out("loss").data[0] < 1e-9);
    }

    // Random unit rows against a direct summation in long double.
    {
        Rng rng(407);
        const int kM = 3, kN = 5, kC = 2, kF = 4;
        auto unit_rows = [&](int m) {
            std::vector<double> d((size_t)m * kF);
            for (int i = 0; i < m; ++i) {
                double nn = 0.0;
                for (int j = 0; j < kF; ++j) {
                    d[(size_t)(i * kF + j)] = rng.gaussian();
                    nn += d[(size_t)(i * kF + j)] * d[(size_t)(i * kF + j)];
                }
                nn = std::sqrt(nn);
                for (int j = 0; j < kF; ++j) d[(size_t)(i * kF + j)] /= nn;
            }
            return d;
        };
        std::vector<double> av = unit_rows(kM), pv = unit_rows(kM), nv = unit_rows(kN),
                            cv = unit_rows(kC);
        double tau = 0.07;

        Graph g;
        int a = g.constant({kM, kF}, av, "a");
        int p = g.constant({kM, kF}, pv, "p");
        int n = g.constant({kN, kF}, nv, "n");
        int c = g.constant({kC, kF}, cv, "c");
        g.mark_output("loss", g.infonce(a, p, n, c, tau));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in;
        double got = forward(g, store, in).out("loss").data[0];

        long double total = 0.0L;
        for (int i = 0; i < kM; ++i) {
            std::vector<double> ar(av.begin() + i * kF, av.begin() + (i + 1) * kF);
            std::vector<double> pr(pv.begin() + i * kF, pv.begin() + (i + 1) * kF);
            long double pos = expl((long double)dot_d(ar, pr) / tau);
            long double denom = pos;
            for (int j = 0; j < kN; ++j) {
                std::vector<double> nr(nv.begin() + j * kF, nv.begin() + (j + 1) * kF);
                denom += expl((long double)dot_d(ar, nr) / tau);
            }
            for (int j = 0; j < kC; ++j) {
                std::vector<double> cr(cv.begin() + j * kF, cv.begin() + (j + 1) * kF);
                denom += expl((long double)dot_d(ar, cr) / tau);
            }
            total += -logl(pos / denom);
        }
        double want = (double)(total / kM);
        CHECK(std::abs(got - want) < 1e-9);
    }
}

TEST_CASE("suppression loss gradient including the projection head") {
    Graph g;
    int a = g.input("anchors", {2, 5}, true);
    int p = g.input("positives", {2, 5}, true);
    int n = g.input("negatives", {3, 5}, true);
    int c = g.input("protos", {2, 5}, true);
    SuppressionConfig cfg;
    cfg.proj_dim = 6;
    g.mark_output("loss", build_suppression_loss(g, a, p, n, c, cfg));

    ParamStore<float> init;
    init_missing_params(g, init, 20);
    // Wider init keeps projected rows distinct so the loss is not flat.
    for (auto& [name, t] : init.values) {
        for (float& v : t.data) v *= 10.0f;
    }
    ParamStore<double> store = to_double(init);

    Rng rng(408);
    auto rows = [&](int m, int f) {
        Tensor<double> t({m, f});
        for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
        return t;
    };
    std::map<std::string, Tensor<double>> in{{"anchors", rows(2, 5)},
                                             {"positives", rows(2, 5)},
                                             {"negatives", rows(3, 5)},
                                             {"protos", rows(2, 5)}};
    GradCheckReport rep = grad_check(g, store, in, "loss");
    CAPTURE(rep.worst);
    CHECK(rep.pass(1e-4));
}

TEST_CASE("location sampling is distinct, in range, and clamps") {
    Rng rng(409);
    auto locs = sample_locations(2, 2, 10, rng);
    CHECK(locs.size() == 4);

    for (int trial = 0; trial < 50; ++trial) {
        int w = (int)rng.uniform_int(1, 9);
        int h = (int)rng.uniform_int(1, 9);
        int k = (int)rng.uniform_int(1, 12);
        auto pts = sample_locations(w, h, k, rng);
        CHECK(pts.size() == (size_t)std::min<int64_t>(k, (int64_t)w * h));
        std::vector<std::pair<int, int>> sorted = pts;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        for (auto [x, y] : pts) {
            CHECK(x >= 0);
            CHECK(x < w);
            CHECK(y >= 0);
            CHECK(y < h);
        }
    }
}

TEST_CASE("contrastive regularizer closed forms") {
    double tau = 0.07;
    // Identical maps whose rows are all one vector: every dot equals every
    // other, so the loss is ln K.
    {
        const int kK = 4;
        Graph g;
        Tensor<double> fm({1, 3, 2, 2});
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < 4; ++i) fm.data[(size_t)(c * 4 + i)] = c == 0 ? 0.8 : 0.3;
        }
        int src = g.input("src", {1, 3, 2, 2});
        int trans = g.input("trans", {1, 3, 2, 2});
        std::vector<std::vector<std::pair<int, int>>> locs{
            {{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
        g.mark_output("loss", build_contrastive_reg(g, src, trans, locs, tau));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"src", fm}, {"trans", fm}};
        CHECK(std::abs(forward(g, store, in).out("loss").data[0] - std::log((double)kK)) <
              1e-9);
    }

    // Identical maps with orthonormal rows: direct-summation value
    // ln(e^{1/tau} + K - 1) - 1/tau, which tends to zero as the positive
    // dominates.
    {
        Graph g;
        Tensor<double> fm({1, 4, 2, 2});
        for (int c = 0; c < 4; ++c) {
            for (int i = 0; i < 4; ++i) fm.data[(size_t)(c * 4 + i)] = c == i ? 1.0 : 0.0;
        }
        int src = g.input("src", {1, 4, 2, 2});
        int trans = g.input("trans", {1, 4, 2, 2});
        std::vector<std::vector<std::pair<int, int>>> locs{
            {{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
        g.mark_output("loss", build_contrastive_reg(g, src, trans, locs, tau));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"src", fm}, {"trans", fm}};
        double got = forward(g, store, in).out("loss").data[0];
        double want = std::log(std::exp(1.0 / tau) + 3.0) - 1.0 / tau;
        CHECK(std::abs(got - want) < 1e-9);
        CHECK(got < 1e-4);  // dominant positive limit
    }

    // K = 1: a single location has no negatives, so the loss is zero.
    {
        Graph g;
        Tensor<double> fm({1, 3, 2, 2});
        for (size_t i = 0; i < fm.data.size(); ++i) fm.data[i] = 0.1 * (double)(i + 1);
        int src = g.input("src", {1, 3, 2, 2});
        int trans = g.input("trans", {1, 3, 2, 2});
        std::vector<std::vector<std::pair<int, int>>> locs{{{1, 1}}};
        g.mark_output("loss", build_contrastive_reg(g, src, trans, locs, tau));
        ParamStore<double> store;
        std::map<std::string, Tensor<double>> in{{"src", fm}, {"trans", fm}};
        CHECK(std::abs(forward(g, store, in).out("loss").data[0]) < 1e-12);
    }
}

TEST_CASE("contrastive regularizer gradient matches finite differences") {
    Graph g;
    int src = g.input("src", {1, 4, 3, 3}, true);
    int trans = g.input("trans", {1, 4, 3, 3}, true);
    std::vector<std::vector<std::pair<int, int>>> locs{{{0, 0}, {2, 1}, {1, 2}, {2, 2}}};
    g.mark_output("loss", build_contrastive_reg(g, src, trans, locs, 0.07));

    Rng rng(410);
    Tensor<double> sv({1, 4, 3, 3}), tv({1, 4, 3, 3});
    for (double& v : sv.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : tv.data) v = rng.uniform(-1.0, 1.0);
    ParamStore<double> store;
    std::map<std::string, Tensor<double>> in{{"src", sv}, {"trans", tv}};
    GradCheckReport rep = grad_check(g, store, in, "loss");
    CAPTURE(rep.worst);
    CHECK(rep.pass(1e-4));
}

TEST_CASE("batched contrastive term averages per-image losses") {
    Graph g;
    int src = g.input("src", {2, 3, 2, 2});
    int trans = g.input("trans", {2, 3, 2, 2});
    std::vector<std::vector<std::pair<int, int>>> locs{{{0, 0}, {1, 1}}, {{1, 0}, {0, 1}}};
    g.mark_output("loss", build_contrastive_reg(g, src, trans, locs, 0.07));

    Rng rng(411);
    Tensor<double> sv({2, 3, 2, 2}), tv({2, 3, 2, 2});
    for (double& v : sv.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : tv.data) v = rng.uniform(-1.0, 1.0);
    ParamStore<double> store;
    std::map<std::string, Tensor<double>> in{{"src", sv}, {"trans", tv}};
    double batched = forward(g, store, in).out("loss").data[0];

    double mean_single = 0.0;
    for (int b = 0; b < 2; ++b) {
        Graph gb;
        int s1 = gb.input("src", {1, 3, 2, 2});
        int t1 = gb.input("trans", {1, 3, 2, 2});
        gb.mark_output("loss", build_contrastive_reg(gb, s1, t1, {locs[(size_t)b]}, 0.07));
        Tensor<double> sb({1, 3, 2, 2}), tb({1, 3, 2, 2});
        std::copy(sv.data.begin() + b * 12, sv.data.begin() + (b + 1) * 12, sb.data.begin());
        std::copy(tv.data.begin() + b * 12, tv.data.begin() + (b + 1) * 12, tb.data.begin());
        std::map<std::string, Tensor<double>> inb{{"src", sb}, {"trans", tb}};
        mean_single += forward(gb, store, inb).out("loss").data[0];
    }
    mean_single /= 2.0;
    CHECK(std::abs(batched - mean_single) < 1e-12);
}
