#include "hsb/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hsb/rng.hpp"

namespace hsb {

namespace {

double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

double eval_scalar(const Graph& g, const ParamStore<double>& store,
                   const std::map<std::string, Tensor<double>>& inputs,
                   const std::string& output) {
    Eval<double> ev = forward(g, store, inputs);
    const Tensor<double>& out = ev.out(output);
    if (out.numel() != 1) {
        throw std::runtime_error("grad check: output '" + output + "' is not scalar");
    }
    return out.data[0];
}

double max_entry_err(Tensor<double>& x, const Tensor<double>& analytic, double step,
                     const Graph& g, const ParamStore<double>& store,
                     const std::map<std::string, Tensor<double>>& inputs,
                     const std::string& output) {
    double worst = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double saved = x.data[i];
        double h = step * std::max(1.0, std::abs(saved));
        x.data[i] = saved + h;
        double fp = eval_scalar(g, store, inputs, output);
        x.data[i] = saved - h;
        double fm = eval_scalar(g, store, inputs, output);
        x.data[i] = saved;
        double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, rel_err(analytic.data[i], numeric));
    }
    return worst;
}

}  // namespace

GradCheckReport compare_to_numeric(const Graph& g, const ParamStore<double>& store,
                                   const std::map<std::string, Tensor<double>>& inputs,
                                   const std::string& output, const Grads<double>& analytic,
                                   double step, const GradRequest& req) {
    GradCheckReport report;
    ParamStore<double> st = store;
    std::map<std::string, Tensor<double>> ins = inputs;
    for (const auto& [name, grad] : analytic.params) {
        double e = max_entry_err(st.values.at(name), grad, step, g, st, ins, output);
        report.entries.push_back({name, e});
        report.worst = std::max(report.worst, e);
    }
    for (const auto& [name, grad] : analytic.inputs) {
        double e = max_entry_err(ins.at(name), grad, step, g, st, ins, output);
        report.entries.push_back({name, e});
        report.worst = std::max(report.worst, e);
    }
    return report;
}

GradCheckReport grad_check(const Graph& g, const ParamStore<double>& store,
                           const std::map<std::string, Tensor<double>>& inputs,
                           const std::string& output, double step, const GradRequest& req) {
    Eval<double> ev = forward(g, store, inputs);
    Grads<double> an = backward<double>(g, store, ev, output, nullptr, req);
    return compare_to_numeric(g, store, inputs, output, an, step, req);
}

namespace {

Tensor<double> rand_tensor(Shape s, Rng& rng, double lo, double hi) {
    Tensor<double> t(std::move(s));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Values bounded away from zero, for ops with a kink or a pole there.
Tensor<double> rand_tensor_nonzero(Shape s, Rng& rng, double min_mag) {
    Tensor<double> t(std::move(s));
    for (double& v : t.data) {
        double m = rng.uniform(min_mag, 1.0);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

Tensor<double> rand_rows_unit(Shape s, Rng& rng) {
    Tensor<double> t(s);
    int rows = s[0], d = s[1];
    for (int r = 0; r < rows; ++r) {
        double nrm = 0;
        for (int k = 0; k < d; ++k) {
            double v = rng.gaussian();
            t.at2(r, k) = v;
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (int k = 0; k < d; ++k) t.at2(r, k) /= nrm;
    }
    return t;
}

struct Case {
    Graph g;
    ParamStore<double> store;
    std::map<std::string, Tensor<double>> inputs;
};

void finish(Graph& g, int node) {
    g.mark_output("loss", node);
}

}  // namespace

std::vector<OpCheck> check_all_ops(uint64_t seed) {
    std::vector<OpCheck> results;
    auto run = [&](const std::string& label, Case& c) {
        GradCheckReport r = grad_check(c.g, c.store, c.inputs, "loss");
        results.push_back({label, r.worst});
    };

    {
        Case c;
        Rng rng(seed_for(seed, "gc", 1));
        int x = c.g.input("x", {2, 3, 6, 6}, true);
        int w = c.g.param("w", {4, 3, 3, 3});
        int b = c.g.param("b", {4});
        finish(c.g, c.g.mean_all(c.g.square(c.g.conv2d(x, w, b, 1, 1))));
        c.inputs["x"] = rand_tensor({2, 3, 6, 6}, rng, -1, 1);
        c.store.values["w"] = rand_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
        c.store.values["b"] = rand_tensor({4}, rng, -0.5, 0.5);
        run("conv2d_s1", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 2));
        int x = c.g.input("x", {1, 3, 8, 8}, true);
        int w = c.g.param("w", {5, 3, 4, 4});
        int b = c.g.param("b", {5});
        finish(c.g, c.g.mean_all(c.g.square(c.g.conv2d(x, w, b, 2, 1))));
        c.inputs["x"] = rand_tensor({1, 3, 8, 8}, rng, -1, 1);
        c.store.values["w"] = rand_tensor({5, 3, 4, 4}, rng, -0.5, 0.5);
        c.store.values["b"] = rand_tensor({5}, rng, -0.5, 0.5);
        run("conv2d_s2", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 3));
        int x = c.g.input("x", {1, 4, 4, 4}, true);
        int w = c.g.param("w", {4, 3, 4, 4});
        int b = c.g.param("b", {3});
        finish(c.g, c.g.mean_all(c.g.square(c.g.conv_transpose2d(x, w, b, 2, 1))));
        c.inputs["x"] = rand_tensor({1, 4, 4, 4}, rng, -1, 1);
        c.store.values["w"] = rand_tensor({4, 3, 4, 4}, rng, -0.5, 0.5);
        c.store.values["b"] = rand_tensor({3}, rng, -0.5, 0.5);
        run("conv_transpose2d", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 4));
        int x = c.g.input("x", {1, 2, 3, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.upsample_nn2x(x))));
        c.inputs["x"] = rand_tensor({1, 2, 3, 3}, rng, -1, 1);
        run("upsample_nn2x", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 5));
        int x = c.g.input("x", {2, 3, 4, 4}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.leaky_relu(x, 0.2))));
        c.inputs["x"] = rand_tensor_nonzero({2, 3, 4, 4}, rng, 0.2);
        run("leaky_relu", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 6));
        int x = c.g.input("x", {2, 8}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.sigmoid(x))));
        c.inputs["x"] = rand_tensor({2, 8}, rng, -2, 2);
        run("sigmoid", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 7));
        int x = c.g.input("x", {2, 3, 5, 5}, true);
        int gm = c.g.param("gamma", {3});
        int bt = c.g.param("beta", {3});
        finish(c.g, c.g.mean_all(c.g.square(c.g.instance_norm(x, gm, bt))));
        c.inputs["x"] = rand_tensor({2, 3, 5, 5}, rng, -1, 1);
        c.store.values["gamma"] = rand_tensor({3}, rng, 0.5, 1.5);
        c.store.values["beta"] = rand_tensor({3}, rng, -0.5, 0.5);
        run("instance_norm", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 8));
        int x = c.g.input("x", {4, 6}, true);
        int w = c.g.param("w", {5, 6});
        int b = c.g.param("b", {5});
        finish(c.g, c.g.mean_all(c.g.square(c.g.linear(x, w, b))));
        c.inputs["x"] = rand_tensor({4, 6}, rng, -1, 1);
        c.store.values["w"] = rand_tensor({5, 6}, rng, -0.5, 0.5);
        c.store.values["b"] = rand_tensor({5}, rng, -0.5, 0.5);
        run("linear", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 9));
        int x = c.g.input("x", {2, 5, 3}, true);
        Tensor<double> wv = rand_tensor({2, 5, 3}, rng, -1, 1);
        int cst = c.g.constant({2, 5, 3}, std::vector<double>(wv.data.begin(), wv.data.end()));
        finish(c.g, c.g.dot(c.g.softmax(x, 1), cst));
        c.inputs["x"] = rand_tensor({2, 5, 3}, rng, -2, 2);
        run("softmax", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 10));
        int x = c.g.input("x", {1, 4, 3, 3}, true);
        Tensor<double> wv = rand_tensor({1, 4, 3, 3}, rng, -1, 1);
        int cst = c.g.constant({1, 4, 3, 3}, std::vector<double>(wv.data.begin(), wv.data.end()));
        finish(c.g, c.g.dot(c.g.log_softmax(x, 1), cst));
        c.inputs["x"] = rand_tensor({1, 4, 3, 3}, rng, -2, 2);
        run("log_softmax", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 11));
        int x = c.g.input("x", {3, 4}, true);
        finish(c.g, c.g.mean_all(c.g.log(x)));
        c.inputs["x"] = rand_tensor({3, 4}, rng, 0.5, 2.0);
        run("log", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 12));
        int x = c.g.input("x", {3, 4}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.exp(x))));
        c.inputs["x"] = rand_tensor({3, 4}, rng, -1, 1);
        run("exp", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 13));
        int x = c.g.input("x", {3, 4}, true);
        finish(c.g, c.g.mean_all(c.g.square(x)));
        c.inputs["x"] = rand_tensor({3, 4}, rng, -1, 1);
        run("square", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 14));
        int a = c.g.input("a", {2, 3}, true);
        int b = c.g.input("b", {2, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.add(a, b))));
        c.inputs["a"] = rand_tensor({2, 3}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({2, 3}, rng, -1, 1);
        run("add", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 15));
        int a = c.g.input("a", {2, 3}, true);
        int b = c.g.input("b", {2, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.sub(a, b))));
        c.inputs["a"] = rand_tensor({2, 3}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({2, 3}, rng, -1, 1);
        run("sub", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 16));
        int a = c.g.input("a", {2, 3}, true);
        int b = c.g.input("b", {2, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.mul(a, b))));
        c.inputs["a"] = rand_tensor({2, 3}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({2, 3}, rng, -1, 1);
        run("mul", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 17));
        int x = c.g.input("x", {2, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.add_scalar(c.g.scale(x, 1.7), 0.3))));
        c.inputs["x"] = rand_tensor({2, 3}, rng, -1, 1);
        run("scale_add_scalar", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 18));
        int x = c.g.input("x", {2, 3, 2, 2}, true);
        finish(c.g, c.g.mean_all(x));
        c.inputs["x"] = rand_tensor({2, 3, 2, 2}, rng, -1, 1);
        run("mean_all", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 19));
        int x = c.g.input("x", {5}, true);
        finish(c.g, c.g.sum_all(c.g.square(x)));
        c.inputs["x"] = rand_tensor({5}, rng, -1, 1);
        run("sum_all", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 20));
        int a = c.g.input("a", {7}, true);
        int b = c.g.input("b", {7}, true);
        finish(c.g, c.g.dot(a, b));
        c.inputs["a"] = rand_tensor({7}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({7}, rng, -1, 1);
        run("dot", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 21));
        int x = c.g.input("x", {3, 4, 2, 2}, true);
        std::vector<int64_t> idx;
        for (int i = 0; i < 10; ++i) idx.push_back(rng.uniform_int(0, 47));
        finish(c.g, c.g.mean_all(c.g.square(c.g.gather_flat(x, idx))));
        c.inputs["x"] = rand_tensor({3, 4, 2, 2}, rng, -1, 1);
        run("gather_flat", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 22));
        int x = c.g.input("x", {2, 5, 4, 4}, true);
        std::vector<int64_t> sites;
        for (int i = 0; i < 6; ++i) {
            sites.push_back(rng.uniform_int(0, 1));
            sites.push_back(rng.uniform_int(0, 3));
            sites.push_back(rng.uniform_int(0, 3));
        }
        finish(c.g, c.g.mean_all(c.g.square(c.g.gather_pixels(x, sites))));
        c.inputs["x"] = rand_tensor({2, 5, 4, 4}, rng, -1, 1);
        run("gather_pixels", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 23));
        int x = c.g.input("x", {2, 3, 4, 4}, true);
        int b = c.g.input("bias", {2, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.add_channel_bias(x, b))));
        c.inputs["x"] = rand_tensor({2, 3, 4, 4}, rng, -1, 1);
        c.inputs["bias"] = rand_tensor({2, 3}, rng, -1, 1);
        run("add_channel_bias", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 24));
        int a = c.g.input("a", {1, 2, 3, 3}, true);
        int b = c.g.input("b", {1, 3, 3, 3}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.concat_channels(a, b))));
        c.inputs["a"] = rand_tensor({1, 2, 3, 3}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({1, 3, 3, 3}, rng, -1, 1);
        run("concat_channels_4d", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 25));
        int a = c.g.input("a", {4, 3}, true);
        int b = c.g.input("b", {4, 2}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.concat_channels(a, b))));
        c.inputs["a"] = rand_tensor({4, 3}, rng, -1, 1);
        c.inputs["b"] = rand_tensor({4, 2}, rng, -1, 1);
        run("concat_channels_2d", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 26));
        int x = c.g.input("x", {1, 3, 8, 8}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.avgpool_to(x, 2, 2))));
        c.inputs["x"] = rand_tensor({1, 3, 8, 8}, rng, -1, 1);
        run("avgpool_to", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 27));
        int x = c.g.input("x", {2, 6}, true);
        finish(c.g, c.g.mean_all(c.g.square(c.g.reshape(x, {3, 4}))));
        c.inputs["x"] = rand_tensor({2, 6}, rng, -1, 1);
        run("reshape", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 28));
        int x = c.g.input("x", {5, 7}, true);
        Tensor<double> wv = rand_tensor({5, 7}, rng, -1, 1);
        int cst = c.g.constant({5, 7}, std::vector<double>(wv.data.begin(), wv.data.end()));
        finish(c.g, c.g.dot(c.g.l2_normalize_rows(x), cst));
        c.inputs["x"] = rand_tensor_nonzero({5, 7}, rng, 0.3);
        run("l2_normalize_rows", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 29));
        int x = c.g.input("x", {8, 3}, true);
        finish(c.g, c.g.knn_entropy(x));
        // Redraw until every point's two closest neighbors are clearly
        // separated; a near-tie would let the finite-difference probe flip
        // the nearest-neighbor assignment.
        Tensor<double> pts({8, 3});
        for (int attempt = 0; attempt < 1000; ++attempt) {
            for (double& v : pts.data) v = rng.gaussian();
            bool ok = true;
            for (int i = 0; i < 8 && ok; ++i) {
                double d1 = 1e300, d2 = 1e300;
                for (int j = 0; j < 8; ++j) {
                    if (j == i) continue;
                    double acc = 0;
                    for (int k = 0; k < 3; ++k) {
                        double diff = pts.at2(i, k) - pts.at2(j, k);
                        acc += diff * diff;
                    }
                    double d = std::sqrt(acc);
                    if (d < d1) {
                        d2 = d1;
                        d1 = d;
                    } else if (d < d2) {
                        d2 = d;
                    }
                }
                if (d2 - d1 < 1e-3) ok = false;
            }
            if (ok) break;
        }
        c.inputs["x"] = pts;
        run("knn_entropy", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 30));
        int a = c.g.input("a", {4, 6}, true);
        int p = c.g.input("p", {4, 6}, true);
        int neg = c.g.input("neg", {5, 6}, true);
        int proto = c.g.input("proto", {3, 6}, true);
        finish(c.g, c.g.infonce(a, p, neg, proto, 0.07));
        c.inputs["a"] = rand_rows_unit({4, 6}, rng);
        c.inputs["p"] = rand_rows_unit({4, 6}, rng);
        c.inputs["neg"] = rand_rows_unit({5, 6}, rng);
        c.inputs["proto"] = rand_rows_unit({3, 6}, rng);
        run("infonce", c);
    }
    {
        Case c;
        Rng rng(seed_for(seed, "gc", 31));
        int a = c.g.input("a", {5, 6}, true);
        int p = c.g.input("p", {5, 6}, true);
        finish(c.g, c.g.patch_nce(a, p, 0.07));
        c.inputs["a"] = rand_rows_unit({5, 6}, rng);
        c.inputs["p"] = rand_rows_unit({5, 6}, rng);
        run("patch_nce", c);
    }

    return results;
}

}  // namespace hsb
