#include "hsb/sbchain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hsb {

void ChainConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("chain config: need at least one step");
    if (tau_sb < 0) throw std::invalid_argument("chain config: noise scale must be >= 0");
}

std::vector<double> make_partition(int N) {
    if (N < 1) throw std::invalid_argument("make_partition: N must be >= 1");
    std::vector<double> t(static_cast<size_t>(N) + 1);
    for (int j = 0; j <= N; ++j) t[static_cast<size_t>(j)] = static_cast<double>(j) / N;
    return t;
}

double interp_coeff(double t_j, double t_j1) {
    if (!(t_j >= 0 && t_j < t_j1 && t_j1 <= 1)) {
        throw std::invalid_argument("interp_coeff: need 0 <= t_j < t_j1 <= 1");
    }
    return (t_j1 - t_j) / (1.0 - t_j);
}

double noise_sigma(double s, double tau_sb) { return std::sqrt(tau_sb * s * (1.0 - s)); }

double noise_sigma_at(int j, const ChainConfig& cfg) {
    cfg.validate();
    if (j < 0 || j >= cfg.steps) throw std::invalid_argument("noise_sigma_at: step out of range");
    std::vector<double> t = make_partition(cfg.steps);
    double s = interp_coeff(t[static_cast<size_t>(j)], t[static_cast<size_t>(j) + 1]);
    return noise_sigma(s, cfg.tau_sb);
}

Tensor<float> chain_step(const Tensor<float>& x_tj, const Tensor<float>& x1, double s,
                         double sigma, const Tensor<float>& eps) {
    if (x_tj.shape != x1.shape || x_tj.shape != eps.shape) {
        throw std::invalid_argument("chain_step: state, prediction, and noise shapes must agree");
    }
    Tensor<float> out(x_tj.shape);
    float sf = static_cast<float>(s);
    float kf = static_cast<float>(1.0 - s);
    float gf = static_cast<float>(sigma);
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = sf * x1.data[i] + kf * x_tj.data[i] + gf * eps.data[i];
    }
    return out;
}

std::vector<float> time_embedding(double t, int emb_dim) {
    if (emb_dim < 2 || emb_dim % 2 != 0) {
        throw std::invalid_argument("time_embedding: dimension must be even and >= 2");
    }
    std::vector<float> emb(static_cast<size_t>(emb_dim));
    for (int k = 0; k < emb_dim / 2; ++k) {
        double freq = std::pow(2.0, k) * 3.14159265358979323846;
        emb[static_cast<size_t>(2 * k)] = static_cast<float>(std::sin(freq * t));
        emb[static_cast<size_t>(2 * k + 1)] = static_cast<float>(std::cos(freq * t));
    }
    return emb;
}

namespace {

struct Blocks {
    Graph& g;
    const std::string& prefix;

    int conv_in_act(int x, const std::string& name, int cin, int cout, int stride) {
        int w = g.param(prefix + "." + name + ".w", {cout, cin, 3, 3});
        int b = g.param(prefix + "." + name + ".b", {cout});
        int gm = g.param(prefix + "." + name + ".gamma", {cout});
        int bt = g.param(prefix + "." + name + ".beta", {cout});
        return g.leaky_relu(g.instance_norm(g.conv2d(x, w, b, stride, 1), gm, bt), 0.2);
    }

    int res_block(int x, const std::string& name, int width) {
        int w1 = g.param(prefix + "." + name + ".c1.w", {width, width, 3, 3});
        int b1 = g.param(prefix + "." + name + ".c1.b", {width});
        int g1 = g.param(prefix + "." + name + ".c1.gamma", {width});
        int t1 = g.param(prefix + "." + name + ".c1.beta", {width});
        int w2 = g.param(prefix + "." + name + ".c2.w", {width, width, 3, 3});
        int b2 = g.param(prefix + "." + name + ".c2.b", {width});
        int g2 = g.param(prefix + "." + name + ".c2.gamma", {width});
        int t2 = g.param(prefix + "." + name + ".c2.beta", {width});
        int h = g.leaky_relu(g.instance_norm(g.conv2d(x, w1, b1, 1, 1), g1, t1), 0.2);
        int r = g.instance_norm(g.conv2d(h, w2, b2, 1, 1), g2, t2);
        return g.add(x, r);
    }
};

}  // namespace

int build_generator_features(Graph& g, int x, int temb, const GeneratorConfig& cfg,
                             const std::string& prefix) {
    const Shape& xs = g.shape_of(x);
    if (xs.size() != 4 || xs[1] != cfg.image_channels) {
        throw GraphError("build_generator: input must be {B," +
                         std::to_string(cfg.image_channels) + ",H,W}");
    }
    if (xs[2] % 8 != 0 || xs[3] % 8 != 0) {
        throw GraphError("build_generator: image extent must be divisible by 8");
    }
    Blocks blocks{g, prefix};
    int w0 = cfg.base_width;
    int f = generator_feature_width(cfg);

    int h1 = blocks.conv_in_act(x, "down1", cfg.image_channels, w0, 2);
    int h2 = blocks.conv_in_act(h1, "down2", w0, f, 2);

    // Time conditioning: embed, project per channel, add across the map.
    int ew = g.param(prefix + ".temb.w", {f, cfg.emb_dim});
    int eb = g.param(prefix + ".temb.b", {f});
    int bias = g.linear(temb, ew, eb);
    int h2t = g.add_channel_bias(h2, bias);

    int h3 = blocks.conv_in_act(h2t, "down3", f, f, 2);
    int h = h3;
    for (int i = 0; i < cfg.res_blocks; ++i) {
        h = blocks.res_block(h, "res" + std::to_string(i + 1), f);
    }
    return h;
}

GenNodes build_generator(Graph& g, int x, int temb, const GeneratorConfig& cfg,
                         const std::string& prefix) {
    GenNodes out;
    out.feat = build_generator_features(g, x, temb, cfg, prefix);
    Blocks blocks{g, prefix};
    int w0 = cfg.base_width;
    int f = generator_feature_width(cfg);

    int u1 = blocks.conv_in_act(g.upsample_nn2x(out.feat), "up1", f, f, 1);
    int u2 = blocks.conv_in_act(g.upsample_nn2x(u1), "up2", f, w0, 1);
    int u3 = blocks.conv_in_act(g.upsample_nn2x(u2), "up3", w0, w0 / 2, 1);
    int ow = g.param(prefix + ".out.w", {cfg.image_channels, w0 / 2, 3, 3});
    int ob = g.param(prefix + ".out.b", {cfg.image_channels});
    out.x1 = g.sigmoid(g.conv2d(u3, ow, ob, 1, 1));
    return out;
}

void init_missing_params(const Graph& g, ParamStore<float>& store, uint64_t seed) {
    for (const auto& [name, id] : g.params()) {
        if (store.has(name)) continue;
        const Shape& s = g.shape_of(id);
        Tensor<float> t(s);
        bool is_gamma = name.size() >= 6 && name.rfind(".gamma") == name.size() - 6;
        bool is_bias = (name.size() >= 2 && name.rfind(".b") == name.size() - 2) ||
                       (name.size() >= 5 && name.rfind(".beta") == name.size() - 5);
        if (is_gamma) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else if (is_bias) {
            // zeros
        } else {
            Rng rng(seed_for(seed, name));
            for (float& v : t.data) v = static_cast<float>(0.02 * rng.gaussian());
        }
        store.values[name] = std::move(t);
    }
}

RolloutResult rollout(const Tensor<float>& x0, const PredictFn& gen, const ChainConfig& cfg,
                      Rng& rng, int stop_at) {
    cfg.validate();
    const int N = cfg.steps;
    if (stop_at != kSampleStop && (stop_at < 0 || stop_at > N)) {
        throw std::invalid_argument("rollout: stop index out of range");
    }
    std::vector<double> t = make_partition(N);

    RolloutResult res;
    res.stop_index = stop_at == kSampleStop ? rng.uniform_int(0, N - 1) : stop_at;
    res.t_stop = t[static_cast<size_t>(res.stop_index)];
    res.states.push_back(x0);

    Tensor<float> x = x0;
    for (int j = 0; j < res.stop_index; ++j) {
        Tensor<float> x1 = gen(x, t[static_cast<size_t>(j)]);
        double s = interp_coeff(t[static_cast<size_t>(j)], t[static_cast<size_t>(j) + 1]);
        double sigma = noise_sigma(s, cfg.tau_sb);
        Tensor<float> eps(x.shape);
        if (sigma > 0) {
            for (float& v : eps.data) v = static_cast<float>(rng.gaussian());
        }
        x = chain_step(x, x1, s, sigma, eps);
        res.states.push_back(x);
    }

    if (res.stop_index == N) {
        // Full chain: the loop's final step had s = 1, sigma = 0, so x already
        // equals the last prediction; clamp to image range on the way out.
        res.prediction = x;
        for (float& v : res.prediction.data) v = std::clamp(v, 0.0f, 1.0f);
    } else {
        res.prediction = gen(x, res.t_stop);
    }
    return res;
}

const Graph& Generator::graph_for(int batch, int height, int width) {
    Shape want{batch, cfg_.image_channels, height, width};
    if (!built_ || cached_shape_ != want) {
        graph_ = Graph();
        int x = graph_.input("x", want);
        int temb = graph_.input("temb", {batch, cfg_.emb_dim});
        GenNodes nodes = build_generator(graph_, x, temb, cfg_);
        graph_.mark_output("x1", nodes.x1);
        graph_.mark_output("feat", nodes.feat);
        cached_shape_ = want;
        built_ = true;
    }
    return graph_;
}

std::pair<Tensor<float>, Tensor<float>> Generator::forward(const ParamStore<float>& store,
                                                           const Tensor<float>& x, double t) {
    if (x.shape.size() != 4) throw std::invalid_argument("generator: input must be 4-D");
    const Graph& g = graph_for(x.dim(0), x.dim(2), x.dim(3));
    std::vector<float> emb = time_embedding(t, cfg_.emb_dim);
    Tensor<float> temb({x.dim(0), cfg_.emb_dim});
    for (int b = 0; b < x.dim(0); ++b) {
        for (int k = 0; k < cfg_.emb_dim; ++k) temb.at2(b, k) = emb[static_cast<size_t>(k)];
    }
    std::map<std::string, Tensor<float>> inputs{{"x", x}, {"temb", std::move(temb)}};
    Eval<float> ev = hsb::forward(g, store, inputs);
    return {ev.out("x1"), ev.out("feat")};
}

PredictFn Generator::as_predict_fn(const ParamStore<float>& store) {
    return [this, &store](const Tensor<float>& x, double t) {
        return this->forward(store, x, t).first;
    };
}

}  // namespace hsb
