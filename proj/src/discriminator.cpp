#include "hsb/discriminator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <stdexcept>

#include "hsb/optim.hpp"
#include "hsb/rng.hpp"
#include "hsb/sbchain.hpp"

namespace hsb {

namespace {

int conv_in_act(Graph& g, int x, const std::string& name, int cin, int cout, int stride) {
    int w = g.param(name + ".w", {cout, cin, 3, 3});
    int b = g.param(name + ".b", {cout});
    int gm = g.param(name + ".gamma", {cout});
    int bt = g.param(name + ".beta", {cout});
    return g.leaky_relu(g.instance_norm(g.conv2d(x, w, b, stride, 1), gm, bt), 0.2);
}

}  // namespace

EncNodes build_encoder(Graph& g, int x, const EncoderConfig& cfg, const std::string& prefix) {
    const Shape& xs = g.shape_of(x);
    if (xs.size() != 4 || xs[1] != cfg.image_channels) {
        throw GraphError("build_encoder: input must be {B," + std::to_string(cfg.image_channels) +
                         ",H,W}");
    }
    if (xs[2] % 8 != 0 || xs[3] % 8 != 0) {
        throw GraphError("build_encoder: image extent must be divisible by 8");
    }
    EncNodes out;
    out.e1 = conv_in_act(g, x, prefix + ".s1", cfg.image_channels, cfg.w1, 2);
    out.e2 = conv_in_act(g, out.e1, prefix + ".s2", cfg.w1, cfg.w2, 2);
    out.e3 = conv_in_act(g, out.e2, prefix + ".s3", cfg.w2, cfg.w3, 2);
    return out;
}

uint64_t params_checksum(const ParamStore<float>& params) {
    uint64_t h = 1469598103934665603ull;  // FNV offset basis
    auto mix_bytes = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : params.values) {
        mix_bytes(name.data(), name.size());
        mix_bytes(t.data.data(), t.data.size() * sizeof(float));
    }
    return h;
}

SharedEncoder pretrain_encoder(const std::vector<AnnotatedScene>& corpus, int epochs,
                               uint64_t seed, PretrainReport* report) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_encoder: corpus is empty");
    if (epochs < 1) throw std::invalid_argument("pretrain_encoder: epochs must be >= 1");
    const int H = corpus.front().height();
    const int W = corpus.front().width();
    for (const AnnotatedScene& s : corpus) {
        if (s.height() != H || s.width() != W) {
            throw std::invalid_argument("pretrain_encoder: images must share one size");
        }
    }

    EncoderConfig cfg;
    const int kBatch = 4;

    // Graphs cached per batch size; encoder + throwaway decoder + pixel MSE.
    std::map<int, Graph> graphs;
    auto graph_for = [&](int b) -> Graph& {
        auto it = graphs.find(b);
        if (it != graphs.end()) return it->second;
        Graph& g = graphs.emplace(b, Graph()).first->second;
        int x = g.input("x", {b, cfg.image_channels, H, W});
        EncNodes enc = build_encoder(g, x, cfg);
        int d2 = conv_in_act(g, g.upsample_nn2x(enc.e3), "aedec.u2", cfg.w3, cfg.w2, 1);
        int d1 = conv_in_act(g, g.upsample_nn2x(d2), "aedec.u1", cfg.w2, cfg.w1, 1);
        int d0 = conv_in_act(g, g.upsample_nn2x(d1), "aedec.u0", cfg.w1, 16, 1);
        int ow = g.param("aedec.out.w", {cfg.image_channels, 16, 3, 3});
        int ob = g.param("aedec.out.b", {cfg.image_channels});
        int recon = g.sigmoid(g.conv2d(d0, ow, ob, 1, 1));
        g.mark_output("loss", g.mean_all(g.square(g.sub(recon, x))));
        return g;
    };

    ParamStore<float> store;
    init_missing_params(graph_for(kBatch), store, seed_for(seed, "pretrain/init"));

    // Shuffled split: last ~10% held out (at least one image; a singleton
    // corpus serves as both).
    std::vector<int> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(seed_for(seed, "pretrain/split"));
    for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[(size_t)split_rng.uniform_int(0, (int64_t)i - 1)]);
    }
    size_t heldout_n = std::max<size_t>(1, corpus.size() / 10);
    std::vector<int> heldout(order.end() - (long)heldout_n, order.end());
    std::vector<int> train(order.begin(), order.end() - (long)heldout_n);
    if (train.empty()) train = heldout;

    auto batch_tensor = [&](const std::vector<int>& ids, size_t from, size_t n) {
        Tensor<float> x({(int)n, cfg.image_channels, H, W});
        size_t per = (size_t)cfg.image_channels * H * W;
        for (size_t k = 0; k < n; ++k) {
            const Tensor<float>& img = corpus[(size_t)ids[from + k]].image;
            std::copy(img.data.begin(), img.data.end(), x.data.begin() + (long)(k * per));
        }
        return x;
    };

    auto heldout_loss = [&]() {
        double total = 0.0;
        size_t done = 0;
        while (done < heldout.size()) {
            size_t n = std::min<size_t>(kBatch, heldout.size() - done);
            Graph& g = graph_for((int)n);
            std::map<std::string, Tensor<float>> in{{"x", batch_tensor(heldout, done, n)}};
            Eval<float> ev = hsb::forward(g, store, in);
            total += (double)ev.out("loss").data[0] * (double)n;
            done += n;
        }
        return total / (double)heldout.size();
    };

    if (report) {
        report->train_count = (int)train.size();
        report->heldout_count = (int)heldout.size();
        report->heldout_loss_initial = heldout_loss();
    }

    Adam opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    Rng shuffle_rng(seed_for(seed, "pretrain/order"));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int> idx = train;
        for (size_t i = idx.size(); i > 1; --i) {
            std::swap(idx[i - 1], idx[(size_t)shuffle_rng.uniform_int(0, (int64_t)i - 1)]);
        }
        size_t done = 0;
        while (done < idx.size()) {
            size_t n = std::min<size_t>(kBatch, idx.size() - done);
            Graph& g = graph_for((int)n);
            std::map<std::string, Tensor<float>> in{{"x", batch_tensor(idx, done, n)}};
            Eval<float> ev = hsb::forward(g, store, in);
            Grads<float> grads = backward<float>(g, store, ev, "loss");
            opt.step(store, grads.params);
            done += n;
        }
    }

    if (report) report->heldout_loss_final = heldout_loss();

    SharedEncoder enc;
    enc.cfg = cfg;
    enc.frozen = true;
    for (const auto& [name, t] : store.values) {
        if (name.rfind("enc.", 0) == 0) enc.params.values[name] = t;
    }
    return enc;
}

int build_style_head(Graph& g, int e3, const std::string& prefix) {
    Shape s = g.shape_of(e3);
    if (s.size() != 4) throw GraphError("build_style_head: features must be 4-D");
    int cin = s[1];
    int w1 = g.param(prefix + ".c1.w", {64, cin, 3, 3});
    int b1 = g.param(prefix + ".c1.b", {64});
    int h = g.leaky_relu(g.conv2d(e3, w1, b1, 2, 1), 0.2);
    int w2 = g.param(prefix + ".c2.w", {1, 64, 3, 3});
    int b2 = g.param(prefix + ".c2.b", {1});
    return g.conv2d(h, w2, b2, 2, 1);
}

int build_seg_head(Graph& g, const EncNodes& enc, int num_classes, const std::string& prefix) {
    if (num_classes < 1) throw GraphError("build_seg_head: need at least one class");
    // Adding nodes may reallocate the graph, so copy widths before building.
    int c3 = g.shape_of(enc.e3)[1];
    int c2 = g.shape_of(enc.e2)[1];
    int c1 = g.shape_of(enc.e1)[1];
    int u2 = conv_in_act(g, g.upsample_nn2x(enc.e3), prefix + ".u2", c3, c2, 1);
    int f2 = conv_in_act(g, g.concat_channels(u2, enc.e2), prefix + ".f2", 2 * c2, c2, 1);
    int u1 = conv_in_act(g, g.upsample_nn2x(f2), prefix + ".u1", c2, c1, 1);
    int f1 = conv_in_act(g, g.concat_channels(u1, enc.e1), prefix + ".f1", 2 * c1, c1, 1);
    int u0 = conv_in_act(g, g.upsample_nn2x(f1), prefix + ".u0", c1, 16, 1);
    int ow = g.param(prefix + ".out.w", {num_classes + 1, 16, 3, 3});
    int ob = g.param(prefix + ".out.b", {num_classes + 1});
    return g.conv2d(u0, ow, ob, 1, 1);
}

int build_lsgan_d_loss(Graph& g, int real_scores, int fake_scores) {
    int real_term = g.mean_all(g.square(g.add_scalar(real_scores, -1.0)));
    int fake_term = g.mean_all(g.square(fake_scores));
    return g.add(real_term, fake_term);
}

int build_lsgan_g_loss(Graph& g, int fake_scores) {
    return g.mean_all(g.square(g.add_scalar(fake_scores, -1.0)));
}

int build_seg_loss(Graph& g, int logits, const std::vector<SemanticMap>& pseudo,
                   SegLossStats* stats) {
    Shape ls = g.shape_of(logits);
    if (ls.size() != 4) throw GraphError("build_seg_loss: logits must be {B,C+1,H,W}");
    if ((int)pseudo.size() != ls[0]) {
        throw GraphError("build_seg_loss: need one label map per batch element");
    }
    int channels = ls[1];
    for (const SemanticMap& m : pseudo) {
        if (m.w != ls[3] || m.h != ls[2]) {
            throw GraphError("build_seg_loss: label map size must match logits");
        }
    }

    std::vector<int64_t> sites;
    std::vector<int64_t> targets;
    for (int b = 0; b < ls[0]; ++b) {
        const SemanticMap& m = pseudo[(size_t)b];
        for (int y = 0; y < m.h; ++y) {
            for (int x = 0; x < m.w; ++x) {
                int lab = m.at(x, y);
                if (lab == kIgnoreLabel) continue;
                if (lab < 0 || lab >= channels) {
                    throw GraphError("build_seg_loss: label out of range");
                }
                sites.push_back(b);
                sites.push_back(y);
                sites.push_back(x);
                targets.push_back(lab);
            }
        }
    }
    if (targets.empty()) {
        if (stats) ++stats->all_ignore_warnings;
        return g.constant({1}, {0.0}, "seg_loss_all_ignore");
    }

    int lsm = g.log_softmax(logits, 1);
    int rows = g.gather_pixels(lsm, sites);  // {m, C+1}
    int m_count = (int)targets.size();
    std::vector<int64_t> flat_idx(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        flat_idx[i] = (int64_t)i * channels + targets[i];
    }
    int picked = g.gather_flat(g.reshape(rows, {m_count * channels}), flat_idx);
    return g.scale(g.mean_all(picked), -1.0);
}

}  // namespace hsb
