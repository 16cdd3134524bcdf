#include "hsb/hallucination.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hsb {

namespace {

// Accepts {C+1,H,W} or {1,C+1,H,W}; returns (channels, H, W, base pointer).
struct LogitView {
    int channels, h, w;
    const float* data;
};

LogitView view_logits(const Tensor<float>& logits) {
    if (logits.shape.size() == 4) {
        if (logits.dim(0) != 1) {
            throw std::invalid_argument("detect_hallucination: batch dimension must be 1");
        }
        return {logits.dim(1), logits.dim(2), logits.dim(3), logits.data.data()};
    }
    if (logits.shape.size() == 3) {
        return {logits.dim(0), logits.dim(1), logits.dim(2), logits.data.data()};
    }
    throw std::invalid_argument("detect_hallucination: logits must be {C+1,H,W}");
}

}  // namespace

BoolMask detect_hallucination(const Tensor<float>& logits, const BoolMask& bg) {
    LogitView v = view_logits(logits);
    if (v.channels < 2) throw std::invalid_argument("detect_hallucination: need >= 1 class");
    if (bg.w != v.w || bg.h != v.h) {
        throw std::invalid_argument("detect_hallucination: mask size mismatch");
    }
    BoolMask out(v.w, v.h);
    size_t plane = (size_t)v.h * v.w;
    for (int y = 0; y < v.h; ++y) {
        for (int x = 0; x < v.w; ++x) {
            if (!bg.at(x, y)) continue;
            size_t px = (size_t)y * v.w + x;
            // Softmax shares one denominator per pixel, so comparing scores
            // is comparing logits.
            float bg_logit = v.data[px];
            float best_fg = v.data[plane + px];
            for (int c = 2; c < v.channels; ++c) {
                best_fg = std::max(best_fg, v.data[(size_t)c * plane + px]);
            }
            out.data[px] = best_fg > bg_logit ? 1 : 0;
        }
    }
    return out;
}

int build_hallucination_loss(Graph& g, int logits, const std::vector<BoolMask>& bg,
                             HallucinationStats* stats) {
    Shape ls = g.shape_of(logits);
    if (ls.size() != 4) throw GraphError("hallucination loss: logits must be {B,C+1,H,W}");
    if ((int)bg.size() != ls[0]) {
        throw GraphError("hallucination loss: need one background mask per batch element");
    }
    int channels = ls[1];
    if (channels < 2) throw GraphError("hallucination loss: need >= 1 foreground class");

    std::vector<int64_t> sites;
    for (int b = 0; b < ls[0]; ++b) {
        const BoolMask& m = bg[(size_t)b];
        if (m.w != ls[3] || m.h != ls[2]) {
            throw GraphError("hallucination loss: mask size must match logits");
        }
        for (int y = 0; y < m.h; ++y) {
            for (int x = 0; x < m.w; ++x) {
                if (!m.at(x, y)) continue;
                sites.push_back(b);
                sites.push_back(y);
                sites.push_back(x);
            }
        }
    }
    size_t m_count = sites.size() / 3;
    if (m_count == 0) {
        if (stats) ++stats->empty_background_warnings;
        return g.constant({1}, {0.0}, "hl_loss_empty_bg");
    }

    int sm = g.softmax(logits, 1);
    int rows = g.gather_pixels(sm, sites);  // {m, C+1}
    // Keep only the foreground columns before squaring.
    std::vector<int64_t> fg_idx;
    fg_idx.reserve(m_count * (size_t)(channels - 1));
    for (size_t i = 0; i < m_count; ++i) {
        for (int c = 1; c < channels; ++c) {
            fg_idx.push_back((int64_t)i * channels + c);
        }
    }
    int fg = g.gather_flat(g.reshape(rows, {(int)m_count * channels}), fg_idx);
    return g.scale(g.sum_all(g.square(fg)), 1.0 / (double)m_count);
}

std::vector<std::pair<int, int>> instance_feature_cells(const Bbox& bbox, int img_w, int img_h,
                                                        int feat_w, int feat_h) {
    if (img_w < 1 || img_h < 1 || feat_w < 1 || feat_h < 1) {
        throw std::invalid_argument("instance_feature_cells: sizes must be positive");
    }
    if (bbox.w < 1 || bbox.h < 1 || bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.w > img_w ||
        bbox.y + bbox.h > img_h) {
        throw std::invalid_argument("instance_feature_cells: bbox outside image");
    }
    // Cell center (cx + 0.5) lies inside the scaled box [bx*fw/iw,
    // (bx+bw)*fw/iw) iff (2cx+1)*iw is inside [2*bx*fw, 2*(bx+bw)*fw).
    // Integer arithmetic keeps the boundary exact.
    auto inside = [](int64_t cell, int64_t img, int64_t lo, int64_t hi, int64_t feat) {
        int64_t m = (2 * cell + 1) * img;
        return m >= 2 * lo * feat && m < 2 * hi * feat;
    };
    std::vector<std::pair<int, int>> cells;
    for (int cy = 0; cy < feat_h; ++cy) {
        if (!inside(cy, img_h, bbox.y, bbox.y + bbox.h, feat_h)) continue;
        for (int cx = 0; cx < feat_w; ++cx) {
            if (inside(cx, img_w, bbox.x, bbox.x + bbox.w, feat_w)) cells.emplace_back(cx, cy);
        }
    }
    if (cells.empty()) {
        // Nearest cell to the bbox center: floor((bx + bw/2) * fw / iw).
        int cx = (int)(((int64_t)(2 * bbox.x + bbox.w) * feat_w) / (2 * (int64_t)img_w));
        int cy = (int)(((int64_t)(2 * bbox.y + bbox.h) * feat_h) / (2 * (int64_t)img_h));
        cells.emplace_back(std::clamp(cx, 0, feat_w - 1), std::clamp(cy, 0, feat_h - 1));
    }
    return cells;
}

namespace {

std::vector<float> normalized(std::vector<float> v) {
    double n = 0.0;
    for (float x : v) n += (double)x * x;
    n = std::sqrt(std::max(n, 1e-24));
    for (float& x : v) x = (float)(x / n);
    return v;
}

}  // namespace

std::vector<std::vector<float>> extract_instance_features(const Tensor<float>& featmap,
                                                          const Bbox& bbox, int img_w,
                                                          int img_h) {
    int f, fh, fw;
    const float* base;
    if (featmap.shape.size() == 4) {
        if (featmap.dim(0) != 1) {
            throw std::invalid_argument("extract_instance_features: batch must be 1");
        }
        f = featmap.dim(1);
        fh = featmap.dim(2);
        fw = featmap.dim(3);
        base = featmap.data.data();
    } else if (featmap.shape.size() == 3) {
        f = featmap.dim(0);
        fh = featmap.dim(1);
        fw = featmap.dim(2);
        base = featmap.data.data();
    } else {
        throw std::invalid_argument("extract_instance_features: featmap must be {F,h,w}");
    }
    std::vector<std::vector<float>> out;
    size_t plane = (size_t)fh * fw;
    for (auto [cx, cy] : instance_feature_cells(bbox, img_w, img_h, fw, fh)) {
        std::vector<float> v((size_t)f);
        for (int c = 0; c < f; ++c) v[(size_t)c] = base[(size_t)c * plane + (size_t)cy * fw + cx];
        out.push_back(normalized(std::move(v)));
    }
    return out;
}

std::vector<float> batch_prototype(const std::vector<std::vector<float>>& feats) {
    if (feats.empty()) throw std::invalid_argument("batch_prototype: empty feature list");
    size_t d = feats.front().size();
    std::vector<float> mean(d, 0.0f);
    std::vector<double> acc(d, 0.0);
    for (const std::vector<float>& f : feats) {
        if (f.size() != d) throw std::invalid_argument("batch_prototype: dim mismatch");
        for (size_t i = 0; i < d; ++i) acc[i] += f[i];
    }
    for (size_t i = 0; i < d; ++i) mean[i] = (float)(acc[i] / (double)feats.size());
    return normalized(std::move(mean));
}

PrototypeBank::PrototypeBank(int num_classes_, int dim_, double alpha_)
    : num_classes(num_classes_), dim(dim_), alpha(alpha_) {
    if (num_classes < 0 || dim < 1) throw std::invalid_argument("prototype bank: bad sizes");
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("prototype bank: momentum must lie in [0,1]");
    }
    protos.assign((size_t)num_classes, std::vector<float>((size_t)dim, 0.0f));
    seen.assign((size_t)num_classes, 0);
    initialized.assign((size_t)num_classes, 0);
}

int PrototypeBank::initialized_count() const {
    int n = 0;
    for (uint8_t f : initialized) n += f != 0;
    return n;
}

std::pair<std::vector<float>, std::vector<int>> PrototypeBank::initialized_rows() const {
    std::vector<float> rows;
    std::vector<int> ids;
    for (int c = 0; c < num_classes; ++c) {
        if (!initialized[(size_t)c]) continue;
        rows.insert(rows.end(), protos[(size_t)c].begin(), protos[(size_t)c].end());
        ids.push_back(c + 1);
    }
    return {rows, ids};
}

void ema_update(PrototypeBank& bank, const std::map<int, std::vector<float>>& batch_means) {
    for (const auto& [class_id, mean] : batch_means) {
        if (class_id < 1 || class_id > bank.num_classes) {
            throw std::invalid_argument("ema_update: class id out of range");
        }
        if ((int)mean.size() != bank.dim) {
            throw std::invalid_argument("ema_update: feature dim mismatch");
        }
        size_t slot = (size_t)class_id - 1;
        // Boundary cases resolve exactly: adoption and the two momentum
        // extremes need no renormalization of an already-unit mean, and a
        // batch mean equal to the prototype is a fixed point by algebra.
        if (!bank.initialized[slot]) {
            bank.protos[slot] = mean;
            bank.initialized[slot] = 1;
        } else if (bank.alpha == 0.0) {
            bank.protos[slot] = mean;
        } else if (bank.alpha == 1.0 || mean == bank.protos[slot]) {
            // untouched
        } else {
            std::vector<float> mixed((size_t)bank.dim);
            for (int i = 0; i < bank.dim; ++i) {
                mixed[(size_t)i] = (float)(bank.alpha * bank.protos[slot][(size_t)i] +
                                           (1.0 - bank.alpha) * mean[(size_t)i]);
            }
            bank.protos[slot] = normalized(std::move(mixed));
        }
        ++bank.seen[slot];
    }
}

int bank_proto_node(Graph& g, const PrototypeBank& bank) {
    auto [rows, ids] = bank.initialized_rows();
    if (ids.empty()) return -1;
    std::vector<double> vals(rows.begin(), rows.end());
    return g.constant({(int)ids.size(), bank.dim}, std::move(vals), "prototypes");
}

int build_projection_head(Graph& g, int rows, int out_dim, const std::string& prefix) {
    Shape rs = g.shape_of(rows);
    if (rs.size() != 2) throw GraphError("projection head: expects {m,F} rows");
    int fin = rs[1];
    int w1 = g.param(prefix + ".l1.w", {out_dim, fin});
    int b1 = g.param(prefix + ".l1.b", {out_dim});
    int w2 = g.param(prefix + ".l2.w", {out_dim, out_dim});
    int b2 = g.param(prefix + ".l2.b", {out_dim});
    int h = g.leaky_relu(g.linear(rows, w1, b1), 0.2);
    return g.l2_normalize_rows(g.linear(h, w2, b2));
}

int build_suppression_loss(Graph& g, int anchors, int positives, int negatives, int protos,
                           const SuppressionConfig& cfg, const std::string& prefix) {
    if (cfg.tau_temp <= 0) throw GraphError("suppression loss: temperature must be positive");
    int a = build_projection_head(g, anchors, cfg.proj_dim, prefix);
    int p = build_projection_head(g, positives, cfg.proj_dim, prefix);
    int n = build_projection_head(g, negatives, cfg.proj_dim, prefix);
    int c = protos >= 0 ? build_projection_head(g, protos, cfg.proj_dim, prefix) : -1;
    return g.infonce(a, p, n, c, cfg.tau_temp);
}

std::vector<std::pair<int, int>> sample_locations(int w, int h, int k, Rng& rng) {
    if (w < 1 || h < 1) throw std::invalid_argument("sample_locations: empty grid");
    int64_t total = (int64_t)w * h;
    int take = (int)std::min<int64_t>(std::max(k, 0), total);
    // Partial Fisher-Yates over flat indices.
    std::vector<int64_t> flat((size_t)total);
    for (int64_t i = 0; i < total; ++i) flat[(size_t)i] = i;
    std::vector<std::pair<int, int>> out;
    out.reserve((size_t)take);
    for (int i = 0; i < take; ++i) {
        int64_t j = rng.uniform_int(i, total - 1);
        std::swap(flat[(size_t)i], flat[(size_t)j]);
        out.emplace_back((int)(flat[(size_t)i] % w), (int)(flat[(size_t)i] / w));
    }
    return out;
}

int build_contrastive_reg(Graph& g, int src_feat, int trans_feat,
                          const std::vector<std::vector<std::pair<int, int>>>& locs,
                          double tau_temp) {
    Shape ss = g.shape_of(src_feat);
    Shape ts = g.shape_of(trans_feat);
    if (ss.size() != 4 || ts != ss) {
        throw GraphError("contrastive reg: feature maps must share a 4-D shape");
    }
    if ((int)locs.size() != ss[0]) {
        throw GraphError("contrastive reg: need one location list per batch element");
    }
    std::vector<int> terms;
    for (int b = 0; b < ss[0]; ++b) {
        const auto& l = locs[(size_t)b];
        if (l.empty()) throw GraphError("contrastive reg: empty location list");
        std::vector<int64_t> sites;
        sites.reserve(l.size() * 3);
        for (auto [x, y] : l) {
            if (x < 0 || y < 0 || x >= ss[3] || y >= ss[2]) {
                throw GraphError("contrastive reg: location outside feature map");
            }
            sites.push_back(b);
            sites.push_back(y);
            sites.push_back(x);
        }
        int a = g.l2_normalize_rows(g.gather_pixels(trans_feat, sites));
        int p = g.l2_normalize_rows(g.gather_pixels(src_feat, sites));
        terms.push_back(g.patch_nce(a, p, tau_temp));
    }
    int total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[(size_t)i]);
    return g.scale(total, 1.0 / (double)terms.size());
}

}  // namespace hsb
