#include "hsb/graph.hpp"

namespace hsb {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Param: return "param";
        case OpKind::Const: return "const";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::ConvTranspose2d: return "conv_transpose2d";
        case OpKind::UpsampleNN2x: return "upsample_nn2x";
        case OpKind::LeakyRelu: return "leaky_relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::InstanceNorm: return "instance_norm";
        case OpKind::Linear: return "linear";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::Square: return "square";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MeanAll: return "mean_all";
        case OpKind::SumAll: return "sum_all";
        case OpKind::Dot: return "dot";
        case OpKind::GatherFlat: return "gather_flat";
        case OpKind::GatherPixels: return "gather_pixels";
        case OpKind::AddChannelBias: return "add_channel_bias";
        case OpKind::ConcatChannels: return "concat_channels";
        case OpKind::AvgPoolTo: return "avgpool_to";
        case OpKind::Reshape: return "reshape";
        case OpKind::L2NormalizeRows: return "l2_normalize_rows";
        case OpKind::KnnEntropy: return "knn_entropy";
        case OpKind::InfoNce: return "infonce";
        case OpKind::PatchNce: return "patch_nce";
    }
    return "?";
}

int Graph::push(OpKind kind, std::vector<int> inputs, Shape shape, Attrs attrs) {
    for (int in : inputs) {
        if (in < 0 || in >= static_cast<int>(nodes_.size())) {
            throw GraphError(std::string(op_name(kind)) + ": input node id out of range");
        }
    }
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.shape = std::move(shape);
    n.attrs = std::move(attrs);
    n.name = std::string(op_name(kind)) + "#" + std::to_string(nodes_.size());
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

const Shape& Graph::in_shape(int id, const char* ctx) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
        throw GraphError(std::string(ctx) + ": bad node id " + std::to_string(id));
    }
    return nodes_[static_cast<size_t>(id)].shape;
}

int Graph::input(const std::string& name, Shape shape, bool differentiable) {
    auto it = inputs_.find(name);
    if (it != inputs_.end()) {
        const Node& n = nodes_[static_cast<size_t>(it->second)];
        if (n.shape != shape) {
            throw GraphError("input '" + name + "' redeclared with shape " + shape_str(shape) +
                             " (was " + shape_str(n.shape) + ")");
        }
        return it->second;
    }
    int id = push(OpKind::Input, {}, std::move(shape));
    nodes_.back().name = name;
    nodes_.back().differentiable = differentiable;
    inputs_[name] = id;
    return id;
}

int Graph::param(const std::string& name, Shape shape) {
    auto it = params_.find(name);
    if (it != params_.end()) {
        const Node& n = nodes_[static_cast<size_t>(it->second)];
        if (n.shape != shape) {
            throw GraphError("param '" + name + "' redeclared with shape " + shape_str(shape) +
                             " (was " + shape_str(n.shape) + ")");
        }
        return it->second;
    }
    int id = push(OpKind::Param, {}, std::move(shape));
    nodes_.back().name = name;
    params_[name] = id;
    return id;
}

int Graph::constant(Shape shape, std::vector<double> values, const std::string& tag) {
    if (static_cast<int64_t>(values.size()) != numel(shape)) {
        throw GraphError("const '" + tag + "': value count does not match shape");
    }
    Attrs a;
    a.const_data = std::move(values);
    int id = push(OpKind::Const, {}, std::move(shape), std::move(a));
    nodes_.back().name = tag + "#" + std::to_string(id);
    return id;
}

int Graph::constant_scalar(double v, const std::string& tag) { return constant({1}, {v}, tag); }

int Graph::conv2d(int x, int w, int b, int stride, int pad) {
    const Shape& xs = in_shape(x, "conv2d");
    const Shape& ws = in_shape(w, "conv2d");
    if (xs.size() != 4 || ws.size() != 4) throw GraphError("conv2d: expects 4-D input and weight");
    if (ws[1] != xs[1]) {
        throw GraphError("conv2d: weight in-channels " + std::to_string(ws[1]) +
                         " != input channels " + std::to_string(xs[1]));
    }
    if (stride < 1 || stride > 2) throw GraphError("conv2d: stride must be 1 or 2");
    int ho = (xs[2] + 2 * pad - ws[2]) / stride + 1;
    int wo = (xs[3] + 2 * pad - ws[3]) / stride + 1;
    if (ho <= 0 || wo <= 0) throw GraphError("conv2d: kernel larger than padded input");
    std::vector<int> ins{x, w};
    if (b >= 0) {
        const Shape& bs = in_shape(b, "conv2d");
        if (bs.size() != 1 || bs[0] != ws[0]) throw GraphError("conv2d: bias shape mismatch");
        ins.push_back(b);
    }
    Attrs a;
    a.stride = stride;
    a.pad = pad;
    return push(OpKind::Conv2d, std::move(ins), {xs[0], ws[0], ho, wo}, std::move(a));
}

int Graph::conv_transpose2d(int x, int w, int b, int stride, int pad) {
    const Shape& xs = in_shape(x, "conv_transpose2d");
    const Shape& ws = in_shape(w, "conv_transpose2d");  // (Cin, Cout, kh, kw)
    if (xs.size() != 4 || ws.size() != 4) throw GraphError("conv_transpose2d: expects 4-D tensors");
    if (ws[0] != xs[1]) throw GraphError("conv_transpose2d: weight in-channels mismatch");
    int ho = (xs[2] - 1) * stride - 2 * pad + ws[2];
    int wo = (xs[3] - 1) * stride - 2 * pad + ws[3];
    if (ho <= 0 || wo <= 0) throw GraphError("conv_transpose2d: empty output");
    std::vector<int> ins{x, w};
    if (b >= 0) {
        const Shape& bs = in_shape(b, "conv_transpose2d");
        if (bs.size() != 1 || bs[0] != ws[1]) throw GraphError("conv_transpose2d: bias shape mismatch");
        ins.push_back(b);
    }
    Attrs a;
    a.stride = stride;
    a.pad = pad;
    return push(OpKind::ConvTranspose2d, std::move(ins), {xs[0], ws[1], ho, wo}, std::move(a));
}

int Graph::upsample_nn2x(int x) {
    const Shape& xs = in_shape(x, "upsample_nn2x");
    if (xs.size() != 4) throw GraphError("upsample_nn2x: expects 4-D input");
    return push(OpKind::UpsampleNN2x, {x}, {xs[0], xs[1], xs[2] * 2, xs[3] * 2});
}

int Graph::leaky_relu(int x, double alpha) {
    Attrs a;
    a.alpha = alpha;
    return push(OpKind::LeakyRelu, {x}, in_shape(x, "leaky_relu"), std::move(a));
}

int Graph::sigmoid(int x) { return push(OpKind::Sigmoid, {x}, in_shape(x, "sigmoid")); }

int Graph::instance_norm(int x, int gamma, int beta, double eps) {
    const Shape& xs = in_shape(x, "instance_norm");
    if (xs.size() != 4) throw GraphError("instance_norm: expects 4-D input");
    const Shape& gs = in_shape(gamma, "instance_norm");
    const Shape& bs = in_shape(beta, "instance_norm");
    if (gs != Shape{xs[1]} || bs != Shape{xs[1]}) {
        throw GraphError("instance_norm: gamma/beta must be per-channel vectors");
    }
    Attrs a;
    a.eps = eps;
    return push(OpKind::InstanceNorm, {x, gamma, beta}, xs, std::move(a));
}

int Graph::linear(int x, int w, int b) {
    const Shape& xs = in_shape(x, "linear");
    const Shape& ws = in_shape(w, "linear");  // (O, K)
    if (xs.size() != 2 || ws.size() != 2) throw GraphError("linear: expects 2-D input and weight");
    if (ws[1] != xs[1]) throw GraphError("linear: weight K != input K");
    std::vector<int> ins{x, w};
    if (b >= 0) {
        const Shape& bs = in_shape(b, "linear");
        if (bs.size() != 1 || bs[0] != ws[0]) throw GraphError("linear: bias shape mismatch");
        ins.push_back(b);
    }
    return push(OpKind::Linear, std::move(ins), {xs[0], ws[0]});
}

int Graph::softmax(int x, int axis) {
    const Shape& xs = in_shape(x, "softmax");
    if (axis < 0 || axis >= static_cast<int>(xs.size())) throw GraphError("softmax: bad axis");
    Attrs a;
    a.axis = axis;
    return push(OpKind::Softmax, {x}, xs, std::move(a));
}

int Graph::log_softmax(int x, int axis) {
    const Shape& xs = in_shape(x, "log_softmax");
    if (axis < 0 || axis >= static_cast<int>(xs.size())) throw GraphError("log_softmax: bad axis");
    Attrs a;
    a.axis = axis;
    return push(OpKind::LogSoftmax, {x}, xs, std::move(a));
}

int Graph::log(int x) { return push(OpKind::Log, {x}, in_shape(x, "log")); }
int Graph::exp(int x) { return push(OpKind::Exp, {x}, in_shape(x, "exp")); }
int Graph::square(int x) { return push(OpKind::Square, {x}, in_shape(x, "square")); }

int Graph::add(int a, int b) {
    if (in_shape(a, "add") != in_shape(b, "add")) throw GraphError("add: shape mismatch");
    return push(OpKind::Add, {a, b}, in_shape(a, "add"));
}
int Graph::sub(int a, int b) {
    if (in_shape(a, "sub") != in_shape(b, "sub")) throw GraphError("sub: shape mismatch");
    return push(OpKind::Sub, {a, b}, in_shape(a, "sub"));
}
int Graph::mul(int a, int b) {
    if (in_shape(a, "mul") != in_shape(b, "mul")) throw GraphError("mul: shape mismatch");
    return push(OpKind::Mul, {a, b}, in_shape(a, "mul"));
}
int Graph::scale(int x, double c) {
    Attrs at;
    at.c = c;
    return push(OpKind::Scale, {x}, in_shape(x, "scale"), std::move(at));
}
int Graph::add_scalar(int x, double c) {
    Attrs at;
    at.c = c;
    return push(OpKind::AddScalar, {x}, in_shape(x, "add_scalar"), std::move(at));
}
int Graph::mean_all(int x) { return push(OpKind::MeanAll, {x}, {1}); }
int Graph::sum_all(int x) { return push(OpKind::SumAll, {x}, {1}); }

int Graph::dot(int a, int b) {
    const Shape& as = in_shape(a, "dot");
    const Shape& bs = in_shape(b, "dot");
    if (numel(as) != numel(bs)) throw GraphError("dot: element count mismatch");
    return push(OpKind::Dot, {a, b}, {1});
}

int Graph::gather_flat(int x, std::vector<int64_t> idx) {
    const Shape& xs = in_shape(x, "gather_flat");
    int64_t n = numel(xs);
    for (int64_t i : idx) {
        if (i < 0 || i >= n) throw GraphError("gather_flat: index out of range");
    }
    Attrs a;
    a.indices = std::move(idx);
    int m = static_cast<int>(a.indices.size());
    return push(OpKind::GatherFlat, {x}, {m}, std::move(a));
}

int Graph::gather_pixels(int x, std::vector<int64_t> sites) {
    const Shape& xs = in_shape(x, "gather_pixels");
    if (xs.size() != 4) throw GraphError("gather_pixels: expects 4-D feature map");
    if (sites.size() % 3 != 0) throw GraphError("gather_pixels: sites must be (b,y,x) triples");
    int m = static_cast<int>(sites.size() / 3);
    for (int i = 0; i < m; ++i) {
        int64_t b = sites[3 * i], y = sites[3 * i + 1], xx = sites[3 * i + 2];
        if (b < 0 || b >= xs[0] || y < 0 || y >= xs[2] || xx < 0 || xx >= xs[3]) {
            throw GraphError("gather_pixels: site out of range");
        }
    }
    Attrs a;
    a.indices = std::move(sites);
    return push(OpKind::GatherPixels, {x}, {m, xs[1]}, std::move(a));
}

int Graph::add_channel_bias(int x, int bias) {
    const Shape& xs = in_shape(x, "add_channel_bias");
    const Shape& bs = in_shape(bias, "add_channel_bias");
    if (xs.size() != 4 || bs.size() != 2 || bs[0] != xs[0] || bs[1] != xs[1]) {
        throw GraphError("add_channel_bias: bias must be (B, C) matching input");
    }
    return push(OpKind::AddChannelBias, {x, bias}, xs);
}

int Graph::concat_channels(int a, int b) {
    const Shape& as = in_shape(a, "concat_channels");
    const Shape& bs = in_shape(b, "concat_channels");
    if (as.size() != bs.size() || (as.size() != 4 && as.size() != 2)) {
        throw GraphError("concat_channels: expects two 2-D or two 4-D tensors");
    }
    Shape out = as;
    if (as.size() == 4) {
        if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
            throw GraphError("concat_channels: non-channel extents differ");
        }
        out[1] += bs[1];
    } else {
        if (as[0] != bs[0]) throw GraphError("concat_channels: row counts differ");
        out[1] += bs[1];
    }
    return push(OpKind::ConcatChannels, {a, b}, std::move(out));
}

int Graph::avgpool_to(int x, int th, int tw) {
    const Shape& xs = in_shape(x, "avgpool_to");
    if (xs.size() != 4) throw GraphError("avgpool_to: expects 4-D input");
    if (th <= 0 || tw <= 0 || xs[2] % th != 0 || xs[3] % tw != 0) {
        throw GraphError("avgpool_to: target must divide input extents");
    }
    Attrs a;
    a.th = th;
    a.tw = tw;
    return push(OpKind::AvgPoolTo, {x}, {xs[0], xs[1], th, tw}, std::move(a));
}

int Graph::reshape(int x, Shape s) {
    const Shape& xs = in_shape(x, "reshape");
    if (numel(s) != numel(xs)) throw GraphError("reshape: element count mismatch");
    Attrs a;
    a.reshape = s;
    return push(OpKind::Reshape, {x}, std::move(s), std::move(a));
}

int Graph::l2_normalize_rows(int x, double eps) {
    const Shape& xs = in_shape(x, "l2_normalize_rows");
    if (xs.size() != 2) throw GraphError("l2_normalize_rows: expects 2-D input");
    Attrs a;
    a.eps = eps;
    return push(OpKind::L2NormalizeRows, {x}, xs, std::move(a));
}

int Graph::knn_entropy(int pts) {
    const Shape& xs = in_shape(pts, "knn_entropy");
    if (xs.size() != 2) throw GraphError("knn_entropy: expects n x d sample matrix");
    if (xs[0] < 2) throw GraphError("knn_entropy: needs at least 2 samples");
    return push(OpKind::KnnEntropy, {pts}, {1});
}

int Graph::infonce(int anchors, int positives, int negatives, int prototypes, double tau) {
    const Shape& as = in_shape(anchors, "infonce");
    const Shape& ps = in_shape(positives, "infonce");
    const Shape& ns = in_shape(negatives, "infonce");
    if (as.size() != 2 || ps != as || ns.size() != 2 || ns[1] != as[1]) {
        throw GraphError("infonce: anchors/positives must match, negatives must share dim");
    }
    if (tau <= 0) throw GraphError("infonce: temperature must be positive");
    std::vector<int> ins{anchors, positives, negatives};
    if (prototypes >= 0) {
        const Shape& cs = in_shape(prototypes, "infonce");
        if (cs.size() != 2 || cs[1] != as[1]) throw GraphError("infonce: prototype dim mismatch");
        ins.push_back(prototypes);
    }
    Attrs a;
    a.tau = tau;
    return push(OpKind::InfoNce, std::move(ins), {1}, std::move(a));
}

int Graph::patch_nce(int anchors, int positives, double tau) {
    const Shape& as = in_shape(anchors, "patch_nce");
    const Shape& ps = in_shape(positives, "patch_nce");
    if (as.size() != 2 || ps != as) throw GraphError("patch_nce: anchors/positives must match");
    if (tau <= 0) throw GraphError("patch_nce: temperature must be positive");
    Attrs a;
    a.tau = tau;
    return push(OpKind::PatchNce, {anchors, positives}, {1}, std::move(a));
}

void Graph::mark_output(const std::string& name, int node) {
    in_shape(node, "mark_output");
    outputs_[name] = node;
}

int Graph::output(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw GraphError("no output named '" + name + "'");
    return it->second;
}

}  // namespace hsb
