#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsb/tensor.hpp"

namespace hsb {

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class OpKind {
    Input,
    Param,
    Const,
    Conv2d,
    ConvTranspose2d,
    UpsampleNN2x,
    LeakyRelu,
    Sigmoid,
    InstanceNorm,
    Linear,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Square,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MeanAll,
    SumAll,
    Dot,
    GatherFlat,
    GatherPixels,
    AddChannelBias,
    ConcatChannels,
    AvgPoolTo,
    Reshape,
    L2NormalizeRows,
    KnnEntropy,
    InfoNce,
    PatchNce,
};

const char* op_name(OpKind k);

// Per-node attributes; only the fields an op consumes are meaningful.
struct Attrs {
    int stride = 1;
    int pad = 0;
    int axis = 0;
    int th = 0, tw = 0;  // AvgPoolTo target
    double alpha = 0.0;  // LeakyRelu slope
    double c = 0.0;      // Scale / AddScalar constant
    double eps = 1e-5;
    double tau = 1.0;                // contrastive temperature
    std::vector<int64_t> indices;    // GatherFlat flat indices; GatherPixels packed (b,y,x)
    std::vector<double> const_data;  // Const payload
    Shape reshape;
};

struct Node {
    OpKind kind;
    std::string name;         // unique; used in diagnostics
    std::vector<int> inputs;  // ids of predecessor nodes (always < own id)
    Shape shape;              // inferred output shape
    Attrs attrs;
    bool differentiable = false;  // Input nodes: gradient requested by default
};

// Static computation graph. Built once, evaluated many times; nodes are
// appended in topological order and never mutated afterwards.
class Graph {
public:
    int input(const std::string& name, Shape shape, bool differentiable = false);
    int param(const std::string& name, Shape shape);  // same name returns the same node
    int constant(Shape shape, std::vector<double> values, const std::string& tag = "const");
    int constant_scalar(double v, const std::string& tag = "const");

    int conv2d(int x, int w, int b, int stride, int pad);  // b = -1 for no bias
    int conv_transpose2d(int x, int w, int b, int stride, int pad);
    int upsample_nn2x(int x);
    int leaky_relu(int x, double alpha);
    int sigmoid(int x);
    int instance_norm(int x, int gamma, int beta, double eps = 1e-5);
    int linear(int x, int w, int b);
    int softmax(int x, int axis);
    int log_softmax(int x, int axis);
    int log(int x);
    int exp(int x);
    int square(int x);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int x, double c);
    int add_scalar(int x, double c);
    int mean_all(int x);
    int sum_all(int x);
    int dot(int a, int b);
    int gather_flat(int x, std::vector<int64_t> idx);
    int gather_pixels(int x, std::vector<int64_t> sites);  // sites packed b,y,x triples
    int add_channel_bias(int x, int bias);
    int concat_channels(int a, int b);
    int avgpool_to(int x, int th, int tw);
    int reshape(int x, Shape s);
    int l2_normalize_rows(int x, double eps = 1e-12);
    int knn_entropy(int pts);
    // anchors m x d, positives m x d, negatives n x d, prototypes c x d (-1 for none)
    int infonce(int anchors, int positives, int negatives, int prototypes, double tau);
    int patch_nce(int anchors, int positives, double tau);

    void mark_output(const std::string& name, int node);

    const std::vector<Node>& nodes() const { return nodes_; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    const std::map<std::string, int>& inputs() const { return inputs_; }
    const std::map<std::string, int>& params() const { return params_; }
    const std::map<std::string, int>& outputs() const { return outputs_; }
    int output(const std::string& name) const;
    const Shape& shape_of(int id) const { return nodes_[static_cast<size_t>(id)].shape; }

private:
    int push(OpKind kind, std::vector<int> inputs, Shape shape, Attrs attrs = {});
    const Shape& in_shape(int id, const char* ctx) const;

    std::vector<Node> nodes_;
    std::map<std::string, int> inputs_;
    std::map<std::string, int> params_;
    std::map<std::string, int> outputs_;
};

}  // namespace hsb
