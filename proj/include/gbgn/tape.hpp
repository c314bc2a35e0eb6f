#pragma once

#include "gbgn/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gbgn {

// Primitive kinds. Image-domain kinds operate on N x C x H x W tensors;
// rank-3 C x H x W inputs are lifted to a batch of one.
enum class OpKind {
    Matmul,
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    Add,
    Mul,
    Scale,
    ConcatChannels,
    AvgPool,
    UpsampleNearest,
    BilinearWarp1d,
    ChannelNorm,
    Mean,
    LogSoftmax,
};

std::string_view op_name(OpKind k);
OpKind op_from_name(std::string_view name);

// Per-node attributes; only the fields relevant to the kind are read.
struct Attrs {
    int stride = 1;      // Conv2d: 1 or 2
    int ksize = 3;       // Conv2d: 1 or 3 (pad = ksize / 2)
    int out_h = 1;       // AvgPool target grid
    int out_w = 1;
    int factor_y = 1;    // UpsampleNearest integer factors
    int factor_x = 1;
    double value = 1.0;  // Scale multiplier
    double eps = 1e-5;   // ChannelNorm variance epsilon
};

struct ValueId {
    int32_t v = -1;
    bool valid() const { return v >= 0; }
};

enum class ParamTag { Shared, HeadSeg, HeadDepth, HeadNormal, Aux };

std::string_view param_tag_name(ParamTag t);

// Ordered registry of learnable tensors. Gradient vectors are flat over the
// registry in registration order; offsets are stable once registered.
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        ParamTag tag;
        Tensor value;
        int64_t offset; // position of the first element in the flat vector
    };

    int add(std::string name, Tensor init, ParamTag tag);
    int count() const { return static_cast<int>(entries_.size()); }
    const Entry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
    Tensor& value(int i) { return entries_[static_cast<size_t>(i)].value; }
    const Tensor& value(int i) const { return entries_[static_cast<size_t>(i)].value; }

    int64_t total_size() const { return total_; }
    int64_t shared_size() const;

    // Contiguous (offset, length) runs covering all Shared-tagged entries.
    std::vector<std::pair<int64_t, int64_t>> shared_ranges() const;

    std::vector<double> flatten() const;
    void load_flat(std::span<const double> flat);

    int find(std::string_view name) const; // -1 when absent

private:
    std::vector<Entry> entries_;
    int64_t total_ = 0;
};

// Flat gradient over all registered parameters, in registry order.
using Gradients = std::vector<double>;

// Recorded define-by-run computation graph. Nodes are topologically ordered
// by construction; leaves are constants or registry-bound parameters.
class Tape {
public:
    Tape() = default;
    explicit Tape(const ParamRegistry* registry) : registry_(registry) {}

    ValueId constant(Tensor t);
    // Binds a leaf slot to registry parameter `index`, copying its current value.
    ValueId param(int index);

    ValueId apply(OpKind kind, std::span<const ValueId> inputs, const Attrs& attrs = {});
    ValueId apply(OpKind kind, std::initializer_list<ValueId> inputs, const Attrs& attrs = {});

    // Conveniences for graph building.
    ValueId matmul(ValueId a, ValueId b);
    ValueId conv2d(ValueId x, ValueId w, ValueId bias, int stride = 1, int ksize = 3);
    ValueId conv2d(ValueId x, ValueId w, int stride = 1, int ksize = 3);
    ValueId relu(ValueId x);
    ValueId sigmoid(ValueId x);
    ValueId exp(ValueId x);
    ValueId add(ValueId a, ValueId b);
    ValueId mul(ValueId a, ValueId b);
    ValueId scale(ValueId x, double c);
    ValueId concat_channels(std::span<const ValueId> xs);
    ValueId avgpool(ValueId x, int out_h, int out_w);
    ValueId upsample_nearest(ValueId x, int factor_y, int factor_x);
    ValueId bilinear_warp_1d(ValueId right, ValueId disparity);
    ValueId channelnorm(ValueId x, ValueId gamma, ValueId beta, double eps = 1e-5);
    ValueId mean(ValueId x);
    ValueId log_softmax(ValueId x);

    const Tensor& value(ValueId id) const;
    // Leaf-value mutation hook for finite differencing; non-leaf slots are
    // recomputed by replay().
    Tensor& leaf_value(ValueId id);
    void replay();

    // d(root)/d(theta) for every registered parameter; zero for parameters the
    // root does not depend on. Root must be scalar and live on this tape.
    Gradients backward(ValueId root) const;

    int node_count() const { return static_cast<int>(nodes_.size()); }
    bool is_leaf(ValueId id) const;
    OpKind kind(ValueId id) const;
    int param_index(ValueId id) const; // -1 for non-parameter slots
    std::vector<ValueId> inputs(ValueId id) const;
    const ParamRegistry* registry() const { return registry_; }

private:
    struct Node {
        OpKind kind{};
        std::vector<int32_t> inputs;
        Attrs attrs;
        bool leaf = true;
        int param_index = -1;
        bool needs_grad = false;
        std::vector<double> saved; // per-kind forward byproducts (norm stats)
    };

    void check_id(ValueId id) const;
    ValueId push(Node n, Tensor value);

    std::vector<Node> nodes_;
    std::vector<Tensor> values_;
    const ParamRegistry* registry_ = nullptr;
};

} // namespace gbgn
