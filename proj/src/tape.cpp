#include "gbgn/tape.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <sstream>

namespace gbgn {

namespace {

const std::array<std::pair<OpKind, std::string_view>, 15> kOpNames = {{
    {OpKind::Matmul, "matmul"},
    {OpKind::Conv2d, "conv2d"},
    {OpKind::Relu, "relu"},
    {OpKind::Sigmoid, "sigmoid"},
    {OpKind::Exp, "exp"},
    {OpKind::Add, "add"},
    {OpKind::Mul, "mul"},
    {OpKind::Scale, "scale"},
    {OpKind::ConcatChannels, "concat-channels"},
    {OpKind::AvgPool, "avgpool"},
    {OpKind::UpsampleNearest, "upsample-nearest"},
    {OpKind::BilinearWarp1d, "bilinear-warp-1d"},
    {OpKind::ChannelNorm, "channelnorm"},
    {OpKind::Mean, "mean"},
    {OpKind::LogSoftmax, "log-softmax"},
}};

// N,C,H,W view of a rank-3 or rank-4 image tensor.
struct Nchw {
    int64_t n, c, h, w;
};

Nchw as_nchw(const Tensor& t, OpKind kind) {
    if (t.rank() == 4) return {t.extent(0), t.extent(1), t.extent(2), t.extent(3)};
    if (t.rank() == 3) return {1, t.extent(0), t.extent(1), t.extent(2)};
    throw ContractViolation(std::string(op_name(kind)) + ": expected rank-3 or rank-4 image, got " +
                            shape_str(t.shape));
}

std::vector<int64_t> image_shape(int rank, int64_t n, int64_t c, int64_t h, int64_t w) {
    if (rank == 3) return {c, h, w};
    return {n, c, h, w};
}

[[noreturn]] void contract_error(OpKind kind, const std::string& detail) {
    throw ContractViolation(std::string(op_name(kind)) + ": " + detail);
}

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

std::string_view op_name(OpKind k) {
    for (const auto& [kind, name] : kOpNames)
        if (kind == k) return name;
    return "?";
}

OpKind op_from_name(std::string_view name) {
    for (const auto& [kind, n] : kOpNames)
        if (n == name) return kind;
    throw ContractViolation("unknown primitive kind '" + std::string(name) + "'");
}

std::string_view param_tag_name(ParamTag t) {
    switch (t) {
        case ParamTag::Shared: return "shared";
        case ParamTag::HeadSeg: return "head:seg";
        case ParamTag::HeadDepth: return "head:depth";
        case ParamTag::HeadNormal: return "head:normal";
        case ParamTag::Aux: return "aux";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// ParamRegistry
// ---------------------------------------------------------------------------

int ParamRegistry::add(std::string name, Tensor init, ParamTag tag) {
    require_finite(init, "parameter init");
    Entry e{std::move(name), tag, std::move(init), total_};
    total_ += e.value.size();
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
}

int64_t ParamRegistry::shared_size() const {
    int64_t n = 0;
    for (const auto& e : entries_)
        if (e.tag == ParamTag::Shared) n += e.value.size();
    return n;
}

std::vector<std::pair<int64_t, int64_t>> ParamRegistry::shared_ranges() const {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (const auto& e : entries_) {
        if (e.tag != ParamTag::Shared) continue;
        if (!out.empty() && out.back().first + out.back().second == e.offset)
            out.back().second += e.value.size();
        else
            out.emplace_back(e.offset, e.value.size());
    }
    return out;
}

std::vector<double> ParamRegistry::flatten() const {
    std::vector<double> flat(static_cast<size_t>(total_));
    for (const auto& e : entries_)
        std::copy(e.value.data.begin(), e.value.data.end(), flat.begin() + e.offset);
    return flat;
}

void ParamRegistry::load_flat(std::span<const double> flat) {
    if (static_cast<int64_t>(flat.size()) != total_)
        throw ContractViolation("flat parameter vector has length " + std::to_string(flat.size()) +
                                ", registry holds " + std::to_string(total_));
    for (auto& e : entries_)
        std::copy(flat.begin() + e.offset, flat.begin() + e.offset + e.value.size(),
                  e.value.data.begin());
}

int ParamRegistry::find(std::string_view name) const {
    for (size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
}

// ---------------------------------------------------------------------------
// Tape bookkeeping
// ---------------------------------------------------------------------------

void Tape::check_id(ValueId id) const {
    if (id.v < 0 || id.v >= static_cast<int32_t>(nodes_.size()))
        throw ContractViolation("value id " + std::to_string(id.v) + " is not on this tape");
}

ValueId Tape::push(Node n, Tensor value) {
    nodes_.push_back(std::move(n));
    values_.push_back(std::move(value));
    return ValueId{static_cast<int32_t>(nodes_.size()) - 1};
}

ValueId Tape::constant(Tensor t) {
    shape_product(t.shape);
    require_finite(t, "constant leaf");
    Node n;
    n.leaf = true;
    return push(std::move(n), std::move(t));
}

ValueId Tape::param(int index) {
    if (!registry_) throw ContractViolation("tape has no parameter registry");
    if (index < 0 || index >= registry_->count())
        throw ContractViolation("parameter index " + std::to_string(index) + " out of range");
    Node n;
    n.leaf = true;
    n.param_index = index;
    n.needs_grad = true;
    return push(std::move(n), registry_->value(index));
}

const Tensor& Tape::value(ValueId id) const {
    check_id(id);
    return values_[static_cast<size_t>(id.v)];
}

Tensor& Tape::leaf_value(ValueId id) {
    check_id(id);
    if (!nodes_[static_cast<size_t>(id.v)].leaf)
        throw ContractViolation("only leaf values may be mutated");
    return values_[static_cast<size_t>(id.v)];
}

bool Tape::is_leaf(ValueId id) const {
    check_id(id);
    return nodes_[static_cast<size_t>(id.v)].leaf;
}

OpKind Tape::kind(ValueId id) const {
    check_id(id);
    return nodes_[static_cast<size_t>(id.v)].kind;
}

int Tape::param_index(ValueId id) const {
    check_id(id);
    return nodes_[static_cast<size_t>(id.v)].param_index;
}

std::vector<ValueId> Tape::inputs(ValueId id) const {
    check_id(id);
    std::vector<ValueId> out;
    for (int32_t i : nodes_[static_cast<size_t>(id.v)].inputs) out.push_back(ValueId{i});
    return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

struct FwdResult {
    Tensor out;
    std::vector<double> saved;
};

FwdResult forward_compute(OpKind kind, const Attrs& attrs, const std::vector<const Tensor*>& in) {
    const auto arity = [&](size_t lo, size_t hi) {
        if (in.size() < lo || in.size() > hi)
            contract_error(kind, "expects " + std::to_string(lo) +
                                     (hi != lo ? ".." + std::to_string(hi) : "") + " inputs, got " +
                                     std::to_string(in.size()));
    };
    FwdResult r;
    switch (kind) {
        case OpKind::Matmul: {
            arity(2, 2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
                contract_error(kind, "shapes " + shape_str(a.shape) + " x " + shape_str(b.shape) +
                                         " do not conform");
            r.out = Tensor::zeros({a.extent(0), b.extent(1)});
            kernels::matmul_forward(a.data.data(), b.data.data(), r.out.data.data(), a.extent(0),
                                    a.extent(1), b.extent(1));
            break;
        }
        case OpKind::Conv2d: {
            arity(2, 3);
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const Nchw v = as_nchw(x, kind);
            if (w.rank() != 4 || w.extent(2) != w.extent(3))
                contract_error(kind, "kernel must be [Co,Ci,k,k], got " + shape_str(w.shape));
            const int64_t k = w.extent(2);
            if (k != 1 && k != 3) contract_error(kind, "kernel size must be 1 or 3");
            if (attrs.stride != 1 && attrs.stride != 2) contract_error(kind, "stride must be 1 or 2");
            if (w.extent(1) != v.c)
                contract_error(kind, "input channels " + std::to_string(v.c) +
                                         " do not match kernel " + shape_str(w.shape));
            const double* bias = nullptr;
            if (in.size() == 3) {
                if (in[2]->rank() != 1 || in[2]->extent(0) != w.extent(0))
                    contract_error(kind, "bias must be [Co], got " + shape_str(in[2]->shape));
                bias = in[2]->data.data();
            }
            const int64_t p = k / 2;
            kernels::ConvDims cd{v.n, v.c, v.h, v.w, w.extent(0), k, attrs.stride, 0, 0};
            cd.oh = (v.h + 2 * p - k) / attrs.stride + 1;
            cd.ow = (v.w + 2 * p - k) / attrs.stride + 1;
            if (cd.oh <= 0 || cd.ow <= 0)
                contract_error(kind, "input " + shape_str(x.shape) + " too small for kernel");
            r.out = Tensor::zeros(image_shape(x.rank(), v.n, cd.co, cd.oh, cd.ow));
            kernels::conv2d_forward(x.data.data(), w.data.data(), bias, r.out.data.data(), cd);
            break;
        }
        case OpKind::Relu: {
            arity(1, 1);
            r.out = *in[0];
            for (double& v : r.out.data) v = v > 0.0 ? v : 0.0;
            break;
        }
        case OpKind::Sigmoid: {
            arity(1, 1);
            r.out = *in[0];
            for (double& v : r.out.data) v = sigmoid_stable(v);
            break;
        }
        case OpKind::Exp: {
            arity(1, 1);
            r.out = *in[0];
            for (double& v : r.out.data) v = std::exp(v);
            break;
        }
        case OpKind::Add: {
            arity(2, 2);
            if (!in[0]->same_shape(*in[1]))
                contract_error(kind, "shapes " + shape_str(in[0]->shape) + " and " +
                                         shape_str(in[1]->shape) + " differ");
            r.out = *in[0];
            const double* b = in[1]->data.data();
            for (size_t i = 0; i < r.out.data.size(); ++i) r.out.data[i] += b[i];
            break;
        }
        case OpKind::Mul: {
            arity(2, 2);
            if (!in[0]->same_shape(*in[1]))
                contract_error(kind, "shapes " + shape_str(in[0]->shape) + " and " +
                                         shape_str(in[1]->shape) + " differ");
            r.out = *in[0];
            const double* b = in[1]->data.data();
            for (size_t i = 0; i < r.out.data.size(); ++i) r.out.data[i] *= b[i];
            break;
        }
        case OpKind::Scale: {
            arity(1, 1);
            r.out = *in[0];
            for (double& v : r.out.data) v *= attrs.value;
            break;
        }
        case OpKind::ConcatChannels: {
            arity(1, 64);
            const Nchw v0 = as_nchw(*in[0], kind);
            int64_t ctotal = 0;
            for (const Tensor* t : in) {
                const Nchw v = as_nchw(*t, kind);
                if (v.n != v0.n || v.h != v0.h || v.w != v0.w || t->rank() != in[0]->rank())
                    contract_error(kind, "input " + shape_str(t->shape) + " does not conform to " +
                                             shape_str(in[0]->shape));
                ctotal += v.c;
            }
            r.out = Tensor::zeros(image_shape(in[0]->rank(), v0.n, ctotal, v0.h, v0.w));
            const int64_t hw = v0.h * v0.w;
            for (int64_t n = 0; n < v0.n; ++n) {
                int64_t coff = 0;
                for (const Tensor* t : in) {
                    const int64_t c = as_nchw(*t, kind).c;
                    std::copy_n(t->data.data() + n * c * hw, c * hw,
                                r.out.data.data() + (n * ctotal + coff) * hw);
                    coff += c;
                }
            }
            break;
        }
        case OpKind::AvgPool: {
            arity(1, 1);
            const Nchw v = as_nchw(*in[0], kind);
            if (attrs.out_h <= 0 || attrs.out_w <= 0 || v.h % attrs.out_h != 0 || v.w % attrs.out_w != 0)
                contract_error(kind, "grid " + std::to_string(attrs.out_h) + "x" +
                                         std::to_string(attrs.out_w) + " does not divide " +
                                         shape_str(in[0]->shape));
            r.out = Tensor::zeros(image_shape(in[0]->rank(), v.n, v.c, attrs.out_h, attrs.out_w));
            kernels::avgpool_forward(in[0]->data.data(), r.out.data.data(), v.n, v.c, v.h, v.w,
                                     attrs.out_h, attrs.out_w);
            break;
        }
        case OpKind::UpsampleNearest: {
            arity(1, 1);
            const Nchw v = as_nchw(*in[0], kind);
            if (attrs.factor_y < 1 || attrs.factor_x < 1)
                contract_error(kind, "factors must be positive integers");
            r.out = Tensor::zeros(
                image_shape(in[0]->rank(), v.n, v.c, v.h * attrs.factor_y, v.w * attrs.factor_x));
            kernels::upsample_nearest_forward(in[0]->data.data(), r.out.data.data(), v.n, v.c, v.h,
                                              v.w, attrs.factor_y, attrs.factor_x);
            break;
        }
        case OpKind::BilinearWarp1d: {
            arity(2, 2);
            const Nchw v = as_nchw(*in[0], kind);
            const Nchw dv = as_nchw(*in[1], kind);
            if (dv.n != v.n || dv.c != 1 || dv.h != v.h || dv.w != v.w)
                contract_error(kind, "disparity " + shape_str(in[1]->shape) +
                                         " does not conform to image " + shape_str(in[0]->shape));
            r.out = Tensor::zeros(in[0]->shape);
            kernels::warp1d_forward(in[0]->data.data(), in[1]->data.data(), r.out.data.data(), v.n,
                                    v.c, v.h, v.w);
            break;
        }
        case OpKind::ChannelNorm: {
            arity(3, 3);
            const Nchw v = as_nchw(*in[0], kind);
            if (in[1]->rank() != 1 || in[1]->extent(0) != v.c || in[2]->rank() != 1 ||
                in[2]->extent(0) != v.c)
                contract_error(kind, "affine must be two [C] vectors for input " +
                                         shape_str(in[0]->shape));
            r.out = Tensor::zeros(in[0]->shape);
            r.saved.resize(static_cast<size_t>(2 * v.c));
            kernels::channelnorm_forward(in[0]->data.data(), in[1]->data.data(), in[2]->data.data(),
                                         r.out.data.data(), r.saved.data(), r.saved.data() + v.c,
                                         v.n, v.c, v.h, v.w, attrs.eps);
            break;
        }
        case OpKind::Mean: {
            arity(1, 1);
            double acc = 0.0;
            for (double v : in[0]->data) acc += v;
            r.out = Tensor::scalar(acc / static_cast<double>(in[0]->size()));
            break;
        }
        case OpKind::LogSoftmax: {
            arity(1, 1);
            const Nchw v = as_nchw(*in[0], kind);
            r.out = Tensor::zeros(in[0]->shape);
            kernels::log_softmax_forward(in[0]->data.data(), r.out.data.data(), v.n, v.c, v.h, v.w);
            break;
        }
    }
    if (!r.out.all_finite())
        throw NumericError(std::string(op_name(kind)) + " produced non-finite values");
    return r;
}

} // namespace

ValueId Tape::apply(OpKind kind, std::span<const ValueId> inputs, const Attrs& attrs) {
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    Node n;
    n.kind = kind;
    n.leaf = false;
    for (ValueId id : inputs) {
        check_id(id);
        in.push_back(&values_[static_cast<size_t>(id.v)]);
        n.inputs.push_back(id.v);
        n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(id.v)].needs_grad;
    }
    n.attrs = attrs;
    FwdResult r = forward_compute(kind, attrs, in);
    n.saved = std::move(r.saved);
    return push(std::move(n), std::move(r.out));
}

ValueId Tape::apply(OpKind kind, std::initializer_list<ValueId> inputs, const Attrs& attrs) {
    return apply(kind, std::span<const ValueId>(inputs.begin(), inputs.size()), attrs);
}

void Tape::replay() {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.leaf) continue;
        std::vector<const Tensor*> in;
        in.reserve(n.inputs.size());
        for (int32_t id : n.inputs) in.push_back(&values_[static_cast<size_t>(id)]);
        FwdResult r = forward_compute(n.kind, n.attrs, in);
        n.saved = std::move(r.saved);
        values_[i] = std::move(r.out);
    }
}

// Convenience builders -------------------------------------------------------

ValueId Tape::matmul(ValueId a, ValueId b) { return apply(OpKind::Matmul, {a, b}); }
ValueId Tape::conv2d(ValueId x, ValueId w, ValueId bias, int stride, int ksize) {
    Attrs a;
    a.stride = stride;
    a.ksize = ksize;
    return apply(OpKind::Conv2d, {x, w, bias}, a);
}
ValueId Tape::conv2d(ValueId x, ValueId w, int stride, int ksize) {
    Attrs a;
    a.stride = stride;
    a.ksize = ksize;
    return apply(OpKind::Conv2d, {x, w}, a);
}
ValueId Tape::relu(ValueId x) { return apply(OpKind::Relu, {x}); }
ValueId Tape::sigmoid(ValueId x) { return apply(OpKind::Sigmoid, {x}); }
ValueId Tape::exp(ValueId x) { return apply(OpKind::Exp, {x}); }
ValueId Tape::add(ValueId a, ValueId b) { return apply(OpKind::Add, {a, b}); }
ValueId Tape::mul(ValueId a, ValueId b) { return apply(OpKind::Mul, {a, b}); }
ValueId Tape::scale(ValueId x, double c) {
    Attrs a;
    a.value = c;
    return apply(OpKind::Scale, {x}, a);
}
ValueId Tape::concat_channels(std::span<const ValueId> xs) { return apply(OpKind::ConcatChannels, xs); }
ValueId Tape::avgpool(ValueId x, int out_h, int out_w) {
    Attrs a;
    a.out_h = out_h;
    a.out_w = out_w;
    return apply(OpKind::AvgPool, {x}, a);
}
ValueId Tape::upsample_nearest(ValueId x, int factor_y, int factor_x) {
    Attrs a;
    a.factor_y = factor_y;
    a.factor_x = factor_x;
    return apply(OpKind::UpsampleNearest, {x}, a);
}
ValueId Tape::bilinear_warp_1d(ValueId right, ValueId disparity) {
    return apply(OpKind::BilinearWarp1d, {right, disparity});
}
ValueId Tape::channelnorm(ValueId x, ValueId gamma, ValueId beta, double eps) {
    Attrs a;
    a.eps = eps;
    return apply(OpKind::ChannelNorm, {x, gamma, beta}, a);
}
ValueId Tape::mean(ValueId x) { return apply(OpKind::Mean, {x}); }
ValueId Tape::log_softmax(ValueId x) { return apply(OpKind::LogSoftmax, {x}); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

Gradients Tape::backward(ValueId root) const {
    check_id(root);
    const Tensor& rv = values_[static_cast<size_t>(root.v)];
    if (rv.size() != 1)
        throw ContractViolation("backward root must be scalar, got " + shape_str(rv.shape));

    const size_t count = nodes_.size();
    std::vector<Tensor> adj(count);
    std::vector<char> has_adj(count, 0);
    adj[static_cast<size_t>(root.v)] = Tensor::scalar(1.0);
    has_adj[static_cast<size_t>(root.v)] = 1;

    auto accum = [&](int32_t id) -> Tensor& {
        const size_t i = static_cast<size_t>(id);
        if (!has_adj[i]) {
            adj[i] = Tensor::zeros(values_[i].shape);
            has_adj[i] = 1;
        }
        return adj[i];
    };
    auto input_needs_grad = [&](const Node& n, size_t slot) {
        return nodes_[static_cast<size_t>(n.inputs[slot])].needs_grad;
    };

    for (int32_t i = root.v; i >= 0; --i) {
        const size_t ui = static_cast<size_t>(i);
        const Node& n = nodes_[ui];
        if (n.leaf || !has_adj[ui] || !n.needs_grad) continue;
        const Tensor& gy = adj[ui];
        const auto inv = [&](size_t slot) -> const Tensor& {
            return values_[static_cast<size_t>(n.inputs[slot])];
        };
        switch (n.kind) {
            case OpKind::Matmul: {
                const Tensor& a = inv(0);
                const Tensor& b = inv(1);
                const int64_t m = a.extent(0), k = a.extent(1), nn = b.extent(1);
                if (input_needs_grad(n, 0)) {
                    Tensor& da = accum(n.inputs[0]);
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t j = 0; j < nn; ++j) {
                            const double g = gy[r * nn + j];
                            if (g == 0.0) continue;
                            for (int64_t l = 0; l < k; ++l) da[r * k + l] += g * b[l * nn + j];
                        }
                }
                if (input_needs_grad(n, 1)) {
                    Tensor& db = accum(n.inputs[1]);
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t l = 0; l < k; ++l) {
                            const double av = a[r * k + l];
                            if (av == 0.0) continue;
                            for (int64_t j = 0; j < nn; ++j) db[l * nn + j] += av * gy[r * nn + j];
                        }
                }
                break;
            }
            case OpKind::Conv2d: {
                const Tensor& x = inv(0);
                const Tensor& w = inv(1);
                const Nchw v = as_nchw(x, n.kind);
                const int64_t k = w.extent(2);
                kernels::ConvDims cd{v.n, v.c, v.h, v.w, w.extent(0), k, n.attrs.stride, 0, 0};
                const int64_t p = k / 2;
                cd.oh = (v.h + 2 * p - k) / n.attrs.stride + 1;
                cd.ow = (v.w + 2 * p - k) / n.attrs.stride + 1;
                if (input_needs_grad(n, 0))
                    kernels::conv2d_backward_input(gy.data.data(), w.data.data(),
                                                   accum(n.inputs[0]).data.data(), cd);
                if (input_needs_grad(n, 1))
                    kernels::conv2d_backward_weight(gy.data.data(), x.data.data(),
                                                    accum(n.inputs[1]).data.data(), cd);
                if (n.inputs.size() == 3 && input_needs_grad(n, 2))
                    kernels::conv2d_backward_bias(gy.data.data(), accum(n.inputs[2]).data.data(), cd);
                break;
            }
            case OpKind::Relu: {
                if (!input_needs_grad(n, 0)) break;
                const Tensor& x = inv(0);
                Tensor& dx = accum(n.inputs[0]);
                for (int64_t j = 0; j < x.size(); ++j)
                    if (x[j] > 0.0) dx[j] += gy[j];
                break;
            }
            case OpKind::Sigmoid: {
                if (!input_needs_grad(n, 0)) break;
                Tensor& dx = accum(n.inputs[0]);
                const Tensor& y = values_[ui];
                for (int64_t j = 0; j < y.size(); ++j) dx[j] += gy[j] * y[j] * (1.0 - y[j]);
                break;
            }
            case OpKind::Exp: {
                if (!input_needs_grad(n, 0)) break;
                Tensor& dx = accum(n.inputs[0]);
                const Tensor& y = values_[ui];
                for (int64_t j = 0; j < y.size(); ++j) dx[j] += gy[j] * y[j];
                break;
            }
            case OpKind::Add: {
                for (size_t s = 0; s < 2; ++s) {
                    if (!input_needs_grad(n, s)) continue;
                    Tensor& d = accum(n.inputs[s]);
                    for (int64_t j = 0; j < d.size(); ++j) d[j] += gy[j];
                }
                break;
            }
            case OpKind::Mul: {
                for (size_t s = 0; s < 2; ++s) {
                    if (!input_needs_grad(n, s)) continue;
                    const Tensor& other = inv(1 - s);
                    Tensor& d = accum(n.inputs[s]);
                    for (int64_t j = 0; j < d.size(); ++j) d[j] += gy[j] * other[j];
                }
                break;
            }
            case OpKind::Scale: {
                if (!input_needs_grad(n, 0)) break;
                Tensor& dx = accum(n.inputs[0]);
                for (int64_t j = 0; j < dx.size(); ++j) dx[j] += gy[j] * n.attrs.value;
                break;
            }
            case OpKind::ConcatChannels: {
                const Nchw v = as_nchw(values_[ui], n.kind);
                const int64_t hw = v.h * v.w;
                for (int64_t nn = 0; nn < v.n; ++nn) {
                    int64_t coff = 0;
                    for (size_t s = 0; s < n.inputs.size(); ++s) {
                        const int64_t c = as_nchw(inv(s), n.kind).c;
                        if (input_needs_grad(n, s)) {
                            Tensor& d = accum(n.inputs[s]);
                            const double* src = gy.data.data() + (nn * v.c + coff) * hw;
                            double* dst = d.data.data() + nn * c * hw;
                            for (int64_t j = 0; j < c * hw; ++j) dst[j] += src[j];
                        }
                        coff += c;
                    }
                }
                break;
            }
            case OpKind::AvgPool: {
                if (!input_needs_grad(n, 0)) break;
                const Nchw v = as_nchw(inv(0), n.kind);
                kernels::avgpool_backward(gy.data.data(), accum(n.inputs[0]).data.data(), v.n, v.c,
                                          v.h, v.w, n.attrs.out_h, n.attrs.out_w);
                break;
            }
            case OpKind::UpsampleNearest: {
                if (!input_needs_grad(n, 0)) break;
                const Nchw v = as_nchw(inv(0), n.kind);
                kernels::upsample_nearest_backward(gy.data.data(), accum(n.inputs[0]).data.data(),
                                                   v.n, v.c, v.h, v.w, n.attrs.factor_y,
                                                   n.attrs.factor_x);
                break;
            }
            case OpKind::BilinearWarp1d: {
                const Nchw v = as_nchw(inv(0), n.kind);
                double* dr = input_needs_grad(n, 0) ? accum(n.inputs[0]).data.data() : nullptr;
                double* dd = input_needs_grad(n, 1) ? accum(n.inputs[1]).data.data() : nullptr;
                if (dr || dd)
                    kernels::warp1d_backward(inv(0).data.data(), inv(1).data.data(), gy.data.data(),
                                             dr, dd, v.n, v.c, v.h, v.w);
                break;
            }
            case OpKind::ChannelNorm: {
                const Nchw v = as_nchw(inv(0), n.kind);
                double* dx = input_needs_grad(n, 0) ? accum(n.inputs[0]).data.data() : nullptr;
                double* dg = input_needs_grad(n, 1) ? accum(n.inputs[1]).data.data() : nullptr;
                double* db = input_needs_grad(n, 2) ? accum(n.inputs[2]).data.data() : nullptr;
                if (dx || dg || db)
                    kernels::channelnorm_backward(inv(0).data.data(), inv(1).data.data(),
                                                  gy.data.data(), n.saved.data(),
                                                  n.saved.data() + v.c, dx, dg, db, v.n, v.c, v.h,
                                                  v.w);
                break;
            }
            case OpKind::Mean: {
                if (!input_needs_grad(n, 0)) break;
                Tensor& dx = accum(n.inputs[0]);
                const double g = gy[0] / static_cast<double>(dx.size());
                for (int64_t j = 0; j < dx.size(); ++j) dx[j] += g;
                break;
            }
            case OpKind::LogSoftmax: {
                if (!input_needs_grad(n, 0)) break;
                const Nchw v = as_nchw(inv(0), n.kind);
                kernels::log_softmax_backward(values_[ui].data.data(), gy.data.data(),
                                              accum(n.inputs[0]).data.data(), v.n, v.c, v.h, v.w);
                break;
            }
        }
    }

    const int64_t total = registry_ ? registry_->total_size() : 0;
    Gradients flat(static_cast<size_t>(total), 0.0);
    for (size_t i = 0; i < count; ++i) {
        const Node& n = nodes_[i];
        if (n.param_index < 0 || !has_adj[i]) continue;
        const int64_t off = registry_->entry(n.param_index).offset;
        const Tensor& g = adj[i];
        for (int64_t j = 0; j < g.size(); ++j) flat[static_cast<size_t>(off + j)] += g[j];
    }
    for (double v : flat)
        if (!std::isfinite(v)) throw NumericError("backward produced non-finite gradient");
    return flat;
}

} // namespace gbgn
