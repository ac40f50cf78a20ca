#include "advbench/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "advbench/kernels.hpp"

namespace advbench {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t p = 1;
    for (std::size_t d : shape) p *= d;
    return p;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool all_finite(std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
    }
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    check_shape(shape);
    Tensor t;
    t.data.assign(shape_product(shape), 0.f);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, float value) {
    if (!std::isfinite(value)) throw std::invalid_argument("tensor fill value must be finite");
    Tensor t = zeros(std::move(shape));
    for (float& v : t.data) v = value;
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<float> values) {
    check_shape(shape);
    if (shape_product(shape) != values.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_to_string(shape));
    }
    if (!all_finite(values)) throw std::invalid_argument("tensor data contains non-finite values");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar_mul";
        case Op::BiasAdd: return "bias_add";
        case Op::MatMul: return "matmul";
        case Op::Conv2dValid: return "conv2d";
        case Op::Pad2d: return "pad2d";
        case Op::MaxPool2x2: return "maxpool2x2";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softplus: return "softplus";
        case Op::Clamp: return "clamp";
        case Op::SumReduce: return "sum";
        case Op::MeanReduce: return "mean";
        case Op::Reshape: return "reshape";
    }
    return "?";
}

}  // namespace

void Graph::fail(const Node& node, const std::string& message) const {
    throw std::runtime_error("graph error at " + node.label + ": " + message);
}

Graph::Node& Graph::at(NodeId id) { return nodes_.at(id); }
const Graph::Node& Graph::at(NodeId id) const { return nodes_.at(id); }

NodeId Graph::push(Node node) {
    if (node.label.empty()) {
        node.label = std::string(op_name(node.op)) + "#" + std::to_string(nodes_.size());
    }
    for (NodeId in : node.inputs) {
        if (in >= nodes_.size()) throw std::runtime_error("graph input id out of range");
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    nodes_.push_back(std::move(node));
    forward_done_ = false;
    return nodes_.size() - 1;
}

NodeId Graph::leaf(std::string name, std::vector<std::size_t> shape, bool requires_grad) {
    check_shape(shape);
    if (name.empty()) throw std::invalid_argument("leaf name must be non-empty");
    if (leaf_ids_.count(name)) throw std::invalid_argument("duplicate leaf name: " + name);
    Node n;
    n.op = Op::Leaf;
    n.label = name;
    n.shape = std::move(shape);
    n.requires_grad = requires_grad;
    NodeId id = push(std::move(n));
    leaf_ids_.emplace(std::move(name), id);
    return id;
}

NodeId Graph::constant(std::string name, Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.label = name.empty() ? "" : name;
    n.shape = value.shape;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.inputs = {a, b};
    if (at(a).shape != at(b).shape) {
        throw std::runtime_error("graph error at add#" + std::to_string(nodes_.size()) +
                                 ": shape mismatch " + shape_to_string(at(a).shape) + " vs " +
                                 shape_to_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Sub;
    n.inputs = {a, b};
    if (at(a).shape != at(b).shape) {
        throw std::runtime_error("graph error at sub#" + std::to_string(nodes_.size()) +
                                 ": shape mismatch " + shape_to_string(at(a).shape) + " vs " +
                                 shape_to_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Mul;
    n.inputs = {a, b};
    if (at(a).shape != at(b).shape) {
        throw std::runtime_error("graph error at mul#" + std::to_string(nodes_.size()) +
                                 ": shape mismatch " + shape_to_string(at(a).shape) + " vs " +
                                 shape_to_string(at(b).shape));
    }
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeId Graph::scalar_mul(NodeId a, float s) {
    if (!std::isfinite(s)) throw std::invalid_argument("scalar_mul factor must be finite");
    Node n;
    n.op = Op::ScalarMul;
    n.inputs = {a};
    n.scalar = s;
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeId Graph::bias_add(NodeId x, NodeId bias) {
    const auto& xs = at(x).shape;
    const auto& bs = at(bias).shape;
    if (bs.size() != 1 || bs[0] != xs.back()) {
        throw std::runtime_error("graph error at bias_add#" + std::to_string(nodes_.size()) +
                                 ": bias shape " + shape_to_string(bs) +
                                 " does not match last dimension of " + shape_to_string(xs));
    }
    Node n;
    n.op = Op::BiasAdd;
    n.inputs = {x, bias};
    n.shape = xs;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const auto& as = at(a).shape;
    const auto& bs = at(b).shape;
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
        throw std::runtime_error("graph error at matmul#" + std::to_string(nodes_.size()) +
                                 ": incompatible shapes " + shape_to_string(as) + " x " +
                                 shape_to_string(bs));
    }
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a, b};
    n.shape = {as[0], bs[1]};
    return push(std::move(n));
}

NodeId Graph::conv2d_valid(NodeId x, NodeId w) {
    const auto& xs = at(x).shape;
    const auto& ws = at(w).shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] > xs[2] || ws[3] > xs[3]) {
        throw std::runtime_error("graph error at conv2d#" + std::to_string(nodes_.size()) +
                                 ": incompatible shapes " + shape_to_string(xs) + " * " +
                                 shape_to_string(ws));
    }
    Node n;
    n.op = Op::Conv2dValid;
    n.inputs = {x, w};
    n.shape = {xs[0], ws[0], xs[2] - ws[2] + 1, xs[3] - ws[3] + 1};
    return push(std::move(n));
}

NodeId Graph::pad2d(NodeId x, std::size_t pad) {
    const auto& xs = at(x).shape;
    if (xs.size() != 4) {
        throw std::runtime_error("graph error at pad2d#" + std::to_string(nodes_.size()) +
                                 ": expected rank-4 input, got " + shape_to_string(xs));
    }
    Node n;
    n.op = Op::Pad2d;
    n.inputs = {x};
    n.pad = pad;
    n.shape = {xs[0], xs[1], xs[2] + 2 * pad, xs[3] + 2 * pad};
    return push(std::move(n));
}

NodeId Graph::maxpool2x2(NodeId x) {
    const auto& xs = at(x).shape;
    if (xs.size() != 4 || xs[2] < 2 || xs[3] < 2) {
        throw std::runtime_error("graph error at maxpool2x2#" + std::to_string(nodes_.size()) +
                                 ": expected rank-4 input with H,W >= 2, got " +
                                 shape_to_string(xs));
    }
    Node n;
    n.op = Op::MaxPool2x2;
    n.inputs = {x};
    n.shape = {xs[0], xs[1], xs[2] / 2, xs[3] / 2};
    return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
    Node n;
    n.op = Op::Relu;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
    Node n;
    n.op = Op::Sigmoid;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
}

NodeId Graph::softplus(NodeId x) {
    Node n;
    n.op = Op::Softplus;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
}

NodeId Graph::clamp(NodeId x, float lo, float hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp bounds must satisfy lo <= hi");
    Node n;
    n.op = Op::Clamp;
    n.inputs = {x};
    n.lo = lo;
    n.hi = hi;
    n.shape = at(x).shape;
    return push(std::move(n));
}

NodeId Graph::sum_reduce(NodeId x) {
    Node n;
    n.op = Op::SumReduce;
    n.inputs = {x};
    n.shape = {1};
    return push(std::move(n));
}

NodeId Graph::mean_reduce(NodeId x) {
    Node n;
    n.op = Op::MeanReduce;
    n.inputs = {x};
    n.shape = {1};
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, std::vector<std::size_t> shape) {
    check_shape(shape);
    if (shape_product(shape) != shape_product(at(x).shape)) {
        throw std::runtime_error("graph error at reshape#" + std::to_string(nodes_.size()) +
                                 ": cannot reshape " + shape_to_string(at(x).shape) + " to " +
                                 shape_to_string(shape));
    }
    Node n;
    n.op = Op::Reshape;
    n.inputs = {x};
    n.shape = std::move(shape);
    return push(std::move(n));
}

void Graph::set_output(NodeId id) {
    if (id >= nodes_.size()) throw std::invalid_argument("output id out of range");
    output_ = id;
}

NodeId Graph::output() const {
    if (output_) return *output_;
    if (nodes_.empty()) throw std::runtime_error("graph is empty");
    return nodes_.size() - 1;
}

const std::vector<std::size_t>& Graph::shape_of(NodeId id) const { return at(id).shape; }

const Tensor& Graph::value_of(NodeId id) const {
    if (!forward_done_) throw std::runtime_error("graph values not available before forward");
    return at(id).value;
}

namespace {

// cols layout: [C*kh*kw rows x OH*OW columns], row-major
void im2col(const float* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, float* cols) {
    const std::size_t oh = h - kh + 1;
    const std::size_t ow = w - kw + 1;
    float* dst = cols;
    for (std::size_t c = 0; c < c_in; ++c) {
        const float* plane = x + c * h * w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const float* src = plane + (oy + ky) * w + kx;
                    for (std::size_t ox = 0; ox < ow; ++ox) *dst++ = src[ox];
                }
            }
        }
    }
}

void col2im_add(const float* cols, std::size_t c_in, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, float* x_grad) {
    const std::size_t oh = h - kh + 1;
    const std::size_t ow = w - kw + 1;
    const float* src = cols;
    for (std::size_t c = 0; c < c_in; ++c) {
        float* plane = x_grad + c * h * w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    float* dst = plane + (oy + ky) * w + kx;
                    for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] += src[ox];
                    src += ow;
                }
            }
        }
    }
}

}  // namespace

const Tensor& Graph::forward(const Bindings& bindings) {
    const auto& k = kernels::active();
    for (auto& node : nodes_) {
        switch (node.op) {
            case Op::Leaf: {
                auto it = bindings.find(node.label);
                if (it == bindings.end() || it->second == nullptr) {
                    fail(node, "no binding provided for leaf");
                }
                const Tensor& bound = *it->second;
                if (bound.shape != node.shape) {
                    fail(node, "bound shape " + bound.shape_str() + " does not match declared " +
                                   shape_to_string(node.shape));
                }
                if (!all_finite(bound.data)) fail(node, "non-finite input");
                node.value = bound;
                break;
            }
            case Op::Constant:
                break;
            case Op::Add: {
                const auto& a = at(node.inputs[0]).value;
                const auto& b = at(node.inputs[1]).value;
                node.value.shape = node.shape;
                node.value.data.resize(a.size());
                k.vadd(a.data.data(), b.data.data(), node.value.data.data(), a.size());
                break;
            }
            case Op::Sub: {
                const auto& a = at(node.inputs[0]).value;
                const auto& b = at(node.inputs[1]).value;
                node.value.shape = node.shape;
                node.value.data.resize(a.size());
                k.vsub(a.data.data(), b.data.data(), node.value.data.data(), a.size());
                break;
            }
            case Op::Mul: {
                const auto& a = at(node.inputs[0]).value;
                const auto& b = at(node.inputs[1]).value;
                node.value.shape = node.shape;
                node.value.data.resize(a.size());
                k.vmul(a.data.data(), b.data.data(), node.value.data.data(), a.size());
                break;
            }
            case Op::ScalarMul: {
                const auto& a = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.resize(a.size());
                k.vscale(a.data.data(), node.scalar, node.value.data.data(), a.size());
                break;
            }
            case Op::BiasAdd: {
                const auto& a = at(node.inputs[0]).value;
                const auto& b = at(node.inputs[1]).value;
                const std::size_t cols = node.shape.back();
                const std::size_t rows = a.size() / cols;
                node.value.shape = node.shape;
                node.value.data.resize(a.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    k.vadd(a.data.data() + r * cols, b.data.data(),
                           node.value.data.data() + r * cols, cols);
                }
                break;
            }
            case Op::MatMul: {
                const auto& a = at(node.inputs[0]);
                const auto& b = at(node.inputs[1]);
                node.value.shape = node.shape;
                node.value.data.resize(node.shape[0] * node.shape[1]);
                k.matmul(a.value.data.data(), b.value.data.data(), node.value.data.data(),
                         a.shape[0], a.shape[1], b.shape[1]);
                break;
            }
            case Op::Conv2dValid: {
                const auto& x = at(node.inputs[0]);
                const auto& w = at(node.inputs[1]);
                const std::size_t batch = x.shape[0], cin = x.shape[1], h = x.shape[2],
                                  wd = x.shape[3];
                const std::size_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
                const std::size_t oh = node.shape[2], ow = node.shape[3];
                const std::size_t ckk = cin * kh * kw;
                const std::size_t ohw = oh * ow;
                node.value.shape = node.shape;
                node.value.data.resize(batch * cout * ohw);
                node.cols.resize(batch * ckk * ohw);
                for (std::size_t n = 0; n < batch; ++n) {
                    float* cols = node.cols.data() + n * ckk * ohw;
                    im2col(x.value.data.data() + n * cin * h * wd, cin, h, wd, kh, kw, cols);
                    k.matmul(w.value.data.data(), cols, node.value.data.data() + n * cout * ohw,
                             cout, ckk, ohw);
                }
                break;
            }
            case Op::Pad2d: {
                const auto& x = at(node.inputs[0]);
                const std::size_t batch = x.shape[0], c = x.shape[1], h = x.shape[2],
                                  w = x.shape[3];
                const std::size_t p = node.pad, hp = h + 2 * p, wp = w + 2 * p;
                node.value.shape = node.shape;
                node.value.data.assign(batch * c * hp * wp, 0.f);
                for (std::size_t nc = 0; nc < batch * c; ++nc) {
                    const float* src = x.value.data.data() + nc * h * w;
                    float* dst = node.value.data.data() + nc * hp * wp;
                    for (std::size_t y = 0; y < h; ++y) {
                        float* row = dst + (y + p) * wp + p;
                        for (std::size_t xcol = 0; xcol < w; ++xcol) row[xcol] = src[y * w + xcol];
                    }
                }
                break;
            }
            case Op::MaxPool2x2: {
                const auto& x = at(node.inputs[0]);
                const std::size_t batch = x.shape[0], c = x.shape[1], h = x.shape[2],
                                  w = x.shape[3];
                const std::size_t oh = node.shape[2], ow = node.shape[3];
                node.value.shape = node.shape;
                node.value.data.resize(batch * c * oh * ow);
                node.argmax.resize(node.value.data.size());
                const float* src = x.value.data.data();
                float* dst = node.value.data.data();
                std::uint32_t* arg = node.argmax.data();
                std::size_t oi = 0;
                for (std::size_t nc = 0; nc < batch * c; ++nc) {
                    const std::size_t base = nc * h * w;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            std::size_t best = base + (2 * oy) * w + 2 * ox;
                            float bv = src[best];
                            // scan in flat order; ties keep the lowest index
                            const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                            for (std::size_t ci = 0; ci < 3; ++ci) {
                                if (src[cand[ci]] > bv) {
                                    bv = src[cand[ci]];
                                    best = cand[ci];
                                }
                            }
                            dst[oi] = bv;
                            arg[oi] = static_cast<std::uint32_t>(best);
                            ++oi;
                        }
                    }
                }
                break;
            }
            case Op::Relu: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.resize(x.size());
                k.relu_fwd(x.data.data(), node.value.data.data(), x.size());
                break;
            }
            case Op::Sigmoid: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.resize(x.size());
                kernels::sigmoid_fwd(x.data.data(), node.value.data.data(), x.size());
                break;
            }
            case Op::Softplus: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.resize(x.size());
                kernels::softplus_fwd(x.data.data(), node.value.data.data(), x.size());
                break;
            }
            case Op::Clamp: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.resize(x.size());
                k.clamp_fwd(x.data.data(), node.lo, node.hi, node.value.data.data(), x.size());
                break;
            }
            case Op::SumReduce: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.assign(
                    1, static_cast<float>(kernels::reduce_sum_f64(x.data.data(), x.size())));
                break;
            }
            case Op::MeanReduce: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data.assign(
                    1, static_cast<float>(kernels::reduce_sum_f64(x.data.data(), x.size()) /
                                          static_cast<double>(x.size())));
                break;
            }
            case Op::Reshape: {
                const auto& x = at(node.inputs[0]).value;
                node.value.shape = node.shape;
                node.value.data = x.data;
                break;
            }
        }
        if (node.op != Op::Constant && !all_finite(node.value.data)) {
            fail(node, "non-finite values produced");
        }
    }
    forward_done_ = true;
    return at(output()).value;
}

std::unordered_map<std::string, Tensor> Graph::backward(const Tensor& seed) {
    if (!forward_done_) throw std::runtime_error("backward called before forward");
    const NodeId out = output();
    if (seed.shape != at(out).shape) {
        throw std::runtime_error("backward seed shape " + seed.shape_str() +
                                 " does not match output shape " +
                                 shape_to_string(at(out).shape));
    }
    const auto& k = kernels::active();
    for (auto& node : nodes_) {
        if (node.requires_grad) node.grad.assign(shape_product(node.shape), 0.f);
    }
    if (!at(out).requires_grad) {
        // nothing marked below the output: still a valid (empty) result
        std::unordered_map<std::string, Tensor> empty;
        return empty;
    }
    at(out).grad = seed.data;

    std::vector<float> scratch;
    for (std::size_t idx = out + 1; idx-- > 0;) {
        Node& node = nodes_[idx];
        if (!node.requires_grad || node.grad.empty()) continue;
        const float* g = node.grad.data();
        const std::size_t gn = node.grad.size();
        switch (node.op) {
            case Op::Leaf:
            case Op::Constant:
                break;
            case Op::Add: {
                for (int s = 0; s < 2; ++s) {
                    Node& in = at(node.inputs[s]);
                    if (in.requires_grad) k.vaxpy(g, 1.f, in.grad.data(), gn);
                }
                break;
            }
            case Op::Sub: {
                Node& a = at(node.inputs[0]);
                Node& b = at(node.inputs[1]);
                if (a.requires_grad) k.vaxpy(g, 1.f, a.grad.data(), gn);
                if (b.requires_grad) k.vaxpy(g, -1.f, b.grad.data(), gn);
                break;
            }
            case Op::Mul: {
                Node& a = at(node.inputs[0]);
                Node& b = at(node.inputs[1]);
                if (a.requires_grad) k.vacc_mul(g, b.value.data.data(), a.grad.data(), gn);
                if (b.requires_grad) k.vacc_mul(g, a.value.data.data(), b.grad.data(), gn);
                break;
            }
            case Op::ScalarMul: {
                Node& a = at(node.inputs[0]);
                if (a.requires_grad) k.vaxpy(g, node.scalar, a.grad.data(), gn);
                break;
            }
            case Op::BiasAdd: {
                Node& a = at(node.inputs[0]);
                Node& b = at(node.inputs[1]);
                const std::size_t cols = node.shape.back();
                const std::size_t rows = gn / cols;
                if (a.requires_grad) k.vaxpy(g, 1.f, a.grad.data(), gn);
                if (b.requires_grad) {
                    std::vector<double> acc(cols, 0.0);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const float* grow = g + r * cols;
                        for (std::size_t j = 0; j < cols; ++j) {
                            acc[j] += static_cast<double>(grow[j]);
                        }
                    }
                    for (std::size_t j = 0; j < cols; ++j) {
                        b.grad[j] += static_cast<float>(acc[j]);
                    }
                }
                break;
            }
            case Op::MatMul: {
                Node& a = at(node.inputs[0]);
                Node& b = at(node.inputs[1]);
                const std::size_t m = a.shape[0], kk = a.shape[1], nn = b.shape[1];
                if (a.requires_grad) {
                    // dA = g * B^T
                    scratch.resize(kk * nn + m * kk);
                    float* bt = scratch.data();
                    float* da = scratch.data() + kk * nn;
                    kernels::transpose(b.value.data.data(), kk, nn, bt);
                    k.matmul(g, bt, da, m, nn, kk);
                    k.vaxpy(da, 1.f, a.grad.data(), m * kk);
                }
                if (b.requires_grad) {
                    // dB = A^T * g
                    scratch.resize(m * kk + kk * nn);
                    float* atr = scratch.data();
                    float* db = scratch.data() + m * kk;
                    kernels::transpose(a.value.data.data(), m, kk, atr);
                    k.matmul(atr, g, db, kk, m, nn);
                    k.vaxpy(db, 1.f, b.grad.data(), kk * nn);
                }
                break;
            }
            case Op::Conv2dValid: {
                Node& x = at(node.inputs[0]);
                Node& w = at(node.inputs[1]);
                const std::size_t batch = x.shape[0], cin = x.shape[1], h = x.shape[2],
                                  wd = x.shape[3];
                const std::size_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
                const std::size_t oh = node.shape[2], ow = node.shape[3];
                const std::size_t ckk = cin * kh * kw;
                const std::size_t ohw = oh * ow;
                if (w.requires_grad) {
                    scratch.resize(ohw * ckk + cout * ckk);
                    float* colst = scratch.data();
                    float* dw = scratch.data() + ohw * ckk;
                    for (std::size_t n = 0; n < batch; ++n) {
                        kernels::transpose(node.cols.data() + n * ckk * ohw, ckk, ohw, colst);
                        k.matmul(g + n * cout * ohw, colst, dw, cout, ohw, ckk);
                        k.vaxpy(dw, 1.f, w.grad.data(), cout * ckk);
                    }
                }
                if (x.requires_grad) {
                    scratch.resize(ckk * cout + ckk * ohw);
                    float* wt = scratch.data();
                    float* dcols = scratch.data() + ckk * cout;
                    kernels::transpose(w.value.data.data(), cout, ckk, wt);
                    for (std::size_t n = 0; n < batch; ++n) {
                        k.matmul(wt, g + n * cout * ohw, dcols, ckk, cout, ohw);
                        col2im_add(dcols, cin, h, wd, kh, kw, x.grad.data() + n * cin * h * wd);
                    }
                }
                break;
            }
            case Op::Pad2d: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                const std::size_t batch = x.shape[0], c = x.shape[1], h = x.shape[2],
                                  w = x.shape[3];
                const std::size_t p = node.pad, hp = h + 2 * p, wp = w + 2 * p;
                for (std::size_t nc = 0; nc < batch * c; ++nc) {
                    const float* gsrc = g + nc * hp * wp;
                    float* dst = x.grad.data() + nc * h * w;
                    for (std::size_t y = 0; y < h; ++y) {
                        const float* row = gsrc + (y + p) * wp + p;
                        for (std::size_t xcol = 0; xcol < w; ++xcol) dst[y * w + xcol] += row[xcol];
                    }
                }
                break;
            }
            case Op::MaxPool2x2: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                for (std::size_t i = 0; i < gn; ++i) {
                    x.grad[node.argmax[i]] += g[i];
                }
                break;
            }
            case Op::Relu: {
                Node& x = at(node.inputs[0]);
                if (x.requires_grad) {
                    k.relu_bwd(x.value.data.data(), g, x.grad.data(), gn);
                }
                break;
            }
            case Op::Sigmoid: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                const float* s = node.value.data.data();
                for (std::size_t i = 0; i < gn; ++i) {
                    x.grad[i] += g[i] * s[i] * (1.f - s[i]);
                }
                break;
            }
            case Op::Softplus: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                const float* xv = x.value.data.data();
                for (std::size_t i = 0; i < gn; ++i) {
                    x.grad[i] += g[i] * kernels::sigmoid(xv[i]);
                }
                break;
            }
            case Op::Clamp: {
                Node& x = at(node.inputs[0]);
                if (x.requires_grad) {
                    k.clamp_bwd(x.value.data.data(), node.lo, node.hi, g, x.grad.data(), gn);
                }
                break;
            }
            case Op::SumReduce: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                const float gv = g[0];
                for (float& xg : x.grad) xg += gv;
                break;
            }
            case Op::MeanReduce: {
                Node& x = at(node.inputs[0]);
                if (!x.requires_grad) break;
                const float gv = static_cast<float>(static_cast<double>(g[0]) /
                                                    static_cast<double>(x.grad.size()));
                for (float& xg : x.grad) xg += gv;
                break;
            }
            case Op::Reshape: {
                Node& x = at(node.inputs[0]);
                if (x.requires_grad) k.vaxpy(g, 1.f, x.grad.data(), gn);
                break;
            }
        }
    }

    std::unordered_map<std::string, Tensor> result;
    for (const auto& [name, id] : leaf_ids_) {
        const Node& node = nodes_[id];
        if (!node.requires_grad) continue;
        if (!all_finite(node.grad)) fail(node, "non-finite gradient produced");
        Tensor t;
        t.shape = node.shape;
        t.data = node.grad;
        result.emplace(name, std::move(t));
    }
    return result;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
    Tensor grad = Tensor::zeros(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float orig = probe.data[i];
        const float xp = static_cast<float>(orig + h);
        const float xm = static_cast<float>(orig - h);
        probe.data[i] = xp;
        const double fp = f(probe);
        probe.data[i] = xm;
        const double fm = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite difference: non-finite function value at coordinate " +
                                     std::to_string(i));
        }
        // divide by the step that was actually representable in float
        grad.data[i] = static_cast<float>((fp - fm) /
                                          (static_cast<double>(xp) - static_cast<double>(xm)));
    }
    return grad;
}

}  // namespace advbench
