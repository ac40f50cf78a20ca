#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace advbench {

// Dense row-major float tensor. Values are finite after every public
// operation; constructors taking external data enforce it.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::optional<std::vector<float>> grad;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, float value);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<float> values);

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);
bool all_finite(std::span<const float> values);

using NodeId = std::size_t;

enum class Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    ScalarMul,
    BiasAdd,
    MatMul,
    Conv2dValid,
    Pad2d,
    MaxPool2x2,
    Relu,
    Sigmoid,
    Softplus,
    Clamp,
    SumReduce,
    MeanReduce,
    Reshape,
};

// Static compute graph: build once, then rebind leaves and run
// forward/backward pairs. Single-threaded while a pair is in flight;
// distinct instances may run in parallel over shared read-only tensors.
class Graph {
   public:
    using Bindings = std::unordered_map<std::string, const Tensor*>;

    NodeId leaf(std::string name, std::vector<std::size_t> shape, bool requires_grad);
    NodeId constant(std::string name, Tensor value);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scalar_mul(NodeId a, float s);
    // x: [rows x cols], bias: [cols]; added to every row
    NodeId bias_add(NodeId x, NodeId bias);
    NodeId matmul(NodeId a, NodeId b);
    // x: [N,C,H,W], w: [O,C,kh,kw]; stride 1, valid padding
    NodeId conv2d_valid(NodeId x, NodeId w);
    NodeId pad2d(NodeId x, std::size_t pad);
    NodeId maxpool2x2(NodeId x);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId softplus(NodeId x);
    NodeId clamp(NodeId x, float lo, float hi);
    NodeId sum_reduce(NodeId x);
    NodeId mean_reduce(NodeId x);
    NodeId reshape(NodeId x, std::vector<std::size_t> shape);

    void set_output(NodeId id);
    NodeId output() const;

    const std::vector<std::size_t>& shape_of(NodeId id) const;

    // Evaluates every node; bindings must cover all non-constant leaves and
    // match their declared shapes. Activations are retained for backward.
    const Tensor& forward(const Bindings& bindings);

    // Reverse pass from the output node. Returns gradients for every leaf
    // declared with requires_grad=true, keyed by leaf name.
    std::unordered_map<std::string, Tensor> backward(const Tensor& seed);

    const Tensor& value_of(NodeId id) const;
    std::size_t node_count() const { return nodes_.size(); }

   private:
    struct Node {
        Op op = Op::Leaf;
        std::string label;
        std::vector<NodeId> inputs;
        std::vector<std::size_t> shape;
        bool requires_grad = false;
        float scalar = 0.f;
        float lo = 0.f, hi = 0.f;
        std::size_t pad = 0;
        Tensor value;
        std::vector<float> grad;
        std::vector<std::uint32_t> argmax;  // maxpool routing
        std::vector<float> cols;            // conv im2col cache
    };

    NodeId push(Node node);
    Node& at(NodeId id);
    const Node& at(NodeId id) const;
    [[noreturn]] void fail(const Node& node, const std::string& message) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> leaf_ids_;
    std::optional<NodeId> output_;
    bool forward_done_ = false;
};

// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / (2h) per
// coordinate. Independent of the graph machinery; used as the gradient
// oracle in tests.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h);

}  // namespace advbench
