#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a Node holding values and an (optional) gradient buffer.
// Operations record their output nodes on a Tape in creation order, which is a topological
// order of the graph; Tape::backward walks it once in reverse. Parameters are leaf nodes
// that live outside any tape and accumulate gradients across passes until cleared.
//
// Activations use shape {channels, nx, ny, nz} with x fastest, matching RealVolume.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace qsm::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_string(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until something flows into it
    bool requires_grad = false;
    // Propagates this node's grad into its parents.
    std::function<void(const Node&)> backward;

    std::span<double> grad_buffer(); // allocates zero-filled on first use
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor zeros(Shape shape);
    // Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t channels() const { return node_->shape.at(0); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    double item() const;

    // Gradient; all zeros if nothing has flowed in yet.
    std::vector<double> grad() const;
    void zero_grad() { node_->grad.clear(); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    friend class Tape;
    std::shared_ptr<Node> node_;
};

// Records one forward pass. Confined to a single thread.
class Tape {
public:
    using BackwardFn = std::function<void(const Node& self)>;

    // Creates an output node. If no parent requires grad, the node is a constant and
    // `backward` is dropped.
    Tensor record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> parents, BackwardFn backward);
    Tensor record(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents, BackwardFn backward);

    // Seeds d(output)/d(output) = 1 (output must hold one element) and back-propagates.
    void backward(const Tensor& output);

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::shared_ptr<Node>> nodes_;
};

// Copy of t's values that does not propagate gradients.
Tensor detach(const Tensor& t);

} // namespace qsm::nn
