#include "qsm/nn/tensor.hpp"

#include <cmath>
#include <sstream>

#include "qsm/errors.hpp"

namespace qsm::nn {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_string(const Shape& s) {
    std::ostringstream o;
    o << '[';
    for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
    o << ']';
    return o.str();
}

std::span<double> Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

namespace {

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != values.size())
        throw InputError("tensor shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

} // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), true));
}

double Tensor::item() const {
    if (size() != 1) throw InputError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> parents, BackwardFn backward) {
    return record(std::move(shape), std::move(values), std::vector<Tensor>(parents), std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents, BackwardFn backward) {
    for (double v : values)
        if (!std::isfinite(v)) throw NumericalError("non-finite value produced by tensor op");
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    auto node = make_node(std::move(shape), std::move(values), needs);
    if (needs) node->backward = std::move(backward);
    nodes_.push_back(node);
    return Tensor(node);
}

void Tape::backward(const Tensor& output) {
    if (output.size() != 1) throw InputError("backward() needs a scalar output, got " + shape_string(output.shape()));
    if (!output.requires_grad()) return;
    output.node()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.grad.empty() || !n.backward) continue;
        n.backward(n);
    }
}

Tensor detach(const Tensor& t) { return Tensor::constant(t.shape(), std::vector<double>(t.values().begin(), t.values().end())); }

} // namespace qsm::nn
