#pragma once

// Tape-free reverse-mode autodiff: every op result holds shared pointers to
// its inputs and a closure that pushes its gradient back into them. Graphs
// are released when the last Var referencing the root goes away.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffmark/core/tensor.hpp"

namespace diffmark::ag {

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape);
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    int dim(int i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    T item() const { return node_->value.data.at(0); }

    bool has_grad() const { return !node_->grad.empty(); }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Builds a result Var; records inputs/closure only when grad is enabled and
// some input requires grad.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward, const char* op) {
    Var<T> out(std::move(value));
    out.node()->op = op;
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node()->requires_grad = true;
    out.node()->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node()->inputs.push_back(in.node_ptr());
    out.node()->backward = std::move(backward);
    return out;
}

// Constant copy of `v` with no history.
template <typename T>
Var<T> detach(const Var<T>& v) {
    return Var<T>(v.value(), false);
}

template <typename T>
void backward(const Var<T>& root) {
    if (root.size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->inputs.size()) {
            Node<T>* child = n->inputs[i++].get();
            if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer().data[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

}  // namespace diffmark::ag
