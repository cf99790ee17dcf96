#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "stats/tensor.hpp"

namespace stats::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of a dynamically built computation graph. The recorded
/// backward rule reads this node's grad and accumulates into the parents'.
struct Node {
    Tensor value;
    Tensor grad;  // same shape, zeros; accumulated (+=) by backward passes
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    ~Node();  // iterative teardown; long chains must not recurse
};

/// Value-semantics handle to a graph node. Copies share the node.
class Value {
public:
    Value() = default;

    /// Leaf with requires_grad = true (a trainable tensor).
    static Value param(Tensor t);
    /// Leaf with requires_grad = false (an input or fixed constant).
    static Value constant(Tensor t);
    static Value scalar_constant(double v) { return constant(Tensor::scalar(v)); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& val() const { return node_->value; }
    Tensor& val_mut() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad_mut() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    double item() const { return node_->value.item(); }

    void zero_grad() { node_->grad.fill(0.0); }

    const NodePtr& node() const { return node_; }
    static Value from_node(NodePtr n) {
        Value v;
        v.node_ = std::move(n);
        return v;
    }

private:
    NodePtr node_;
};

// ---- elementwise and linear ops -------------------------------------------
// Broadcasting is limited to (a) a rank-0 scalar against anything and
// (b) a trailing vector against a rank-2 matrix whose row length matches.

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value neg(const Value& a);

/// (m,k)x(k,n) -> (m,n), or (m,k)x(k) -> (m).
Value matmul(const Value& a, const Value& b);
/// Inner product of two equal-length vectors -> scalar.
Value dot(const Value& a, const Value& b);

Value tanh(const Value& a);
Value sigmoid(const Value& a);
/// Overflow-safe softplus: max(z,0) + log1p(exp(-|z|)).
Value softplus(const Value& a);
/// log(max(x, floor)); the clamp blocks the gradient where x < floor.
Value log_clamped(const Value& a, double floor);

/// Sum of all entries -> scalar.
Value sum(const Value& a);
/// Mean of all entries -> scalar.
Value mean(const Value& a);

/// Concatenation of rank-0/rank-1 values into one vector.
Value concat(std::span<const Value> parts);
/// Entry i of a vector -> scalar.
Value pick(const Value& v, std::size_t i);
/// Row r of a rank-2 matrix -> vector.
Value pick_row(const Value& m, std::size_t r);

/// sum_i weights[i] * items[i] for equal-shaped vector items; weights is a
/// vector of matching length.
Value weighted_sum(const Value& weights, std::span<const Value> items);
/// Coordinate-wise maximum of equal-shaped vectors; gradient flows to the
/// first operand attaining the max in each coordinate.
Value vmax(std::span<const Value> items);

/// Numerically stable softmax along `axis` with a temperature:
/// exp((z - max z)/temperature), normalized. Rank 1 (axis 0) or rank 2.
Value softmax(const Value& z, std::size_t axis, double temperature);
inline Value softmax(const Value& z, double temperature = 1.0) {
    return softmax(z, 0, temperature);
}

// ---- graph-level operations ------------------------------------------------

/// Reverse-mode sweep from a scalar root. Every reachable requires_grad
/// node receives its partial derivative; repeated calls without zeroing
/// accumulate. Visits each reachable node exactly once, in reverse
/// topological order.
void backward(const Value& root);

void zero_grads(std::span<Value> params);
void zero_grads(std::span<const Value> params);

// ---- gradient verification --------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
};

/// Compares reverse-mode gradients of `f` (rebuilt per call from the current
/// parameter tensors) against central finite differences, entry by entry.
/// Error is relative with an absolute floor of 1e-8: deviations under the
/// floor count as zero, and the denominator never drops below it.
/// `f` must be deterministic; this is checked by a double forward pass.
GradCheckReport grad_check(const std::function<Value()>& f, std::span<Value> params,
                           double step, double tol);

}  // namespace stats::ad
