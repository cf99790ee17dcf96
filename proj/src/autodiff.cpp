#include "stats/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "stats/errors.hpp"

namespace stats::ad {

Node::~Node() {
    // Hand-over-hand release so destroying a deep chain stays iterative.
    std::vector<NodePtr> pending(std::move(parents));
    while (!pending.empty()) {
        NodePtr n = std::move(pending.back());
        pending.pop_back();
        if (n && n.use_count() == 1) {
            for (auto& p : n->parents) pending.push_back(std::move(p));
            n->parents.clear();
        }
    }
}

namespace {

NodePtr make_leaf(Tensor t, bool requires_grad) {
    require_finite(t, "leaf tensor");
    auto n = std::make_shared<Node>();
    n->grad = Tensor::zeros(t.shape());
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

Value make_op(Tensor out, std::vector<NodePtr> parents,
              std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->grad = Tensor::zeros(out.shape());
    n->value = std::move(out);
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Value::from_node(std::move(n));
}

void check_defined(const Value& v, const char* what) {
    if (!v.defined()) throw ContractError(std::string("undefined Value passed to ") + what);
}

void check_finite_input(const Value& v, const char* op) {
    if (!v.val().all_finite()) {
        throw NumericError(std::string("non-finite input to ") + op);
    }
}

enum class Broadcast { none, left_scalar, right_scalar, right_trailing };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::none;
    if (a.is_scalar()) return Broadcast::left_scalar;
    if (b.is_scalar()) return Broadcast::right_scalar;
    if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return Broadcast::right_trailing;
    throw ShapeError(std::string(op) + ": shapes " + a.shape_str() + " and " + b.shape_str() +
                     " do not conform");
}

// Accumulates g (shaped like the broadcast result) back into a grad tensor of
// the pre-broadcast shape.
void reduce_into(Tensor& grad, const Tensor& g, Broadcast kind, bool is_left) {
    if (kind == Broadcast::none || (kind == Broadcast::right_trailing && is_left) ||
        (kind == Broadcast::left_scalar && !is_left) ||
        (kind == Broadcast::right_scalar && is_left)) {
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
        return;
    }
    if ((kind == Broadcast::left_scalar && is_left) ||
        (kind == Broadcast::right_scalar && !is_left)) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
        grad[0] += s;
        return;
    }
    // right_trailing, reducing into the vector operand: sum over rows.
    std::size_t cols = grad.size();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i % cols] += g[i];
}

template <typename Fwd, typename BwdA, typename BwdB>
Value binary_op(const Value& a, const Value& b, const char* name, Fwd fwd, BwdA bwd_a,
                BwdB bwd_b) {
    check_defined(a, name);
    check_defined(b, name);
    check_finite_input(a, name);
    check_finite_input(b, name);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    Broadcast kind = broadcast_kind(av, bv, name);

    const Tensor& big = (kind == Broadcast::left_scalar) ? bv : av;
    Tensor out(big.shape());
    std::size_t cols = (kind == Broadcast::right_trailing) ? bv.size() : 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = (kind == Broadcast::left_scalar) ? av[0] : av[i];
        double y = 0.0;
        switch (kind) {
            case Broadcast::none: y = bv[i]; break;
            case Broadcast::left_scalar: y = bv[i]; break;
            case Broadcast::right_scalar: y = bv[0]; break;
            case Broadcast::right_trailing: y = bv[i % cols]; break;
        }
        out[i] = fwd(x, y);
    }

    Node* an = a.node().get();
    Node* bn = b.node().get();
    return make_op(std::move(out), {a.node(), b.node()},
                   [an, bn, kind, cols, bwd_a, bwd_b](Node& self) {
                       const Tensor& g = self.grad;
                       Tensor ga(g.shape());
                       Tensor gb(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           double x = (kind == Broadcast::left_scalar) ? an->value[0]
                                                                       : an->value[i];
                           double y = 0.0;
                           switch (kind) {
                               case Broadcast::none: y = bn->value[i]; break;
                               case Broadcast::left_scalar: y = bn->value[i]; break;
                               case Broadcast::right_scalar: y = bn->value[0]; break;
                               case Broadcast::right_trailing: y = bn->value[i % cols]; break;
                           }
                           ga[i] = g[i] * bwd_a(x, y);
                           gb[i] = g[i] * bwd_b(x, y);
                       }
                       if (an->requires_grad) reduce_into(an->grad, ga, kind, true);
                       if (bn->requires_grad) reduce_into(bn->grad, gb, kind, false);
                   });
}

template <typename Fwd, typename Bwd>
Value unary_op(const Value& a, const char* name, Fwd fwd, Bwd dfn) {
    check_defined(a, name);
    check_finite_input(a, name);
    const Tensor& av = a.val();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);

    Node* an = a.node().get();
    return make_op(std::move(out), {a.node()}, [an, dfn](Node& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            an->grad[i] += self.grad[i] * dfn(an->value[i], self.value[i]);
        }
    });
}

}  // namespace

Value Value::param(Tensor t) { return from_node(make_leaf(std::move(t), true)); }
Value Value::constant(Tensor t) { return from_node(make_leaf(std::move(t), false)); }

Value add(const Value& a, const Value& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Value scale(const Value& a, double c) {
    if (!std::isfinite(c)) throw NumericError("non-finite scale factor");
    return unary_op(
        a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value matmul(const Value& a, const Value& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    check_finite_input(a, "matmul");
    check_finite_input(b, "matmul");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || (bv.rank() != 2 && bv.rank() != 1)) {
        throw ShapeError("matmul: expected (m,k)x(k,n) or (m,k)x(k), got " + av.shape_str() +
                         " and " + bv.shape_str());
    }
    std::size_t m = av.dim(0), k = av.dim(1);
    if (bv.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + av.shape_str() + " vs " +
                         bv.shape_str());
    }
    Node* an = a.node().get();
    Node* bn = b.node().get();

    if (bv.rank() == 1) {
        Tensor out({m});
        for (std::size_t r = 0; r < m; ++r) {
            double s = 0.0;
            const double* row = av.data() + r * k;
            for (std::size_t i = 0; i < k; ++i) s += row[i] * bv[i];
            out[r] = s;
        }
        return make_op(std::move(out), {a.node(), b.node()}, [an, bn, m, k](Node& self) {
            const Tensor& g = self.grad;
            if (an->requires_grad) {
                for (std::size_t r = 0; r < m; ++r) {
                    double gr = g[r];
                    double* grow = an->grad.data() + r * k;
                    for (std::size_t i = 0; i < k; ++i) grow[i] += gr * bn->value[i];
                }
            }
            if (bn->requires_grad) {
                for (std::size_t r = 0; r < m; ++r) {
                    double gr = g[r];
                    const double* row = an->value.data() + r * k;
                    for (std::size_t i = 0; i < k; ++i) bn->grad[i] += gr * row[i];
                }
            }
        });
    }

    std::size_t n = bv.dim(1);
    Tensor out({m, n});
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t i = 0; i < k; ++i) {
            double x = av.at(r, i);
            if (x == 0.0) continue;
            for (std::size_t c = 0; c < n; ++c) out.at(r, c) += x * bv.at(i, c);
        }
    }
    return make_op(std::move(out), {a.node(), b.node()}, [an, bn, m, k, n](Node& self) {
        const Tensor& g = self.grad;
        if (an->requires_grad) {
            // dA = g . B^T
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t i = 0; i < k; ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < n; ++c) s += g.at(r, c) * bn->value.at(i, c);
                    an->grad.at(r, i) += s;
                }
        }
        if (bn->requires_grad) {
            // dB = A^T . g
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t c = 0; c < n; ++c) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < m; ++r) s += an->value.at(r, i) * g.at(r, c);
                    bn->grad.at(i, c) += s;
                }
        }
    });
}

Value dot(const Value& a, const Value& b) {
    check_defined(a, "dot");
    check_defined(b, "dot");
    check_finite_input(a, "dot");
    check_finite_input(b, "dot");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 1 || bv.rank() != 1 || av.size() != bv.size()) {
        throw ShapeError("dot: expected equal-length vectors, got " + av.shape_str() + " and " +
                         bv.shape_str());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    Node* an = a.node().get();
    Node* bn = b.node().get();
    return make_op(Tensor::scalar(s), {a.node(), b.node()}, [an, bn](Node& self) {
        double g = self.grad[0];
        if (an->requires_grad)
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->value[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->value[i];
    });
}

Value tanh(const Value& a) {
    return unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Value sigmoid(const Value& a) {
    return unary_op(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Value softplus(const Value& a) {
    return unary_op(
        a, "softplus",
        [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        });
}

Value log_clamped(const Value& a, double floor) {
    if (!(floor > 0.0)) throw ParamError("log_clamped requires a positive floor");
    return unary_op(
        a, "log_clamped", [floor](double x) { return std::log(std::max(x, floor)); },
        [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Value sum(const Value& a) {
    check_defined(a, "sum");
    check_finite_input(a, "sum");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.val()[i];
    Node* an = a.node().get();
    return make_op(Tensor::scalar(s), {a.node()}, [an](Node& self) {
        if (!an->requires_grad) return;
        double g = self.grad[0];
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
}

Value mean(const Value& a) {
    if (a.size() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Value concat(std::span<const Value> parts) {
    if (parts.empty()) throw ShapeError("concat of zero parts");
    std::size_t total = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat");
        check_finite_input(p, "concat");
        if (p.val().rank() > 1) {
            throw ShapeError("concat expects rank-0 or rank-1 parts, got " + p.val().shape_str());
        }
        total += p.size();
    }
    Tensor out({total});
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.size(); ++i) out[off + i] = p.val()[i];
        off += p.size();
        parents.push_back(p.node());
    }
    std::vector<Node*> raw;
    raw.reserve(parents.size());
    for (auto& p : parents) raw.push_back(p.get());
    return make_op(std::move(out), std::move(parents), [raw](Node& self) {
        std::size_t off = 0;
        for (Node* p : raw) {
            if (p->requires_grad) {
                for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[off + i];
            }
            off += p->value.size();
        }
    });
}

Value pick(const Value& v, std::size_t i) {
    check_defined(v, "pick");
    if (v.val().rank() != 1 || i >= v.size()) {
        throw ShapeError("pick: index " + std::to_string(i) + " invalid for shape " +
                         v.val().shape_str());
    }
    Node* vn = v.node().get();
    return make_op(Tensor::scalar(v.val()[i]), {v.node()}, [vn, i](Node& self) {
        if (vn->requires_grad) vn->grad[i] += self.grad[0];
    });
}

Value pick_row(const Value& m, std::size_t r) {
    check_defined(m, "pick_row");
    if (m.val().rank() != 2 || r >= m.val().dim(0)) {
        throw ShapeError("pick_row: row " + std::to_string(r) + " invalid for shape " +
                         m.val().shape_str());
    }
    std::size_t cols = m.val().dim(1);
    Tensor out({cols});
    for (std::size_t c = 0; c < cols; ++c) out[c] = m.val().at(r, c);
    Node* mn = m.node().get();
    return make_op(std::move(out), {m.node()}, [mn, r, cols](Node& self) {
        if (!mn->requires_grad) return;
        for (std::size_t c = 0; c < cols; ++c) mn->grad.at(r, c) += self.grad[c];
    });
}

Value weighted_sum(const Value& weights, std::span<const Value> items) {
    check_defined(weights, "weighted_sum");
    check_finite_input(weights, "weighted_sum");
    if (weights.val().rank() != 1 || weights.size() != items.size()) {
        throw ShapeError("weighted_sum: weight vector length " +
                         std::to_string(weights.size()) + " does not match " +
                         std::to_string(items.size()) + " items");
    }
    if (items.empty()) throw ShapeError("weighted_sum of zero items");
    const auto& shape = items[0].shape();
    for (const auto& it : items) {
        check_defined(it, "weighted_sum");
        check_finite_input(it, "weighted_sum");
        if (it.shape() != shape) {
            throw ShapeError("weighted_sum: item shapes differ, " + it.val().shape_str() +
                             " vs " + shape_to_string(shape));
        }
    }
    Tensor out(shape);
    for (std::size_t t = 0; t < items.size(); ++t) {
        double w = weights.val()[t];
        const Tensor& x = items[t].val();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * x[i];
    }
    std::vector<NodePtr> parents;
    parents.reserve(items.size() + 1);
    parents.push_back(weights.node());
    for (const auto& it : items) parents.push_back(it.node());
    Node* wn = weights.node().get();
    std::vector<Node*> raw;
    raw.reserve(items.size());
    for (const auto& it : items) raw.push_back(it.node().get());
    return make_op(std::move(out), std::move(parents), [wn, raw](Node& self) {
        const Tensor& g = self.grad;
        for (std::size_t t = 0; t < raw.size(); ++t) {
            Node* xn = raw[t];
            if (wn->requires_grad) {
                double s = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * xn->value[i];
                wn->grad[t] += s;
            }
            if (xn->requires_grad) {
                double w = wn->value[t];
                for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += w * g[i];
            }
        }
    });
}

Value vmax(std::span<const Value> items) {
    if (items.empty()) throw ShapeError("vmax of zero items");
    const auto& shape = items[0].shape();
    for (const auto& it : items) {
        check_defined(it, "vmax");
        check_finite_input(it, "vmax");
        if (it.shape() != shape) throw ShapeError("vmax: item shapes differ");
    }
    std::size_t n = items[0].size();
    Tensor out(shape);
    std::vector<std::uint32_t> argmax(n, 0);
    for (std::size_t i = 0; i < n; ++i) out[i] = items[0].val()[i];
    for (std::size_t t = 1; t < items.size(); ++t) {
        const Tensor& x = items[t].val();
        for (std::size_t i = 0; i < n; ++i) {
            if (x[i] > out[i]) {
                out[i] = x[i];
                argmax[i] = static_cast<std::uint32_t>(t);
            }
        }
    }
    std::vector<NodePtr> parents;
    parents.reserve(items.size());
    for (const auto& it : items) parents.push_back(it.node());
    std::vector<Node*> raw;
    raw.reserve(items.size());
    for (const auto& it : items) raw.push_back(it.node().get());
    return make_op(std::move(out), std::move(parents), [raw, argmax = std::move(argmax)](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            Node* winner = raw[argmax[i]];
            if (winner->requires_grad) winner->grad[i] += self.grad[i];
        }
    });
}

Value softmax(const Value& z, std::size_t axis, double temperature) {
    check_defined(z, "softmax");
    check_finite_input(z, "softmax");
    if (!(temperature > 0.0)) {
        throw ParamError("softmax temperature must be positive, got " +
                         std::to_string(temperature));
    }
    const Tensor& zv = z.val();
    if (zv.rank() == 0 || zv.rank() > 2) {
        throw ShapeError("softmax supports rank-1 and rank-2 tensors, got " + zv.shape_str());
    }
    if (axis >= zv.rank()) {
        throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                         zv.shape_str());
    }

    // View the tensor as `lanes` independent softmax problems of length `len`.
    std::size_t len = zv.dim(axis);
    std::size_t lanes = zv.size() / len;
    std::size_t stride = (zv.rank() == 2 && axis == 0) ? zv.dim(1) : 1;
    auto lane_base = [rank = zv.rank(), axis, len](std::size_t lane) {
        if (rank == 1) return std::size_t{0};
        return (axis == 1) ? lane * len : lane;
    };

    Tensor out(zv.shape());
    for (std::size_t lane = 0; lane < lanes; ++lane) {
        std::size_t base = lane_base(lane);
        double mx = zv[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, zv[base + i * stride]);
        double denom = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            double e = std::exp((zv[base + i * stride] - mx) / temperature);
            out[base + i * stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= denom;
    }

    Node* zn = z.node().get();
    return make_op(std::move(out), {z.node()},
                   [zn, len, lanes, stride, lane_base, temperature](Node& self) {
                       if (!zn->requires_grad) return;
                       const Tensor& y = self.value;
                       const Tensor& g = self.grad;
                       for (std::size_t lane = 0; lane < lanes; ++lane) {
                           std::size_t base = lane_base(lane);
                           double gy = 0.0;
                           for (std::size_t i = 0; i < len; ++i) {
                               std::size_t k = base + i * stride;
                               gy += g[k] * y[k];
                           }
                           for (std::size_t i = 0; i < len; ++i) {
                               std::size_t k = base + i * stride;
                               zn->grad[k] += y[k] * (g[k] - gy) / temperature;
                           }
                       }
                   });
}

void backward(const Value& root) {
    check_defined(root, "backward");
    if (!root.val().is_scalar()) {
        throw ContractError("backward requires a scalar root, got shape " +
                            root.val().shape_str());
    }

    // Iterative DFS producing a topological order (parents before children).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are per-sweep buffers; only leaf grads accumulate
    // across sweeps.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.fill(0.0);
    }

    root.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

void zero_grads(std::span<Value> params) {
    for (auto& p : params) p.zero_grad();
}

void zero_grads(std::span<const Value> params) {
    for (const auto& p : params) const_cast<Value&>(p).zero_grad();
}

GradCheckReport grad_check(const std::function<Value()>& f, std::span<Value> params,
                           double step, double tol) {
    if (!(step > 0.0)) throw ParamError("grad_check step must be positive");

    Value first = f();
    Value second = f();
    if (first.val().item() != second.val().item()) {
        throw ContractError("grad_check: function is not deterministic (forward values differ)");
    }

    zero_grads(params);
    Value root = f();
    backward(root);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad());

    GradCheckReport report;
    report.max_rel_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& t = params[pi].val_mut();
        for (std::size_t i = 0; i < t.size(); ++i) {
            double saved = t[i];
            t[i] = saved + step;
            double up = f().val().item();
            t[i] = saved - step;
            double down = f().val().item();
            t[i] = saved;
            double fd = (up - down) / (2.0 * step);
            double ad = analytic[pi][i];
            double diff = std::abs(fd - ad);
            // Deviations below the absolute floor are indistinguishable from
            // central-difference rounding noise and do not count.
            double rel = diff < 1e-8 ? 0.0 : diff / std::max({std::abs(fd), std::abs(ad), 1e-8});
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace stats::ad
