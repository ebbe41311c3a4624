#pragma once

// Dense float32 tensors with reverse-mode differentiation. The graph is a
// dynamic DAG of shared nodes built during the forward pass; backward() walks
// it in reverse topological order. Leaf gradients accumulate across backward
// calls; intermediate gradients are scratch state reset on every call, so
// calling backward twice exactly doubles every leaf gradient.
//
// Shape discipline is strict: operands must match exactly. The only
// broadcast-like operations are the explicit row-vector ops (bias addition,
// per-column scaling) and the scalar-tensor ops, each with its own backward.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "tokensplat/common.hpp"

namespace tokensplat {

namespace detail {

struct TensorNode {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // same length as value once touched
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::string param_name;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape) {
        return filled(std::move(shape), 0.0f);
    }

    static Tensor filled(std::vector<int> shape, float v) {
        auto n = std::make_shared<detail::TensorNode>();
        const std::size_t count = detail::shape_numel(shape);
        n->shape = std::move(shape);
        n->value.assign(count, v);
        return Tensor(std::move(n));
    }

    static Tensor from_data(std::vector<int> shape, std::vector<float> data) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("from_data: shape does not match data length");
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor scalar(float v) { return from_data({1}, {v}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f) {
        const std::size_t count = detail::shape_numel(shape);
        std::vector<float> data(count);
        for (auto& x : data) x = rng.normal(0.0f, stddev);
        return from_data(std::move(shape), std::move(data));
    }

    bool defined() const { return node_ != nullptr; }

    const std::vector<int>& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return node_->numel(); }

    const std::vector<float>& values() const { return node_->value; }
    std::vector<float>& values_mut() { return node_->value; }
    float operator[](std::size_t i) const { return node_->value[i]; }

    float scalar_value() const {
        if (numel() != 1) throw ContractError("scalar_value: tensor is not a scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        if (v && !node_->is_leaf)
            throw ContractError("set_requires_grad: only leaf tensors can opt in");
        node_->requires_grad = v;
        return *this;
    }

    const std::vector<float>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }

    const std::string& name() const { return node_->param_name; }
    void set_name(std::string n) { node_->param_name = std::move(n); }

    bool is_leaf() const { return node_->is_leaf; }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

  private:
    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline std::shared_ptr<TensorNode> make_op(const char* op, std::vector<int> shape,
                                           std::initializer_list<Tensor> parents) {
    auto n = std::make_shared<TensorNode>();
    const std::size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(count, 0.0f);
    n->is_leaf = false;
    n->op = op;
    for (const Tensor& p : parents) {
        n->parents.push_back(p.node());
        n->requires_grad = n->requires_grad || p.node()->requires_grad;
    }
    return n;
}

inline void accumulate(TensorNode& dst, std::size_t i, float v) {
    dst.grad[i] += v;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes differ");
}

inline void check_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace detail

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");

    using detail::TensorNode;
    // Iterative post-order DFS over parents.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Intermediate gradients are scratch per call; leaves persist.
    for (TensorNode* n : order) {
        if (!n->requires_grad) continue;
        if (n->is_leaf) {
            n->ensure_grad();
        } else {
            n->grad.assign(n->value.size(), 0.0f);
        }
    }

    TensorNode* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
}

// --------------------------------------------------------------------------
// Elementwise binary ops (shapes must match exactly)
// --------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    auto n = detail::make_op("add", a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + bv[i];
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn](detail::TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    auto n = detail::make_op("sub", a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] - bv[i];
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn](detail::TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    auto n = detail::make_op("mul", a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * bv[i];
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn](detail::TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->value[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    auto n = detail::make_op("div", a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] / bv[i];
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn](detail::TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] / bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    const float bi = bn->value[i];
                    bn->grad[i] -= self.grad[i] * an->value[i] / (bi * bi);
                }
            }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Scalar-constant and scalar-tensor ops
// --------------------------------------------------------------------------

inline Tensor scale(const Tensor& a, float c) {
    auto n = detail::make_op("scale", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * c;
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, c](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        };
    }
    return Tensor(n);
}

inline Tensor add_scalar(const Tensor& a, float c) {
    auto n = detail::make_op("add_scalar", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + c;
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(n);
}

// x * s where s is a single-element tensor participating in the graph.
inline Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar_tensor: s must have one element");
    auto n = detail::make_op("mul_scalar_tensor", a.shape(), {a, s});
    const float sv = s.values()[0];
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * sv;
    if (n->requires_grad) {
        auto an = a.node(), sn = s.node();
        n->backward_fn = [an, sn](detail::TensorNode& self) {
            const float sv2 = sn->value[0];
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * sv2;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += static_cast<double>(self.grad[i]) * an->value[i];
                sn->grad[0] += static_cast<float>(acc);
            }
        };
    }
    return Tensor(n);
}

inline Tensor div_scalar_tensor(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("div_scalar_tensor: s must have one element");
    auto n = detail::make_op("div_scalar_tensor", a.shape(), {a, s});
    const float sv = s.values()[0];
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] / sv;
    if (n->requires_grad) {
        auto an = a.node(), sn = s.node();
        n->backward_fn = [an, sn](detail::TensorNode& self) {
            const float sv2 = sn->value[0];
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] / sv2;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += static_cast<double>(self.grad[i]) * an->value[i];
                sn->grad[0] -= static_cast<float>(acc / (static_cast<double>(sv2) * sv2));
            }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Unary ops
// --------------------------------------------------------------------------

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor relu(const Tensor& a) {
    auto n = detail::make_op("relu", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] > 0.0f ? av[i] : 0.0f;
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (an->value[i] > 0.0f) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(n);
}

inline Tensor gelu(const Tensor& a) {
    auto n = detail::make_op("gelu", a.shape(), {a});
    const auto& av = a.values();
    constexpr double kInvSqrt2 = 0.7071067811865475;
    for (std::size_t i = 0; i < n->value.size(); ++i) {
        const double x = av[i];
        n->value[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            constexpr double kInvSqrt2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double x = an->value[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
                const double pdf = kInvSqrt2pi * std::exp(-0.5 * x * x);
                an->grad[i] += self.grad[i] * static_cast<float>(cdf + x * pdf);
            }
        };
    }
    return Tensor(n);
}

inline Tensor sigmoid(const Tensor& a) {
    auto n = detail::make_op("sigmoid", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) {
        const double x = av[i];
        n->value[i] = static_cast<float>(1.0 / (1.0 + std::exp(-x)));
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const float y = self.value[i];
                an->grad[i] += self.grad[i] * y * (1.0f - y);
            }
        };
    }
    return Tensor(n);
}

inline Tensor exp(const Tensor& a) {
    auto n = detail::make_op("exp", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::exp(av[i]);
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * self.value[i];
        };
    }
    return Tensor(n);
}

inline Tensor sqrt(const Tensor& a) {
    auto n = detail::make_op("sqrt", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::sqrt(av[i]);
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * 0.5f / self.value[i];
        };
    }
    return Tensor(n);
}

inline Tensor clamp(const Tensor& a, float lo, float hi) {
    auto n = detail::make_op("clamp", a.shape(), {a});
    const auto& av = a.values();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::clamp(av[i], lo, hi);
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, lo, hi](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const float x = an->value[i];
                if (x > lo && x < hi) an->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(n);
}

// Cuts the graph: result is a fresh leaf with the same values and no history.
inline Tensor detach(const Tensor& a) {
    return Tensor::from_data(a.shape(), a.values());
}

// --------------------------------------------------------------------------
// Matrix ops
// --------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), nn = b.dim(1);
    if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
    auto n = detail::make_op("matmul", {m, nn}, {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < nn; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += static_cast<double>(av[static_cast<std::size_t>(i) * k + p]) *
                       bv[static_cast<std::size_t>(p) * nn + j];
            n->value[static_cast<std::size_t>(i) * nn + j] = static_cast<float>(acc);
        }
    }
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn, m, k, nn](detail::TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = G B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < nn; ++j)
                            acc += static_cast<double>(
                                       self.grad[static_cast<std::size_t>(i) * nn + j]) *
                                   bn->value[static_cast<std::size_t>(p) * nn + j];
                        an->grad[static_cast<std::size_t>(i) * k + p] += static_cast<float>(acc);
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T G
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < nn; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(
                                       an->value[static_cast<std::size_t>(i) * k + p]) *
                                   self.grad[static_cast<std::size_t>(i) * nn + j];
                        bn->grad[static_cast<std::size_t>(p) * nn + j] += static_cast<float>(acc);
                    }
            }
        };
    }
    return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
    detail::check_2d(a, "transpose");
    const int m = a.dim(0), k = a.dim(1);
    auto n = detail::make_op("transpose", {k, m}, {a});
    const auto& av = a.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
            n->value[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * k + j];
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, m, k](detail::TensorNode& self) {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j)
                    an->grad[static_cast<std::size_t>(i) * k + j] +=
                        self.grad[static_cast<std::size_t>(j) * m + i];
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Softmax / layernorm
// --------------------------------------------------------------------------

// axis = 1: softmax over each row of a 2-D tensor; axis = 0: over each column.
inline Tensor softmax(const Tensor& a, int axis) {
    detail::check_2d(a, "softmax");
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
    const int rows = a.dim(0), cols = a.dim(1);
    auto n = detail::make_op("softmax", a.shape(), {a});
    const auto& av = a.values();
    const int outer = axis == 1 ? rows : cols;
    const int inner = axis == 1 ? cols : rows;
    auto at = [&](int o, int i) -> std::size_t {
        return axis == 1 ? static_cast<std::size_t>(o) * cols + i
                         : static_cast<std::size_t>(i) * cols + o;
    };
    for (int o = 0; o < outer; ++o) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int i = 0; i < inner; ++i) mx = std::max(mx, av[at(o, i)]);
        double denom = 0.0;
        for (int i = 0; i < inner; ++i) denom += std::exp(static_cast<double>(av[at(o, i)]) - mx);
        for (int i = 0; i < inner; ++i)
            n->value[at(o, i)] =
                static_cast<float>(std::exp(static_cast<double>(av[at(o, i)]) - mx) / denom);
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, axis, rows, cols](detail::TensorNode& self) {
            an->ensure_grad();
            const int outer = axis == 1 ? rows : cols;
            const int inner = axis == 1 ? cols : rows;
            auto at = [&](int o, int i) -> std::size_t {
                return axis == 1 ? static_cast<std::size_t>(o) * cols + i
                                 : static_cast<std::size_t>(i) * cols + o;
            };
            for (int o = 0; o < outer; ++o) {
                double dot = 0.0;
                for (int i = 0; i < inner; ++i)
                    dot += static_cast<double>(self.grad[at(o, i)]) * self.value[at(o, i)];
                for (int i = 0; i < inner; ++i) {
                    const std::size_t idx = at(o, i);
                    an->grad[idx] += static_cast<float>(
                        (static_cast<double>(self.grad[idx]) - dot) * self.value[idx]);
                }
            }
        };
    }
    return Tensor(n);
}

// Normalizes over the last dimension; gain and bias are 1-D of that length.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        float eps = 1e-5f) {
    if (x.ndim() < 1) throw ShapeError("layernorm: input must have at least one dim");
    const int d = x.dim(x.ndim() - 1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
        throw ShapeError("layernorm: gain/bias must be 1-D of the normalized size");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
    auto n = detail::make_op("layernorm", x.shape(), {x, gain, bias});
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += xv[base + i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double c = xv[base + i] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) {
            const double xhat = (xv[base + i] - mean) * inv;
            n->value[base + i] = static_cast<float>(xhat * gv[i] + bv[i]);
        }
    }
    if (n->requires_grad) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        n->backward_fn = [xn, gn, bn, d, rows, eps](detail::TensorNode& self) {
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            std::vector<double> xhat(static_cast<std::size_t>(d));
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * static_cast<std::size_t>(d);
                double mean = 0.0;
                for (int i = 0; i < d; ++i) mean += xn->value[base + i];
                mean /= d;
                double var = 0.0;
                for (int i = 0; i < d; ++i) {
                    const double c = xn->value[base + i] - mean;
                    var += c * c;
                }
                var /= d;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int i = 0; i < d; ++i) xhat[static_cast<std::size_t>(i)] =
                    (xn->value[base + i] - mean) * inv;
                if (gn->requires_grad || bn->requires_grad) {
                    for (int i = 0; i < d; ++i) {
                        const float g = self.grad[base + i];
                        if (gn->requires_grad)
                            gn->grad[static_cast<std::size_t>(i)] +=
                                static_cast<float>(g * xhat[static_cast<std::size_t>(i)]);
                        if (bn->requires_grad) bn->grad[static_cast<std::size_t>(i)] += g;
                    }
                }
                if (xn->requires_grad) {
                    double sum_dh = 0.0, sum_dh_xhat = 0.0;
                    for (int i = 0; i < d; ++i) {
                        const double dh = static_cast<double>(self.grad[base + i]) *
                                          gn->value[static_cast<std::size_t>(i)];
                        sum_dh += dh;
                        sum_dh_xhat += dh * xhat[static_cast<std::size_t>(i)];
                    }
                    for (int i = 0; i < d; ++i) {
                        const double dh = static_cast<double>(self.grad[base + i]) *
                                          gn->value[static_cast<std::size_t>(i)];
                        xn->grad[base + i] += static_cast<float>(
                            inv * (dh - sum_dh / d - xhat[static_cast<std::size_t>(i)] *
                                                         sum_dh_xhat / d));
                    }
                }
            }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Row-vector broadcasts (the only sanctioned broadcasting)
// --------------------------------------------------------------------------

inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_2d(x, "add_rowvec");
    if (v.ndim() != 1 || v.dim(0) != x.dim(1))
        throw ShapeError("add_rowvec: vector length must equal column count");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_op("add_rowvec", x.shape(), {x, v});
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            n->value[static_cast<std::size_t>(r) * cols + c] =
                xv[static_cast<std::size_t>(r) * cols + c] + vv[static_cast<std::size_t>(c)];
    if (n->requires_grad) {
        auto xn = x.node(), vn = v.node();
        n->backward_fn = [xn, vn, rows, cols](detail::TensorNode& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int c = 0; c < cols; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < rows; ++r)
                        acc += self.grad[static_cast<std::size_t>(r) * cols + c];
                    vn->grad[static_cast<std::size_t>(c)] += static_cast<float>(acc);
                }
            }
        };
    }
    return Tensor(n);
}

inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_2d(x, "mul_rowvec");
    if (v.ndim() != 1 || v.dim(0) != x.dim(1))
        throw ShapeError("mul_rowvec: vector length must equal column count");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_op("mul_rowvec", x.shape(), {x, v});
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            n->value[static_cast<std::size_t>(r) * cols + c] =
                xv[static_cast<std::size_t>(r) * cols + c] * vv[static_cast<std::size_t>(c)];
    if (n->requires_grad) {
        auto xn = x.node(), vn = v.node();
        n->backward_fn = [xn, vn, rows, cols](detail::TensorNode& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        xn->grad[static_cast<std::size_t>(r) * cols + c] +=
                            self.grad[static_cast<std::size_t>(r) * cols + c] *
                            vn->value[static_cast<std::size_t>(c)];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int c = 0; c < cols; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < rows; ++r)
                        acc += static_cast<double>(
                                   self.grad[static_cast<std::size_t>(r) * cols + c]) *
                               xn->value[static_cast<std::size_t>(r) * cols + c];
                    vn->grad[static_cast<std::size_t>(c)] += static_cast<float>(acc);
                }
            }
        };
    }
    return Tensor(n);
}

// x @ W + b, the standard affine map.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

// --------------------------------------------------------------------------
// Reductions
// --------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    auto n = detail::make_op("sum", {1}, {a});
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    n->value[0] = static_cast<float>(acc);
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            const float g = self.grad[0];
            for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g;
        };
    }
    return Tensor(n);
}

inline Tensor mean(const Tensor& a) {
    auto n = detail::make_op("mean", {1}, {a});
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    n->value[0] = static_cast<float>(acc * inv);
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, inv](detail::TensorNode& self) {
            an->ensure_grad();
            const float g = static_cast<float>(self.grad[0] * inv);
            for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g;
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Structural ops
// --------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (detail::shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: element count must be preserved");
    auto n = detail::make_op("reshape", std::move(new_shape), {a});
    n->value = a.values();
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(n);
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    detail::check_2d(a, "slice_rows");
    if (r0 < 0 || r1 > a.dim(0) || r0 >= r1) throw ShapeError("slice_rows: bad range");
    const int cols = a.dim(1);
    auto n = detail::make_op("slice_rows", {r1 - r0, cols}, {a});
    std::memcpy(n->value.data(), a.values().data() + static_cast<std::size_t>(r0) * cols,
                n->value.size() * sizeof(float));
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, r0, cols](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[static_cast<std::size_t>(r0) * cols + i] += self.grad[i];
        };
    }
    return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    detail::check_2d(a, "slice_cols");
    if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) throw ShapeError("slice_cols: bad range");
    const int rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
    auto n = detail::make_op("slice_cols", {rows, w}, {a});
    const auto& av = a.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
            n->value[static_cast<std::size_t>(r) * w + c] =
                av[static_cast<std::size_t>(r) * cols + c0 + c];
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, rows, cols, c0, w](detail::TensorNode& self) {
            an->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    an->grad[static_cast<std::size_t>(r) * cols + c0 + c] +=
                        self.grad[static_cast<std::size_t>(r) * w + c];
        };
    }
    return Tensor(n);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_rows");
        if (p.dim(1) != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.dim(0);
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = {rows, cols};
    n->value.resize(static_cast<std::size_t>(rows) * cols);
    n->is_leaf = false;
    n->op = "concat_rows";
    std::size_t off = 0;
    for (const auto& p : parts) {
        n->parents.push_back(p.node());
        n->requires_grad = n->requires_grad || p.requires_grad();
        std::memcpy(n->value.data() + off, p.values().data(), p.numel() * sizeof(float));
        off += p.numel();
    }
    if (n->requires_grad) {
        auto parents = n->parents;
        n->backward_fn = [parents](detail::TensorNode& self) {
            std::size_t off2 = 0;
            for (const auto& p : parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->value.size(); ++i)
                        p->grad[i] += self.grad[off2 + i];
                }
                off2 += p->value.size();
            }
        };
    }
    return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_cols");
        if (p.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
        cols += p.dim(1);
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = {rows, cols};
    n->value.resize(static_cast<std::size_t>(rows) * cols);
    n->is_leaf = false;
    n->op = "concat_cols";
    int c_off = 0;
    for (const auto& p : parts) {
        n->parents.push_back(p.node());
        n->requires_grad = n->requires_grad || p.requires_grad();
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::memcpy(n->value.data() + static_cast<std::size_t>(r) * cols + c_off,
                        p.values().data() + static_cast<std::size_t>(r) * w,
                        static_cast<std::size_t>(w) * sizeof(float));
        c_off += w;
    }
    if (n->requires_grad) {
        auto parents = n->parents;
        n->backward_fn = [parents, rows, cols](detail::TensorNode& self) {
            int c_off2 = 0;
            for (const auto& p : parents) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c)
                            p->grad[static_cast<std::size_t>(r) * w + c] +=
                                self.grad[static_cast<std::size_t>(r) * cols + c_off2 + c];
                }
                c_off2 += w;
            }
        };
    }
    return Tensor(n);
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    detail::check_2d(a, "gather_rows");
    const int rows = a.dim(0), cols = a.dim(1);
    for (int i : idx)
        if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
    auto n = detail::make_op("gather_rows", {static_cast<int>(idx.size()), cols}, {a});
    const auto& av = a.values();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(n->value.data() + r * cols,
                    av.data() + static_cast<std::size_t>(idx[r]) * cols,
                    static_cast<std::size_t>(cols) * sizeof(float));
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, idx, cols](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < cols; ++c)
                    an->grad[static_cast<std::size_t>(idx[r]) * cols + c] +=
                        self.grad[r * cols + c];
        };
    }
    return Tensor(n);
}

inline Tensor repeat_rows(const Tensor& a, int times) {
    detail::check_2d(a, "repeat_rows");
    if (a.dim(0) != 1) throw ShapeError("repeat_rows: input must have a single row");
    if (times < 1) throw ShapeError("repeat_rows: times must be >= 1");
    const int cols = a.dim(1);
    auto n = detail::make_op("repeat_rows", {times, cols}, {a});
    for (int r = 0; r < times; ++r)
        std::memcpy(n->value.data() + static_cast<std::size_t>(r) * cols, a.values().data(),
                    static_cast<std::size_t>(cols) * sizeof(float));
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, times, cols](detail::TensorNode& self) {
            an->ensure_grad();
            for (int c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (int r = 0; r < times; ++r)
                    acc += self.grad[static_cast<std::size_t>(r) * cols + c];
                an->grad[static_cast<std::size_t>(c)] += static_cast<float>(acc);
            }
        };
    }
    return Tensor(n);
}

// Each row of a is repeated k times consecutively: [r0,r0,..,r1,r1,..].
inline Tensor repeat_interleave_rows(const Tensor& a, int k) {
    detail::check_2d(a, "repeat_interleave_rows");
    if (k < 1) throw ShapeError("repeat_interleave_rows: k must be >= 1");
    const int rows = a.dim(0), cols = a.dim(1);
    auto n = detail::make_op("repeat_interleave_rows", {rows * k, cols}, {a});
    const auto& av = a.values();
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
            std::memcpy(n->value.data() + (static_cast<std::size_t>(r) * k + j) * cols,
                        av.data() + static_cast<std::size_t>(r) * cols,
                        static_cast<std::size_t>(cols) * sizeof(float));
    if (n->requires_grad) {
        auto an = a.node();
        n->backward_fn = [an, rows, cols, k](detail::TensorNode& self) {
            an->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    double acc = 0.0;
                    for (int j = 0; j < k; ++j)
                        acc += self.grad[(static_cast<std::size_t>(r) * k + j) * cols + c];
                    an->grad[static_cast<std::size_t>(r) * cols + c] += static_cast<float>(acc);
                }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// conv_transpose2d
// --------------------------------------------------------------------------

// x: [Cin, H, W], w: [Cin, Cout, kh, kw], stride applied to both spatial dims.
// Output: [Cout, (H-1)*stride + kh, (W-1)*stride + kw]. No padding, no bias.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride) {
    if (x.ndim() != 3) throw ShapeError("conv_transpose2d: input must be [C,H,W]");
    if (w.ndim() != 4) throw ShapeError("conv_transpose2d: weight must be [Cin,Cout,kh,kw]");
    if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    if (w.dim(0) != cin) throw ShapeError("conv_transpose2d: channel mismatch");
    const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int oh = (h - 1) * stride + kh;
    const int ow = (wd - 1) * stride + kw;
    auto n = detail::make_op("conv_transpose2d", {cout, oh, ow}, {x, w});
    const auto& xv = x.values();
    const auto& wv = w.values();
    auto xat = [&](int c, int i, int j) {
        return (static_cast<std::size_t>(c) * h + i) * wd + j;
    };
    auto wat = [&](int ci, int co, int di, int dj) {
        return ((static_cast<std::size_t>(ci) * cout + co) * kh + di) * kw + dj;
    };
    auto oat = [&](int c, int i, int j) {
        return (static_cast<std::size_t>(c) * oh + i) * ow + j;
    };
    for (int ci = 0; ci < cin; ++ci)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) {
                const float xij = xv[xat(ci, i, j)];
                if (xij == 0.0f) continue;
                for (int co = 0; co < cout; ++co)
                    for (int di = 0; di < kh; ++di)
                        for (int dj = 0; dj < kw; ++dj)
                            n->value[oat(co, i * stride + di, j * stride + dj)] +=
                                xij * wv[wat(ci, co, di, dj)];
            }
    if (n->requires_grad) {
        auto xn = x.node(), wn = w.node();
        n->backward_fn = [xn, wn, cin, cout, h, wd, kh, kw, oh, ow,
                          stride](detail::TensorNode& self) {
            auto xat2 = [&](int c, int i, int j) {
                return (static_cast<std::size_t>(c) * h + i) * wd + j;
            };
            auto wat2 = [&](int ci, int co, int di, int dj) {
                return ((static_cast<std::size_t>(ci) * cout + co) * kh + di) * kw + dj;
            };
            auto oat2 = [&](int c, int i, int j) {
                return (static_cast<std::size_t>(c) * oh + i) * ow + j;
            };
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int ci = 0; ci < cin; ++ci)
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < wd; ++j) {
                            double acc = 0.0;
                            for (int co = 0; co < cout; ++co)
                                for (int di = 0; di < kh; ++di)
                                    for (int dj = 0; dj < kw; ++dj)
                                        acc += static_cast<double>(self.grad[oat2(
                                                   co, i * stride + di, j * stride + dj)]) *
                                               wn->value[wat2(ci, co, di, dj)];
                            xn->grad[xat2(ci, i, j)] += static_cast<float>(acc);
                        }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int ci = 0; ci < cin; ++ci)
                    for (int co = 0; co < cout; ++co)
                        for (int di = 0; di < kh; ++di)
                            for (int dj = 0; dj < kw; ++dj) {
                                double acc = 0.0;
                                for (int i = 0; i < h; ++i)
                                    for (int j = 0; j < wd; ++j)
                                        acc += static_cast<double>(xn->value[xat2(ci, i, j)]) *
                                               self.grad[oat2(co, i * stride + di,
                                                              j * stride + dj)];
                                wn->grad[wat2(ci, co, di, dj)] += static_cast<float>(acc);
                            }
            }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Quaternion product as a primitive (Hamilton convention, [1,4] operands).
// --------------------------------------------------------------------------

inline Tensor quat_mul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || a.dim(0) != 1 || a.dim(1) != 4 || b.ndim() != 2 || b.dim(0) != 1 ||
        b.dim(1) != 4)
        throw ShapeError("quat_mul: expects [1,4] operands");
    auto n = detail::make_op("quat_mul", {1, 4}, {a, b});
    const auto& q = a.values();
    const auto& r = b.values();
    n->value[0] = q[0] * r[0] - q[1] * r[1] - q[2] * r[2] - q[3] * r[3];
    n->value[1] = q[0] * r[1] + q[1] * r[0] + q[2] * r[3] - q[3] * r[2];
    n->value[2] = q[0] * r[2] - q[1] * r[3] + q[2] * r[0] + q[3] * r[1];
    n->value[3] = q[0] * r[3] + q[1] * r[2] - q[2] * r[1] + q[3] * r[0];
    if (n->requires_grad) {
        auto an = a.node(), bn = b.node();
        n->backward_fn = [an, bn](detail::TensorNode& self) {
            const float* q2 = an->value.data();
            const float* r2 = bn->value.data();
            const float* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                an->grad[0] += g[0] * r2[0] + g[1] * r2[1] + g[2] * r2[2] + g[3] * r2[3];
                an->grad[1] += -g[0] * r2[1] + g[1] * r2[0] - g[2] * r2[3] + g[3] * r2[2];
                an->grad[2] += -g[0] * r2[2] + g[1] * r2[3] + g[2] * r2[0] - g[3] * r2[1];
                an->grad[3] += -g[0] * r2[3] - g[1] * r2[2] + g[2] * r2[1] + g[3] * r2[0];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                bn->grad[0] += g[0] * q2[0] + g[1] * q2[1] + g[2] * q2[2] + g[3] * q2[3];
                bn->grad[1] += -g[0] * q2[1] + g[1] * q2[0] + g[2] * q2[3] - g[3] * q2[2];
                bn->grad[2] += -g[0] * q2[2] - g[1] * q2[3] + g[2] * q2[0] + g[3] * q2[1];
                bn->grad[3] += -g[0] * q2[3] + g[1] * q2[2] - g[2] * q2[1] + g[3] * q2[0];
            }
        };
    }
    return Tensor(n);
}

// --------------------------------------------------------------------------
// Small conveniences built on the primitives
// --------------------------------------------------------------------------

inline Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

// Row-wise L2 normalization of a [1,n] tensor with an epsilon inside the
// square root so the zero vector maps to zero instead of NaN.
inline Tensor normalize_row(const Tensor& a, float eps = 1e-12f) {
    Tensor sq = mul(a, a);
    Tensor s = sum(sq);
    Tensor norm = sqrt(add_scalar(s, eps));
    return div_scalar_tensor(a, norm);
}

}  // namespace tokensplat
