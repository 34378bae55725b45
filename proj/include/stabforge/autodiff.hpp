#pragma once

// Reverse-mode automatic differentiation over dense row-major double matrices.
//
// Every tensor is a matrix (scalars are 1x1, vectors are 1xn). Graphs are built
// dynamically by calling the free-function ops below; `Tensor::backward` walks the
// graph recorded behind a scalar and accumulates gradients into every leaf that
// requires them. Broadcasting is limited to scalar factors and row-wise biases.

#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace stabforge::ad {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    MatMap value_map() { return MatMap(value.data(), Eigen::Index(shape.rows), Eigen::Index(shape.cols)); }
    MatMap grad_map() {
        ensure_grad();
        return MatMap(grad.data(), Eigen::Index(shape.rows), Eigen::Index(shape.cols));
    }
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from(shape, std::vector<double>(shape.size(), 0.0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != shape.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape.str());
        auto node = std::make_shared<detail::Node>();
        node->shape = shape;
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1, 1}, {v}, requires_grad); }

    static Tensor row(std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = values.size();
        return from({1, n}, std::move(values), requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    Shape shape() const { return node_->shape; }
    std::size_t rows() const { return node_->shape.rows; }
    std::size_t cols() const { return node_->shape.cols; }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double item() const {
        if (size() != 1) throw ShapeError("item: tensor of shape " + shape().str() + " is not a scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Gradient accumulated by backward passes; zeros if none has reached this tensor.
    std::span<const double> grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    ConstMatMap matrix() const {
        return ConstMatMap(node_->value.data(), Eigen::Index(rows()), Eigen::Index(cols()));
    }

    /// Copy of the values with no graph history.
    Tensor detach() const { return from(shape(), node_->value, false); }

    /// Backpropagates from this scalar. Leaf gradients accumulate across calls.
    void backward() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled_flag()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

/// Creates the output node for an op. Parents and the backward rule are attached only when
/// some input requires a gradient and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(value);
    if (any_requires_grad(inputs)) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

} // namespace detail

inline void Tensor::backward() const {
    if (size() != 1) throw ShapeError("backward: called on non-scalar of shape " + shape().str());
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order of the recorded graph.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior gradients are per-pass scratch; leaf gradients accumulate.
    for (detail::Node* n : order)
        if (n->backward) n->grad.assign(n->value.size(), 0.0);
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            const double sign = k == 0 ? 1.0 : -1.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += sign * self.grad[i];
        }
    });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v *= s;
    return detail::make_result(a.shape(), std::move(out), {&a}, [s](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += s * self.grad[i];
    });
}

/// Adds a fixed (non-differentiable) matrix of the same shape, e.g. noise or masks.
inline Tensor add_constant(const Tensor& a, std::span<const double> c) {
    if (c.size() != a.size())
        throw ShapeError("add_constant: " + std::to_string(c.size()) + " values vs shape " + a.shape().str());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c[i];
    return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

/// a [n x m] + bias [1 x m], broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
        throw ShapeError("add_row: shape mismatch " + a.shape().str() + " vs " + bias.shape().str());
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = a.values()[r * m + c] + bias.values()[c];
    return detail::make_result(a.shape(), std::move(out), {&a, &bias}, [n, m](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) pb->grad[c] += self.grad[r * m + c];
        }
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
    return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * self.value[i];
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
    return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / p->value[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.values()[i]);
    return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p->value[i] > 0.0) p->grad[i] += self.grad[i];
    });
}

inline Tensor square(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
    return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += 2.0 * p->value[i] * self.grad[i];
    });
}

inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    return detail::make_result({1, 1}, {total}, {&a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (double& g : p->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[c * n + r] = a.values()[r * m + c];
    return detail::make_result({m, n}, std::move(out), {&a}, [n, m](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) p->grad[r * m + c] += self.grad[c * n + r];
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    const Shape out_shape{a.rows(), b.cols()};
    std::vector<double> out(out_shape.size());
    MatMap(out.data(), Eigen::Index(out_shape.rows), Eigen::Index(out_shape.cols)).noalias() = a.matrix() * b.matrix();
    return detail::make_result(out_shape, std::move(out), {&a, &b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        auto g = self.grad_map();
        if (pa->requires_grad) pa->grad_map().noalias() += g * pb->value_map().transpose();
        if (pb->requires_grad) pb->grad_map().noalias() += pa->value_map().transpose() * g;
    });
}

/// Softmax along `axis` (1: within each row, 0: within each column).
inline Tensor softmax(const Tensor& a, int axis = 1) {
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
    const std::size_t n = a.rows(), m = a.cols();
    const std::size_t groups = axis == 1 ? n : m;
    const std::size_t len = axis == 1 ? m : n;
    auto index = [=](std::size_t g, std::size_t i) { return axis == 1 ? g * m + i : i * m + g; };
    std::vector<double> out(a.size());
    for (std::size_t g = 0; g < groups; ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, a.values()[index(g, i)]);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) z += out[index(g, i)] = std::exp(a.values()[index(g, i)] - mx);
        for (std::size_t i = 0; i < len; ++i) out[index(g, i)] /= z;
    }
    return detail::make_result(a.shape(), std::move(out), {&a}, [=](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t g = 0; g < groups; ++g) {
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) dot += self.grad[index(g, i)] * self.value[index(g, i)];
            for (std::size_t i = 0; i < len; ++i)
                p->grad[index(g, i)] += self.value[index(g, i)] * (self.grad[index(g, i)] - dot);
        }
    });
}

/// Row-wise layer normalization with learned gain and bias, both [1 x d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gamma.shape() != Shape{1, d} || beta.shape() != Shape{1, d})
        throw ShapeError("layer_norm: shape mismatch " + x.shape().str() + " vs " + gamma.shape().str());
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = x.values().data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += row[c];
        mu /= double(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= double(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (row[c] - mu) * inv;
            (*xhat)[r * d + c] = h;
            out[r * d + c] = h * gamma.values()[c] + beta.values()[c];
        }
    }
    return detail::make_result(x.shape(), std::move(out), {&x, &gamma, &beta}, [=](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double g = self.grad[r * d + c];
                const double h = (*xhat)[r * d + c];
                if (pg->requires_grad) pg->grad[c] += g * h;
                if (pb->requires_grad) pb->grad[c] += g;
                dxhat[c] = g * pg->value[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * h;
            }
            if (!px->requires_grad) continue;
            mean_d /= double(d);
            mean_dx /= double(d);
            for (std::size_t c = 0; c < d; ++c)
                px->grad[r * d + c] += (*inv_std)[r] * (dxhat[c] - mean_d - (*xhat)[r * d + c] * mean_dx);
        }
    });
}

/// Rows of `table` selected by `ids`.
inline Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids) {
    const std::size_t d = table.cols();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || std::size_t(ids[i]) >= table.rows())
            throw ShapeError("embedding_gather: index " + std::to_string(ids[i]) + " outside table " +
                             table.shape().str());
        std::copy_n(table.values().data() + std::size_t(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    return detail::make_result({ids.size(), d}, std::move(out), {&table}, [idx = std::move(idx), d](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) p->grad[std::size_t(idx[i]) * d + c] += self.grad[i * d + c];
    });
}

/// Soft embedding lookup: weights [L x V] times table [V x d].
inline Tensor embedding_mix(const Tensor& weights, const Tensor& table) {
    if (weights.cols() != table.rows())
        throw ShapeError("embedding_mix: shape mismatch " + weights.shape().str() + " vs " + table.shape().str());
    return matmul(weights, table);
}

/// Mean token-level cross-entropy of row-wise softmax(logits) against `targets`.
/// Positions whose target equals `ignore_index` are excluded (padding).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index = -1) {
    const std::size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n)
        throw ShapeError("cross_entropy: shape mismatch " + logits.shape().str() + " vs [" +
                         std::to_string(targets.size()) + " targets]");
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.values().data() + r * v;
        double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) z += (*probs)[r * v + c] = std::exp(row[c] - mx);
        for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= z;
        if (tgt[r] == ignore_index) continue;
        if (tgt[r] < 0 || std::size_t(tgt[r]) >= v)
            throw ShapeError("cross_entropy: target " + std::to_string(tgt[r]) + " outside " + std::to_string(v) + " classes");
        total += -(row[tgt[r]] - mx - std::log(z));
        ++count;
    }
    const double loss = count ? total / double(count) : 0.0;
    return detail::make_result({1, 1}, {loss}, {&logits}, [=, tgt = std::move(tgt)](detail::Node& self) {
        if (count == 0) return;
        auto& p = self.parents[0];
        p->ensure_grad();
        const double g = self.grad[0] / double(count);
        for (std::size_t r = 0; r < n; ++r) {
            if (tgt[r] == ignore_index) continue;
            for (std::size_t c = 0; c < v; ++c) p->grad[r * v + c] += g * (*probs)[r * v + c];
            p->grad[r * v + std::size_t(tgt[r])] -= g;
        }
    });
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t m = parts[0].cols();
    std::size_t n = 0;
    for (const auto& t : parts) {
        if (t.cols() != m) throw ShapeError("concat_rows: shape mismatch " + parts[0].shape().str() + " vs " + t.shape().str());
        n += t.rows();
    }
    std::vector<double> out;
    out.reserve(n * m);
    for (const auto& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
    auto node = std::make_shared<detail::Node>();
    node->shape = {n, m};
    node->value = std::move(out);
    bool needs = false;
    if (detail::grad_enabled_flag())
        for (const auto& t : parts) needs = needs || t.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const auto& t : parts) node->parents.push_back(t.node_ptr());
        node->backward = [](detail::Node& self) {
            std::size_t offset = 0;
            for (auto& p : self.parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[offset + i];
                }
                offset += p->value.size();
            }
        };
    }
    return Tensor(std::move(node));
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t n = parts[0].rows();
    std::size_t m = 0;
    std::vector<std::size_t> widths;
    for (const auto& t : parts) {
        if (t.rows() != n) throw ShapeError("concat_cols: shape mismatch " + parts[0].shape().str() + " vs " + t.shape().str());
        widths.push_back(t.cols());
        m += t.cols();
    }
    std::vector<double> out(n * m);
    std::size_t c0 = 0;
    for (const auto& t : parts) {
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(t.values().data() + r * t.cols(), t.cols(), out.data() + r * m + c0);
        c0 += t.cols();
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = {n, m};
    node->value = std::move(out);
    bool needs = false;
    if (detail::grad_enabled_flag())
        for (const auto& t : parts) needs = needs || t.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const auto& t : parts) node->parents.push_back(t.node_ptr());
        node->backward = [n, m, widths](detail::Node& self) {
            std::size_t c0 = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = self.parents[k];
                const std::size_t w = widths[k];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < w; ++c) p->grad[r * w + c] += self.grad[r * m + c0 + c];
                }
                c0 += w;
            }
        };
    }
    return Tensor(std::move(node));
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.rows())
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + a.shape().str());
    const std::size_t m = a.cols();
    std::vector<double> out(a.values().begin() + std::ptrdiff_t(begin * m), a.values().begin() + std::ptrdiff_t((begin + count) * m));
    return detail::make_result({count, m}, std::move(out), {&a}, [begin, m](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[begin * m + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.cols())
        throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + a.shape().str());
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * count);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(a.values().data() + r * m + begin, count, out.data() + r * count);
    return detail::make_result({n, count}, std::move(out), {&a}, [n, m, begin, count](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < count; ++c) p->grad[r * m + begin + c] += self.grad[r * count + c];
    });
}

/// Copy of the constant matrix `base` [n x m] in which rows `rows[i]` are replaced by zeros
/// except at columns `cols[j]`, which take `block[i, j]`. Gradients flow to `block` only.
inline Tensor scatter_block(Shape base_shape, std::span<const double> base, std::span<const std::size_t> rows,
                            std::span<const std::size_t> cols, const Tensor& block) {
    if (block.shape() != Shape{rows.size(), cols.size()} || base.size() != base_shape.size())
        throw ShapeError("scatter_block: shape mismatch " + base_shape.str() + " vs " + block.shape().str());
    const std::size_t m = base_shape.cols;
    std::vector<double> out(base.begin(), base.end());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= base_shape.rows) throw ShapeError("scatter_block: row outside " + base_shape.str());
        std::fill_n(out.data() + rows[i] * m, m, 0.0);
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (cols[j] >= m) throw ShapeError("scatter_block: column outside " + base_shape.str());
            out[rows[i] * m + cols[j]] = block.values()[i * cols.size() + j];
        }
    }
    std::vector<std::size_t> r(rows.begin(), rows.end()), c(cols.begin(), cols.end());
    return detail::make_result(base_shape, std::move(out), {&block}, [m, r = std::move(r), c = std::move(c)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < r.size(); ++i)
            for (std::size_t j = 0; j < c.size(); ++j) p->grad[i * c.size() + j] += self.grad[r[i] * m + c[j]];
    });
}

/// Inverted dropout. A rate of zero returns the input unchanged.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    auto keep = std::make_shared<std::vector<double>>(a.size());
    const double s = 1.0 / (1.0 - rate);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*keep)[i] = uniform_open(rng) >= rate ? s : 0.0;
        out[i] = a.values()[i] * (*keep)[i];
    }
    return detail::make_result(a.shape(), std::move(out), {&a}, [keep](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * (*keep)[i];
    });
}

struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

/// Mean of each row segment: [sum(len) x d] -> [segments x d]. Rows with mask 0 are skipped.
inline Tensor segment_mean(const Tensor& a, std::span<const Segment> segments, std::span<const unsigned char> row_valid = {}) {
    const std::size_t d = a.cols();
    std::vector<double> out(segments.size() * d, 0.0);
    auto counts = std::make_shared<std::vector<double>>(segments.size(), 0.0);
    std::vector<Segment> segs(segments.begin(), segments.end());
    std::vector<unsigned char> valid(row_valid.begin(), row_valid.end());
    for (std::size_t s = 0; s < segs.size(); ++s) {
        for (std::size_t r = segs[s].offset; r < segs[s].offset + segs[s].length; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            (*counts)[s] += 1.0;
            for (std::size_t c = 0; c < d; ++c) out[s * d + c] += a.values()[r * d + c];
        }
        if ((*counts)[s] > 0)
            for (std::size_t c = 0; c < d; ++c) out[s * d + c] /= (*counts)[s];
    }
    const Shape shape{segs.size(), d};
    return detail::make_result(shape, std::move(out), {&a},
                               [d, counts, segs = std::move(segs), valid = std::move(valid)](detail::Node& self) {
                                   auto& p = self.parents[0];
                                   p->ensure_grad();
                                   for (std::size_t s = 0; s < segs.size(); ++s) {
                                       if ((*counts)[s] == 0) continue;
                                       for (std::size_t r = segs[s].offset; r < segs[s].offset + segs[s].length; ++r) {
                                           if (!valid.empty() && !valid[r]) continue;
                                           for (std::size_t c = 0; c < d; ++c)
                                               p->grad[r * d + c] += self.grad[s * d + c] / (*counts)[s];
                                       }
                                   }
                               });
}

/// Describes a ragged batch for multi-head attention: query segment i attends only to
/// key segment i. `key_valid` (optional, one flag per key row) masks padding keys.
struct AttentionLayout {
    std::vector<Segment> queries;
    std::vector<Segment> keys;
    std::size_t heads = 1;
    bool causal = false;
    std::vector<unsigned char> key_valid;
};

/// Scaled dot-product multi-head attention over a ragged batch. q [Nq x d], k and v [Nk x d].
/// Heads split the feature dimension into contiguous blocks of d / heads columns.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
        throw ShapeError("attention: shape mismatch " + q.shape().str() + " vs " + k.shape().str() + " vs " + v.shape().str());
    if (layout.heads == 0 || d % layout.heads != 0)
        throw ShapeError("attention: " + std::to_string(d) + " features not divisible into " + std::to_string(layout.heads) + " heads");
    if (layout.queries.size() != layout.keys.size()) throw ShapeError("attention: query/key segment count mismatch");
    if (!layout.key_valid.empty() && layout.key_valid.size() != k.rows()) throw ShapeError("attention: key mask length mismatch");
    const std::size_t dh = d / layout.heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    const auto nq = Eigen::Index(q.rows()), nk = Eigen::Index(k.rows()), dd = Eigen::Index(d);

    auto probs = std::make_shared<std::vector<RowMatrix>>();
    probs->reserve(layout.queries.size() * layout.heads);
    std::vector<double> out(q.size(), 0.0);
    MatMap om(out.data(), nq, dd);
    ConstMatMap qm = q.matrix(), km = k.matrix(), vm = v.matrix();
    for (std::size_t s = 0; s < layout.queries.size(); ++s) {
        const auto [qo, ql] = layout.queries[s];
        const auto [ko, kl] = layout.keys[s];
        if (qo + ql > q.rows() || ko + kl > k.rows()) throw ShapeError("attention: segment outside tensor");
        for (std::size_t h = 0; h < layout.heads; ++h) {
            const auto c0 = Eigen::Index(h * dh);
            RowMatrix scores = (qm.block(Eigen::Index(qo), c0, Eigen::Index(ql), Eigen::Index(dh)) *
                                km.block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh)).transpose()) *
                               inv_sqrt;
            for (std::size_t i = 0; i < ql; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < kl; ++j) {
                    const bool masked = (layout.causal && j > i) || (!layout.key_valid.empty() && !layout.key_valid[ko + j]);
                    if (masked) scores(Eigen::Index(i), Eigen::Index(j)) = -std::numeric_limits<double>::infinity();
                    mx = std::max(mx, scores(Eigen::Index(i), Eigen::Index(j)));
                }
                double z = 0.0;
                for (std::size_t j = 0; j < kl; ++j) {
                    double& e = scores(Eigen::Index(i), Eigen::Index(j));
                    e = std::isinf(mx) ? 0.0 : std::exp(e - mx);
                    z += e;
                }
                if (z > 0.0) scores.row(Eigen::Index(i)) /= z;
            }
            om.block(Eigen::Index(qo), c0, Eigen::Index(ql), Eigen::Index(dh)).noalias() =
                scores * vm.block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh));
            probs->push_back(std::move(scores));
        }
    }
    return detail::make_result(q.shape(), std::move(out), {&q, &k, &v}, [=, layout = layout](detail::Node& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        MatMap g = self.grad_map();
        ConstMatMap qv(pq->value.data(), nq, dd), kv(pk->value.data(), nk, dd), vv(pv->value.data(), nk, dd);
        std::size_t idx = 0;
        for (std::size_t s = 0; s < layout.queries.size(); ++s) {
            const auto [qo, ql] = layout.queries[s];
            const auto [ko, kl] = layout.keys[s];
            for (std::size_t h = 0; h < layout.heads; ++h, ++idx) {
                const RowMatrix& p = (*probs)[idx];
                const auto c0 = Eigen::Index(h * dh);
                auto gblock = g.block(Eigen::Index(qo), c0, Eigen::Index(ql), Eigen::Index(dh));
                if (pv->requires_grad)
                    pv->grad_map().block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh)).noalias() +=
                        p.transpose() * gblock;
                if (!pq->requires_grad && !pk->requires_grad) continue;
                RowMatrix dp = gblock * vv.block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh)).transpose();
                RowMatrix ds = p.cwiseProduct(dp);
                Eigen::VectorXd rowdot = ds.rowwise().sum();
                ds -= p.cwiseProduct(rowdot.replicate(1, Eigen::Index(kl)));
                ds *= inv_sqrt;
                if (pq->requires_grad)
                    pq->grad_map().block(Eigen::Index(qo), c0, Eigen::Index(ql), Eigen::Index(dh)).noalias() +=
                        ds * kv.block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh));
                if (pk->requires_grad)
                    pk->grad_map().block(Eigen::Index(ko), c0, Eigen::Index(kl), Eigen::Index(dh)).noalias() +=
                        ds.transpose() * qv.block(Eigen::Index(qo), c0, Eigen::Index(ql), Eigen::Index(dh));
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Largest relative discrepancy between the analytic gradient of the scalar `f()` with
/// respect to `x` and central finite differences with step `eps`. The relative error of a
/// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3); the floor keeps
/// coordinates whose true gradient is zero from dividing finite-difference noise by ~0.
template <class F>
double grad_check(F&& f, Tensor& x, double eps = 1e-6) {
    x.zero_grad();
    Tensor y = f();
    if (y.size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    y.backward();
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    x.zero_grad();
    double worst = 0.0;
    auto vals = x.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        double plus, minus;
        {
            NoGradGuard guard;
            vals[i] = orig + eps;
            plus = f().item();
            vals[i] = orig - eps;
            minus = f().item();
        }
        vals[i] = orig;
        const double numeric = (plus - minus) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

} // namespace stabforge::ad
