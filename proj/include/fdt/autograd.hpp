#pragma once

// Tape-free reverse-mode autodiff: every op returns a Var that owns its value
// and a closure propagating its gradient to the inputs. backward() walks the
// graph in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fdt/kernels.hpp"
#include "fdt/param.hpp"
#include "fdt/tensor.hpp"

namespace fdt::ad {

inline constexpr double kLayerNormEps = 1e-5;

struct Node {
    Tensor value;
    Tensor grad;  // zero-filled on first use
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    Param* param = nullptr;
    const char* op = "leaf";
    bool requires_grad = false;

    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
// Free leaf that collects a gradient but is not tied to a Param.
Var variable(Tensor value);
// Leaf holding p.effective(); backward() adds d(loss)/d(raw) into p.grad.
Var param(Param& p);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& bias);
Var add_constant(const Var& x, const Tensor& c);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var relu(const Var& x);
Var sum(const Var& x);
Var softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = kLayerNormEps);
Var embedding(const Var& table, std::span<const int> ids);
Var mse_loss(const Var& pred, const Tensor& target);

// softmax(q k^T / sqrt(dk) + mask) v for q [h x Tq x dk], k [h x Tk x dk],
// v [h x Tk x dv]. `mask` is an optional additive [Tq x Tk] tensor; `causal`
// adds kernels::kMaskValue above the diagonal.
Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask = nullptr, bool causal = false);

// Multi-head attention over packed rows: q [Rq x d], k/v [Rk x d]. Each
// segment pairs a run of query rows with the key rows it may attend to.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::vector<kernels::AttentionSegment> segments,
                         std::size_t heads, bool causal);

// Requires a single-element loss. Gradients accumulate: callers zero first.
void backward(const Var& loss);

// Test fixture: while alive, gradients flowing out of nodes whose op name
// matches are multiplied by `factor` (a deliberately wrong backward rule).
class ScopedBackwardFault {
public:
    explicit ScopedBackwardFault(std::string op, double factor = 1.5);
    ~ScopedBackwardFault();
    ScopedBackwardFault(const ScopedBackwardFault&) = delete;
    ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

private:
    std::string previous_op_;
    double previous_factor_;
};

}  // namespace fdt::ad
