#include "fdt/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "fdt/errors.hpp"

namespace fdt::ad {

namespace {

thread_local std::string g_fault_op;
thread_local double g_fault_factor = 1.0;

using NodePtr = std::shared_ptr<Node>;

Var make_op(const char* op, Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    for (const auto& in : inputs) {
        node->requires_grad = node->requires_grad || in->requires_grad;
    }
    node->inputs = std::move(inputs);
    if (node->requires_grad) {
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape()) {
        grad = Tensor(value.shape());
    }
    return grad;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "constant";
    return Var(std::move(node));
}

Var variable(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "variable";
    node->requires_grad = true;
    return Var(std::move(node));
}

Var param(Param& p) {
    auto node = std::make_shared<Node>();
    node->value = p.effective();
    node->op = "param";
    node->param = &p;
    node->requires_grad = true;
    return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    }
    const std::size_t n = av.dim(0);
    const std::size_t k = av.dim(1);
    const std::size_t m = bv.dim(1);
    Tensor out({n, m});
    kernels::matmul(av.data(), bv.data(), out.data(), n, k, m, false);
    return make_op("matmul", std::move(out), {a.node(), b.node()}, [n, k, m](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        if (an.requires_grad) {
            kernels::matmul_nt(self.grad.data(), bn.value.data(), an.grad_buffer().data(), n, k, m, true);
        }
        if (bn.requires_grad) {
            kernels::matmul_tn(an.value.data(), self.grad.data(), bn.grad_buffer().data(), n, k, m, true);
        }
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const double* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i];
    }
    return make_op("add", std::move(out), {a.node(), b.node()}, [](Node& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) {
                double* g = in->grad_buffer().data();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Var add_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x.value();
    const std::size_t d = xv.cols();
    if (bias.value().size() != d) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(xv.shape()));
    }
    Tensor out = xv;
    const double* b = bias.value().data();
    const std::size_t rows = xv.rows();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] += b[j];
        }
    }
    return make_op("add_bias", std::move(out), {x.node(), bias.node()}, [rows, d](Node& self) {
        Node& xn = *self.inputs[0];
        Node& bn = *self.inputs[1];
        if (xn.requires_grad) {
            double* g = xn.grad_buffer().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (bn.requires_grad) {
            double* g = bn.grad_buffer().data();
            for (std::size_t j = 0; j < d; ++j) {
                double acc = g[j];
                for (std::size_t r = 0; r < rows; ++r) {
                    acc += self.grad[r * d + j];
                }
                g[j] = acc;
            }
        }
    });
}

Var add_constant(const Var& x, const Tensor& c) {
    require_same_shape("add_constant", x.value(), c);
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += c[i];
    }
    return make_op("add_constant", std::move(out), {x.node()}, [](Node& self) {
        double* g = self.inputs[0]->grad_buffer().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    return make_op("mul", std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        if (an.requires_grad) {
            double* g = an.grad_buffer().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * bn.value[i];
            }
        }
        if (bn.requires_grad) {
            double* g = bn.grad_buffer().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * an.value[i];
            }
        }
    });
}

Var scale(const Var& x, double factor) {
    Tensor out = x.value();
    for (double& v : out.values()) {
        v *= factor;
    }
    return make_op("scale", std::move(out), {x.node()}, [factor](Node& self) {
        double* g = self.inputs[0]->grad_buffer().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] += self.grad[i] * factor;
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) {
        v = v > 0.0 ? v : 0.0;
    }
    return make_op("relu", std::move(out), {x.node()}, [](Node& self) {
        Node& xn = *self.inputs[0];
        double* g = xn.grad_buffer().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (xn.value[i] > 0.0) {
                g[i] += self.grad[i];
            }
        }
    });
}

Var sum(const Var& x) {
    double total = 0.0;
    for (double v : x.value().values()) {
        total += v;
    }
    return make_op("sum", Tensor::scalar(total), {x.node()}, [](Node& self) {
        double* g = self.inputs[0]->grad_buffer().data();
        const double up = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) {
            g[i] += up;
        }
    });
}

Var softmax(const Var& x) {
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows();
    const std::size_t cols = xv.cols();
    Tensor out(xv.shape());
    kernels::softmax_rows(xv.data(), out.data(), rows, cols);
    return make_op("softmax", std::move(out), {x.node()}, [rows, cols](Node& self) {
        double* g = self.inputs[0]->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* dy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                dot += y[j] * dy[j];
            }
            for (std::size_t j = 0; j < cols; ++j) {
                g[r * cols + j] += y[j] * (dy[j] - dot);
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x.value();
    const std::size_t d = xv.cols();
    if (d == 0) {
        throw DimensionError("layer_norm: last dimension is 0");
    }
    if (gamma.value().size() != d || beta.value().size() != d) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " do not match last dim of " +
                             shape_str(xv.shape()));
    }
    const std::size_t rows = xv.rows();
    Tensor out(xv.shape());
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto rstd = std::make_shared<Tensor>(Shape{rows});
    kernels::layer_norm_forward(xv.data(), gamma.value().data(), beta.value().data(), out.data(), xhat->data(),
                                rstd->data(), rows, d, eps);
    return make_op("layer_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
                   [xhat, rstd, rows, d](Node& self) {
                       Node& xn = *self.inputs[0];
                       Node& gn = *self.inputs[1];
                       Node& bn = *self.inputs[2];
                       // Unused buffers still need storage; gradients into them are discarded.
                       Tensor scratch_x;
                       Tensor scratch_g;
                       Tensor scratch_b;
                       double* dx = xn.requires_grad ? xn.grad_buffer().data()
                                                     : (scratch_x = Tensor(xn.value.shape())).data();
                       double* dg = gn.requires_grad ? gn.grad_buffer().data()
                                                     : (scratch_g = Tensor(gn.value.shape())).data();
                       double* db = bn.requires_grad ? bn.grad_buffer().data()
                                                     : (scratch_b = Tensor(bn.value.shape())).data();
                       kernels::layer_norm_backward(self.grad.data(), xhat->data(), rstd->data(), gn.value.data(), dx,
                                                    dg, db, rows, d);
                   });
}

Var embedding(const Var& table, std::span<const int> ids) {
    const Tensor& tv = table.value();
    require_rank("embedding", tv, 2);
    const std::size_t vocab = tv.dim(0);
    const std::size_t d = tv.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DataError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                            std::to_string(vocab));
        }
        const double* src = tv.data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return make_op("embedding", std::move(out), {table.node()}, [saved = std::move(saved), d](Node& self) {
        double* g = self.inputs[0]->grad_buffer().data();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            double* row = g + static_cast<std::size_t>(saved[i]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                row[j] += self.grad[i * d + j];
            }
        }
    });
}

Var mse_loss(const Var& pred, const Tensor& target) {
    require_same_shape("mse_loss", pred.value(), target);
    const std::size_t n = target.size();
    if (n == 0) {
        throw DimensionError("mse_loss: empty tensors");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = pred.value()[i] - target[i];
        total += diff * diff;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    return make_op("mse_loss", Tensor::scalar(total * inv_n), {pred.node()}, [target, inv_n](Node& self) {
        Node& pn = *self.inputs[0];
        double* g = pn.grad_buffer().data();
        const double up = self.grad[0] * 2.0 * inv_n;
        for (std::size_t i = 0; i < target.size(); ++i) {
            g[i] += up * (pn.value[i] - target[i]);
        }
    });
}

namespace {

Var run_attention(const char* op, const Var& q, const Var& k, const Var& v, kernels::AttentionGeometry geom,
                  std::vector<kernels::AttentionSegment> segments, std::shared_ptr<const Tensor> mask,
                  Shape out_shape) {
    geom.mask = mask ? mask->data() : nullptr;
    const auto offsets = kernels::attention_prob_offsets(segments, geom.heads);
    auto probs = std::make_shared<Tensor>(Shape{offsets.back()});
    Tensor out(std::move(out_shape));
    kernels::attention_forward(geom, segments, q.value().data(), k.value().data(), v.value().data(), out.data(),
                               probs->data());
    return make_op(op, std::move(out), {q.node(), k.node(), v.node()},
                   [geom, segments = std::move(segments), probs, mask](Node& self) {
                       Node& qn = *self.inputs[0];
                       Node& kn = *self.inputs[1];
                       Node& vn = *self.inputs[2];
                       kernels::attention_backward(geom, segments, qn.value.data(), kn.value.data(),
                                                   vn.value.data(), probs->data(), self.grad.data(),
                                                   qn.grad_buffer().data(), kn.grad_buffer().data(),
                                                   vn.grad_buffer().data());
                   });
}

}  // namespace

Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask, bool causal) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_rank("scaled_dot_attention(q)", qv, 3);
    require_rank("scaled_dot_attention(k)", kv, 3);
    require_rank("scaled_dot_attention(v)", vv, 3);
    const std::size_t heads = qv.dim(0);
    const std::size_t tq = qv.dim(1);
    const std::size_t dk = qv.dim(2);
    const std::size_t tk = kv.dim(1);
    const std::size_t dv = vv.dim(2);
    if (kv.dim(0) != heads || vv.dim(0) != heads || kv.dim(2) != dk || vv.dim(1) != tk) {
        throw DimensionError("scaled_dot_attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) +
                             ", v " + shape_str(vv.shape()) + " are inconsistent");
    }
    std::shared_ptr<const Tensor> mask_copy;
    if (mask != nullptr) {
        if (mask->shape() != Shape{tq, tk}) {
            throw DimensionError("scaled_dot_attention: mask " + shape_str(mask->shape()) + " is not [" +
                                 std::to_string(tq) + "x" + std::to_string(tk) + "]");
        }
        mask_copy = std::make_shared<const Tensor>(*mask);
    }
    kernels::AttentionGeometry geom;
    geom.heads = 1;
    geom.head_dim = dk;
    geom.value_dim = dv;
    geom.q_stride = dk;
    geom.k_stride = dk;
    geom.v_stride = dv;
    geom.o_stride = dv;
    geom.scale = 1.0 / std::sqrt(static_cast<double>(dk));
    geom.causal = causal;
    std::vector<kernels::AttentionSegment> segments;
    for (std::size_t h = 0; h < heads; ++h) {
        segments.push_back({h * tq, tq, h * tk, tk});
    }
    return run_attention("scaled_dot_attention", q, k, v, geom, std::move(segments), std::move(mask_copy),
                         {heads, tq, dv});
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::vector<kernels::AttentionSegment> segments,
                         std::size_t heads, bool causal) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_rank("multi_head_attention(q)", qv, 2);
    require_rank("multi_head_attention(k)", kv, 2);
    require_rank("multi_head_attention(v)", vv, 2);
    const std::size_t d = qv.dim(1);
    if (heads == 0 || d % heads != 0 || kv.dim(1) != d || vv.dim(1) != d || kv.dim(0) != vv.dim(0)) {
        throw DimensionError("multi_head_attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) +
                             ", v " + shape_str(vv.shape()) + " with " + std::to_string(heads) + " heads");
    }
    for (const auto& s : segments) {
        if (s.q_offset + s.q_len > qv.dim(0) || s.k_offset + s.k_len > kv.dim(0) || s.k_len == 0) {
            throw DimensionError("multi_head_attention: segment out of range");
        }
    }
    const std::size_t head_dim = d / heads;
    kernels::AttentionGeometry geom;
    geom.heads = heads;
    geom.head_dim = head_dim;
    geom.value_dim = head_dim;
    geom.q_stride = d;
    geom.k_stride = d;
    geom.v_stride = d;
    geom.o_stride = d;
    geom.scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    geom.causal = causal;
    return run_attention("multi_head_attention", q, k, v, geom, std::move(segments), nullptr, qv.shape());
}

void backward(const Var& loss) {
    if (loss.value().size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward || node->grad.empty()) {
            continue;
        }
        if (!g_fault_op.empty() && g_fault_op == node->op) {
            for (double& g : node->grad.values()) {
                g *= g_fault_factor;
            }
        }
        node->backward(*node);
    }
    for (Node* node : order) {
        if (node->param == nullptr || node->grad.empty()) {
            continue;
        }
        Param& p = *node->param;
        const double k = p.multiplier();
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.grad[i] += k * node->grad[i];
        }
    }
}

ScopedBackwardFault::ScopedBackwardFault(std::string op, double factor)
    : previous_op_(g_fault_op), previous_factor_(g_fault_factor) {
    g_fault_op = std::move(op);
    g_fault_factor = factor;
}

ScopedBackwardFault::~ScopedBackwardFault() {
    g_fault_op = previous_op_;
    g_fault_factor = previous_factor_;
}

}  // namespace fdt::ad
