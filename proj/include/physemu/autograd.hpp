#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "physemu/tensor.hpp"

namespace physemu {

// Thread-local switch for building backward graphs. Evaluation passes run
// under NoGradGuard so paired-forward tests and validation allocate nothing.
struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

// Reverse-mode autodiff variable. A Var is a shared handle to a graph node
// holding the value, the (lazily allocated) gradient, parent links, and a
// backward closure. Backward order is the deterministic reverse of a DFS
// post-order, so gradient accumulation is bit-reproducible.
template <class T>
class Var {
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool grad_alloc = false;
        bool requires_grad = false;
        bool is_leaf = true;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;
    };

public:
    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = requires_grad;
        return v;
    }

    // Graph-building constructor used by every op. When grad mode is off or no
    // parent requires grad, the result is a detached leaf.
    static Var make(Tensor<T> value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
        bool track = GradMode::enabled();
        bool any = false;
        if (track) {
            for (const auto& p : parents)
                if (p.defined() && p.n_->requires_grad) any = true;
        }
        if (!track || !any) return leaf(std::move(value), false);
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = true;
        v.n_->is_leaf = false;
        v.n_->parents.reserve(parents.size());
        for (auto& p : parents) v.n_->parents.push_back(p.n_);
        v.n_->backprop = std::move(backprop);
        return v;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& val() const { return n_->value; }
    Tensor<T>& mutable_val() { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    void set_requires_grad(bool rg) {
        if (!n_->is_leaf) raise<NumericsError>("set_requires_grad: only leaf variables may be toggled");
        n_->requires_grad = rg;
        if (!rg) {
            n_->grad = Tensor<T>();
            n_->grad_alloc = false;
        }
    }

    bool has_grad() const { return n_ && n_->grad_alloc; }

    Tensor<T>& grad() {
        ensure_grad(*n_);
        return n_->grad;
    }
    const Tensor<T>& grad_view() const { return n_->grad; }

    void zero_grad() {
        if (n_ && n_->grad_alloc) n_->grad.fill(T(0));
    }

    // Backpropagate from a scalar.
    void backward() {
        if (!n_) raise<NumericsError>("backward: undefined variable");
        if (n_->value.numel() != 1) raise<ShapeError>("backward: root must be scalar, got ", n_->value.shape_str());
        if (!n_->requires_grad) return;
        std::vector<Node*> order;
        topo_order(order);
        ensure_grad(*n_);
        n_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backprop) node->backprop(*node);
        }
    }

    // Helpers for backward closures.
    static void ensure_grad(Node& n) {
        if (!n.grad_alloc) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.grad_alloc = true;
        }
    }
    static bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

    using NodeT = Node;

private:
    void topo_order(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (p && p->requires_grad && !p->is_leaf && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> n_;

    template <class U>
    friend class VarOps;
};

// Free-function op layer. Each op produces the forward value and installs a
// closure that routes gradients to any parent that wants them.
template <class T>
class VarOps {
public:
    using V = Var<T>;
    using Node = typename Var<T>::NodeT;

    static V add(const V& a, const V& b) {
        check_shape(a.val().same_shape(b.val()), "add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
        Tensor<T> out = a.val();
        out.add_(b.val());
        return V::make(std::move(out), {a, b}, [](Node& self) {
            for (int k = 0; k < 2; ++k) {
                auto& p = self.parents[static_cast<size_t>(k)];
                if (!V::wants_grad(p)) continue;
                V::ensure_grad(*p);
                p->grad.add_(self.grad);
            }
        });
    }

    static V sub(const V& a, const V& b) {
        check_shape(a.val().same_shape(b.val()), "sub: shape mismatch");
        Tensor<T> out = a.val();
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
        return V::make(std::move(out), {a, b}, [](Node& self) {
            if (V::wants_grad(self.parents[0])) {
                V::ensure_grad(*self.parents[0]);
                self.parents[0]->grad.add_(self.grad);
            }
            if (V::wants_grad(self.parents[1])) {
                V::ensure_grad(*self.parents[1]);
                auto& g = self.parents[1]->grad;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
            }
        });
    }

    static V mul(const V& a, const V& b) {
        check_shape(a.val().same_shape(b.val()), "mul: shape mismatch");
        Tensor<T> out = a.val();
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
        return V::make(std::move(out), {a, b}, [](Node& self) {
            const auto& av = self.parents[0]->value;
            const auto& bv = self.parents[1]->value;
            if (V::wants_grad(self.parents[0])) {
                V::ensure_grad(*self.parents[0]);
                auto& g = self.parents[0]->grad;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
            }
            if (V::wants_grad(self.parents[1])) {
                V::ensure_grad(*self.parents[1]);
                auto& g = self.parents[1]->grad;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
            }
        });
    }

    static V scale(const V& a, T c) {
        Tensor<T> out = a.val();
        out.scale_(c);
        return V::make(std::move(out), {a}, [c](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            auto& g = self.parents[0]->grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += c * self.grad[i];
        });
    }

    static V silu(const V& a) {
        Tensor<T> out(a.val().shape());
        const auto& x = a.val();
        for (int64_t i = 0; i < x.numel(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-x[i]));
            out[i] = x[i] * s;
        }
        return V::make(std::move(out), {a}, [](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            const auto& x = self.parents[0]->value;
            auto& g = self.parents[0]->grad;
            for (int64_t i = 0; i < g.numel(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-x[i]));
                g[i] += self.grad[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        });
    }

    // Per-row scaling: x (R, ...) scaled by m[r]. Used for drop path masks and
    // per-sample normalisation factors; the mask itself is a constant.
    static V scale_rows(const V& x, const Tensor<T>& m) {
        check_shape(x.val().rank() >= 1 && m.numel() == x.val().size(0), "scale_rows: mask length mismatch");
        const int64_t rows = x.val().size(0);
        const int64_t inner = x.val().numel() / std::max<int64_t>(rows, 1);
        Tensor<T> out = x.val();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < inner; ++i) out[r * inner + i] *= m[r];
        Tensor<T> mask = m;
        return V::make(std::move(out), {x}, [mask, rows, inner](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            auto& g = self.parents[0]->grad;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < inner; ++i) g[r * inner + i] += self.grad[r * inner + i] * mask[r];
        });
    }

    static V mean_all(const V& a) {
        const int64_t n = a.val().numel();
        check_shape(n > 0, "mean_all: empty tensor");
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += a.val()[i];
        Tensor<T> out = Tensor<T>::scalar(acc / T(n));
        return V::make(std::move(out), {a}, [n](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            const T g = self.grad[0] / T(n);
            auto& pg = self.parents[0]->grad;
            for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += g;
        });
    }

    // Mean squared error over all elements (Eq-5-style reconstruction loss).
    static V mse_loss(const V& pred, const V& target) {
        check_shape(pred.val().same_shape(target.val()), "mse_loss: shape mismatch " + pred.val().shape_str() + " vs " + target.val().shape_str());
        const int64_t n = pred.val().numel();
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) {
            const T d = pred.val()[i] - target.val()[i];
            acc += d * d;
        }
        Tensor<T> out = Tensor<T>::scalar(acc / T(n));
        return V::make(std::move(out), {pred, target}, [n](Node& self) {
            const auto& pv = self.parents[0]->value;
            const auto& tv = self.parents[1]->value;
            const T g = self.grad[0] * T(2) / T(n);
            if (V::wants_grad(self.parents[0])) {
                V::ensure_grad(*self.parents[0]);
                auto& pg = self.parents[0]->grad;
                for (int64_t i = 0; i < n; ++i) pg[i] += g * (pv[i] - tv[i]);
            }
            if (V::wants_grad(self.parents[1])) {
                V::ensure_grad(*self.parents[1]);
                auto& tg = self.parents[1]->grad;
                for (int64_t i = 0; i < n; ++i) tg[i] -= g * (pv[i] - tv[i]);
            }
        });
    }

    // Mean absolute error over all elements (Eq-4-style rollout loss).
    // Subgradient 0 at exact ties.
    static V mae_loss(const V& pred, const V& target) {
        check_shape(pred.val().same_shape(target.val()), "mae_loss: shape mismatch " + pred.val().shape_str() + " vs " + target.val().shape_str());
        const int64_t n = pred.val().numel();
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += std::abs(pred.val()[i] - target.val()[i]);
        Tensor<T> out = Tensor<T>::scalar(acc / T(n));
        return V::make(std::move(out), {pred, target}, [n](Node& self) {
            const auto& pv = self.parents[0]->value;
            const auto& tv = self.parents[1]->value;
            const T g = self.grad[0] / T(n);
            if (V::wants_grad(self.parents[0])) {
                V::ensure_grad(*self.parents[0]);
                auto& pg = self.parents[0]->grad;
                for (int64_t i = 0; i < n; ++i) {
                    const T d = pv[i] - tv[i];
                    pg[i] += g * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
                }
            }
            if (V::wants_grad(self.parents[1])) {
                V::ensure_grad(*self.parents[1]);
                auto& tg = self.parents[1]->grad;
                for (int64_t i = 0; i < n; ++i) {
                    const T d = pv[i] - tv[i];
                    tg[i] -= g * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
                }
            }
        });
    }
};

} // namespace physemu
