#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace uniap::numkit {

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Graph construction toggle, per logical thread. Evaluation paths wrap
// themselves in NoGradGuard so no tape is recorded.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
struct Node {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first use
    bool requires_grad = false;
    const char* op = "leaf";
    std::uint64_t id = next_node_id();
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int numel() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

inline int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape");
        n *= d;
    }
    return n;
}

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value.assign(shape_numel(shape), T(0));
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        t.check_finite("full");
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                            bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int>(data.size()))
            throw ShapeError("from_data: shape/data size mismatch");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        Tensor t(n);
        t.check_finite("from_data");
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    const std::vector<int>& shape() const { return node_->shape; }
    int numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::span<const T> value() const { return node_->value; }
    std::span<T> mutable_value() { return node_->value; }
    std::span<const T> grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        node_->grad.assign(node_->value.size(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item(): tensor is not scalar");
        return node_->value[0];
    }

    bool defined() const { return node_ != nullptr; }
    std::shared_ptr<Node<T>> node() const { return node_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> data(node_->value.begin(), node_->value.end());
        return Tensor<U>::from_data(node_->shape, std::move(data),
                                    node_->requires_grad);
    }

    void check_finite(const char* where) const {
        for (T v : node_->value)
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string("non-finite value produced by op '") +
                                   where + "'");
    }

private:
    std::shared_ptr<Node<T>> node_;
};

// The ordered record of operations reachable from a root, oldest first.
// Node ids are assigned at creation and parents are created before children,
// so sorting by id yields a valid topological order.
template <typename T>
class Tape {
public:
    static Tape trace(const Tensor<T>& root) {
        Tape tape;
        std::unordered_set<const Node<T>*> seen;
        std::vector<std::shared_ptr<Node<T>>> stack{root.node()};
        while (!stack.empty()) {
            auto n = stack.back();
            stack.pop_back();
            if (!seen.insert(n.get()).second) continue;
            tape.ops_.push_back(n);
            for (auto& p : n->parents) stack.push_back(p);
        }
        std::sort(tape.ops_.begin(), tape.ops_.end(),
                  [](const auto& a, const auto& b) { return a->id < b->id; });
        return tape;
    }

    const std::vector<std::shared_ptr<Node<T>>>& ops() const { return ops_; }

private:
    std::vector<std::shared_ptr<Node<T>>> ops_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(const char* op, std::vector<int> shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    for (auto& p : parents) rg = rg || p.requires_grad();
    if (g_grad_enabled && rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward);
    }
    Tensor<T> out(n);
    out.check_finite(op);
    return out;
}

template <typename T>
void accumulate(Node<T>& dst, const std::vector<T>& delta) {
    dst.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::make_op<T>(
        "add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                detail::accumulate(*p, self.grad);
            }
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return detail::make_op<T>(
        "sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) detail::accumulate(pa, self.grad);
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] -= self.grad[i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_op<T>(
        "mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pa.grad[i] += self.grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] += self.grad[i] * pa.value[i];
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = a.value()[i] * c;
    return detail::make_op<T>(
        "scale", a.shape(), std::move(out), {a}, [c](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] * c;
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = a.value()[i] + c;
    return detail::make_op<T>(
        "add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (p.requires_grad) detail::accumulate(p, self.grad);
        });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i)
        out[i] = std::exp(a.value()[i]);
    return detail::make_op<T>(
        "exp", a.shape(), std::move(out), {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] * self.value[i];
        });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) out[i] = std::log(a.value()[i]);
    return detail::make_op<T>(
        "log", a.shape(), std::move(out), {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] / p.value[i];
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) {
        T x = a.value()[i];
        out[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                        : std::exp(x) / (T(1) + std::exp(x));
    }
    return detail::make_op<T>(
        "sigmoid", a.shape(), std::move(out), {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                T y = self.value[i];
                p.grad[i] += self.grad[i] * y * (T(1) - y);
            }
        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double kInvSqrt2 = 0.7071067811865476;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    std::vector<T> out(a.numel());
    for (int i = 0; i < a.numel(); ++i) {
        double x = static_cast<double>(a.value()[i]);
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    return detail::make_op<T>(
        "gelu", a.shape(), std::move(out), {a}, [=](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double x = static_cast<double>(p.value[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                p.grad[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
            }
        });
}

// ---------------------------------------------------------------------------
// reductions / reshaping
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (int i = 0; i < a.numel(); ++i) s += a.value()[i];
    return detail::make_op<T>(
        "sum", {1}, {s}, {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (auto& g : p.grad) g += self.grad[0];
        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel()) throw ShapeError("reshape: numel mismatch");
    std::vector<T> out(a.value().begin(), a.value().end());
    return detail::make_op<T>(
        "reshape", std::move(shape), std::move(out), {a}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (p.requires_grad) detail::accumulate(p, self.grad);
        });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    int cols = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
    if (cols < 0) throw ShapeError("concat_rows: expects 2-D tensors");
    int rows = 0;
    for (auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[1] != cols)
            throw ShapeError("concat_rows: column mismatch");
        rows += p.shape()[0];
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(rows) * cols);
    for (auto& p : parts)
        out.insert(out.end(), p.value().begin(), p.value().end());
    return detail::make_op<T>(
        "concat_rows", {rows, cols}, std::move(out), parts, [](Node<T>& self) {
            size_t off = 0;
            for (auto& p : self.parents) {
                size_t n = p->value.size();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
                }
                off += n;
            }
        });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int c1) {
    if (a.shape().size() != 2) throw ShapeError("slice_cols: expects 2-D");
    int rows = a.shape()[0], cols = a.shape()[1];
    if (c0 < 0 || c1 > cols || c0 >= c1) throw ShapeError("slice_cols: bad range");
    int w = c1 - c0;
    std::vector<T> out(static_cast<size_t>(rows) * w);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
            out[static_cast<size_t>(r) * w + c] = a.value()[static_cast<size_t>(r) * cols + c0 + c];
    return detail::make_op<T>(
        "slice_cols", {rows, w}, std::move(out), {a}, [=](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    p.grad[static_cast<size_t>(r) * cols + c0 + c] +=
                        self.grad[static_cast<size_t>(r) * w + c];
        });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    int rows = parts[0].shape()[0];
    int cols = 0;
    for (auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows)
            throw ShapeError("concat_cols: row mismatch");
        cols += p.shape()[1];
    }
    std::vector<T> out(static_cast<size_t>(rows) * cols);
    int off = 0;
    for (auto& p : parts) {
        int w = p.shape()[1];
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c)
                out[static_cast<size_t>(r) * cols + off + c] =
                    p.value()[static_cast<size_t>(r) * w + c];
        off += w;
    }
    return detail::make_op<T>(
        "concat_cols", {rows, cols}, std::move(out), parts, [=](Node<T>& self) {
            int coff = 0;
            for (auto& p : self.parents) {
                int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c)
                            p->grad[static_cast<size_t>(r) * w + c] +=
                                self.grad[static_cast<size_t>(r) * cols + coff + c];
                }
                coff += w;
            }
        });
}

// mean over rows of [n, d] -> [1, d]
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ShapeError("mean_rows: expects 2-D");
    int rows = a.shape()[0], cols = a.shape()[1];
    std::vector<T> out(cols, T(0));
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[c] += a.value()[static_cast<size_t>(r) * cols + c];
    for (auto& v : out) v /= static_cast<T>(rows);
    return detail::make_op<T>(
        "mean_rows", {1, cols}, std::move(out), {a}, [=](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            T inv = T(1) / static_cast<T>(rows);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    p.grad[static_cast<size_t>(r) * cols + c] += self.grad[c] * inv;
        });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: expects 2-D tensors");
    int n = a.shape()[0], k = a.shape()[1];
    int k2 = b.shape()[0], m = b.shape()[1];
    if (k != k2) throw ShapeError("matmul: inner dimension mismatch");
    std::vector<T> out(static_cast<size_t>(n) * m, T(0));
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    for (int i = 0; i < n; ++i)
        for (int l = 0; l < k; ++l) {
            T av = pa[static_cast<size_t>(i) * k + l];
            if (av == T(0)) continue;
            const T* brow = pb + static_cast<size_t>(l) * m;
            T* orow = out.data() + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    return detail::make_op<T>(
        "matmul", {n, m}, std::move(out), {a, b}, [=](Node<T>& self) {
            auto& pa_ = *self.parents[0];
            auto& pb_ = *self.parents[1];
            if (pa_.requires_grad) {
                pa_.ensure_grad();
                // dA = dC * B^T
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) {
                        T g = self.grad[static_cast<size_t>(i) * m + j];
                        if (g == T(0)) continue;
                        for (int l = 0; l < k; ++l)
                            pa_.grad[static_cast<size_t>(i) * k + l] +=
                                g * pb_.value[static_cast<size_t>(l) * m + j];
                    }
            }
            if (pb_.requires_grad) {
                pb_.ensure_grad();
                // dB = A^T * dC
                for (int i = 0; i < n; ++i)
                    for (int l = 0; l < k; ++l) {
                        T av = pa_.value[static_cast<size_t>(i) * k + l];
                        if (av == T(0)) continue;
                        for (int j = 0; j < m; ++j)
                            pb_.grad[static_cast<size_t>(l) * m + j] +=
                                av * self.grad[static_cast<size_t>(i) * m + j];
                    }
            }
        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose: expects 2-D");
    int n = a.shape()[0], m = a.shape()[1];
    std::vector<T> out(static_cast<size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<size_t>(j) * n + i] = a.value()[static_cast<size_t>(i) * m + j];
    return detail::make_op<T>(
        "transpose", {m, n}, std::move(out), {a}, [=](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    p.grad[static_cast<size_t>(i) * m + j] +=
                        self.grad[static_cast<size_t>(j) * n + i];
        });
}

// x: [n, d], bias: [d] (or [1, d]); adds bias to every row
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.shape().size() != 2) throw ShapeError("add_row_bias: x must be 2-D");
    int n = x.shape()[0], d = x.shape()[1];
    if (bias.numel() != d) throw ShapeError("add_row_bias: bias size mismatch");
    std::vector<T> out(x.value().begin(), x.value().end());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += bias.value()[j];
    return detail::make_op<T>(
        "add_row_bias", x.shape(), std::move(out), {x, bias}, [=](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pb = *self.parents[1];
            if (px.requires_grad) detail::accumulate(px, self.grad);
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        pb.grad[j] += self.grad[static_cast<size_t>(i) * d + j];
            }
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// softmax / layernorm
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const auto& shape = x.shape();
    int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("softmax: invalid axis");
    int len = shape[axis];
    int inner = 1;
    for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
    int outer = x.numel() / (len * inner);

    std::vector<T> out(x.numel());
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            size_t base = static_cast<size_t>(o) * len * inner + in;
            T mx = x.value()[base];
            for (int l = 1; l < len; ++l)
                mx = std::max(mx, x.value()[base + static_cast<size_t>(l) * inner]);
            T denom = 0;
            for (int l = 0; l < len; ++l) {
                T e = std::exp(x.value()[base + static_cast<size_t>(l) * inner] - mx);
                out[base + static_cast<size_t>(l) * inner] = e;
                denom += e;
            }
            for (int l = 0; l < len; ++l)
                out[base + static_cast<size_t>(l) * inner] /= denom;
        }
    return detail::make_op<T>(
        "softmax", shape, std::move(out), {x}, [=](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int o = 0; o < outer; ++o)
                for (int in = 0; in < inner; ++in) {
                    size_t base = static_cast<size_t>(o) * len * inner + in;
                    T dot = 0;
                    for (int l = 0; l < len; ++l) {
                        size_t idx = base + static_cast<size_t>(l) * inner;
                        dot += self.grad[idx] * self.value[idx];
                    }
                    for (int l = 0; l < len; ++l) {
                        size_t idx = base + static_cast<size_t>(l) * inner;
                        p.grad[idx] += (self.grad[idx] - dot) * self.value[idx];
                    }
                }
        });
}

// x: [n, d]; gamma, beta: [d]
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps = T(1e-5)) {
    if (x.shape().size() != 2) throw ShapeError("layernorm: x must be 2-D");
    int n = x.shape()[0], d = x.shape()[1];
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layernorm: gamma/beta size mismatch");
    std::vector<T> out(x.numel());
    std::vector<T> means(n), rstds(n);
    for (int i = 0; i < n; ++i) {
        const T* row = x.value().data() + static_cast<size_t>(i) * d;
        T m = 0;
        for (int j = 0; j < d; ++j) m += row[j];
        m /= static_cast<T>(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
        var /= static_cast<T>(d);
        T rstd = T(1) / std::sqrt(var + eps);
        means[i] = m;
        rstds[i] = rstd;
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(i) * d + j] =
                (row[j] - m) * rstd * gamma.value()[j] + beta.value()[j];
    }
    return detail::make_op<T>(
        "layernorm", x.shape(), std::move(out), {x, gamma, beta},
        [=, means = std::move(means), rstds = std::move(rstds)](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (int i = 0; i < n; ++i) {
                const T* row = px.value.data() + static_cast<size_t>(i) * d;
                const T* go = self.grad.data() + static_cast<size_t>(i) * d;
                T m = means[i], rstd = rstds[i];
                if (pg.requires_grad || pb.requires_grad) {
                    pg.ensure_grad();
                    pb.ensure_grad();
                    for (int j = 0; j < d; ++j) {
                        T xhat = (row[j] - m) * rstd;
                        pg.grad[j] += go[j] * xhat;
                        pb.grad[j] += go[j];
                    }
                }
                if (px.requires_grad) {
                    px.ensure_grad();
                    // dxhat = go * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int j = 0; j < d; ++j) {
                        T xhat = (row[j] - m) * rstd;
                        T dxhat = go[j] * pg.value[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    T inv_d = T(1) / static_cast<T>(d);
                    for (int j = 0; j < d; ++j) {
                        T xhat = (row[j] - m) * rstd;
                        T dxhat = go[j] * pg.value[j];
                        px.grad[static_cast<size_t>(i) * d + j] +=
                            rstd * (dxhat - sum_dxhat * inv_d -
                                    xhat * sum_dxhat_xhat * inv_d);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution (NCHW, cross-correlation)
// ---------------------------------------------------------------------------

inline int conv_out_size(int in, int k, int stride, int pad) {
    int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0) throw ShapeError("conv: non-positive output size");
    return out;
}

// x: [N, C, H, W], w: [O, C, kh, kw], b: [O]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw ShapeError("conv2d: x and w must be 4-D");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int O = w.shape()[0], Cw = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (C != Cw) throw ShapeError("conv2d: channel mismatch");
    if (b.numel() != O) throw ShapeError("conv2d: bias size mismatch");
    int Ho = conv_out_size(H, kh, stride, pad);
    int Wo = conv_out_size(W, kw, stride, pad);

    std::vector<T> out(static_cast<size_t>(N) * O * Ho * Wo);
    auto xat = [&](int nn, int c, int i, int j) -> T {
        return x.value()[((static_cast<size_t>(nn) * C + c) * H + i) * W + j];
    };
    for (int nn = 0; nn < N; ++nn)
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    T acc = b.value()[o];
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki) {
                            int yi = i * stride + ki - pad;
                            if (yi < 0 || yi >= H) continue;
                            for (int kj = 0; kj < kw; ++kj) {
                                int xj = j * stride + kj - pad;
                                if (xj < 0 || xj >= W) continue;
                                acc += xat(nn, c, yi, xj) *
                                       w.value()[((static_cast<size_t>(o) * C + c) * kh + ki) * kw + kj];
                            }
                        }
                    out[((static_cast<size_t>(nn) * O + o) * Ho + i) * Wo + j] = acc;
                }
    return detail::make_op<T>(
        "conv2d", {N, O, Ho, Wo}, std::move(out), {x, w, b}, [=](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (pw.requires_grad) pw.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int o = 0; o < O; ++o)
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            T g = self.grad[((static_cast<size_t>(nn) * O + o) * Ho + i) * Wo + j];
                            if (g == T(0)) continue;
                            if (pb.requires_grad) pb.grad[o] += g;
                            for (int c = 0; c < C; ++c)
                                for (int ki = 0; ki < kh; ++ki) {
                                    int yi = i * stride + ki - pad;
                                    if (yi < 0 || yi >= H) continue;
                                    for (int kj = 0; kj < kw; ++kj) {
                                        int xj = j * stride + kj - pad;
                                        if (xj < 0 || xj >= W) continue;
                                        size_t xi_idx = ((static_cast<size_t>(nn) * C + c) * H + yi) * W + xj;
                                        size_t w_idx = ((static_cast<size_t>(o) * C + c) * kh + ki) * kw + kj;
                                        if (pw.requires_grad)
                                            pw.grad[w_idx] += g * px.value[xi_idx];
                                        if (px.requires_grad)
                                            px.grad[xi_idx] += g * pw.value[w_idx];
                                    }
                                }
                        }
        });
}

// x: [N, C, H, W], w: [C, O, kh, kw], b: [O]; output spatial (H-1)*s - 2p + k
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw ShapeError("conv_transpose2d: x and w must be 4-D");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int Cw = w.shape()[0], O = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (C != Cw) throw ShapeError("conv_transpose2d: channel mismatch");
    if (b.numel() != O) throw ShapeError("conv_transpose2d: bias size mismatch");
    int Ho = (H - 1) * stride - 2 * pad + kh;
    int Wo = (W - 1) * stride - 2 * pad + kw;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: bad geometry");

    std::vector<T> out(static_cast<size_t>(N) * O * Ho * Wo, T(0));
    for (int nn = 0; nn < N; ++nn) {
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    out[((static_cast<size_t>(nn) * O + o) * Ho + i) * Wo + j] = b.value()[o];
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    T xv = x.value()[((static_cast<size_t>(nn) * C + c) * H + i) * W + j];
                    if (xv == T(0)) continue;
                    for (int o = 0; o < O; ++o)
                        for (int ki = 0; ki < kh; ++ki) {
                            int yi = i * stride + ki - pad;
                            if (yi < 0 || yi >= Ho) continue;
                            for (int kj = 0; kj < kw; ++kj) {
                                int yj = j * stride + kj - pad;
                                if (yj < 0 || yj >= Wo) continue;
                                out[((static_cast<size_t>(nn) * O + o) * Ho + yi) * Wo + yj] +=
                                    xv * w.value()[((static_cast<size_t>(c) * O + o) * kh + ki) * kw + kj];
                            }
                        }
                }
    }
    return detail::make_op<T>(
        "conv_transpose2d", {N, O, Ho, Wo}, std::move(out), {x, w, b},
        [=](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (pw.requires_grad) pw.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            if (pb.requires_grad)
                for (int nn = 0; nn < N; ++nn)
                    for (int o = 0; o < O; ++o)
                        for (int i = 0; i < Ho; ++i)
                            for (int j = 0; j < Wo; ++j)
                                pb.grad[o] += self.grad[((static_cast<size_t>(nn) * O + o) * Ho + i) * Wo + j];
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            size_t x_idx = ((static_cast<size_t>(nn) * C + c) * H + i) * W + j;
                            for (int o = 0; o < O; ++o)
                                for (int ki = 0; ki < kh; ++ki) {
                                    int yi = i * stride + ki - pad;
                                    if (yi < 0 || yi >= Ho) continue;
                                    for (int kj = 0; kj < kw; ++kj) {
                                        int yj = j * stride + kj - pad;
                                        if (yj < 0 || yj >= Wo) continue;
                                        size_t o_idx = ((static_cast<size_t>(nn) * O + o) * Ho + yi) * Wo + yj;
                                        size_t w_idx = ((static_cast<size_t>(c) * O + o) * kh + ki) * kw + kj;
                                        T g = self.grad[o_idx];
                                        if (g == T(0)) continue;
                                        if (px.requires_grad)
                                            px.grad[x_idx] += g * pw.value[w_idx];
                                        if (pw.requires_grad)
                                            pw.grad[w_idx] += g * px.value[x_idx];
                                    }
                                }
                        }
        });
}

// replicate-pad the two spatial dims of [N, C, H, W] by p on each side
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int p) {
    if (x.shape().size() != 4) throw ShapeError("pad_replicate: expects 4-D");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int Ho = H + 2 * p, Wo = W + 2 * p;
    std::vector<T> out(static_cast<size_t>(N) * C * Ho * Wo);
    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    int si = std::clamp(i - p, 0, H - 1);
                    int sj = std::clamp(j - p, 0, W - 1);
                    out[((static_cast<size_t>(nn) * C + c) * Ho + i) * Wo + j] =
                        x.value()[((static_cast<size_t>(nn) * C + c) * H + si) * W + sj];
                }
    return detail::make_op<T>(
        "pad_replicate", {N, C, Ho, Wo}, std::move(out), {x}, [=](Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            int si = std::clamp(i - p, 0, H - 1);
                            int sj = std::clamp(j - p, 0, W - 1);
                            px.grad[((static_cast<size_t>(nn) * C + c) * H + si) * W + sj] +=
                                self.grad[((static_cast<size_t>(nn) * C + c) * Ho + i) * Wo + j];
                        }
        });
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.shape().size() != 4) throw ShapeError("upsample_nearest2: expects 4-D");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int Ho = H * 2, Wo = W * 2;
    std::vector<T> out(static_cast<size_t>(N) * C * Ho * Wo);
    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    out[((static_cast<size_t>(nn) * C + c) * Ho + i) * Wo + j] =
                        x.value()[((static_cast<size_t>(nn) * C + c) * H + i / 2) * W + j / 2];
    return detail::make_op<T>(
        "upsample_nearest2", {N, C, Ho, Wo}, std::move(out), {x},
        [=](Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j)
                            px.grad[((static_cast<size_t>(nn) * C + c) * H + i / 2) * W + j / 2] +=
                                self.grad[((static_cast<size_t>(nn) * C + c) * Ho + i) * Wo + j];
        });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Numerically stable binary cross-entropy on logits against soft targets in
// [0,1]. Targets carry no gradient.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits: shape mismatch");
    std::vector<T> out(logits.numel());
    for (int i = 0; i < logits.numel(); ++i) {
        T y = targets.value()[i];
        if (y < T(0) || y > T(1))
            throw std::invalid_argument("bce_with_logits: target outside [0,1]");
        T z = logits.value()[i];
        out[i] = std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::fabs(z)));
    }
    return detail::make_op<T>(
        "bce_with_logits", logits.shape(), std::move(out), {logits, targets},
        [](Node<T>& self) {
            auto& pl = *self.parents[0];
            auto& pt = *self.parents[1];
            if (!pl.requires_grad) return;
            pl.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                T z = pl.value[i];
                T s = z >= 0 ? T(1) / (T(1) + std::exp(-z))
                             : std::exp(z) / (T(1) + std::exp(z));
                pl.grad[i] += self.grad[i] * (s - pt.value[i]);
            }
        });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss.requires_grad())
        throw ShapeError("backward: loss is detached from all parameters");
    auto tape = Tape<T>::trace(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    const auto& ops = tape.ops();
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
        auto& n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace uniap::numkit
