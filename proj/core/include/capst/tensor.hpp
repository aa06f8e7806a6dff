#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "capst/errors.hpp"

namespace capst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

template <class T>
class Tape;

// Dense n-d tensor. Data and grad live in shared buffers so views
// (reshape) alias storage; the shape itself is immutable after
// construction. grad is allocated iff requires_grad.
template <class T>
class Tensor {
public:
    using Buffer = std::shared_ptr<std::vector<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (data_->size() != shape_numel(shape_)) {
            throw shape_error("tensor data length " + std::to_string(data_->size()) +
                              " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool defined() const { return static_cast<bool>(data_); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T& operator[](std::size_t i) { return (*data_)[i]; }
    const T& operator[](std::size_t i) const { return (*data_)[i]; }

    bool requires_grad() const { return static_cast<bool>(grad_); }
    Tensor& set_requires_grad(bool on) {
        if (on && !grad_) grad_ = std::make_shared<std::vector<T>>(numel(), T(0));
        if (!on) grad_.reset();
        return *this;
    }
    T* grad() { return grad_ ? grad_->data() : nullptr; }
    const T* grad() const { return grad_ ? grad_->data() : nullptr; }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    Buffer data_buffer() const { return data_; }
    Buffer grad_buffer() const { return grad_; }

    // View with a new shape over the same storage (and grad storage, so
    // gradients flow through views without a tape node).
    Tensor reshape(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw shape_error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                              ": element count mismatch");
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.grad_ = grad_;
        return t;
    }

    // Same storage, detached from autodiff.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

private:
    Shape shape_;
    Buffer data_;
    Buffer grad_;
};

// Per-forward-pass reverse-mode tape. Nodes run in exact reverse
// construction order. Grad buffers of tensors the tape created are zeroed
// before each backward so repeated backward calls accumulate only into
// leaf (parameter) grads.
template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& current() {
        thread_local Tape* t = nullptr;
        return t;
    }

    // RAII activation: ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
        ~Scope() { current() = prev_; }

    private:
        Tape* prev_;
    };

    // Suspends recording (inference / routing inner loop).
    class NoGrad {
    public:
        NoGrad() : prev_(current()) { current() = nullptr; }
        ~NoGrad() { current() = prev_; }

    private:
        Tape* prev_;
    };

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    // Marks a grad buffer as tape-owned (an intermediate, not a leaf).
    void own(const typename Tensor<T>::Buffer& g) { intermediates_.push_back(g); }

    // Registers an op output: allocates its grad and claims it.
    void register_output(Tensor<T>& out) {
        out.set_requires_grad(true);
        own(out.grad_buffer());
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw shape_error("backward requires a scalar loss, got " +
                              shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw error("backward: loss does not require grad (nothing recorded)");
        }
        for (auto& g : intermediates_) std::fill(g->begin(), g->end(), T(0));
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<typename Tensor<T>::Buffer> intermediates_;
};

namespace detail {

template <class T>
bool tracing(const Tensor<T>& a) {
    return Tape<T>::current() != nullptr && a.requires_grad();
}

template <class T>
bool tracing(const Tensor<T>& a, const Tensor<T>& b) {
    return Tape<T>::current() != nullptr && (a.requires_grad() || b.requires_grad());
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---- elementwise ops ------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    if (detail::tracing(a, b)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), gb = b.grad_buffer(), go = out.grad_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ga) (*ga)[i] += (*go)[i];
                if (gb) (*gb)[i] += (*go)[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
    if (detail::tracing(a, b)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), gb = b.grad_buffer(), go = out.grad_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ga) (*ga)[i] += (*go)[i];
                if (gb) (*gb)[i] -= (*go)[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (detail::tracing(a, b)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), gb = b.grad_buffer(), go = out.grad_buffer(),
                      da = a.data_buffer(), db = b.data_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ga) (*ga)[i] += (*go)[i] * (*db)[i];
                if (gb) (*gb)[i] += (*go)[i] * (*da)[i];
            }
        });
    }
    return out;
}

// Pointwise max of two same-shape tensors; ties route gradient to the
// first argument.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "max");
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
    if (detail::tracing(a, b)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), gb = b.grad_buffer(), go = out.grad_buffer(),
                      da = a.data_buffer(), db = b.data_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) {
                if ((*da)[i] >= (*db)[i]) {
                    if (ga) (*ga)[i] += (*go)[i];
                } else if (gb) {
                    (*gb)[i] += (*go)[i];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T k) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * k;
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), k, n] {
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i] * k;
        });
    }
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T k) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + k;
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i];
        });
    }
    return out;
}

// relu'(0) = 0 (subgradient choice).
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), da = a.data_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i)
                if ((*da)[i] > T(0)) (*ga)[i] += (*go)[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), dy = out.data_buffer(), n] {
            for (std::size_t i = 0; i < n; ++i) {
                T y = (*dy)[i];
                (*ga)[i] += (*go)[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// ---- matmul / reductions --------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
        throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
        }
    if (detail::tracing(a, b)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), gb = b.grad_buffer(), go = out.grad_buffer(),
                      da = a.data_buffer(), db = b.data_buffer(), m, k, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const T g = (*go)[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) {
                        if (ga) (*ga)[i * k + p] += g * (*db)[p * n + j];
                        if (gb) (*gb)[p * n + j] += g * (*da)[i * k + p];
                    }
                }
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), n = a.numel()] {
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*go)[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Mean over the leading axis: [R x C] -> [C].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.shape().size() != 2) {
        throw shape_error("mean_rows expects a 2-d tensor, got " + shape_str(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
    const T inv = T(1) / static_cast<T>(r);
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), r, c, inv] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += (*go)[j] * inv;
        });
    }
    return out;
}

// Row-stack of equal-length vectors -> [N x C].
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw shape_error("stack_rows: empty input");
    const std::size_t c = rows[0].numel();
    const std::size_t r = rows.size();
    Tensor<T> out({r, c});
    bool grad = false;
    for (std::size_t i = 0; i < r; ++i) {
        if (rows[i].numel() != c) {
            throw shape_error("stack_rows: row " + std::to_string(i) + " has " +
                              std::to_string(rows[i].numel()) + " elements, expected " +
                              std::to_string(c));
        }
        std::copy(rows[i].data(), rows[i].data() + c, out.data() + i * c);
        grad = grad || rows[i].requires_grad();
    }
    if (Tape<T>::current() && grad) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        std::vector<typename Tensor<T>::Buffer> gin;
        gin.reserve(r);
        for (auto& t : rows) gin.push_back(t.grad_buffer());
        tape->record([gin = std::move(gin), go = out.grad_buffer(), c] {
            for (std::size_t i = 0; i < gin.size(); ++i) {
                if (!gin[i]) continue;
                for (std::size_t j = 0; j < c; ++j) (*gin[i])[j] += (*go)[i * c + j];
            }
        });
    }
    return out;
}

// Softmax along `axis`, max-subtracted for stability.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis = 0) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                          shape_str(s));
    }
    const std::size_t len = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];

    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = a[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, a[base + j * inner]);
            T z = 0;
            for (std::size_t j = 0; j < len; ++j) {
                T e = std::exp(a[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), dy = out.data_buffer(),
                      len, inner, outer] {
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = 0;
                    for (std::size_t j = 0; j < len; ++j)
                        dot += (*go)[base + j * inner] * (*dy)[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        (*ga)[idx] += (*dy)[idx] * ((*go)[idx] - dot);
                    }
                }
        });
    }
    return out;
}

// Scalar element selection.
template <class T>
Tensor<T> pick(const Tensor<T>& a, std::size_t index) {
    if (index >= a.numel()) {
        throw shape_error("pick: index " + std::to_string(index) + " out of range for " +
                          shape_str(a.shape()));
    }
    Tensor<T> out = Tensor<T>::scalar(a[index]);
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), index] {
            (*ga)[index] += (*go)[0];
        });
    }
    return out;
}

// 2-d transpose (copies; backward transposes the incoming grad).
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.shape().size() != 2) {
        throw shape_error("transpose expects a 2-d tensor, got " + shape_str(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    if (detail::tracing(a)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([ga = a.grad_buffer(), go = out.grad_buffer(), r, c] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += (*go)[j * r + i];
        });
    }
    return out;
}

}  // namespace capst
