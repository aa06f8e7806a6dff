#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "capst/nn.hpp"
#include "capst/tensor.hpp"

namespace capst {

struct CapsuleConfig {
    std::size_t num_primary = 3;
    std::size_t num_output = 5;  // = number of classes
    std::size_t output_dim = 256;
    std::size_t routing_iters = 3;
    double squash_epsilon = 1e-8;

    // Primary-capsule pipeline widths. The statistics vector has
    // 2*(conv_channels/2) entries laid out as [means; variances]; it is
    // convolved as a 2-channel sequence of length conv_channels/2.
    std::size_t conv_channels = 64;    // conv2d output, halved by MFM
    std::size_t conv1d_channels = 2;
    std::size_t conv1d_kernel = 1;
    std::size_t sa_kernel = 7;

    // Algorithm-literal double squash (u_hat squashed before routing).
    bool squash_uhat = true;

    // The capsule batch norm always sees a single frame, so its batch
    // statistics are per-frame statistics. With this flag set (the default)
    // inference normalizes the same way, keeping the train-time and
    // inference-time feature distributions identical; running statistics are
    // still tracked during training and used when the flag is cleared.
    bool bn_frame_stats = true;

    std::size_t mfm_channels() const { return conv_channels / 2; }
    std::size_t primary_dim() const {
        return conv1d_channels * (mfm_channels() - conv1d_kernel + 1);
    }
};

// Inspectable record of one routing execution.
template <class T>
struct CapsuleState {
    Tensor<T> logits;       // b  [P x O]
    Tensor<T> couplings;    // c  [P x O], rows sum to 1
    Tensor<T> predictions;  // u_hat (post-squash when enabled) [P x O x D]
    Tensor<T> outputs;      // v  [O x D], norms < 1
};

// v = (|s|^2 / (1 + |s|^2)) * s / (|s| + eps), applied to each row of a
// [rows x dim] tensor (or to a flat vector when rows == 1).
template <class T>
Tensor<T> squash_rows(const Tensor<T>& s, std::size_t rows, std::size_t dim, T eps) {
    if (s.numel() != rows * dim) {
        throw shape_error("squash_rows: size mismatch for " + shape_str(s.shape()));
    }
    Tensor<T> out(s.shape());
    auto norms = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T sq = 0;
        for (std::size_t i = 0; i < dim; ++i) {
            const T v = s[r * dim + i];
            sq += v * v;
        }
        const T n = std::sqrt(sq);
        (*norms)[r] = n;
        const T f = sq / ((T(1) + sq) * (n + eps));
        for (std::size_t i = 0; i < dim; ++i) out[r * dim + i] = f * s[r * dim + i];
    }
    if (detail::tracing(s)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gs = s.grad_buffer(), go = out.grad_buffer(), ds = s.data_buffer(),
                      norms, rows, dim, eps] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T n = (*norms)[r];
                if (n < T(1e-30)) continue;  // v ~ O(|s|^2), zero slope at the origin
                const T sq = n * n;
                const T denom = (T(1) + sq) * (n + eps);
                const T f = sq / denom;
                const T dd = T(2) * n * (n + eps) + (T(1) + sq);
                const T fp = (T(2) * n * denom - sq * dd) / (denom * denom);
                T dot = 0;
                for (std::size_t i = 0; i < dim; ++i)
                    dot += (*go)[r * dim + i] * (*ds)[r * dim + i];
                const T coef = fp / n * dot;
                for (std::size_t i = 0; i < dim; ++i)
                    (*gs)[r * dim + i] += f * (*go)[r * dim + i] + coef * (*ds)[r * dim + i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> squash(const Tensor<T>& s, T eps = T(1e-8)) {
    return squash_rows(s, 1, s.numel(), eps);
}

// u_hat[i,j] = W[i,j] . u_i + bias[i,j]; U [P x d], W [P x O x D x d],
// bias [P x O x D] -> [P x O x D].
template <class T>
Tensor<T> capsule_predictions(const Tensor<T>& u, const Tensor<T>& w, const Tensor<T>& bias) {
    if (u.shape().size() != 2 || w.shape().size() != 4) {
        throw shape_error("capsule_predictions: expected [P,d] and [P,O,D,d], got " +
                          shape_str(u.shape()) + " and " + shape_str(w.shape()));
    }
    const std::size_t p = w.dim(0), o = w.dim(1), dd = w.dim(2), d = w.dim(3);
    if (u.dim(0) != p || u.dim(1) != d || bias.numel() != p * o * dd) {
        throw shape_error("capsule_predictions: W " + shape_str(w.shape()) +
                          " incompatible with U " + shape_str(u.shape()) + " and bias " +
                          shape_str(bias.shape()));
    }
    Tensor<T> out({p, o, dd});
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < o; ++j)
            for (std::size_t e = 0; e < dd; ++e) {
                T acc = bias[(i * o + j) * dd + e];
                const T* wrow = w.data() + (((i * o + j) * dd + e) * d);
                for (std::size_t q = 0; q < d; ++q) acc += wrow[q] * u[i * d + q];
                out[(i * o + j) * dd + e] = acc;
            }
    auto* tape = Tape<T>::current();
    if (tape && (u.requires_grad() || w.requires_grad() || bias.requires_grad())) {
        tape->register_output(out);
        tape->record([gu = u.grad_buffer(), gw = w.grad_buffer(), gb = bias.grad_buffer(),
                      go = out.grad_buffer(), du = u.data_buffer(), dw = w.data_buffer(), p, o,
                      dd, d] {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < o; ++j)
                    for (std::size_t e = 0; e < dd; ++e) {
                        const std::size_t oi = (i * o + j) * dd + e;
                        const T g = (*go)[oi];
                        if (gb) (*gb)[oi] += g;
                        for (std::size_t q = 0; q < d; ++q) {
                            if (gu) (*gu)[i * d + q] += g * (*dw)[oi * d + q];
                            if (gw) (*gw)[oi * d + q] += g * (*du)[i * d + q];
                        }
                    }
        });
    }
    return out;
}

// s_j = sum_i c_ij * u_hat[i,j] with the couplings treated as constants;
// gradient flows through u_hat only.
template <class T>
Tensor<T> coupled_sum(const Tensor<T>& u_hat, const std::vector<T>& c) {
    if (u_hat.shape().size() != 3) {
        throw shape_error("coupled_sum expects [P,O,D], got " + shape_str(u_hat.shape()));
    }
    const std::size_t p = u_hat.dim(0), o = u_hat.dim(1), d = u_hat.dim(2);
    if (c.size() != p * o) throw shape_error("coupled_sum: coupling table size mismatch");
    Tensor<T> out({o, d});
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < o; ++j) {
            const T cij = c[i * o + j];
            for (std::size_t e = 0; e < d; ++e)
                out[j * d + e] += cij * u_hat[(i * o + j) * d + e];
        }
    if (detail::tracing(u_hat)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gu = u_hat.grad_buffer(), go = out.grad_buffer(), c, p, o, d] {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < o; ++j) {
                    const T cij = c[i * o + j];
                    for (std::size_t e = 0; e < d; ++e)
                        (*gu)[(i * o + j) * d + e] += cij * (*go)[j * d + e];
                }
        });
    }
    return out;
}

// Routing-by-agreement. Coupling updates run as a non-differentiated inner
// loop; gradients flow through u_hat and the final coupled sum with the
// last iteration's couplings held constant.
template <class T>
std::pair<Tensor<T>, CapsuleState<T>> dynamic_routing(const Tensor<T>& u_hat_in,
                                                      const CapsuleConfig& cfg) {
    if (u_hat_in.shape().size() != 3 || u_hat_in.dim(0) != cfg.num_primary ||
        u_hat_in.dim(1) != cfg.num_output || u_hat_in.dim(2) != cfg.output_dim) {
        throw shape_error("dynamic_routing: u_hat " + shape_str(u_hat_in.shape()) +
                          " does not match config");
    }
    const std::size_t p = cfg.num_primary, o = cfg.num_output, d = cfg.output_dim;
    const T eps = static_cast<T>(cfg.squash_epsilon);

    Tensor<T> u_hat = cfg.squash_uhat ? squash_rows(u_hat_in, p * o, d, eps) : u_hat_in;

    // Inner loop on raw data, off the tape.
    std::vector<T> b(p * o, T(0));
    std::vector<T> c(p * o);
    std::vector<T> v(o * d);
    {
        typename Tape<T>::NoGrad off;
        for (std::size_t iter = 0; iter < cfg.routing_iters; ++iter) {
            for (std::size_t i = 0; i < p; ++i) {
                T mx = b[i * o];
                for (std::size_t j = 1; j < o; ++j) mx = std::max(mx, b[i * o + j]);
                T z = 0;
                for (std::size_t j = 0; j < o; ++j) {
                    c[i * o + j] = std::exp(b[i * o + j] - mx);
                    z += c[i * o + j];
                }
                for (std::size_t j = 0; j < o; ++j) c[i * o + j] /= z;
            }
            for (std::size_t j = 0; j < o; ++j) {
                T sq = 0;
                for (std::size_t e = 0; e < d; ++e) {
                    T s = 0;
                    for (std::size_t i = 0; i < p; ++i)
                        s += c[i * o + j] * u_hat[(i * o + j) * d + e];
                    v[j * d + e] = s;
                    sq += s * s;
                }
                const T n = std::sqrt(sq);
                const T f = sq / ((T(1) + sq) * (n + eps));
                for (std::size_t e = 0; e < d; ++e) v[j * d + e] *= f;
            }
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < o; ++j) {
                    T agree = 0;
                    for (std::size_t e = 0; e < d; ++e)
                        agree += v[j * d + e] * u_hat[(i * o + j) * d + e];
                    b[i * o + j] += agree;
                }
        }
    }

    // Final composition on the tape with the last couplings as constants.
    Tensor<T> out = squash_rows(coupled_sum(u_hat, c), o, d, eps);

    CapsuleState<T> state;
    state.logits = Tensor<T>({p, o}, std::vector<T>(b));
    state.couplings = Tensor<T>({p, o}, std::vector<T>(c));
    state.predictions = u_hat.detach();
    state.outputs = out.detach();
    return {out, state};
}

// Mean over the capsule axis: [O x D] -> [D] (AvgPool + reshape).
template <class T>
Tensor<T> frame_feature(const Tensor<T>& v) {
    return mean_rows(v);
}

}  // namespace capst
