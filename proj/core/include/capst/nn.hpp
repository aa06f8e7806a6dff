#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "capst/tensor.hpp"
#include "capst/util.hpp"

namespace capst {

// Named parameter table with deterministic (insertion) iteration order.
// Non-trainable entries hold buffers such as batch-norm running stats.
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable;
    };

    Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable = true) {
        if (index_.count(name)) throw error("duplicate parameter name: " + name);
        if (trainable) t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), trainable});
        return entries_.back().tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw error("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw error("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    std::size_t count_params() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    // Parameter count restricted to names starting with `prefix`.
    std::size_t count_params(const std::string& prefix) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_)
            if (e.trainable) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- conv / pool ----------------------------------------------------------

// 2-d cross-correlation, [Cin x H x W] * [Cout x Cin x k x k] + bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
    if (input.shape().size() != 3 || weight.shape().size() != 4) {
        throw shape_error("conv2d: expected [C,H,W] input and [Co,Ci,k,k] weight, got " +
                          shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    const std::size_t ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != ci) {
        throw shape_error("conv2d: input channels " + std::to_string(ci) +
                          " vs weight channels " + std::to_string(weight.dim(1)));
    }
    if (k % 2 == 0 || weight.dim(3) != k) throw shape_error("conv2d: kernel must be odd square");
    if (bias.numel() != co) throw shape_error("conv2d: bias length != output channels");
    if ((h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0 ||
        h + 2 * padding < k || w + 2 * padding < k) {
        throw shape_error("conv2d: non-integral output size for input " +
                          shape_str(input.shape()) + " kernel " + std::to_string(k));
    }
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;

    Tensor<T> out({co, ho, wo});
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
    // Valid kernel ranges are hoisted out of the pixel loops.
    auto krange = [pad](std::size_t o, std::size_t stride_, std::size_t extent, std::size_t k_,
                        std::size_t& lo, std::size_t& hi) {
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o * stride_) - pad;
        lo = base < 0 ? static_cast<std::size_t>(-base) : 0;
        const std::ptrdiff_t room = static_cast<std::ptrdiff_t>(extent) - base;
        hi = room < static_cast<std::ptrdiff_t>(k_) ? static_cast<std::size_t>(std::max<std::ptrdiff_t>(room, 0)) : k_;
    };
    parallel_for(co, [&](std::size_t oc) {
        T* orow_base = out.data() + oc * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            std::size_t ky_lo, ky_hi;
            krange(oy, stride, h, k, ky_lo, ky_hi);
            T* orow = orow_base + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) orow[ox] = bias[oc];
            for (std::size_t ic = 0; ic < ci; ++ic)
                for (std::size_t ky = ky_lo; ky < ky_hi; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                    const T* irow = input.data() + (ic * h + static_cast<std::size_t>(iy)) * w;
                    const T* wrow = weight.data() + ((oc * ci + ic) * k + ky) * k;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const T wv = wrow[kx];
                        if (wv == T(0)) continue;
                        // ox range with in-bounds ix = ox*stride + kx - pad
                        std::size_t ox_lo = 0, ox_hi = wo;
                        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
                        if (stride == 1) {
                            if (off < 0) ox_lo = static_cast<std::size_t>(-off);
                            const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(w) - off;
                            if (top < static_cast<std::ptrdiff_t>(wo))
                                ox_hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(top, 0));
                            const T* ip = irow + off;
                            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                                orow[ox] += ip[ox] * wv;
                        } else {
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride) + off;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                orow[ox] += irow[ix] * wv;
                            }
                        }
                    }
                }
        }
    });

    auto* tape = Tape<T>::current();
    if (tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), gw = weight.grad_buffer(),
                      gb = bias.grad_buffer(), go = out.grad_buffer(), di = input.data_buffer(),
                      dw = weight.data_buffer(), ci, h, w, co, k, ho, wo, stride, pad] {
            for (std::size_t oc = 0; oc < co; ++oc) {
                const T* grow_base = go->data() + oc * ho * wo;
                if (gb) {
                    T acc = 0;
                    for (std::size_t i = 0; i < ho * wo; ++i) acc += grow_base[i];
                    (*gb)[oc] += acc;
                }
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const T* grow = grow_base + oy * wo;
                    std::ptrdiff_t ky_lo = pad - static_cast<std::ptrdiff_t>(oy * stride);
                    if (ky_lo < 0) ky_lo = 0;
                    std::ptrdiff_t ky_hi = static_cast<std::ptrdiff_t>(h) + pad -
                                           static_cast<std::ptrdiff_t>(oy * stride);
                    if (ky_hi > static_cast<std::ptrdiff_t>(k)) ky_hi = static_cast<std::ptrdiff_t>(k);
                    for (std::size_t ic = 0; ic < ci; ++ic)
                        for (std::ptrdiff_t ky = ky_lo; ky < ky_hi; ++ky) {
                            const std::size_t iy =
                                static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) +
                                                         ky - pad);
                            const T* irow = di->data() + (ic * h + iy) * w;
                            T* girow = gi ? gi->data() + (ic * h + iy) * w : nullptr;
                            const std::size_t wbase =
                                ((oc * ci + ic) * k + static_cast<std::size_t>(ky)) * k;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
                                const T wv = (*dw)[wbase + kx];
                                T gw_acc = 0;
                                if (stride == 1) {
                                    std::size_t ox_lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
                                    std::ptrdiff_t top = static_cast<std::ptrdiff_t>(w) - off;
                                    std::size_t ox_hi =
                                        top < static_cast<std::ptrdiff_t>(wo)
                                            ? static_cast<std::size_t>(std::max<std::ptrdiff_t>(top, 0))
                                            : wo;
                                    const T* ip = irow + off;
                                    if (gi) {
                                        T* gp = girow + off;
                                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                            const T g = grow[ox];
                                            gw_acc += g * ip[ox];
                                            gp[ox] += g * wv;
                                        }
                                    } else {
                                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                                            gw_acc += grow[ox] * ip[ox];
                                    }
                                } else {
                                    for (std::size_t ox = 0; ox < wo; ++ox) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * stride) + off;
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                        const T g = grow[ox];
                                        gw_acc += g * irow[ix];
                                        if (gi) girow[ix] += g * wv;
                                    }
                                }
                                if (gw) (*gw)[wbase + kx] += gw_acc;
                            }
                        }
                }
            }
        });
    }
    return out;
}

// 1-d cross-correlation, stride 1, no padding: [C x L] * [C' x C x k].
template <class T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (input.shape().size() != 2 || weight.shape().size() != 3) {
        throw shape_error("conv1d: expected [C,L] input and [C',C,k] weight, got " +
                          shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    const std::size_t c = input.dim(0), l = input.dim(1);
    const std::size_t co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c) throw shape_error("conv1d: channel mismatch");
    if (l < k) {
        throw shape_error("conv1d: input length " + std::to_string(l) + " < kernel " +
                          std::to_string(k));
    }
    if (bias.numel() != co) throw shape_error("conv1d: bias length != output channels");
    const std::size_t lo = l - k + 1;

    Tensor<T> out({co, lo});
    for (std::size_t oc = 0; oc < co; ++oc)
        for (std::size_t ox = 0; ox < lo; ++ox) {
            T acc = bias[oc];
            for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t kx = 0; kx < k; ++kx)
                    acc += input[ic * l + ox + kx] * weight[(oc * c + ic) * k + kx];
            out[oc * lo + ox] = acc;
        }

    auto* tape = Tape<T>::current();
    if (tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), gw = weight.grad_buffer(),
                      gb = bias.grad_buffer(), go = out.grad_buffer(), di = input.data_buffer(),
                      dw = weight.data_buffer(), c, l, co, k, lo] {
            for (std::size_t oc = 0; oc < co; ++oc)
                for (std::size_t ox = 0; ox < lo; ++ox) {
                    const T g = (*go)[oc * lo + ox];
                    if (gb) (*gb)[oc] += g;
                    for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            if (gi) (*gi)[ic * l + ox + kx] += g * (*dw)[(oc * c + ic) * k + kx];
                            if (gw) (*gw)[(oc * c + ic) * k + kx] += g * (*di)[ic * l + ox + kx];
                        }
                }
        });
    }
    return out;
}

// 2x2 max pool, stride 2; gradient goes to the first maximal element in
// row-major window order.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& input) {
    if (input.shape().size() != 3) {
        throw shape_error("maxpool2 expects [C,H,W], got " + shape_str(input.shape()));
    }
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw shape_error("maxpool2: odd spatial dimension in " + shape_str(input.shape()));
    }
    const std::size_t ho = h / 2, wo = w / 2;
    Tensor<T> out({c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
                T bv = input[best];
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (std::size_t ci2 : cand)
                    if (input[ci2] > bv) {
                        bv = input[ci2];
                        best = ci2;
                    }
                const std::size_t oi = (ch * ho + oy) * wo + ox;
                out[oi] = bv;
                (*argmax)[oi] = best;
            }
    if (detail::tracing(input)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), go = out.grad_buffer(), argmax,
                      n = out.numel()] {
            for (std::size_t i = 0; i < n; ++i) (*gi)[(*argmax)[i]] += (*go)[i];
        });
    }
    return out;
}

// ---- fully connected ------------------------------------------------------

// weight [m x n] * input [n] + bias [m].
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.shape().size() != 2 || weight.dim(1) != input.numel() ||
        bias.numel() != weight.dim(0)) {
        throw shape_error("linear: weight " + shape_str(weight.shape()) + " input " +
                          shape_str(input.shape()) + " bias " + shape_str(bias.shape()));
    }
    const std::size_t m = weight.dim(0), n = weight.dim(1);
    Tensor<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
        T acc = bias[i];
        for (std::size_t j = 0; j < n; ++j) acc += weight[i * n + j] * input[j];
        out[i] = acc;
    }
    auto* tape = Tape<T>::current();
    if (tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), gw = weight.grad_buffer(),
                      gb = bias.grad_buffer(), go = out.grad_buffer(), di = input.data_buffer(),
                      dw = weight.data_buffer(), m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const T g = (*go)[i];
                if (gb) (*gb)[i] += g;
                for (std::size_t j = 0; j < n; ++j) {
                    if (gi) (*gi)[j] += g * (*dw)[i * n + j];
                    if (gw) (*gw)[i * n + j] += g * (*di)[j];
                }
            }
        });
    }
    return out;
}

// ---- batch norm -----------------------------------------------------------

template <class T>
struct BatchNormState {
    Tensor<T> running_mean;  // [C], buffer
    Tensor<T> running_var;   // [C], buffer, strictly positive
    T momentum = T(0.1);
    T epsilon = T(1e-5);
    bool training = true;
    // When the effective batch is a single frame, batch statistics degenerate
    // to per-frame statistics and the running averages describe a feature
    // distribution the network never sees. With this flag set, inference
    // normalizes with the input's own statistics (still deterministic per
    // input) and only the running-stat updates are gated by `training`.
    bool frame_stats_at_inference = false;
};

// Per-channel normalization over the spatial extent. Training mode uses
// batch (spatial) statistics and updates running stats in place; inference
// mode is a deterministic affine map of the running stats.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state) {
    const Shape& s = input.shape();
    const std::size_t c = s.empty() ? 0 : s[0];
    std::size_t spatial = 1;
    for (std::size_t i = 1; i < s.size(); ++i) spatial *= s[i];
    if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c ||
        state.running_var.numel() != c) {
        throw shape_error("batchnorm: channel mismatch for input " + shape_str(s));
    }

    Tensor<T> out(s);
    auto mu = std::make_shared<std::vector<T>>(c);
    auto inv_std = std::make_shared<std::vector<T>>(c);
    const T eps = state.epsilon;
    const bool use_batch_stats = state.training || state.frame_stats_at_inference;
    if (use_batch_stats) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T m = 0;
            for (std::size_t i = 0; i < spatial; ++i) m += input[ch * spatial + i];
            m /= static_cast<T>(spatial);
            T v = 0;
            for (std::size_t i = 0; i < spatial; ++i) {
                T d = input[ch * spatial + i] - m;
                v += d * d;
            }
            v /= static_cast<T>(spatial);
            (*mu)[ch] = m;
            (*inv_std)[ch] = T(1) / std::sqrt(v + eps);
            if (state.training) {
                state.running_mean[ch] =
                    (T(1) - state.momentum) * state.running_mean[ch] + state.momentum * m;
                state.running_var[ch] =
                    (T(1) - state.momentum) * state.running_var[ch] + state.momentum * v;
            }
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            (*mu)[ch] = state.running_mean[ch];
            (*inv_std)[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
        }
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < spatial; ++i) {
            const std::size_t idx = ch * spatial + i;
            out[idx] = (input[idx] - (*mu)[ch]) * (*inv_std)[ch] * gamma[ch] + beta[ch];
        }

    auto* tape = Tape<T>::current();
    if (tape && (input.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        tape->register_output(out);
        const bool training = use_batch_stats;
        tape->record([gi = input.grad_buffer(), gg = gamma.grad_buffer(),
                      gb = beta.grad_buffer(), go = out.grad_buffer(), di = input.data_buffer(),
                      dg = gamma.data_buffer(), mu, inv_std, c, spatial, training] {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T is = (*inv_std)[ch];
                const T gam = (*dg)[ch];
                T sum_g = 0, sum_gx = 0;
                for (std::size_t i = 0; i < spatial; ++i) {
                    const std::size_t idx = ch * spatial + i;
                    const T g = (*go)[idx];
                    const T xhat = ((*di)[idx] - (*mu)[ch]) * is;
                    sum_g += g;
                    sum_gx += g * xhat;
                }
                if (gg) (*gg)[ch] += sum_gx;
                if (gb) (*gb)[ch] += sum_g;
                if (!gi) continue;
                const T m = static_cast<T>(spatial);
                for (std::size_t i = 0; i < spatial; ++i) {
                    const std::size_t idx = ch * spatial + i;
                    const T g = (*go)[idx];
                    const T xhat = ((*di)[idx] - (*mu)[ch]) * is;
                    if (training) {
                        (*gi)[idx] += gam * is * (g - sum_g / m - xhat * sum_gx / m);
                    } else {
                        (*gi)[idx] += gam * is * g;
                    }
                }
            }
        });
    }
    return out;
}

// ---- MFM / spatial attention / statistical pooling ------------------------

// Max-Feature-Map: [2C x H x W] -> [C x H x W], elementwise max of the two
// channel halves. Ties route gradient to the first half.
template <class T>
Tensor<T> mfm(const Tensor<T>& input) {
    if (input.shape().size() != 3 || input.dim(0) % 2 != 0) {
        throw shape_error("mfm requires an even channel count, got " +
                          shape_str(input.shape()));
    }
    const std::size_t c = input.dim(0) / 2;
    const std::size_t plane = input.dim(1) * input.dim(2);
    const std::size_t half = c * plane;
    Tensor<T> out({c, input.dim(1), input.dim(2)});
    for (std::size_t i = 0; i < half; ++i)
        out[i] = input[i] >= input[half + i] ? input[i] : input[half + i];
    if (detail::tracing(input)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), go = out.grad_buffer(),
                      di = input.data_buffer(), half] {
            for (std::size_t i = 0; i < half; ++i) {
                if ((*di)[i] >= (*di)[half + i])
                    (*gi)[i] += (*go)[i];
                else
                    (*gi)[half + i] += (*go)[i];
            }
        });
    }
    return out;
}

// Per-pixel channel mean and channel max: [C x H x W] -> [2 x H x W].
// Max ties route gradient to the lowest channel index.
template <class T>
Tensor<T> channel_stats(const Tensor<T>& input) {
    if (input.shape().size() != 3) {
        throw shape_error("channel_stats expects [C,H,W], got " + shape_str(input.shape()));
    }
    const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
    Tensor<T> out({2, input.dim(1), input.dim(2)});
    auto argmax = std::make_shared<std::vector<std::size_t>>(plane);
    const T inv_c = T(1) / static_cast<T>(c);
    for (std::size_t p = 0; p < plane; ++p) {
        T m = 0, mx = input[p];
        std::size_t best = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T v = input[ch * plane + p];
            m += v;
            if (v > mx) {
                mx = v;
                best = ch;
            }
        }
        out[p] = m * inv_c;
        out[plane + p] = mx;
        (*argmax)[p] = best;
    }
    if (detail::tracing(input)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), go = out.grad_buffer(), argmax, c, plane,
                      inv_c] {
            for (std::size_t p = 0; p < plane; ++p) {
                for (std::size_t ch = 0; ch < c; ++ch) (*gi)[ch * plane + p] += (*go)[p] * inv_c;
                (*gi)[(*argmax)[p] * plane + p] += (*go)[plane + p];
            }
        });
    }
    return out;
}

// input [C x H x W] scaled by a spatial mask [1 x H x W] (or [H x W])
// broadcast over channels.
template <class T>
Tensor<T> apply_spatial_mask(const Tensor<T>& input, const Tensor<T>& mask) {
    if (input.shape().size() != 3) {
        throw shape_error("apply_spatial_mask expects [C,H,W] input");
    }
    const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
    if (mask.numel() != plane) {
        throw shape_error("apply_spatial_mask: mask size " + std::to_string(mask.numel()) +
                          " != spatial extent " + std::to_string(plane));
    }
    Tensor<T> out(input.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p)
            out[ch * plane + p] = input[ch * plane + p] * mask[p];
    auto* tape = Tape<T>::current();
    if (tape && (input.requires_grad() || mask.requires_grad())) {
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), gm = mask.grad_buffer(),
                      go = out.grad_buffer(), di = input.data_buffer(),
                      dm = mask.data_buffer(), c, plane] {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < plane; ++p) {
                    const T g = (*go)[ch * plane + p];
                    if (gi) (*gi)[ch * plane + p] += g * (*dm)[p];
                    if (gm) (*gm)[p] += g * (*di)[ch * plane + p];
                }
        });
    }
    return out;
}

// CBAM-style spatial attention: sigmoid(conv([mean;max])) mask times input.
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& input, const Tensor<T>& weight,
                            const Tensor<T>& bias) {
    const std::size_t k = weight.dim(2);
    if (k % 2 == 0) throw shape_error("spatial_attention: kernel must be odd");
    Tensor<T> stats = channel_stats(input);
    Tensor<T> mask = sigmoid(conv2d(stats, weight, bias, 1, (k - 1) / 2));
    return apply_spatial_mask(input, mask);
}

// Per-channel mean and sample variance: [K x H x W] -> [mu_1..mu_K,
// var_1..var_K]. Variance uses the 1/(HW-1) prefactor.
template <class T>
Tensor<T> statistical_pooling(const Tensor<T>& input) {
    if (input.shape().size() != 3) {
        throw shape_error("statistical_pooling expects [K,H,W], got " +
                          shape_str(input.shape()));
    }
    const std::size_t kch = input.dim(0), plane = input.dim(1) * input.dim(2);
    if (plane < 2) {
        throw shape_error("statistical_pooling: variance undefined for a single-pixel map");
    }
    Tensor<T> out({2 * kch});
    auto mu = std::make_shared<std::vector<T>>(kch);
    // The statistics must be bitwise invariant under spatial permutation, so
    // both reductions sum their terms in sorted order rather than pixel order.
    std::vector<T> buf(plane);
    for (std::size_t ch = 0; ch < kch; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) buf[p] = input[ch * plane + p];
        std::sort(buf.begin(), buf.end());
        T m = 0;
        for (std::size_t p = 0; p < plane; ++p) m += buf[p];
        m /= static_cast<T>(plane);
        for (std::size_t p = 0; p < plane; ++p) {
            const T d = input[ch * plane + p] - m;
            buf[p] = d * d;
        }
        std::sort(buf.begin(), buf.end());
        T v = 0;
        for (std::size_t p = 0; p < plane; ++p) v += buf[p];
        v /= static_cast<T>(plane - 1);
        (*mu)[ch] = m;
        out[ch] = m;
        out[kch + ch] = v;
    }
    if (detail::tracing(input)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gi = input.grad_buffer(), go = out.grad_buffer(),
                      di = input.data_buffer(), mu, kch, plane] {
            const T inv_p = T(1) / static_cast<T>(plane);
            const T inv_p1 = T(1) / static_cast<T>(plane - 1);
            for (std::size_t ch = 0; ch < kch; ++ch) {
                const T gm = (*go)[ch];
                const T gv = (*go)[kch + ch];
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t idx = ch * plane + p;
                    (*gi)[idx] += gm * inv_p + gv * T(2) * ((*di)[idx] - (*mu)[ch]) * inv_p1;
                }
            }
        });
    }
    return out;
}

}  // namespace capst
