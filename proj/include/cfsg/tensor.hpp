#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/parallel.hpp"

namespace cfsg {

enum class Mode { train, infer };

/// Dense 4-D array in batch/channel/height/width order, 32-bit reals.
/// Immutable once produced by an op; all kernels return fresh tensors.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0f) {}

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    float& at(int in, int ic, int iy, int ix) {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    float at(int in, int ic, int iy, int ix) const {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }

    float* plane(int in, int ic) {
        return data.data() + (static_cast<std::size_t>(in) * c + ic) * h * w;
    }
    const float* plane(int in, int ic) const {
        return data.data() + (static_cast<std::size_t>(in) * c + ic) * h * w;
    }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

/// Argmax offsets recorded by max_pool_2x2: one entry per pooled cell, the
/// row-major offset (0..3) of the maximal element inside its 2x2 window.
struct PoolIndices {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<std::uint8_t> data;

    PoolIndices() = default;
    PoolIndices(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0) {}
};

/// Per-channel batch-norm parameters and running statistics.
struct BatchNormState {
    std::vector<float> gamma, beta;               // trainable
    std::vector<float> running_mean, running_var; // non-trainable
    float momentum = 0.9f;
    float epsilon = 1e-5f;

    BatchNormState() = default;
    explicit BatchNormState(int channels)
        : gamma(channels, 1.0f), beta(channels, 0.0f),
          running_mean(channels, 0.0f), running_var(channels, 1.0f) {}

    int channels() const { return static_cast<int>(gamma.size()); }
};

/// Per-channel statistics cached by a train-mode batch_norm forward,
/// consumed by batch_norm_grad.
struct BnCache {
    std::vector<float> mean, inv_std;
};

// ---------------------------------------------------------------------------
// Convolution, 3x3, stride 1, zero padding 1.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_conv_shapes(const Tensor& input, const Tensor& weights,
                              std::size_t bias_len) {
    if (weights.h != 3 || weights.w != 3)
        throw ShapeError("kernel", 3, weights.h != 3 ? weights.h : weights.w);
    if (weights.c != input.c)
        throw ShapeError("input channels", weights.c, input.c);
    if (bias_len != static_cast<std::size_t>(weights.n))
        throw ShapeError("bias length", weights.n,
                         static_cast<long long>(bias_len));
}

// Adds w * shifted(in) to out for one kernel tap (dy, dx in {-1,0,1}).
inline void conv_tap(float* out, const float* in, int h, int w, int dy, int dx,
                     float wgt) {
    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
    for (int y = y0; y < y1; ++y) {
        float* o = out + static_cast<std::size_t>(y) * w;
        const float* i = in + static_cast<std::size_t>(y + dy) * w + dx;
        for (int x = x0; x < x1; ++x) o[x] += wgt * i[x];
    }
}

} // namespace detail

/// Plain direct convolution: one accumulator per output cell, reduction
/// ordered input-channel -> kernel row -> kernel column.
inline Tensor conv2d_direct(const Tensor& input, const Tensor& weights,
                            const std::vector<float>& bias) {
    detail::check_conv_shapes(input, weights, bias.size());
    const int N = input.n, Cin = input.c, H = input.h, W = input.w;
    const int Cout = weights.n;
    Tensor out(N, Cout, H, W);
    for (int in = 0; in < N; ++in)
        for (int co = 0; co < Cout; ++co)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    float acc = bias[co];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < 3; ++ky) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= H) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sx = x + kx - 1;
                                if (sx < 0 || sx >= W) continue;
                                acc += weights.at(co, ci, ky, kx) *
                                       input.at(in, ci, sy, sx);
                            }
                        }
                    out.at(in, co, y, x) = acc;
                }
    return out;
}

/// Cache-tiled convolution used everywhere by default: streams whole planes
/// per kernel tap so the inner loops stay contiguous. Per-cell reduction
/// order matches conv2d_direct (channel -> row -> column), so the two paths
/// agree to float rounding.
inline Tensor conv2d(const Tensor& input, const Tensor& weights,
                     const std::vector<float>& bias) {
    detail::check_conv_shapes(input, weights, bias.size());
    const int N = input.n, Cin = input.c, H = input.h, W = input.w;
    const int Cout = weights.n;
    Tensor out(N, Cout, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) \
    num_threads(worker_count())
#endif
    for (int in = 0; in < N; ++in)
        for (int co = 0; co < Cout; ++co) {
            float* o = out.plane(in, co);
            std::fill(o, o + plane, bias[co]);
            for (int ci = 0; ci < Cin; ++ci) {
                const float* src = input.plane(in, ci);
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        detail::conv_tap(o, src, H, W, ky - 1, kx - 1,
                                         weights.at(co, ci, ky, kx));
            }
        }
    return out;
}

struct Conv2dGrads {
    Tensor input;
    Tensor weights;
    std::vector<float> bias;
};

/// Analytic gradients of conv2d with respect to input, weights and bias.
inline Conv2dGrads conv2d_grad(const Tensor& input, const Tensor& weights,
                               const Tensor& upstream) {
    detail::check_conv_shapes(input, weights, weights.n);
    if (upstream.n != input.n || upstream.c != weights.n ||
        upstream.h != input.h || upstream.w != input.w)
        throw ShapeError("upstream gradient " + upstream.shape_str() +
                         " does not match conv output (" +
                         std::to_string(input.n) + "," +
                         std::to_string(weights.n) + "," +
                         std::to_string(input.h) + "," +
                         std::to_string(input.w) + ")");
    const int N = input.n, Cin = input.c, H = input.h, W = input.w;
    const int Cout = weights.n;

    Conv2dGrads g;
    g.input = Tensor(N, Cin, H, W);
    g.weights = Tensor(Cout, Cin, 3, 3);
    g.bias.assign(Cout, 0.0f);

    // grad bias: sum of upstream over batch and space per output channel.
    for (int co = 0; co < Cout; ++co) {
        double acc = 0.0;
        for (int in = 0; in < N; ++in) {
            const float* u = upstream.plane(in, co);
            const std::size_t plane = static_cast<std::size_t>(H) * W;
            for (std::size_t i = 0; i < plane; ++i) acc += u[i];
        }
        g.bias[co] = static_cast<float>(acc);
    }

    // grad input: correlation of upstream with the flipped kernel.
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) \
    num_threads(worker_count())
#endif
    for (int in = 0; in < N; ++in)
        for (int ci = 0; ci < Cin; ++ci) {
            float* gi = g.input.plane(in, ci);
            for (int co = 0; co < Cout; ++co) {
                const float* u = upstream.plane(in, co);
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        detail::conv_tap(gi, u, H, W, 1 - ky, 1 - kx,
                                         weights.at(co, ci, ky, kx));
            }
        }

    // grad weights: correlate input with upstream per (co, ci, tap).
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) \
    num_threads(worker_count())
#endif
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int dy = ky - 1, dx = kx - 1;
                    double acc = 0.0;
                    for (int in = 0; in < N; ++in) {
                        const float* u = upstream.plane(in, co);
                        const float* src = input.plane(in, ci);
                        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                        for (int y = y0; y < y1; ++y) {
                            const float* ur = u + static_cast<std::size_t>(y) * W;
                            const float* sr =
                                src + static_cast<std::size_t>(y + dy) * W + dx;
                            for (int x = x0; x < x1; ++x) acc += ur[x] * sr[x];
                        }
                    }
                    g.weights.at(co, ci, ky, kx) = static_cast<float>(acc);
                }
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization.
// ---------------------------------------------------------------------------

/// Train mode normalizes with batch statistics over N,H,W per channel and
/// updates the running stats via EMA (running = m*running + (1-m)*batch).
/// Infer mode uses the running stats only. Pass a cache to enable backward.
inline Tensor batch_norm(const Tensor& input, BatchNormState& state, Mode mode,
                         BnCache* cache = nullptr) {
    const int C = input.c;
    if (state.channels() != C)
        throw ShapeError("channels", state.channels(), C);
    const int N = input.n, H = input.h, W = input.w;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out(N, C, H, W);

    std::vector<float> mean(C), inv_std(C);
    if (mode == Mode::train) {
        const double count = static_cast<double>(N) * H * W;
        for (int ic = 0; ic < C; ++ic) {
            double s = 0.0, s2 = 0.0;
            for (int in = 0; in < N; ++in) {
                const float* p = input.plane(in, ic);
                for (std::size_t i = 0; i < plane; ++i) {
                    s += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            const double mu = s / count;
            double var = s2 / count - mu * mu;
            if (var < 0.0) var = 0.0; // float cancellation guard
            mean[ic] = static_cast<float>(mu);
            inv_std[ic] =
                static_cast<float>(1.0 / std::sqrt(var + state.epsilon));
            state.running_mean[ic] = state.momentum * state.running_mean[ic] +
                                     (1.0f - state.momentum) *
                                         static_cast<float>(mu);
            state.running_var[ic] = state.momentum * state.running_var[ic] +
                                    (1.0f - state.momentum) *
                                        static_cast<float>(var);
        }
    } else {
        for (int ic = 0; ic < C; ++ic) {
            mean[ic] = state.running_mean[ic];
            inv_std[ic] = 1.0f / std::sqrt(state.running_var[ic] + state.epsilon);
        }
    }

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) \
    num_threads(worker_count())
#endif
    for (int in = 0; in < N; ++in)
        for (int ic = 0; ic < C; ++ic) {
            const float m = mean[ic], is = inv_std[ic];
            const float gscale = state.gamma[ic] * is;
            const float b = state.beta[ic];
            const float* p = input.plane(in, ic);
            float* o = out.plane(in, ic);
            for (std::size_t i = 0; i < plane; ++i)
                o[i] = gscale * (p[i] - m) + b;
        }

    if (cache) {
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

struct BatchNormGrads {
    Tensor input;
    std::vector<float> gamma, beta;
};

/// Backward pass for a train-mode batch norm, using the cached batch stats.
inline BatchNormGrads batch_norm_grad(const Tensor& input,
                                      const BatchNormState& state,
                                      const BnCache& cache,
                                      const Tensor& upstream) {
    if (!input.same_shape(upstream))
        throw ShapeError("upstream gradient " + upstream.shape_str() +
                         " does not match input " + input.shape_str());
    const int N = input.n, C = input.c, H = input.h, W = input.w;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const double count = static_cast<double>(N) * H * W;

    BatchNormGrads g;
    g.input = Tensor(N, C, H, W);
    g.gamma.assign(C, 0.0f);
    g.beta.assign(C, 0.0f);

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
    for (int ic = 0; ic < C; ++ic) {
        const float m = cache.mean[ic], is = cache.inv_std[ic];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int in = 0; in < N; ++in) {
            const float* x = input.plane(in, ic);
            const float* dy = upstream.plane(in, ic);
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (x[i] - m) * is;
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat;
            }
        }
        g.beta[ic] = static_cast<float>(sum_dy);
        g.gamma[ic] = static_cast<float>(sum_dy_xhat);
        const double mean_dy = sum_dy / count;
        const double mean_dy_xhat = sum_dy_xhat / count;
        const float scale = state.gamma[ic] * is;
        for (int in = 0; in < N; ++in) {
            const float* x = input.plane(in, ic);
            const float* dy = upstream.plane(in, ic);
            float* dx = g.input.plane(in, ic);
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (x[i] - m) * is;
                dx[i] = static_cast<float>(
                    scale * (dy[i] - mean_dy - xhat * mean_dy_xhat));
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    return out;
}

/// Passes upstream where input > 0. The subgradient at exactly 0 is 0.
inline Tensor relu_grad(const Tensor& input, const Tensor& upstream) {
    if (!input.same_shape(upstream))
        throw ShapeError("upstream gradient " + upstream.shape_str() +
                         " does not match input " + input.shape_str());
    Tensor out(input.n, input.c, input.h, input.w);
    for (std::size_t i = 0; i < input.size(); ++i)
        out.data[i] = input.data[i] > 0.0f ? upstream.data[i] : 0.0f;
    return out;
}

// ---------------------------------------------------------------------------
// Max pooling / index unpooling (2x2, stride 2).
// ---------------------------------------------------------------------------

struct PoolResult {
    Tensor values;
    PoolIndices indices;
};

/// 2x2 max pool. Ties break to the first maximal element in row-major
/// window order so checkpoints reproduce bit-exactly.
inline PoolResult max_pool_2x2(const Tensor& input) {
    if (input.h % 2 != 0)
        throw ShapeError("cannot 2x2-pool odd height " + std::to_string(input.h));
    if (input.w % 2 != 0)
        throw ShapeError("cannot 2x2-pool odd width " + std::to_string(input.w));
    const int N = input.n, C = input.c, H = input.h, W = input.w;
    const int OH = H / 2, OW = W / 2;
    PoolResult r{Tensor(N, C, OH, OW), PoolIndices(N, C, OH, OW)};
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) \
    num_threads(worker_count())
#endif
    for (int in = 0; in < N; ++in)
        for (int ic = 0; ic < C; ++ic) {
            const float* src = input.plane(in, ic);
            float* dst = r.values.plane(in, ic);
            std::uint8_t* idx =
                r.indices.data.data() +
                (static_cast<std::size_t>(in) * C + ic) * OH * OW;
            for (int y = 0; y < OH; ++y)
                for (int x = 0; x < OW; ++x) {
                    const float* win = src + static_cast<std::size_t>(2 * y) * W + 2 * x;
                    float best = win[0];
                    int off = 0;
                    if (win[1] > best) { best = win[1]; off = 1; }
                    if (win[W] > best) { best = win[W]; off = 2; }
                    if (win[W + 1] > best) { best = win[W + 1]; off = 3; }
                    dst[static_cast<std::size_t>(y) * OW + x] = best;
                    idx[static_cast<std::size_t>(y) * OW + x] =
                        static_cast<std::uint8_t>(off);
                }
        }
    return r;
}

/// Scatters values back to the argmax positions recorded by max_pool_2x2;
/// zero everywhere else. Output doubles H and W.
inline Tensor max_unpool_2x2(const Tensor& values, const PoolIndices& indices) {
    if (values.n != indices.n || values.c != indices.c ||
        values.h != indices.h || values.w != indices.w)
        throw ShapeError("pool indices shape (" + std::to_string(indices.n) +
                         "," + std::to_string(indices.c) + "," +
                         std::to_string(indices.h) + "," +
                         std::to_string(indices.w) + ") does not match values " +
                         values.shape_str());
    const int N = values.n, C = values.c, OH = values.h, OW = values.w;
    const int H = OH * 2, W = OW * 2;
    Tensor out(N, C, H, W);
    for (int in = 0; in < N; ++in)
        for (int ic = 0; ic < C; ++ic) {
            const float* src = values.plane(in, ic);
            const std::uint8_t* idx =
                indices.data.data() +
                (static_cast<std::size_t>(in) * C + ic) * OH * OW;
            float* dst = out.plane(in, ic);
            for (int y = 0; y < OH; ++y)
                for (int x = 0; x < OW; ++x) {
                    const std::uint8_t off = idx[static_cast<std::size_t>(y) * OW + x];
                    if (off > 3)
                        throw DataError("corrupt pool index " +
                                        std::to_string(off) +
                                        " outside its 2x2 window");
                    const int dy = off >> 1, dx = off & 1;
                    dst[static_cast<std::size_t>(2 * y + dy) * W + 2 * x + dx] =
                        src[static_cast<std::size_t>(y) * OW + x];
                }
        }
    return out;
}

/// Gradient of max_pool_2x2: scatter upstream into the recorded positions.
inline Tensor max_pool_2x2_grad(const PoolIndices& indices,
                                const Tensor& upstream) {
    return max_unpool_2x2(upstream, indices);
}

/// Gradient of max_unpool_2x2 with respect to its values: gather upstream at
/// the recorded positions.
inline Tensor max_unpool_2x2_grad(const PoolIndices& indices,
                                  const Tensor& upstream) {
    if (upstream.h != indices.h * 2 || upstream.w != indices.w * 2 ||
        upstream.n != indices.n || upstream.c != indices.c)
        throw ShapeError("upstream gradient " + upstream.shape_str() +
                         " does not match unpooled shape");
    const int N = indices.n, C = indices.c, OH = indices.h, OW = indices.w;
    const int W = OW * 2;
    Tensor out(N, C, OH, OW);
    for (int in = 0; in < N; ++in)
        for (int ic = 0; ic < C; ++ic) {
            const float* u = upstream.plane(in, ic);
            const std::uint8_t* idx =
                indices.data.data() +
                (static_cast<std::size_t>(in) * C + ic) * OH * OW;
            float* dst = out.plane(in, ic);
            for (int y = 0; y < OH; ++y)
                for (int x = 0; x < OW; ++x) {
                    const std::uint8_t off = idx[static_cast<std::size_t>(y) * OW + x];
                    const int dy = off >> 1, dx = off & 1;
                    dst[static_cast<std::size_t>(y) * OW + x] =
                        u[static_cast<std::size_t>(2 * y + dy) * W + 2 * x + dx];
                }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation.
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n) throw ShapeError("batch", a.n, b.n);
    if (a.h != b.h) throw ShapeError("height", a.h, b.h);
    if (a.w != b.w) throw ShapeError("width", a.w, b.w);
    Tensor out(a.n, a.c + b.c, a.h, a.w);
    const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
    for (int in = 0; in < a.n; ++in) {
        for (int ic = 0; ic < a.c; ++ic)
            std::copy_n(a.plane(in, ic), plane, out.plane(in, ic));
        for (int ic = 0; ic < b.c; ++ic)
            std::copy_n(b.plane(in, ic), plane, out.plane(in, a.c + ic));
    }
    return out;
}

/// Splits a gradient flowing into concat_channels back into the two inputs.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& grad, int ca) {
    if (ca < 0 || ca > grad.c)
        throw ShapeError("split channel", ca, grad.c);
    Tensor ga(grad.n, ca, grad.h, grad.w);
    Tensor gb(grad.n, grad.c - ca, grad.h, grad.w);
    const std::size_t plane = static_cast<std::size_t>(grad.h) * grad.w;
    for (int in = 0; in < grad.n; ++in) {
        for (int ic = 0; ic < ca; ++ic)
            std::copy_n(grad.plane(in, ic), plane, ga.plane(in, ic));
        for (int ic = ca; ic < grad.c; ++ic)
            std::copy_n(grad.plane(in, ic), plane, gb.plane(in, ic - ca));
    }
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Channel softmax.
// ---------------------------------------------------------------------------

/// Per-pixel probabilities over channels, computed with max-subtraction.
inline Tensor softmax_channels(const Tensor& logits) {
    const int N = logits.n, C = logits.c, H = logits.h, W = logits.w;
    Tensor out(N, C, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
    for (int in = 0; in < N; ++in) {
        const float* base = logits.data.data() +
                            static_cast<std::size_t>(in) * C * plane;
        float* obase = out.data.data() + static_cast<std::size_t>(in) * C * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            float mx = base[i];
            for (int ic = 1; ic < C; ++ic)
                mx = std::max(mx, base[ic * plane + i]);
            float sum = 0.0f;
            for (int ic = 0; ic < C; ++ic) {
                const float e = std::exp(base[ic * plane + i] - mx);
                obase[ic * plane + i] = e;
                sum += e;
            }
            const float inv = 1.0f / sum;
            for (int ic = 0; ic < C; ++ic) obase[ic * plane + i] *= inv;
        }
    }
    return out;
}

} // namespace cfsg
