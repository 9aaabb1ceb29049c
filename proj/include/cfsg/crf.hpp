#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/image.hpp"
#include "cfsg/parallel.hpp"
#include "cfsg/tensor.hpp"

namespace cfsg::crf {

/// Dense-CRF parameters: appearance kernel (w1, sigma_alpha over position,
/// sigma_beta over RGB) plus smoothness kernel (w2, sigma_rho over position).
/// The paper gives no values; these are conventional dense-CRF settings and
/// every one of them is a CLI flag.
struct Params {
    float w1 = 10.0f;
    float w2 = 3.0f;
    float sigma_alpha = 40.0f;  // pixels
    float sigma_beta = 0.13f;   // color units, channels in [0,1]
    float sigma_rho = 3.0f;     // pixels
    int iterations = 5;
    int truncation_radius = 0;  // 0: exact all-pairs; >0: window approximation

    void validate() const {
        if (w1 < 0.0f || w2 < 0.0f)
            throw ConfigError("kernel weights must be non-negative");
        if (sigma_alpha <= 0.0f || sigma_beta <= 0.0f || sigma_rho <= 0.0f)
            throw ConfigError("kernel scales must be positive");
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
    }
};

/// Per-pixel per-class potentials theta_i(x_i) = -ln P(x_i), probabilities
/// floored at 1e-8 so every potential stays finite.
struct UnaryField {
    int width = 0, height = 0, num_classes = 0;
    std::vector<float> cost; // (y*width + x) * num_classes + label

    float at(int y, int x, int l) const {
        return cost[(static_cast<std::size_t>(y) * width + x) * num_classes + l];
    }
};

inline UnaryField unary_from_probabilities(const Tensor& probs) {
    if (probs.n != 1) throw ShapeError("batch", 1, probs.n);
    UnaryField u;
    u.width = probs.w;
    u.height = probs.h;
    u.num_classes = probs.c;
    u.cost.resize(static_cast<std::size_t>(probs.w) * probs.h * probs.c);
    const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < probs.c; ++c)
            u.cost[i * probs.c + c] =
                -std::log(std::max(probs.data[c * plane + i], 1e-8f));
    return u;
}

/// Mean-field marginals, normalized per pixel.
struct QField {
    int width = 0, height = 0, num_classes = 0;
    std::vector<float> q; // same layout as UnaryField

    float at(int y, int x, int l) const {
        return q[(static_cast<std::size_t>(y) * width + x) * num_classes + l];
    }
};

namespace detail {

/// k(f_i, f_j) of the two-kernel edge potential; Potts mu is applied by the
/// caller. Pure function of positions and colors.
inline double kernel(const Params& p, int xi, int yi, int xj, int yj,
                     const float* ci, const float* cj, std::size_t stride) {
    const double dx = xi - xj, dy = yi - yj;
    const double pos = dx * dx + dy * dy;
    const double dr = static_cast<double>(ci[0]) - cj[0];
    const double dg = static_cast<double>(ci[stride]) - cj[stride];
    const double db = static_cast<double>(ci[2 * stride]) - cj[2 * stride];
    const double col = dr * dr + dg * dg + db * db;
    const double appearance =
        std::exp(-pos / (2.0 * p.sigma_alpha * p.sigma_alpha) -
                 col / (2.0 * p.sigma_beta * p.sigma_beta));
    const double smooth = std::exp(-pos / (2.0 * p.sigma_rho * p.sigma_rho));
    return p.w1 * appearance + p.w2 * smooth;
}

} // namespace detail

/// Full Gibbs energy of a labeling: sum of unaries plus the Potts-weighted
/// pairwise term over every unordered pixel pair. O(N^2); test scale only.
inline double energy(const LabelMask& labeling, const UnaryField& unary,
                     const ImageRGB& image, const Params& params) {
    params.validate();
    if (labeling.width != unary.width || labeling.height != unary.height)
        throw ShapeError("labeling dims", unary.width, labeling.width);
    if (image.width != unary.width || image.height != unary.height)
        throw ShapeError("image dims", unary.width, image.width);
    const int W = unary.width, H = unary.height;
    const std::size_t n = static_cast<std::size_t>(W) * H;
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        e += unary.cost[i * unary.num_classes + labeling.ids[i]];
    const std::size_t stride = n; // planar color layout
    for (std::size_t i = 0; i < n; ++i) {
        const int yi = static_cast<int>(i) / W, xi = static_cast<int>(i) % W;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (labeling.ids[i] == labeling.ids[j]) continue; // Potts mu = 0
            const int yj = static_cast<int>(j) / W, xj = static_cast<int>(j) % W;
            e += detail::kernel(params, xi, yi, xj, yj, image.px.data() + i,
                                image.px.data() + j, stride);
        }
    }
    return e;
}

/// Mean-field inference with exact all-pairs messages (or a truncated window
/// when params.truncation_radius > 0). Q starts at softmax(-unary); each
/// iteration reads the previous Q and writes a fresh one. Returns the final
/// marginals and their per-pixel argmax labeling.
inline std::pair<QField, LabelMask> mean_field_infer(const UnaryField& unary,
                                                     const ImageRGB& image,
                                                     const Params& params) {
    params.validate();
    if (image.width != unary.width || image.height != unary.height)
        throw ShapeError("image dims", unary.width, image.width);
    const int W = unary.width, H = unary.height, L = unary.num_classes;
    const std::size_t n = static_cast<std::size_t>(W) * H;
    for (const float c : unary.cost)
        if (!std::isfinite(c)) throw DataError("non-finite unary potential");

    QField Q;
    Q.width = W;
    Q.height = H;
    Q.num_classes = L;
    Q.q.resize(n * L);
    for (std::size_t i = 0; i < n; ++i) {
        float mn = unary.cost[i * L];
        for (int l = 1; l < L; ++l) mn = std::min(mn, unary.cost[i * L + l]);
        double sum = 0.0;
        for (int l = 0; l < L; ++l) {
            const double e = std::exp(-(unary.cost[i * L + l] - mn));
            Q.q[i * L + l] = static_cast<float>(e);
            sum += e;
        }
        for (int l = 0; l < L; ++l)
            Q.q[i * L + l] = static_cast<float>(Q.q[i * L + l] / sum);
    }

    std::vector<float> next(n * L);
    const std::size_t stride = n;
    for (int iter = 0; iter < params.iterations; ++iter) {
        const std::vector<float>& prev = Q.q;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
        for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
            const std::size_t i = static_cast<std::size_t>(ii);
            const int yi = static_cast<int>(i) / W, xi = static_cast<int>(i) % W;
            int y0 = 0, y1 = H - 1, x0 = 0, x1 = W - 1;
            if (params.truncation_radius > 0) {
                y0 = std::max(0, yi - params.truncation_radius);
                y1 = std::min(H - 1, yi + params.truncation_radius);
                x0 = std::max(0, xi - params.truncation_radius);
                x1 = std::min(W - 1, xi + params.truncation_radius);
            }
            // message(l) = sum_{j != i} k(i,j) * (1 - Q_j(l)) under Potts.
            std::vector<double> msg(L, 0.0);
            for (int yj = y0; yj <= y1; ++yj)
                for (int xj = x0; xj <= x1; ++xj) {
                    const std::size_t j = static_cast<std::size_t>(yj) * W + xj;
                    if (j == i) continue;
                    const double k = detail::kernel(
                        params, xi, yi, xj, yj, image.px.data() + i,
                        image.px.data() + j, stride);
                    for (int l = 0; l < L; ++l)
                        msg[l] += k * (1.0 - prev[j * L + l]);
                }
            double mx = -1e300;
            std::vector<double> score(L);
            for (int l = 0; l < L; ++l) {
                score[l] = -static_cast<double>(unary.cost[i * L + l]) - msg[l];
                mx = std::max(mx, score[l]);
            }
            double sum = 0.0;
            for (int l = 0; l < L; ++l) {
                score[l] = std::exp(score[l] - mx);
                sum += score[l];
            }
            for (int l = 0; l < L; ++l)
                next[i * L + l] = static_cast<float>(score[l] / sum);
        }
        Q.q.swap(next);
    }

    LabelMask out(W, H);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        float bv = Q.q[i * L];
        for (int l = 1; l < L; ++l)
            if (Q.q[i * L + l] > bv) {
                bv = Q.q[i * L + l];
                best = l;
            }
        out.ids[i] = static_cast<std::uint8_t>(best);
    }
    return {std::move(Q), std::move(out)};
}

/// Builds the unary field from network probabilities, runs mean-field
/// inference, returns the refined labeling.
inline LabelMask refine(const Tensor& probabilities, const ImageRGB& image,
                        const Params& params) {
    if (probabilities.h != image.height || probabilities.w != image.width)
        throw ShapeError("probability dims", image.width, probabilities.w);
    const UnaryField u = unary_from_probabilities(probabilities);
    return mean_field_infer(u, image, params).second;
}

} // namespace cfsg::crf
