#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/evaluation.hpp"
#include "cfsg/image.hpp"
#include "cfsg/network.hpp"
#include "cfsg/rng.hpp"
#include "cfsg/tensor.hpp"

namespace cfsg {

// ---------------------------------------------------------------------------
// Class weights.
// ---------------------------------------------------------------------------

struct ClassWeights {
    std::vector<float> w;
};

/// W_c = max(1, ln(max_i P_i / P_c)). The natural-log ratio gives the
/// dominant class ln(1) = 0, so weights are clamped to a floor of 1; with
/// that rule the reference pixel statistics reproduce weights (1, 1.5, 2.5)
/// for (soil, crop, weed).
inline ClassWeights compute_class_weights(
    const std::vector<std::uint64_t>& pixel_counts) {
    if (pixel_counts.empty()) throw DataError("no class counts");
    std::uint64_t mx = 0;
    for (std::size_t c = 0; c < pixel_counts.size(); ++c) {
        if (pixel_counts[c] == 0)
            throw DataError("class " + std::to_string(c) +
                            " has zero pixels; merge it into another class or "
                            "drop it before computing weights");
        mx = std::max(mx, pixel_counts[c]);
    }
    ClassWeights cw;
    for (const auto p : pixel_counts) {
        const double w = std::log(static_cast<double>(mx) / static_cast<double>(p));
        cw.w.push_back(static_cast<float>(std::max(1.0, w)));
    }
    return cw;
}

// ---------------------------------------------------------------------------
// Weighted cross-entropy.
// ---------------------------------------------------------------------------

struct WceResult {
    double loss = 0.0;
    Tensor grad_logits;
};

/// Per-pixel weighted cross-entropy, averaged over all pixels in the batch.
/// Returns the loss and its gradient with respect to the logits:
/// (1/N) * W_y * (p - onehot(y)) per pixel.
inline WceResult weighted_cross_entropy(const Tensor& probabilities,
                                        const std::vector<LabelMask>& labels,
                                        const ClassWeights& weights) {
    const int N = probabilities.n, C = probabilities.c;
    const int H = probabilities.h, W = probabilities.w;
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("label batch", N, static_cast<long long>(labels.size()));
    if (static_cast<int>(weights.w.size()) != C)
        throw ShapeError("class weights", C,
                         static_cast<long long>(weights.w.size()));
    WceResult r;
    r.grad_logits = Tensor(N, C, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const double inv_n = 1.0 / (static_cast<double>(N) * plane);
    double loss = 0.0;
    for (int in = 0; in < N; ++in) {
        const LabelMask& m = labels[in];
        if (m.height != H || m.width != W)
            throw ShapeError("label dims", W, m.width);
        const float* pb = probabilities.data.data() +
                          static_cast<std::size_t>(in) * C * plane;
        float* gb = r.grad_logits.data.data() +
                    static_cast<std::size_t>(in) * C * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            const int y = m.ids[i];
            if (y < 0 || y >= C)
                throw DataError("label " + std::to_string(y) + " outside [0," +
                                std::to_string(C) + ")");
            const float wy = weights.w[y];
            const double py = std::max(pb[y * plane + i], 1e-30f);
            loss -= wy * std::log(py);
            for (int c = 0; c < C; ++c) {
                const float onehot = c == y ? 1.0f : 0.0f;
                gb[c * plane + i] = static_cast<float>(
                    inv_n * wy * (pb[c * plane + i] - onehot));
            }
        }
    }
    r.loss = loss * inv_n;
    return r;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<float>> m, v; // aligned with the parameter list
    std::int64_t t = 0;
    float beta1 = 0.9f, beta2 = 0.999f, epsilon = 1e-8f;

    static AdamState for_parameters(const std::vector<ParamRef>& params,
                                    float beta1 = 0.9f, float beta2 = 0.999f,
                                    float epsilon = 1e-8f) {
        AdamState s;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.epsilon = epsilon;
        for (const auto& p : params) {
            s.m.emplace_back(p.size, 0.0f);
            s.v.emplace_back(p.size, 0.0f);
        }
        return s;
    }
};

/// Standard bias-corrected Adam update, in place on the parameter views.
inline void adam_step(std::vector<ParamRef>& params, const Gradients& grads,
                      AdamState& state, float lr) {
    if (params.size() != grads.items.size() || params.size() != state.m.size())
        throw ShapeError("parameter list", static_cast<long long>(params.size()),
                         static_cast<long long>(grads.items.size()));
    state.t += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), state.t);
    const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), state.t);
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& [gname, g] = grads.items[p];
        if (gname != params[p].name)
            throw DataError("gradient '" + gname + "' does not match parameter '" +
                            params[p].name + "'");
        if (g.size() != params[p].size)
            throw ShapeError(params[p].name,
                             static_cast<long long>(params[p].size),
                             static_cast<long long>(g.size()));
        float* w = params[p].data;
        float* m = state.m[p].data();
        float* v = state.v[p].data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= static_cast<float>(lr * mhat /
                                       (std::sqrt(vhat) + state.epsilon));
        }
    }
}

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule.
// ---------------------------------------------------------------------------

/// Drops the learning rate by `factor` once the batch loss has stayed within
/// `tolerance` of the best loss for `patience` consecutive batches.
struct PlateauSchedule {
    float current_lr = 0.005f;
    int patience = 10;
    float factor = 0.1f;
    float tolerance = 1e-4f;
    int stall_counter = 0;
    double best = std::numeric_limits<double>::infinity();
    bool has_best = false;
};

inline void plateau_update(PlateauSchedule& s, double batch_loss) {
    if (!s.has_best) {
        s.best = batch_loss;
        s.has_best = true;
        s.stall_counter = 1; // the first loss trivially equals the best
    } else {
        if (std::abs(batch_loss - s.best) <= s.tolerance)
            s.stall_counter += 1;
        else
            s.stall_counter = 0;
        s.best = std::min(s.best, batch_loss);
    }
    if (s.stall_counter >= s.patience) {
        s.current_lr *= s.factor;
        s.stall_counter = 0;
    }
}

// ---------------------------------------------------------------------------
// Augmentation.
// ---------------------------------------------------------------------------

struct AugmentConfig {
    bool hflip = true;
    bool vflip = true;
    bool rot90 = true;
    bool gamma_jitter = true;
    double gamma_lo = 0.7, gamma_hi = 1.3;
};

namespace detail {

template <typename T, typename Get, typename Set>
inline void flip_h(int w, int h, Get get, Set set) {
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) {
            T a = get(y, x), b = get(y, w - 1 - x);
            set(y, x, b);
            set(y, w - 1 - x, a);
        }
}

inline void hflip_image(ImageRGB& img) {
    for (int c = 0; c < 3; ++c) {
        float* p = img.plane(c);
        for (int y = 0; y < img.height; ++y)
            std::reverse(p + static_cast<std::size_t>(y) * img.width,
                         p + static_cast<std::size_t>(y + 1) * img.width);
    }
}
inline void hflip_mask(LabelMask& m) {
    for (int y = 0; y < m.height; ++y)
        std::reverse(m.ids.begin() + static_cast<std::size_t>(y) * m.width,
                     m.ids.begin() + static_cast<std::size_t>(y + 1) * m.width);
}
inline void vflip_image(ImageRGB& img) {
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height / 2; ++y) {
            float* a = img.plane(c) + static_cast<std::size_t>(y) * img.width;
            float* b = img.plane(c) +
                       static_cast<std::size_t>(img.height - 1 - y) * img.width;
            std::swap_ranges(a, a + img.width, b);
        }
}
inline void vflip_mask(LabelMask& m) {
    for (int y = 0; y < m.height / 2; ++y) {
        auto a = m.ids.begin() + static_cast<std::size_t>(y) * m.width;
        auto b = m.ids.begin() +
                 static_cast<std::size_t>(m.height - 1 - y) * m.width;
        std::swap_ranges(a, a + m.width, b);
    }
}
/// Clockwise quarter turn; requires a square raster.
inline void rot90_image(ImageRGB& img) {
    ImageRGB out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, x, img.height - 1 - y) = img.at(c, y, x);
    img = std::move(out);
}
inline void rot90_mask(LabelMask& m) {
    LabelMask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            out.at(x, m.height - 1 - y) = m.at(y, x);
    m = std::move(out);
}

} // namespace detail

/// Applies an independently sampled subset of mask-safe augmentations.
/// Geometric ops hit the image and mask identically; gamma jitter hits the
/// image only. 90-degree rotations are sampled only for square tiles.
inline void augment(ImageRGB& image, LabelMask& mask, Rng& rng,
                    const AugmentConfig& cfg = {}) {
    if (image.width != mask.width || image.height != mask.height)
        throw ShapeError("mask dims", image.width, mask.width);
    if (cfg.hflip && rng.coin()) {
        detail::hflip_image(image);
        detail::hflip_mask(mask);
    }
    if (cfg.vflip && rng.coin()) {
        detail::vflip_image(image);
        detail::vflip_mask(mask);
    }
    if (cfg.rot90 && image.width == image.height) {
        const int quarter_turns = rng.uniform_int(4);
        for (int i = 0; i < quarter_turns; ++i) {
            detail::rot90_image(image);
            detail::rot90_mask(mask);
        }
    }
    if (cfg.gamma_jitter) {
        const double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
        image = gamma_correct(image, gamma);
    }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 24;
    float initial_lr = 0.005f;
    int max_epochs = 40;
    std::uint64_t seed = 0;
    bool augment_enabled = true;
    AugmentConfig augment;
    std::optional<std::vector<float>> class_weights; // nullopt: from data
    int plateau_patience = 10;
    float plateau_factor = 0.1f;
    float plateau_tolerance = 1e-4f;
    int early_stop_patience = 5;
    float beta1 = 0.9f, beta2 = 0.999f, adam_epsilon = 1e-8f;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_miou = 0.0;
    float lr = 0.0f;
};

struct TrainResult {
    Model model; // parameters at the best validation loss
    std::vector<EpochStats> history;
};

using EpochCallback =
    std::function<void(const Model&, const EpochStats&, bool is_best)>;

namespace detail {

inline std::pair<double, double> validate_model(Model& model,
                                                const std::vector<Sample>& val,
                                                const ClassWeights& weights,
                                                int batch_size) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    ConfusionMatrix cm(model.config.num_classes);
    for (std::size_t start = 0; start < val.size(); start += batch_size) {
        const std::size_t end = std::min(val.size(), start + batch_size);
        std::vector<const ImageRGB*> imgs;
        std::vector<LabelMask> masks;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&val[i].image);
            masks.push_back(val[i].mask);
        }
        ForwardTrace t = forward(model, images_to_tensor(imgs), Mode::infer);
        WceResult w = weighted_cross_entropy(t.probabilities, masks, weights);
        loss_sum += w.loss;
        ++batches;
        for (std::size_t i = start; i < end; ++i)
            accumulate(cm, argmax_mask(t.probabilities, static_cast<int>(i - start)),
                       val[i].mask);
    }
    const MetricsReport mr = metrics(cm);
    return {loss_sum / static_cast<double>(batches), mr.mean_iou};
}

} // namespace detail

/// Full training run: shuffled mini-batches, Adam with the plateau schedule,
/// per-epoch validation, early stopping on stalled validation loss.
/// Deterministic in (config.seed); returns the best-validation model.
inline TrainResult train(const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set,
                         const ArchitectureConfig& arch, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = nullptr) {
    if (train_set.empty()) throw DataError("training dataset is empty");
    if (val_set.empty()) throw DataError("validation dataset is empty");
    for (const auto& s : train_set)
        if (s.image.width % 32 != 0 || s.image.height % 32 != 0)
            throw DataError("tile dims must be divisible by 32");

    ClassWeights weights;
    if (cfg.class_weights) {
        weights.w = *cfg.class_weights;
    } else {
        std::vector<std::uint64_t> counts(arch.num_classes, 0);
        for (const auto& s : train_set)
            for (const auto id : s.mask.ids) counts[id] += 1;
        weights = compute_class_weights(counts);
    }

    Model model = build_model(arch, cfg.seed);
    auto params = parameters(model);
    AdamState adam = AdamState::for_parameters(params, cfg.beta1, cfg.beta2,
                                               cfg.adam_epsilon);
    PlateauSchedule sched;
    sched.current_lr = cfg.initial_lr;
    sched.patience = cfg.plateau_patience;
    sched.factor = cfg.plateau_factor;
    sched.tolerance = cfg.plateau_tolerance;

    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        // Deterministic shuffle for this epoch.
        Rng shuffle_rng(Rng::mix(cfg.seed, 0xe90c + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[shuffle_rng.uniform_int(static_cast<int>(i))]);

        double epoch_loss = 0.0;
        std::size_t batch_count = 0;
        for (std::size_t start = 0; start < order.size();
             start += cfg.batch_size) {
            const std::size_t end =
                std::min(order.size(), start + cfg.batch_size);
            std::vector<ImageRGB> images;
            std::vector<LabelMask> masks;
            for (std::size_t i = start; i < end; ++i) {
                Sample s = train_set[order[i]];
                if (cfg.augment_enabled) {
                    // Stream derived from (seed, epoch, sample index) so
                    // batch assembly may run in any worker layout.
                    Rng arng(Rng::mix(Rng::mix(cfg.seed, 0xa06),
                                      (static_cast<std::uint64_t>(epoch) << 32) |
                                          order[i]));
                    augment(s.image, s.mask, arng, cfg.augment);
                }
                images.push_back(std::move(s.image));
                masks.push_back(std::move(s.mask));
            }
            std::vector<const ImageRGB*> ptrs;
            for (const auto& im : images) ptrs.push_back(&im);
            ForwardTrace trace =
                forward(model, images_to_tensor(ptrs), Mode::train);
            WceResult wce =
                weighted_cross_entropy(trace.probabilities, masks, weights);
            if (!std::isfinite(wce.loss))
                throw DivergenceError("non-finite training loss at epoch " +
                                      std::to_string(epoch) + ", batch " +
                                      std::to_string(batch_count));
            Gradients grads = backward(model, trace, wce.grad_logits);
            adam_step(params, grads, adam, sched.current_lr);
            plateau_update(sched, wce.loss);
            epoch_loss += wce.loss;
            ++batch_count;
        }

        auto [val_loss, val_miou] =
            detail::validate_model(model, val_set, weights, cfg.batch_size);
        EpochStats stats{epoch, epoch_loss / static_cast<double>(batch_count),
                         val_loss, val_miou, sched.current_lr};
        result.history.push_back(stats);

        const bool is_best = val_loss < best_val;
        if (is_best) {
            best_val = val_loss;
            result.model = model; // snapshot
            epochs_since_best = 0;
        } else {
            ++epochs_since_best;
        }
        if (on_epoch) on_epoch(model, stats, is_best);
        if (epochs_since_best >= cfg.early_stop_patience) break;
    }
    if (result.model.layers.empty()) result.model = std::move(model);
    return result;
}

/// Serializes the per-epoch history as CSV.
inline std::string history_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,train_loss,val_loss,val_miou,lr\n";
    char buf[160];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6g\n", h.epoch,
                      h.train_loss, h.val_loss, h.val_miou,
                      static_cast<double>(h.lr));
        out += buf;
    }
    return out;
}

} // namespace cfsg
