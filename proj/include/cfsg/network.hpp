#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/image.hpp"
#include "cfsg/rng.hpp"
#include "cfsg/tensor.hpp"

namespace cfsg {

/// Layer counts and widths of the encoder-decoder. The conv counts are fixed
/// by construction (14 encode + 15 decode = 29 convs; with 5 pools and 5
/// unpools the net is 39 layers); widths scale the model between desk and
/// full size.
struct ArchitectureConfig {
    std::array<int, 5> stage_widths{8, 16, 32, 32, 32};
    std::array<int, 5> encoder_convs{2, 2, 3, 3, 4};
    std::array<int, 5> decoder_convs{4, 3, 3, 2, 3};
    int num_classes = 3;
    bool skip_connections = true;

    static ArchitectureConfig desk_default() { return {}; }
    static ArchitectureConfig full_default() {
        ArchitectureConfig c;
        c.stage_widths = {64, 128, 256, 512, 512};
        return c;
    }

    void validate() const {
        int enc = 0, dec = 0;
        for (int i = 0; i < 5; ++i) {
            if (stage_widths[i] < 1)
                throw ConfigError("stage width must be positive");
            if (encoder_convs[i] < 1 || decoder_convs[i] < 1)
                throw ConfigError("per-stage conv counts must be positive");
            enc += encoder_convs[i];
            dec += decoder_convs[i];
        }
        if (enc != 14) throw ConfigError("encoder convs must sum to 14, got " +
                                         std::to_string(enc));
        if (dec != 15) throw ConfigError("decoder convs must sum to 15, got " +
                                         std::to_string(dec));
        if (num_classes < 2) throw ConfigError("need at least 2 classes");
    }

    bool operator==(const ArchitectureConfig&) const = default;
};

/// Static description of one conv layer derived from the config.
struct ConvSpec {
    int index;   // 1..29, matches the "convN" layer names
    int in_ch;
    int out_ch;
    bool has_bn; // convs 1..28; the classifier conv has none
};

/// Expands the config into the ordered list of 29 conv layers.
inline std::vector<ConvSpec> conv_plan(const ArchitectureConfig& cfg) {
    cfg.validate();
    std::vector<ConvSpec> plan;
    plan.reserve(29);
    int idx = 1;
    int ch = 3;
    for (int s = 0; s < 5; ++s)
        for (int k = 0; k < cfg.encoder_convs[s]; ++k) {
            plan.push_back({idx++, ch, cfg.stage_widths[s], true});
            ch = cfg.stage_widths[s];
        }
    for (int j = 0; j < 5; ++j) {
        const int i = 4 - j; // encoder stage whose resolution this stage restores
        if (cfg.skip_connections) ch += cfg.stage_widths[i];
        const int stage_out = i > 0 ? cfg.stage_widths[i - 1] : cfg.num_classes;
        for (int k = 0; k < cfg.decoder_convs[j]; ++k) {
            const bool last = k == cfg.decoder_convs[j] - 1;
            const int out = last ? stage_out : cfg.stage_widths[i];
            const bool classifier = idx == 29;
            plan.push_back({idx++, ch, out, !classifier});
            ch = out;
        }
    }
    return plan;
}

struct ConvLayer {
    std::string name; // "conv1".."conv29"
    Tensor weight;    // (out, in, 3, 3)
    std::vector<float> bias;
    bool has_bn = false;
    BatchNormState bn;
};

struct Model {
    ArchitectureConfig config;
    std::vector<ConvLayer> layers;
    std::uint64_t seed = 0;
};

/// A flat view over one named parameter block of a model.
struct ParamRef {
    std::string name;
    float* data;
    std::size_t size;
    std::array<int, 4> shape; // 1-padded for vectors
    bool trainable;
};

/// Trainable parameters in fixed order: per conv, weight / bias / gamma / beta.
inline std::vector<ParamRef> parameters(Model& m) {
    std::vector<ParamRef> out;
    for (auto& l : m.layers) {
        out.push_back({l.name + "_weight", l.weight.data.data(),
                       l.weight.size(),
                       {l.weight.n, l.weight.c, l.weight.h, l.weight.w}, true});
        out.push_back({l.name + "_bias", l.bias.data(), l.bias.size(),
                       {static_cast<int>(l.bias.size()), 1, 1, 1}, true});
        if (l.has_bn) {
            const int c = l.bn.channels();
            out.push_back({l.name + "_bn_gamma", l.bn.gamma.data(),
                           l.bn.gamma.size(), {c, 1, 1, 1}, true});
            out.push_back({l.name + "_bn_beta", l.bn.beta.data(),
                           l.bn.beta.size(), {c, 1, 1, 1}, true});
        }
    }
    return out;
}

/// All records including the non-trainable running statistics, in the order
/// the checkpoint format stores them.
inline std::vector<ParamRef> all_records(Model& m) {
    std::vector<ParamRef> out;
    for (auto& l : m.layers) {
        out.push_back({l.name + "_weight", l.weight.data.data(),
                       l.weight.size(),
                       {l.weight.n, l.weight.c, l.weight.h, l.weight.w}, true});
        out.push_back({l.name + "_bias", l.bias.data(), l.bias.size(),
                       {static_cast<int>(l.bias.size()), 1, 1, 1}, true});
        if (l.has_bn) {
            const int c = l.bn.channels();
            out.push_back({l.name + "_bn_gamma", l.bn.gamma.data(),
                           l.bn.gamma.size(), {c, 1, 1, 1}, true});
            out.push_back({l.name + "_bn_beta", l.bn.beta.data(),
                           l.bn.beta.size(), {c, 1, 1, 1}, true});
            out.push_back({l.name + "_bn_mean", l.bn.running_mean.data(),
                           l.bn.running_mean.size(), {c, 1, 1, 1}, false});
            out.push_back({l.name + "_bn_var", l.bn.running_var.data(),
                           l.bn.running_var.size(), {c, 1, 1, 1}, false});
        }
    }
    return out;
}

/// He-initialized model: conv weights ~ N(0, 2/fan_in), biases 0, gamma 1,
/// beta 0, running stats (0, 1). Deterministic in the seed.
inline Model build_model(const ArchitectureConfig& cfg, std::uint64_t seed) {
    Model m;
    m.config = cfg;
    m.seed = seed;
    Rng rng(Rng::mix(seed, 0x4e17));
    for (const auto& spec : conv_plan(cfg)) {
        ConvLayer l;
        l.name = "conv" + std::to_string(spec.index);
        l.weight = Tensor(spec.out_ch, spec.in_ch, 3, 3);
        const double stddev = std::sqrt(2.0 / (spec.in_ch * 9.0));
        for (float& v : l.weight.data)
            v = static_cast<float>(rng.normal() * stddev);
        l.bias.assign(spec.out_ch, 0.0f);
        l.has_bn = spec.has_bn;
        if (spec.has_bn) l.bn = BatchNormState(spec.out_ch);
        m.layers.push_back(std::move(l));
    }
    return m;
}

struct ParameterCount {
    std::uint64_t trainable = 0, non_trainable = 0, total = 0;
};

inline ParameterCount parameter_count(const Model& m) {
    ParameterCount pc;
    for (const auto& l : m.layers) {
        pc.trainable += l.weight.size() + l.bias.size();
        if (l.has_bn) {
            pc.trainable += l.bn.gamma.size() + l.bn.beta.size();
            pc.non_trainable += l.bn.running_mean.size() + l.bn.running_var.size();
        }
    }
    pc.total = pc.trainable + pc.non_trainable;
    return pc;
}

/// Everything forward computes, plus (in train mode) the caches backward
/// consumes. Activation snapshots are retained only for requested names.
struct ForwardTrace {
    Mode mode = Mode::infer;
    Tensor logits;
    Tensor probabilities;
    std::vector<std::pair<std::string, Tensor>> named_activations;

    struct ConvCache {
        Tensor input;    // pre-conv activation
        Tensor conv_out; // pre-bn
        Tensor bn_out;   // pre-relu
        BnCache bn;
    };
    std::vector<ConvCache> conv_caches;          // one per conv, train mode
    std::array<PoolIndices, 5> pool_indices;
    std::array<Tensor, 5> skip_sources;          // pre-pool encoder activations
    std::array<int, 5> concat_skip_channels{};   // 0 when skips disabled
    bool complete = false;                       // false if stopped early
};

namespace detail {

inline bool wants(const std::vector<std::string>& names, const std::string& n) {
    for (const auto& s : names)
        if (s == n) return true;
    return false;
}

/// Runs the network. When `stop_after` is non-empty the walk ends right after
/// that layer's activation is produced (used by feature-map extraction).
inline ForwardTrace forward_impl(Model& model, const Tensor& batch, Mode mode,
                                 const std::vector<std::string>& capture,
                                 const std::string& stop_after) {
    const auto& cfg = model.config;
    cfg.validate();
    if (batch.c != 3) throw ShapeError("input channels", 3, batch.c);
    if (batch.h % 32 != 0) throw ShapeError("input height (divisible by 32)", batch.h / 32 * 32, batch.h);
    if (batch.w % 32 != 0) throw ShapeError("input width (divisible by 32)", batch.w / 32 * 32, batch.w);

    const auto plan = conv_plan(cfg);
    ForwardTrace trace;
    trace.mode = mode;
    if (mode == Mode::train) trace.conv_caches.resize(29);

    Tensor x = batch;
    if (wants(capture, "input"))
        trace.named_activations.emplace_back("input", x);

    std::size_t conv_i = 0; // index into plan/model.layers
    auto run_conv = [&](Tensor&& in) -> Tensor {
        ConvLayer& l = model.layers[conv_i];
        Tensor conv_out = conv2d(in, l.weight, l.bias);
        Tensor act;
        if (l.has_bn) {
            BnCache cache;
            Tensor bn_out = batch_norm(conv_out, l.bn, mode,
                                       mode == Mode::train ? &cache : nullptr);
            act = relu(bn_out);
            if (mode == Mode::train) {
                auto& c = trace.conv_caches[conv_i];
                c.input = std::move(in);
                c.conv_out = std::move(conv_out);
                c.bn_out = std::move(bn_out);
                c.bn = std::move(cache);
            }
        } else {
            act = conv_out;
            if (mode == Mode::train) {
                auto& c = trace.conv_caches[conv_i];
                c.input = std::move(in);
            }
        }
        if (wants(capture, l.name))
            trace.named_activations.emplace_back(l.name, act);
        ++conv_i;
        return act;
    };
    auto stop_here = [&](const std::string& name) {
        return !stop_after.empty() && name == stop_after;
    };

    // Encoder.
    for (int s = 0; s < 5; ++s) {
        for (int k = 0; k < cfg.encoder_convs[s]; ++k) {
            const std::string name = model.layers[conv_i].name;
            x = run_conv(std::move(x));
            if (stop_here(name)) return trace;
        }
        if (cfg.skip_connections) trace.skip_sources[s] = x;
        PoolResult pr = max_pool_2x2(x);
        trace.pool_indices[s] = std::move(pr.indices);
        x = std::move(pr.values);
        const std::string pname = "pool" + std::to_string(s + 1);
        if (wants(capture, pname))
            trace.named_activations.emplace_back(pname, x);
        if (stop_here(pname)) return trace;
    }

    // Decoder.
    for (int j = 0; j < 5; ++j) {
        const int i = 4 - j;
        x = max_unpool_2x2(x, trace.pool_indices[i]);
        const std::string uname = "unpool" + std::to_string(j + 1);
        if (wants(capture, uname))
            trace.named_activations.emplace_back(uname, x);
        if (stop_here(uname)) return trace;
        if (cfg.skip_connections) {
            trace.concat_skip_channels[i] = trace.skip_sources[i].c;
            x = concat_channels(x, trace.skip_sources[i]);
        }
        for (int k = 0; k < cfg.decoder_convs[j]; ++k) {
            const std::string name = model.layers[conv_i].name;
            x = run_conv(std::move(x));
            if (stop_here(name)) return trace;
        }
    }

    trace.logits = std::move(x);
    trace.probabilities = softmax_channels(trace.logits);
    if (wants(capture, "probabilities"))
        trace.named_activations.emplace_back("probabilities",
                                             trace.probabilities);
    trace.complete = true;
    return trace;
}

} // namespace detail

/// Full forward pass. Train mode caches every intermediate needed by
/// backward; infer mode touches no model state.
inline ForwardTrace forward(Model& model, const Tensor& batch, Mode mode,
                            const std::vector<std::string>& capture = {}) {
    return detail::forward_impl(model, batch, mode, capture, "");
}

/// Named gradients, same names and shapes as parameters(model).
struct Gradients {
    std::vector<std::pair<std::string, std::vector<float>>> items;

    std::vector<float>* find(const std::string& name) {
        for (auto& [n, v] : items)
            if (n == name) return &v;
        return nullptr;
    }
};

/// Backpropagates grad wrt logits through the whole network and returns
/// gradients for every trainable parameter.
inline Gradients backward(Model& model, const ForwardTrace& trace,
                          const Tensor& grad_logits) {
    if (trace.mode != Mode::train)
        throw DataError("backward needs a trace produced in train mode");
    if (!trace.complete)
        throw DataError("backward needs a complete forward trace");
    const auto& cfg = model.config;
    if (!grad_logits.same_shape(trace.logits))
        throw ShapeError("grad_logits " + grad_logits.shape_str() +
                         " does not match logits " + trace.logits.shape_str());

    Gradients grads;
    std::map<std::string, std::vector<float>> bucket;
    std::array<Tensor, 5> skip_grads; // gradient into encoder pre-pool activations

    int conv_i = 28; // walk conv layers in reverse
    auto back_conv = [&](Tensor upstream) -> Tensor {
        ConvLayer& l = model.layers[conv_i];
        const auto& cache = trace.conv_caches[conv_i];
        Tensor grad_pre_bn;
        if (l.has_bn) {
            Tensor grad_bn_out = relu_grad(cache.bn_out, upstream);
            BatchNormGrads bg =
                batch_norm_grad(cache.conv_out, l.bn, cache.bn, grad_bn_out);
            bucket[l.name + "_bn_gamma"] = std::move(bg.gamma);
            bucket[l.name + "_bn_beta"] = std::move(bg.beta);
            grad_pre_bn = std::move(bg.input);
        } else {
            grad_pre_bn = std::move(upstream);
        }
        Conv2dGrads cg = conv2d_grad(cache.input, l.weight, grad_pre_bn);
        bucket[l.name + "_weight"] = std::move(cg.weights.data);
        bucket[l.name + "_bias"] = std::move(cg.bias);
        --conv_i;
        return std::move(cg.input);
    };

    Tensor g = grad_logits;

    // Decoder stages in reverse.
    for (int j = 4; j >= 0; --j) {
        const int i = 4 - j;
        for (int k = 0; k < cfg.decoder_convs[j]; ++k) g = back_conv(std::move(g));
        if (cfg.skip_connections) {
            auto [g_unpooled, g_skip] =
                split_channels(g, g.c - trace.concat_skip_channels[i]);
            skip_grads[i] = std::move(g_skip);
            g = std::move(g_unpooled);
        }
        g = max_unpool_2x2_grad(trace.pool_indices[i], g);
    }

    // Encoder stages in reverse.
    for (int s = 4; s >= 0; --s) {
        g = max_pool_2x2_grad(trace.pool_indices[s], g);
        if (cfg.skip_connections && skip_grads[s].size() > 0) {
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] += skip_grads[s].data[i];
        }
        for (int k = 0; k < cfg.encoder_convs[s]; ++k) g = back_conv(std::move(g));
    }

    // Emit in parameter order.
    for (auto& p : parameters(model)) {
        auto it = bucket.find(p.name);
        if (it == bucket.end())
            throw DataError("missing gradient for " + p.name);
        grads.items.emplace_back(p.name, std::move(it->second));
    }
    return grads;
}

/// One grayscale raster per channel of the named layer's activation, each
/// min-max normalized to [0,1] independently (constant channels map to 0).
struct Raster {
    int width = 0, height = 0;
    std::vector<float> v;
};

inline std::vector<std::string> layer_names(const Model& model) {
    std::vector<std::string> names{"input"};
    for (int i = 1; i <= 29; ++i) names.push_back("conv" + std::to_string(i));
    for (int i = 1; i <= 5; ++i) names.push_back("pool" + std::to_string(i));
    for (int i = 1; i <= 5; ++i) names.push_back("unpool" + std::to_string(i));
    names.push_back("probabilities");
    return names;
}

inline std::vector<Raster> extract_feature_maps(Model& model,
                                                const ImageRGB& image,
                                                const std::string& layer_name) {
    const auto names = layer_names(model);
    if (std::find(names.begin(), names.end(), layer_name) == names.end())
        throw DataError("unknown layer name '" + layer_name + "'");
    const Tensor input = image_to_tensor(image);
    // The walk stops right after the requested layer; running the decoder is
    // pointless when only an encoder activation is wanted.
    ForwardTrace trace = detail::forward_impl(
        model, input, Mode::infer, {layer_name},
        layer_name == "probabilities" ? "" : layer_name);
    const Tensor* act = nullptr;
    for (const auto& [n, t] : trace.named_activations)
        if (n == layer_name) act = &t;
    if (!act) throw DataError("layer '" + layer_name + "' was not captured");

    std::vector<Raster> rasters;
    rasters.reserve(act->c);
    const std::size_t plane = static_cast<std::size_t>(act->h) * act->w;
    for (int c = 0; c < act->c; ++c) {
        Raster r;
        r.width = act->w;
        r.height = act->h;
        r.v.resize(plane);
        const float* p = act->plane(0, c);
        float lo = p[0], hi = p[0];
        for (std::size_t i = 0; i < plane; ++i) {
            lo = std::min(lo, p[i]);
            hi = std::max(hi, p[i]);
        }
        const float range = hi - lo;
        for (std::size_t i = 0; i < plane; ++i)
            r.v[i] = range > 0.0f ? (p[i] - lo) / range : 0.0f;
        rasters.push_back(std::move(r));
    }
    return rasters;
}

} // namespace cfsg
