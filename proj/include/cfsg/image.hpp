#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/rng.hpp"
#include "cfsg/tensor.hpp"

namespace cfsg {

/// Planar RGB raster, three channels of reals in [0,1].
struct ImageRGB {
    int width = 0, height = 0;
    std::vector<float> px; // channel-major: R plane, G plane, B plane

    ImageRGB() = default;
    ImageRGB(int w, int h)
        : width(w), height(h),
          px(static_cast<std::size_t>(3) * w * h, 0.0f) {}

    float& at(int c, int y, int x) {
        return px[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return px[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float* plane(int c) {
        return px.data() + static_cast<std::size_t>(c) * height * width;
    }
    const float* plane(int c) const {
        return px.data() + static_cast<std::size_t>(c) * height * width;
    }
};

/// Per-pixel class map: 0 = soil, 1 = crop, 2 = weed.
struct LabelMask {
    int width = 0, height = 0;
    std::vector<std::uint8_t> ids;

    LabelMask() = default;
    LabelMask(int w, int h)
        : width(w), height(h), ids(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t& at(int y, int x) {
        return ids[static_cast<std::size_t>(y) * width + x];
    }
    std::uint8_t at(int y, int x) const {
        return ids[static_cast<std::size_t>(y) * width + x];
    }
};

/// One training example: an image tile and its label mask.
struct Sample {
    ImageRGB image;
    LabelMask mask;
};

// ---------------------------------------------------------------------------
// Tensor conversions.
// ---------------------------------------------------------------------------

inline Tensor image_to_tensor(const ImageRGB& img) {
    Tensor t(1, 3, img.height, img.width);
    std::copy(img.px.begin(), img.px.end(), t.data.begin());
    return t;
}

/// Packs a batch of equally sized images into an (N,3,H,W) tensor.
inline Tensor images_to_tensor(const std::vector<const ImageRGB*>& imgs) {
    if (imgs.empty()) throw DataError("empty image batch");
    const int H = imgs[0]->height, W = imgs[0]->width;
    Tensor t(static_cast<int>(imgs.size()), 3, H, W);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i]->height != H || imgs[i]->width != W)
            throw ShapeError("batch image dims", W, imgs[i]->width);
        std::copy(imgs[i]->px.begin(), imgs[i]->px.end(),
                  t.data.begin() + i * imgs[i]->px.size());
    }
    return t;
}

/// Per-pixel argmax over channels of a (1,C,H,W) probability tensor.
inline LabelMask argmax_mask(const Tensor& probs, int batch_index = 0) {
    LabelMask m(probs.w, probs.h);
    const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
    const float* base = probs.data.data() +
                        static_cast<std::size_t>(batch_index) * probs.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
        int best = 0;
        float bv = base[i];
        for (int c = 1; c < probs.c; ++c) {
            const float v = base[c * plane + i];
            if (v > bv) { bv = v; best = c; }
        }
        m.ids[i] = static_cast<std::uint8_t>(best);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Geometry and photometry.
// ---------------------------------------------------------------------------

/// Bilinear resize with align-corners sampling and edge clamping.
inline ImageRGB resize_bilinear(const ImageRGB& img, int new_w, int new_h) {
    if (new_w < 1 || new_h < 1)
        throw DataError("resize target must be at least 1x1");
    if (new_w == img.width && new_h == img.height) return img;
    ImageRGB out(new_w, new_h);
    const double sx = new_w > 1 ? static_cast<double>(img.width - 1) / (new_w - 1) : 0.0;
    const double sy = new_h > 1 ? static_cast<double>(img.height - 1) / (new_h - 1) : 0.0;
    for (int c = 0; c < 3; ++c) {
        const float* src = img.plane(c);
        float* dst = out.plane(c);
        for (int y = 0; y < new_h; ++y) {
            const double fy = y * sy;
            const int y0 = std::min(static_cast<int>(fy), img.height - 1);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const double wy = fy - y0;
            for (int x = 0; x < new_w; ++x) {
                const double fx = x * sx;
                const int x0 = std::min(static_cast<int>(fx), img.width - 1);
                const int x1 = std::min(x0 + 1, img.width - 1);
                const double wx = fx - x0;
                const double top = src[static_cast<std::size_t>(y0) * img.width + x0] * (1 - wx) +
                                   src[static_cast<std::size_t>(y0) * img.width + x1] * wx;
                const double bot = src[static_cast<std::size_t>(y1) * img.width + x0] * (1 - wx) +
                                   src[static_cast<std::size_t>(y1) * img.width + x1] * wx;
                dst[static_cast<std::size_t>(y) * new_w + x] =
                    static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

/// Nearest-neighbor mask resize (labels must not mix).
inline LabelMask resize_nearest(const LabelMask& mask, int new_w, int new_h) {
    if (new_w < 1 || new_h < 1)
        throw DataError("resize target must be at least 1x1");
    LabelMask out(new_w, new_h);
    const double sx = new_w > 1 ? static_cast<double>(mask.width - 1) / (new_w - 1) : 0.0;
    const double sy = new_h > 1 ? static_cast<double>(mask.height - 1) / (new_h - 1) : 0.0;
    for (int y = 0; y < new_h; ++y) {
        const int syi = std::min(static_cast<int>(std::lround(y * sy)), mask.height - 1);
        for (int x = 0; x < new_w; ++x) {
            const int sxi = std::min(static_cast<int>(std::lround(x * sx)), mask.width - 1);
            out.at(y, x) = mask.at(syi, sxi);
        }
    }
    return out;
}

namespace detail {

inline std::vector<float> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<float> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        k[i + radius] = static_cast<float>(v);
        sum += v;
    }
    for (float& v : k) v = static_cast<float>(v / sum);
    return k;
}

/// Separable 1-D pass over one plane with clamped edges.
inline void blur_pass(const float* src, float* dst, int w, int h,
                      const std::vector<float>& k, bool horizontal) {
    const int radius = static_cast<int>(k.size()) / 2;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int sx = x, sy = y;
                if (horizontal) sx = std::clamp(x + i, 0, w - 1);
                else            sy = std::clamp(y + i, 0, h - 1);
                acc += k[i + radius] * src[static_cast<std::size_t>(sy) * w + sx];
            }
            dst[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
}

} // namespace detail

/// Separable Gaussian smoothing, kernel radius ceil(3*sigma), clamped edges.
/// sigma = 0 is the identity.
inline ImageRGB gaussian_blur(const ImageRGB& img, double sigma) {
    if (sigma < 0.0) throw DataError("blur sigma must be non-negative");
    if (sigma == 0.0) return img;
    const auto k = detail::gaussian_kernel(sigma);
    ImageRGB out(img.width, img.height);
    std::vector<float> tmp(static_cast<std::size_t>(img.width) * img.height);
    for (int c = 0; c < 3; ++c) {
        detail::blur_pass(img.plane(c), tmp.data(), img.width, img.height, k, true);
        detail::blur_pass(tmp.data(), out.plane(c), img.width, img.height, k, false);
    }
    return out;
}

/// Power-law transform, out = in^gamma elementwise.
inline ImageRGB gamma_correct(const ImageRGB& img, double gamma) {
    if (gamma <= 0.0) throw DataError("gamma must be positive");
    if (gamma == 1.0) return img;
    ImageRGB out = img;
    for (float& v : out.px) v = std::pow(v, static_cast<float>(gamma));
    return out;
}

// ---------------------------------------------------------------------------
// Field preprocessing and the field->aerial domain shift.
// ---------------------------------------------------------------------------

struct FieldPrepParams {
    int work_width = 1200;
    int work_height = 800;
    double blur_sigma = -1.0; // < 0: auto, downsample_ratio / 2
    double gamma = 1.0;
    int tile_size = 512;
    int crops = 1;
};

/// Resize -> Gaussian smoothing -> gamma correction -> K random tile crops.
/// The mask undergoes the same resize (nearest-neighbor) and crops.
inline std::vector<Sample> preprocess_field(const ImageRGB& image,
                                            const LabelMask& mask, Rng& rng,
                                            const FieldPrepParams& p) {
    if (mask.width != image.width || mask.height != image.height)
        throw ShapeError("mask width", image.width, mask.width);
    if (p.tile_size > p.work_width || p.tile_size > p.work_height)
        throw DataError("tile size " + std::to_string(p.tile_size) +
                        " exceeds working dims " + std::to_string(p.work_width) +
                        "x" + std::to_string(p.work_height));
    double sigma = p.blur_sigma;
    if (sigma < 0.0) {
        const double ratio = static_cast<double>(image.width) / p.work_width;
        sigma = ratio > 1.0 ? ratio / 2.0 : 0.0;
    }
    ImageRGB work = resize_bilinear(image, p.work_width, p.work_height);
    work = gaussian_blur(work, sigma);
    work = gamma_correct(work, p.gamma);
    LabelMask mwork = resize_nearest(mask, p.work_width, p.work_height);

    std::vector<Sample> out;
    out.reserve(p.crops);
    for (int i = 0; i < p.crops; ++i) {
        const int x0 = p.work_width == p.tile_size
                           ? 0
                           : rng.uniform_int(p.work_width - p.tile_size + 1);
        const int y0 = p.work_height == p.tile_size
                           ? 0
                           : rng.uniform_int(p.work_height - p.tile_size + 1);
        Sample s;
        s.image = ImageRGB(p.tile_size, p.tile_size);
        s.mask = LabelMask(p.tile_size, p.tile_size);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < p.tile_size; ++y)
                for (int x = 0; x < p.tile_size; ++x)
                    s.image.at(c, y, x) = work.at(c, y0 + y, x0 + x);
        for (int y = 0; y < p.tile_size; ++y)
            for (int x = 0; x < p.tile_size; ++x)
                s.mask.at(y, x) = mwork.at(y0 + y, x0 + x);
        out.push_back(std::move(s));
    }
    return out;
}

struct DomainShiftParams {
    double factor = 2.0;   // downsample ratio, >= 1
    double blur_sigma = 1.0;
    double gamma = 1.0;
    float shift[3] = {0.0f, 0.0f, 0.0f}; // additive per-channel color shift
};

/// Emulates the aerial domain: downsample by `factor`, upsample back to the
/// original dims, blur, gamma, per-channel shift with clamping to [0,1].
inline ImageRGB domain_shift(const ImageRGB& img, const DomainShiftParams& p) {
    if (p.factor < 1.0) throw DataError("downsample factor must be >= 1");
    ImageRGB out = img;
    if (p.factor > 1.0) {
        const int dw = std::max(1, static_cast<int>(std::lround(img.width / p.factor)));
        const int dh = std::max(1, static_cast<int>(std::lround(img.height / p.factor)));
        out = resize_bilinear(resize_bilinear(out, dw, dh), img.width, img.height);
    }
    out = gaussian_blur(out, p.blur_sigma);
    out = gamma_correct(out, p.gamma);
    for (int c = 0; c < 3; ++c) {
        float* pl = out.plane(c);
        const std::size_t n = static_cast<std::size_t>(out.width) * out.height;
        for (std::size_t i = 0; i < n; ++i)
            pl[i] = std::clamp(pl[i] + p.shift[c], 0.0f, 1.0f);
    }
    return out;
}

} // namespace cfsg
