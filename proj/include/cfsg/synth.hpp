#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "cfsg/image.hpp"
#include "cfsg/rng.hpp"

namespace cfsg {

/// Parameters of the procedural field scene generator. Defaults are tuned so
/// class pixel frequencies come out soil > crop > weed, mirroring the class
/// imbalance the weighted loss is there to fix.
struct SceneSpec {
    int width = 64, height = 64;
    int crop_rows = 3;
    double row_spacing = 21.0;      // pixels between row centers
    double plant_spacing = 16.0;    // pixels between plants along a row
    double plant_radius_min = 4.5;
    double plant_radius_max = 7.0;
    double weed_density = 0.045;    // target fraction of canvas covered by weeds
    double weed_radius_min = 2.2;
    double weed_radius_max = 4.5;
    double soil_noise_scale = 9.0;  // texture feature size in pixels
    double soil_contrast = 0.08;
    std::uint64_t seed = 0;

    void validate() const {
        if (width % 32 != 0 || height % 32 != 0)
            throw ConfigError("scene dims must be divisible by 32");
        if (weed_density < 0.0 || weed_density > 1.0)
            throw ConfigError("weed density must lie in [0,1]");
    }
};

namespace detail {

/// Two-octave value noise in [-1,1], bilinear between lattice samples.
class ValueNoise {
public:
    ValueNoise(Rng& rng, int w, int h, double scale) {
        cols_ = std::max(2, static_cast<int>(w / scale) + 2);
        rows_ = std::max(2, static_cast<int>(h / scale) + 2);
        step_x_ = static_cast<double>(w) / (cols_ - 1);
        step_y_ = static_cast<double>(h) / (rows_ - 1);
        lattice_.resize(static_cast<std::size_t>(cols_) * rows_);
        for (auto& v : lattice_) v = rng.uniform(-1.0, 1.0);
    }

    double operator()(double x, double y) const {
        const double fx = x / step_x_, fy = y / step_y_;
        const int x0 = std::min(static_cast<int>(fx), cols_ - 2);
        const int y0 = std::min(static_cast<int>(fy), rows_ - 2);
        const double wx = fx - x0, wy = fy - y0;
        const double a = lattice_[static_cast<std::size_t>(y0) * cols_ + x0];
        const double b = lattice_[static_cast<std::size_t>(y0) * cols_ + x0 + 1];
        const double c = lattice_[static_cast<std::size_t>(y0 + 1) * cols_ + x0];
        const double d = lattice_[static_cast<std::size_t>(y0 + 1) * cols_ + x0 + 1];
        return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy;
    }

private:
    int cols_, rows_;
    double step_x_, step_y_;
    std::vector<double> lattice_;
};

inline void paint(ImageRGB& img, int y, int x, float r, float g, float b) {
    img.at(0, y, x) = r;
    img.at(1, y, x) = g;
    img.at(2, y, x) = b;
}

/// Rosette: a ring of rotated elliptical leaves around a center.
inline void draw_rosette(ImageRGB& img, LabelMask& mask, Rng& rng, double cx,
                         double cy, double radius, std::uint8_t label,
                         float base_r, float base_g, float base_b) {
    const int leaves = 5 + rng.uniform_int(3);
    const double phase = rng.uniform(0.0, 6.2831853);
    const float shade = static_cast<float>(rng.uniform(0.85, 1.1));
    for (int l = 0; l < leaves; ++l) {
        const double ang = phase + 6.2831853 * l / leaves;
        const double lx = radius, ly = radius * 0.38;
        const double ox = cx + std::cos(ang) * radius * 0.45;
        const double oy = cy + std::sin(ang) * radius * 0.45;
        const int x0 = std::max(0, static_cast<int>(ox - radius - 1));
        const int x1 = std::min(img.width - 1, static_cast<int>(ox + radius + 1));
        const int y0 = std::max(0, static_cast<int>(oy - radius - 1));
        const int y1 = std::min(img.height - 1, static_cast<int>(oy + radius + 1));
        const double ca = std::cos(ang), sa = std::sin(ang);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - ox, dy = y - oy;
                const double u = dx * ca + dy * sa;
                const double v = -dx * sa + dy * ca;
                const double q = (u * u) / (lx * lx) + (v * v) / (ly * ly);
                if (q <= 1.0) {
                    const float edge = static_cast<float>(1.0 - 0.35 * q);
                    paint(img, y, x, base_r * shade * edge, base_g * shade * edge,
                          base_b * shade * edge);
                    mask.at(y, x) = label;
                }
            }
    }
}

/// Irregular blob: radius modulated around the circle by two sinusoids.
inline void draw_blob(ImageRGB& img, LabelMask& mask, Rng& rng, double cx,
                      double cy, double radius, std::uint8_t label,
                      float base_r, float base_g, float base_b) {
    const double a1 = rng.uniform(0.15, 0.38), a2 = rng.uniform(0.08, 0.22);
    const double p1 = rng.uniform(0.0, 6.2831853), p2 = rng.uniform(0.0, 6.2831853);
    const int k1 = 2 + rng.uniform_int(3), k2 = 4 + rng.uniform_int(4);
    const float shade = static_cast<float>(rng.uniform(0.85, 1.12));
    const double rmax = radius * 1.6;
    const int x0 = std::max(0, static_cast<int>(cx - rmax - 1));
    const int x1 = std::min(img.width - 1, static_cast<int>(cx + rmax + 1));
    const int y0 = std::max(0, static_cast<int>(cy - rmax - 1));
    const int y1 = std::min(img.height - 1, static_cast<int>(cy + rmax + 1));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double th = std::atan2(dy, dx);
            const double rr = radius * (1.0 + a1 * std::sin(k1 * th + p1) +
                                        a2 * std::sin(k2 * th + p2));
            if (d <= rr) {
                const float edge = static_cast<float>(1.0 - 0.3 * (d / (rr + 1e-9)));
                paint(img, y, x, base_r * shade * edge, base_g * shade * edge,
                      base_b * shade * edge);
                mask.at(y, x) = label;
            }
        }
}

} // namespace detail

/// Renders a procedural field scene: noisy brown soil, crop rosettes in rows
/// (darker green family), weed blobs at random positions (yellow-green
/// family). The mask is rendered jointly; weeds override crop at overlaps.
inline std::pair<ImageRGB, LabelMask> synth_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(Rng::mix(spec.seed, 0x5ce9e));
    ImageRGB img(spec.width, spec.height);
    LabelMask mask(spec.width, spec.height);

    // Soil.
    detail::ValueNoise coarse(rng, spec.width, spec.height, spec.soil_noise_scale);
    detail::ValueNoise fine(rng, spec.width, spec.height,
                            std::max(2.0, spec.soil_noise_scale / 3.0));
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
            const double n = 0.7 * coarse(x, y) + 0.3 * fine(x, y);
            const float lum = static_cast<float>(1.0 + n * spec.soil_contrast * 4.0);
            detail::paint(img, y, x,
                          std::clamp(0.44f * lum, 0.0f, 1.0f),
                          std::clamp(0.31f * lum, 0.0f, 1.0f),
                          std::clamp(0.20f * lum, 0.0f, 1.0f));
        }

    // Crop rows (label 1). Rows run horizontally.
    const double first_row =
        (spec.height - (spec.crop_rows - 1) * spec.row_spacing) / 2.0;
    for (int r = 0; r < spec.crop_rows; ++r) {
        const double cy = first_row + r * spec.row_spacing + rng.uniform(-1.5, 1.5);
        double cx = rng.uniform(0.0, spec.plant_spacing);
        while (cx < spec.width) {
            const double radius =
                rng.uniform(spec.plant_radius_min, spec.plant_radius_max);
            const float jitter = static_cast<float>(rng.uniform(-0.03, 0.03));
            detail::draw_rosette(img, mask, rng, cx, cy + rng.uniform(-1.0, 1.0),
                                 radius, 1, 0.10f + jitter, 0.47f, 0.14f + jitter);
            cx += spec.plant_spacing * rng.uniform(0.85, 1.15);
        }
    }

    // Weeds (label 2) override crop at overlaps.
    const double mean_r = (spec.weed_radius_min + spec.weed_radius_max) / 2.0;
    const double mean_area = 3.14159265 * mean_r * mean_r;
    const int weed_count = static_cast<int>(
        std::lround(spec.weed_density * spec.width * spec.height / mean_area));
    for (int i = 0; i < weed_count; ++i) {
        const double cx = rng.uniform(0.0, spec.width - 1.0);
        const double cy = rng.uniform(0.0, spec.height - 1.0);
        const double radius =
            rng.uniform(spec.weed_radius_min, spec.weed_radius_max);
        const float jitter = static_cast<float>(rng.uniform(-0.04, 0.04));
        detail::draw_blob(img, mask, rng, cx, cy, radius, 2, 0.38f + jitter,
                          0.56f, 0.13f + jitter);
    }
    return {std::move(img), std::move(mask)};
}

} // namespace cfsg
