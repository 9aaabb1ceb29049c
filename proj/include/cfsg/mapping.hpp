#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cfsg/crf.hpp"
#include "cfsg/error.hpp"
#include "cfsg/image.hpp"
#include "cfsg/network.hpp"

namespace cfsg {

struct RegionOfInterest {
    ImageRGB image;
    double gsd_mm_per_px = 1.78;
};

/// Tile origins covering a raster with a regular stride; the last row and
/// column are shifted inward to abut the edge, never padded.
struct TilePlan {
    int tile_size = 0;
    int overlap = 0;
    std::vector<std::pair<int, int>> origins; // (x, y)
};

inline TilePlan plan_tiles(int roi_w, int roi_h, int tile_size, int overlap) {
    if (tile_size < 1) throw DataError("tile size must be positive");
    if (overlap < 0 || overlap >= tile_size)
        throw DataError("overlap must lie in [0, tile_size)");
    if (roi_w < tile_size || roi_h < tile_size)
        throw DataError("ROI " + std::to_string(roi_w) + "x" +
                        std::to_string(roi_h) + " smaller than tile " +
                        std::to_string(tile_size));
    const int stride = tile_size - overlap;
    auto axis = [&](int extent) {
        std::vector<int> xs;
        for (int x = 0; x + tile_size <= extent; x += stride) xs.push_back(x);
        if (xs.back() + tile_size < extent) xs.push_back(extent - tile_size);
        return xs;
    };
    TilePlan plan;
    plan.tile_size = tile_size;
    plan.overlap = overlap;
    for (const int y : axis(roi_h))
        for (const int x : axis(roi_w)) plan.origins.emplace_back(x, y);
    return plan;
}

struct RoiPrediction {
    LabelMask mask;
    Tensor probabilities; // (1, C, H, W), pre-CRF
};

/// Runs the model tile by tile and stitches the results. Overlapping pixels
/// average class probabilities before the argmax; tiles are always
/// accumulated in canonical origin order so the result does not depend on
/// the order the plan lists them in. Optional CRF refinement runs on the
/// stitched probabilities.
inline RoiPrediction predict_roi(Model& model, const ImageRGB& roi,
                                 const TilePlan& plan,
                                 const crf::Params* crf_params = nullptr) {
    if (model.config.num_classes != 3)
        throw DataError("weed mapping expects a 3-class model");
    if (plan.tile_size % 32 != 0)
        throw ShapeError("tile size (divisible by 32)",
                         plan.tile_size / 32 * 32, plan.tile_size);
    const int C = model.config.num_classes;
    const int H = roi.height, W = roi.width;
    const int T = plan.tile_size;

    std::vector<std::pair<int, int>> order = plan.origins;
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second < b.second : a.first < b.first;
    });
    order.erase(std::unique(order.begin(), order.end()), order.end());

    Tensor sum(1, C, H, W);
    std::vector<std::uint32_t> cover(static_cast<std::size_t>(H) * W, 0);
    ImageRGB tile(T, T);
    for (const auto& [ox, oy] : order) {
        if (ox < 0 || oy < 0 || ox + T > W || oy + T > H)
            throw DataError("tile origin (" + std::to_string(ox) + "," +
                            std::to_string(oy) + ") outside the ROI");
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < T; ++y)
                for (int x = 0; x < T; ++x)
                    tile.at(c, y, x) = roi.at(c, oy + y, ox + x);
        ForwardTrace t = forward(model, image_to_tensor(tile), Mode::infer);
        for (int c = 0; c < C; ++c) {
            const float* p = t.probabilities.plane(0, c);
            float* s = sum.plane(0, c);
            for (int y = 0; y < T; ++y)
                for (int x = 0; x < T; ++x)
                    s[static_cast<std::size_t>(oy + y) * W + ox + x] +=
                        p[static_cast<std::size_t>(y) * T + x];
        }
        for (int y = 0; y < T; ++y)
            for (int x = 0; x < T; ++x)
                cover[static_cast<std::size_t>(oy + y) * W + ox + x] += 1;
    }
    for (std::size_t i = 0; i < cover.size(); ++i) {
        if (cover[i] == 0)
            throw DataError("tile plan leaves pixel " + std::to_string(i) +
                            " uncovered");
        const float inv = 1.0f / static_cast<float>(cover[i]);
        for (int c = 0; c < C; ++c) sum.data[c * cover.size() + i] *= inv;
    }

    RoiPrediction out;
    out.probabilities = std::move(sum);
    if (crf_params)
        out.mask = crf::refine(out.probabilities, roi, *crf_params);
    else
        out.mask = argmax_mask(out.probabilities);
    return out;
}

/// Single-channel raster of reals (weed heatmaps, feature maps).
inline Raster weed_heatmap(const LabelMask& mask, double kernel_sigma) {
    if (kernel_sigma < 0.0) throw DataError("heatmap sigma must be >= 0");
    Raster r;
    r.width = mask.width;
    r.height = mask.height;
    r.v.resize(mask.ids.size());
    for (std::size_t i = 0; i < mask.ids.size(); ++i)
        r.v[i] = mask.ids[i] == 2 ? 1.0f : 0.0f;
    if (kernel_sigma == 0.0) return r;
    const auto k = detail::gaussian_kernel(kernel_sigma);
    std::vector<float> tmp(r.v.size());
    detail::blur_pass(r.v.data(), tmp.data(), r.width, r.height, k, true);
    detail::blur_pass(tmp.data(), r.v.data(), r.width, r.height, k, false);
    return r;
}

/// Boolean spray grid. Grid counts use floor(W/g) x floor(H/g); partial edge
/// strips are excluded, which is the rule consistent with per-grid nozzle
/// control over a fixed lattice.
struct PrescriptionMap {
    int grid_px = 0;
    int cols = 0, rows = 0;
    std::vector<std::uint8_t> cells; // 1 = spray

    bool sprayed(int row, int col) const {
        return cells[static_cast<std::size_t>(row) * cols + col] != 0;
    }
};

/// A cell is marked for spraying when it contains at least
/// `weed_pixel_threshold` weed pixels (default 1: the strictest trigger;
/// over-spraying beats missed weeds in practice).
inline PrescriptionMap prescription(const LabelMask& mask, int grid_px,
                                    int weed_pixel_threshold = 1) {
    if (grid_px < 1) throw DataError("grid size must be positive");
    if (grid_px > mask.width || grid_px > mask.height)
        throw DataError("grid " + std::to_string(grid_px) +
                        " larger than mask " + std::to_string(mask.width) + "x" +
                        std::to_string(mask.height));
    if (weed_pixel_threshold < 1)
        throw DataError("weed pixel threshold must be >= 1");
    PrescriptionMap pm;
    pm.grid_px = grid_px;
    pm.cols = mask.width / grid_px;
    pm.rows = mask.height / grid_px;
    pm.cells.assign(static_cast<std::size_t>(pm.cols) * pm.rows, 0);
    for (int r = 0; r < pm.rows; ++r)
        for (int c = 0; c < pm.cols; ++c) {
            int weed = 0;
            for (int y = r * grid_px; y < (r + 1) * grid_px && weed < weed_pixel_threshold; ++y)
                for (int x = c * grid_px; x < (c + 1) * grid_px; ++x)
                    if (mask.at(y, x) == 2 && ++weed >= weed_pixel_threshold) break;
            pm.cells[static_cast<std::size_t>(r) * pm.cols + c] =
                weed >= weed_pixel_threshold ? 1 : 0;
        }
    return pm;
}

struct SprayStats {
    std::uint64_t free_weed_grids = 0;
    std::uint64_t weed_grids = 0;
    double spraying_rate = 0.0; // percent, 2 decimals
    double saving_rate = 0.0;   // percent, 100 - spraying_rate exactly
};

inline SprayStats spray_stats(const PrescriptionMap& pm) {
    if (pm.cells.empty()) throw DataError("empty prescription grid");
    SprayStats s;
    for (const auto c : pm.cells)
        if (c) ++s.weed_grids;
    s.free_weed_grids = pm.cells.size() - s.weed_grids;
    const double total = static_cast<double>(pm.cells.size());
    // Round once, then complement, so the two rates sum to exactly 100.00.
    s.spraying_rate = std::round(10000.0 * s.weed_grids / total) / 100.0;
    s.saving_rate = 100.0 - s.spraying_rate;
    return s;
}

/// Ground area of one grid cell in cm^2.
inline double ground_area_cm2(int grid_px, double gsd_mm_per_px) {
    if (grid_px < 1 || gsd_mm_per_px <= 0.0)
        throw DataError("grid and GSD must be positive");
    const double side_cm = grid_px * gsd_mm_per_px / 10.0;
    return side_cm * side_cm;
}

/// Ground side length of one grid cell in cm.
inline double ground_side_cm(int grid_px, double gsd_mm_per_px) {
    if (grid_px < 1 || gsd_mm_per_px <= 0.0)
        throw DataError("grid and GSD must be positive");
    return grid_px * gsd_mm_per_px / 10.0;
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
};

/// Ordinary least squares through a point set. R^2 = 1 - SS_res/SS_tot;
/// when the y values have zero variance and the residuals vanish the fit is
/// the exact constant, so R^2 is defined as 1.
inline LinearFit fit_line(const std::vector<std::pair<double, double>>& pts) {
    if (pts.size() < 2) throw DataError("need at least 2 points to fit");
    double sx = 0.0, sy = 0.0;
    for (const auto& [x, y] : pts) {
        sx += x;
        sy += y;
    }
    const double n = static_cast<double>(pts.size());
    const double xb = sx / n, yb = sy / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto& [x, y] : pts) {
        sxx += (x - xb) * (x - xb);
        sxy += (x - xb) * (y - yb);
        syy += (y - yb) * (y - yb);
    }
    if (sxx == 0.0) throw DataError("all x values equal; line is vertical");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = yb - f.slope * xb;
    double ss_res = 0.0;
    for (const auto& [x, y] : pts) {
        const double r = y - (f.intercept + f.slope * x);
        ss_res += r * r;
    }
    f.r_squared = syy == 0.0 ? (ss_res == 0.0 ? 1.0 : 0.0)
                             : 1.0 - ss_res / syy;
    return f;
}

} // namespace cfsg
