#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cfsg/mapping.hpp"
#include "cfsg/rng.hpp"
#include "cfsg/synth.hpp"

using namespace cfsg;

namespace {

// Weed layout fixture with known cell occupancy.
LabelMask fixture_mask(int w, int h, const std::vector<std::pair<int, int>>& weeds) {
    LabelMask m(w, h);
    for (const auto& [x, y] : weeds) m.at(y, x) = 2;
    return m;
}

// Independent ordinary-least-squares oracle, written against the textbook
// normal equations rather than the library routine.
void ols_oracle(const std::vector<std::pair<double, double>>& pts,
                double& slope, double& intercept, double& r2) {
    const double n = static_cast<double>(pts.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (const auto& [x, y] : pts) {
        sx += x;
        sy += y;
    }
    const double xb = sx / n, yb = sy / n;
    for (const auto& [x, y] : pts) {
        sxx += (x - xb) * (x - xb);
        sxy += (x - xb) * (y - yb);
        syy += (y - yb) * (y - yb);
    }
    slope = sxy / sxx;
    intercept = yb - slope * xb;
    double ss_res = 0;
    for (const auto& [x, y] : pts) {
        const double r = y - intercept - slope * x;
        ss_res += r * r;
    }
    r2 = 1.0 - ss_res / syy;
}

} // namespace

// ---------------------------------------------------------------------------
// plan_tiles
// ---------------------------------------------------------------------------

TEST(PlanTiles, FourDisjointTiles) {
    const TilePlan p = plan_tiles(1024, 1024, 512, 0);
    const std::vector<std::pair<int, int>> want{
        {0, 0}, {512, 0}, {0, 512}, {512, 512}};
    EXPECT_EQ(p.origins, want);
}

TEST(PlanTiles, EdgeShiftInsteadOfPadding) {
    const TilePlan p = plan_tiles(1000, 512, 512, 0);
    std::vector<int> xs;
    for (const auto& [x, y] : p.origins) xs.push_back(x);
    std::sort(xs.begin(), xs.end());
    EXPECT_EQ(xs, (std::vector<int>{0, 488}));
}

TEST(PlanTiles, FullCoverageOnRandomCombos) {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const int tile = 8 * (1 + rng.uniform_int(8));
        const int w = tile + rng.uniform_int(300);
        const int h = tile + rng.uniform_int(300);
        const int overlap = rng.uniform_int(tile);
        const TilePlan p = plan_tiles(w, h, tile, overlap);
        std::vector<std::uint8_t> hit(static_cast<std::size_t>(w) * h, 0);
        for (const auto& [x, y] : p.origins) {
            ASSERT_GE(x, 0);
            ASSERT_GE(y, 0);
            ASSERT_LE(x + tile, w);
            ASSERT_LE(y + tile, h);
            for (int yy = y; yy < y + tile; ++yy)
                for (int xx = x; xx < x + tile; ++xx)
                    hit[static_cast<std::size_t>(yy) * w + xx] = 1;
        }
        for (const auto v : hit) ASSERT_EQ(v, 1);
    }
}

TEST(PlanTiles, RoiSmallerThanTileRejected) {
    EXPECT_THROW(plan_tiles(100, 400, 128, 0), DataError);
}

// ---------------------------------------------------------------------------
// predict_roi
// ---------------------------------------------------------------------------

namespace {

Model quick_model(std::uint64_t seed) {
    ArchitectureConfig c;
    c.stage_widths = {2, 2, 2, 2, 2};
    return build_model(c, seed);
}

ImageRGB scene_image(int w, int h, std::uint64_t seed) {
    SceneSpec spec;
    spec.width = w;
    spec.height = h;
    spec.seed = seed;
    return synth_scene(spec).first;
}

} // namespace

TEST(PredictRoi, DisjointTilesEqualPerTileArgmax) {
    Model m = quick_model(3);
    const ImageRGB roi = scene_image(64, 128, 4);
    const TilePlan plan = plan_tiles(64, 128, 64, 0);
    const RoiPrediction pred = predict_roi(m, roi, plan);
    for (const auto& [ox, oy] : plan.origins) {
        ImageRGB tile(64, 64);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    tile.at(c, y, x) = roi.at(c, oy + y, ox + x);
        ForwardTrace t = forward(m, image_to_tensor(tile), Mode::infer);
        const LabelMask tm = argmax_mask(t.probabilities);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                ASSERT_EQ(pred.mask.at(oy + y, ox + x), tm.at(y, x));
    }
}

TEST(PredictRoi, TileOrderInvariantBitwise) {
    Model m = quick_model(5);
    const ImageRGB roi = scene_image(96, 96, 6);
    TilePlan plan = plan_tiles(96, 96, 64, 32);
    const RoiPrediction a = predict_roi(m, roi, plan);
    std::reverse(plan.origins.begin(), plan.origins.end());
    std::swap(plan.origins[0], plan.origins[plan.origins.size() / 2]);
    const RoiPrediction b = predict_roi(m, roi, plan);
    EXPECT_EQ(a.mask.ids, b.mask.ids);
    EXPECT_EQ(a.probabilities.data, b.probabilities.data);
}

TEST(PredictRoi, StitchedProbabilitiesStayNormalized) {
    Model m = quick_model(7);
    const ImageRGB roi = scene_image(96, 64, 8);
    const TilePlan plan = plan_tiles(96, 64, 64, 32);
    const RoiPrediction pred = predict_roi(m, roi, plan);
    const std::size_t plane = static_cast<std::size_t>(96) * 64;
    for (std::size_t i = 0; i < plane; ++i) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += pred.probabilities.data[c * plane + i];
        ASSERT_NEAR(s, 1.0, 1e-5);
    }
}

// ---------------------------------------------------------------------------
// weed_heatmap
// ---------------------------------------------------------------------------

TEST(WeedHeatmap, NoWeedGivesZeroMap) {
    LabelMask m(20, 20);
    for (auto& id : m.ids) id = 1; // all crop
    const Raster r = weed_heatmap(m, 2.0);
    for (const float v : r.v) EXPECT_EQ(v, 0.0f);
}

TEST(WeedHeatmap, SigmaZeroIsIndicator) {
    const LabelMask m = fixture_mask(8, 8, {{1, 1}, {5, 6}});
    const Raster r = weed_heatmap(m, 0.0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            EXPECT_EQ(r.v[y * 8 + x], m.at(y, x) == 2 ? 1.0f : 0.0f);
}

TEST(WeedHeatmap, MeanEqualsInteriorWeedFraction) {
    // weeds kept away from the border by > 3*sigma so clamping cannot leak
    LabelMask m(40, 40);
    Rng rng(9);
    int weeds = 0;
    for (int i = 0; i < 30; ++i) {
        const int x = 10 + rng.uniform_int(20), y = 10 + rng.uniform_int(20);
        if (m.at(y, x) != 2) {
            m.at(y, x) = 2;
            ++weeds;
        }
    }
    const Raster r = weed_heatmap(m, 2.0);
    double mean = 0.0;
    float mx = 0.0f;
    for (const float v : r.v) {
        mean += v;
        mx = std::max(mx, v);
    }
    mean /= r.v.size();
    EXPECT_LE(mx, 1.0f + 1e-6f);
    EXPECT_NEAR(mean, static_cast<double>(weeds) / (40.0 * 40.0), 1e-3);
}

// ---------------------------------------------------------------------------
// prescription / spray stats
// ---------------------------------------------------------------------------

TEST(Prescription, GridCountsMatchSpotSprayingTotals) {
    // 2110 x 2415 is the ROI size consistent with the published grid totals.
    LabelMask m(2110, 2415);
    EXPECT_EQ(prescription(m, 100).cells.size(), 504u);
    EXPECT_EQ(prescription(m, 50).cells.size(), 2016u);
    EXPECT_EQ(prescription(m, 10).cells.size(), 50851u);
}

TEST(Prescription, AllSoilSpraysNothing) {
    LabelMask m(300, 200);
    const PrescriptionMap pm = prescription(m, 50);
    for (const auto c : pm.cells) EXPECT_EQ(c, 0);
}

TEST(Prescription, SingleWeedPixelSpraysExactlyOneCell) {
    const LabelMask m = fixture_mask(200, 100, {{137, 42}});
    const PrescriptionMap pm = prescription(m, 25);
    int sprayed = 0;
    for (const auto c : pm.cells) sprayed += c;
    EXPECT_EQ(sprayed, 1);
    EXPECT_TRUE(pm.sprayed(42 / 25, 137 / 25));
}

TEST(Prescription, EdgeRemainderIgnored) {
    // weed inside the floored extent counts, weed in the remainder strip not
    LabelMask m(105, 100);
    m.at(50, 102) = 2; // x = 102 lies beyond 100 = cols*grid
    const PrescriptionMap pm = prescription(m, 10);
    for (const auto c : pm.cells) EXPECT_EQ(c, 0);
}

TEST(Prescription, GridLargerThanMaskRejected) {
    LabelMask m(64, 64);
    EXPECT_THROW(prescription(m, 100), DataError);
}

TEST(Prescription, GridOneSpraysExactlyWeedPixels) {
    Rng rng(10);
    LabelMask m(30, 20);
    for (auto& id : m.ids) id = static_cast<std::uint8_t>(rng.uniform_int(3));
    const PrescriptionMap pm = prescription(m, 1);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 30; ++x)
            EXPECT_EQ(pm.sprayed(y, x), m.at(y, x) == 2);
}

TEST(Prescription, ConfigurableThreshold) {
    const LabelMask m = fixture_mask(20, 20, {{0, 0}, {1, 0}, {10, 10}});
    const PrescriptionMap strict = prescription(m, 10, 2);
    EXPECT_TRUE(strict.sprayed(0, 0));  // two weed pixels
    EXPECT_FALSE(strict.sprayed(1, 1)); // only one
}

TEST(SprayStats, PublishedRatePairsReproduceExactly) {
    struct Case {
        std::uint64_t weed, total;
        double spray, save;
    };
    const Case cases[] = {
        {250, 504, 49.60, 50.40},   {266, 504, 52.78, 47.22},
        {550, 2016, 27.28, 72.72},  {587, 2016, 29.12, 70.88},
        {4080, 50851, 8.02, 91.98}, {4621, 50851, 9.09, 90.91},
    };
    for (const auto& c : cases) {
        PrescriptionMap pm;
        pm.grid_px = 1;
        pm.cols = static_cast<int>(c.total);
        pm.rows = 1;
        pm.cells.assign(c.total, 0);
        for (std::uint64_t i = 0; i < c.weed; ++i) pm.cells[i] = 1;
        const SprayStats s = spray_stats(pm);
        EXPECT_EQ(s.weed_grids, c.weed);
        EXPECT_EQ(s.free_weed_grids, c.total - c.weed);
        EXPECT_DOUBLE_EQ(s.spraying_rate, c.spray);
        EXPECT_DOUBLE_EQ(s.saving_rate, c.save);
        EXPECT_DOUBLE_EQ(s.spraying_rate + s.saving_rate, 100.0);
    }
}

TEST(SprayStats, NoWeedMeansFullSaving) {
    PrescriptionMap pm;
    pm.grid_px = 1;
    pm.cols = 10;
    pm.rows = 10;
    pm.cells.assign(100, 0);
    const SprayStats s = spray_stats(pm);
    EXPECT_DOUBLE_EQ(s.saving_rate, 100.0);
    EXPECT_DOUBLE_EQ(s.spraying_rate, 0.0);
}

TEST(SprayStats, MonotoneInGridSizeOnCommonExtent) {
    Rng rng(11);
    LabelMask m(240, 240);
    for (int i = 0; i < 60; ++i)
        m.at(rng.uniform_int(240), rng.uniform_int(240)) = 2;
    double prev_rate = -1.0;
    for (const int grid : {10, 20, 40, 80}) { // nested grids, common extent
        const SprayStats s = spray_stats(prescription(m, grid));
        ASSERT_GE(s.spraying_rate, prev_rate - 1e-9);
        prev_rate = s.spraying_rate;
    }
}

// ---------------------------------------------------------------------------
// ground area
// ---------------------------------------------------------------------------

TEST(GroundArea, PublishedFootnoteValues) {
    EXPECT_NEAR(ground_side_cm(100, 1.78), 17.8, 1e-12);
    EXPECT_NEAR(ground_area_cm2(100, 1.78), 17.8 * 17.8, 1e-9);
    EXPECT_NEAR(ground_side_cm(50, 1.78), 8.9, 1e-12);
    EXPECT_NEAR(ground_side_cm(10, 1.78), 1.78, 1e-12);
    EXPECT_NEAR(ground_area_cm2(10, 1.78), 1.78 * 1.78, 1e-9);
}

TEST(GroundArea, UnitCell) {
    EXPECT_DOUBLE_EQ(ground_area_cm2(1, 10.0), 1.0);
}

// ---------------------------------------------------------------------------
// fit_line
// ---------------------------------------------------------------------------

TEST(FitLine, PerfectDiagonal) {
    const LinearFit f = fit_line({{0, 0}, {1, 1}, {2, 2}});
    EXPECT_DOUBLE_EQ(f.slope, 1.0);
    EXPECT_DOUBLE_EQ(f.intercept, 0.0);
    EXPECT_DOUBLE_EQ(f.r_squared, 1.0);
}

TEST(FitLine, ConstantYDefinedAsPerfect) {
    const LinearFit f = fit_line({{1, 2}, {2, 2}, {3, 2}});
    EXPECT_DOUBLE_EQ(f.slope, 0.0);
    EXPECT_DOUBLE_EQ(f.intercept, 2.0);
    EXPECT_DOUBLE_EQ(f.r_squared, 1.0);
}

TEST(FitLine, VerticalLineRejected) {
    EXPECT_THROW(fit_line({{1, 0}, {1, 5}}), DataError);
}

TEST(FitLine, SprayCurveMatchesIndependentOracle) {
    // Saving rates against grid side (cm) from the published spot-spraying
    // table. The hand least-squares gives R^2 = 0.9995, slope = -2.5919.
    const std::vector<std::pair<double, double>> pts{
        {17.8, 50.40}, {8.9, 72.72}, {1.78, 91.98}};
    double slope, intercept, r2;
    ols_oracle(pts, slope, intercept, r2);
    const LinearFit f = fit_line(pts);
    EXPECT_NEAR(f.slope, slope, 1e-12);
    EXPECT_NEAR(f.intercept, intercept, 1e-12);
    EXPECT_NEAR(f.r_squared, r2, 1e-12);
    // frozen oracle outputs
    EXPECT_NEAR(f.slope, -2.591914, 1e-5);
    EXPECT_NEAR(f.r_squared, 0.999534, 1e-5);
}

TEST(SprayCurve, HandCountedFixtureRates) {
    // Two weeds at known positions on a 300x200 mask.
    //   grid 100: cells 3x2 = 6,   weeds hit (0,0) and (1,2)  -> 2/6
    //   grid  50: cells 6x4 = 24,  weeds hit (0,0) and (3,5)  -> 2/24
    //   grid  10: cells 30x20=600, two distinct cells          -> 2/600
    const LabelMask m = fixture_mask(300, 200, {{10, 10}, {250, 150}});
    const SprayStats s100 = spray_stats(prescription(m, 100));
    EXPECT_EQ(s100.weed_grids, 2u);
    EXPECT_EQ(s100.free_weed_grids, 4u);
    EXPECT_DOUBLE_EQ(s100.spraying_rate, 33.33);
    EXPECT_DOUBLE_EQ(s100.saving_rate, 66.67);
    const SprayStats s50 = spray_stats(prescription(m, 50));
    EXPECT_EQ(s50.weed_grids, 2u);
    EXPECT_DOUBLE_EQ(s50.spraying_rate, 8.33);
    EXPECT_DOUBLE_EQ(s50.saving_rate, 91.67);
    const SprayStats s10 = spray_stats(prescription(m, 10));
    EXPECT_EQ(s10.weed_grids, 2u);
    EXPECT_DOUBLE_EQ(s10.spraying_rate, 0.33);
    EXPECT_DOUBLE_EQ(s10.saving_rate, 99.67);
    // saving monotone in spraying resolution on this fixture
    EXPECT_LT(s100.saving_rate, s50.saving_rate);
    EXPECT_LT(s50.saving_rate, s10.saving_rate);
}

TEST(FitLine, AgreesWithOracleOnRandomPointSets) {
    Rng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<std::pair<double, double>> pts;
        const int n = 2 + rng.uniform_int(10);
        for (int i = 0; i < n; ++i)
            pts.emplace_back(rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0));
        // ensure distinct x
        pts[0].first += 20.0;
        double slope, intercept, r2;
        ols_oracle(pts, slope, intercept, r2);
        const LinearFit f = fit_line(pts);
        ASSERT_NEAR(f.slope, slope, 1e-9);
        ASSERT_NEAR(f.intercept, intercept, 1e-9);
        ASSERT_NEAR(f.r_squared, r2, 1e-9);
    }
}
