#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cfsg/rng.hpp"
#include "cfsg/tensor.hpp"

using namespace cfsg;

namespace {

Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(n, c, h, w);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// Independent oracle: naive sextuple-loop convolution with double
// accumulation. Kept free of any library conv code path.
Tensor conv_oracle(const Tensor& in, const Tensor& w,
                   const std::vector<float>& bias) {
    Tensor out(in.n, w.n, in.h, in.w);
    for (int n = 0; n < in.n; ++n)
        for (int co = 0; co < w.n; ++co)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x) {
                    double acc = bias[co];
                    for (int ci = 0; ci < in.c; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = y + ky - 1, sx = x + kx - 1;
                                if (sy < 0 || sy >= in.h || sx < 0 || sx >= in.w)
                                    continue;
                                acc += static_cast<double>(
                                           w.at(co, ci, ky, kx)) *
                                       in.at(n, ci, sy, sx);
                            }
                    out.at(n, co, y, x) = static_cast<float>(acc);
                }
    return out;
}

// Central finite difference of a scalar function of one tensor entry.
template <typename F>
double central_diff(F loss, float* coord, double h = 1e-3) {
    const float orig = *coord;
    *coord = static_cast<float>(orig + h);
    const double lp = loss();
    *coord = static_cast<float>(orig - h);
    const double lm = loss();
    *coord = orig;
    return (lp - lm) / (2.0 * h);
}

double rel_err(double a, double b, double floor = 1e-6) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

} // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityKernelReproducesInput) {
    Rng rng(1);
    Tensor in = random_tensor(1, 1, 3, 3, rng);
    Tensor w(1, 1, 3, 3);
    w.at(0, 0, 1, 1) = 1.0f; // delta at center
    Tensor out = conv2d(in, w, {0.0f});
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_FLOAT_EQ(out.data[i], in.data[i]);
}

TEST(Conv2d, ZeroWeightsGiveZeroOutput) {
    Rng rng(2);
    Tensor in = random_tensor(2, 3, 4, 6, rng);
    Tensor w(4, 3, 3, 3);
    Tensor out = conv2d(in, w, std::vector<float>(4, 0.0f));
    for (const float v : out.data) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, MatchesNaiveOracle) {
    Rng rng(3);
    Tensor in = random_tensor(1, 2, 5, 5, rng);
    Tensor w = random_tensor(3, 2, 3, 3, rng);
    std::vector<float> b{0.1f, -0.2f, 0.3f};
    Tensor out = conv2d(in, w, b);
    Tensor ref = conv_oracle(in, w, b);
    for (std::size_t i = 0; i < out.size(); ++i)
        EXPECT_NEAR(out.data[i], ref.data[i], 1e-5);
}

TEST(Conv2d, OracleAgreementOnRandomInstances) {
    Rng rng(4);
    for (int trial = 0; trial < 12; ++trial) {
        const int n = 1 + rng.uniform_int(2), ci = 1 + rng.uniform_int(3);
        const int co = 1 + rng.uniform_int(4);
        const int h = 2 + rng.uniform_int(5), w = 2 + rng.uniform_int(5);
        Tensor in = random_tensor(n, ci, h, w, rng);
        Tensor wt = random_tensor(co, ci, 3, 3, rng);
        std::vector<float> b(co);
        for (auto& v : b) v = static_cast<float>(rng.uniform(-0.5, 0.5));
        Tensor a = conv2d(in, wt, b);
        Tensor r = conv_oracle(in, wt, b);
        for (std::size_t i = 0; i < a.size(); ++i)
            ASSERT_NEAR(a.data[i], r.data[i], 1e-5);
    }
}

TEST(Conv2d, BlockedPathMatchesDirectPath) {
    Rng rng(5);
    Tensor in = random_tensor(2, 4, 10, 12, rng);
    Tensor w = random_tensor(5, 4, 3, 3, rng);
    std::vector<float> b(5, 0.25f);
    Tensor fast = conv2d(in, w, b);
    Tensor direct = conv2d_direct(in, w, b);
    for (std::size_t i = 0; i < fast.size(); ++i)
        ASSERT_NEAR(fast.data[i], direct.data[i], 1e-5);
}

TEST(Conv2d, ShapeMismatchNamesDimension) {
    Tensor in(1, 2, 4, 4);
    Tensor w(1, 3, 3, 3); // wrong input channel count
    try {
        conv2d(in, w, {0.0f});
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// conv2d_grad
// ---------------------------------------------------------------------------

TEST(Conv2dGrad, ZeroUpstreamGivesZeroGrads) {
    Rng rng(6);
    Tensor in = random_tensor(1, 2, 4, 4, rng);
    Tensor w = random_tensor(3, 2, 3, 3, rng);
    Tensor up(1, 3, 4, 4);
    Conv2dGrads g = conv2d_grad(in, w, up);
    for (const float v : g.input.data) EXPECT_EQ(v, 0.0f);
    for (const float v : g.weights.data) EXPECT_EQ(v, 0.0f);
    for (const float v : g.bias) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2dGrad, BiasGradIsUpstreamSum) {
    Rng rng(7);
    Tensor in = random_tensor(2, 2, 4, 4, rng);
    Tensor w = random_tensor(3, 2, 3, 3, rng);
    Tensor up = random_tensor(2, 3, 4, 4, rng);
    Conv2dGrads g = conv2d_grad(in, w, up);
    for (int co = 0; co < 3; ++co) {
        double sum = 0.0;
        for (int n = 0; n < 2; ++n)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) sum += up.at(n, co, y, x);
        EXPECT_NEAR(g.bias[co], sum, 1e-5);
    }
}

TEST(Conv2dGrad, MatchesFiniteDifferences) {
    Rng rng(8);
    for (int trial = 0; trial < 4; ++trial) {
        Tensor in = random_tensor(1, 2, 5, 4, rng);
        Tensor w = random_tensor(2, 2, 3, 3, rng);
        std::vector<float> b{0.1f, -0.1f};
        Tensor proj = random_tensor(1, 2, 5, 4, rng);
        auto loss = [&] {
            Tensor out = conv2d(in, w, b);
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i)
                s += static_cast<double>(out.data[i]) * proj.data[i];
            return s;
        };
        Conv2dGrads g = conv2d_grad(in, w, proj);
        for (int k = 0; k < 6; ++k) {
            const std::size_t wi = rng.uniform_int(static_cast<int>(w.size()));
            EXPECT_LT(rel_err(central_diff(loss, &w.data[wi]), g.weights.data[wi]),
                      1e-3);
            const std::size_t ii = rng.uniform_int(static_cast<int>(in.size()));
            EXPECT_LT(rel_err(central_diff(loss, &in.data[ii]), g.input.data[ii]),
                      1e-3);
        }
        EXPECT_LT(rel_err(central_diff(loss, &b[0]), g.bias[0]), 1e-3);
    }
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
    Rng rng(9);
    Tensor in = random_tensor(2, 3, 6, 6, rng, 0.0, 4.0);
    BatchNormState st(3);
    Tensor out = batch_norm(in, st, Mode::train);
    const std::size_t plane = 36;
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int n = 0; n < 2; ++n) {
            const float* p = out.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) mean += p[i];
        }
        mean /= 2 * plane;
        for (int n = 0; n < 2; ++n) {
            const float* p = out.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i)
                var += (p[i] - mean) * (p[i] - mean);
        }
        var /= 2 * plane;
        EXPECT_NEAR(mean, 0.0, 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-3);
    }
}

TEST(BatchNorm, InferModeWithUnitStatsIsEpsilonScaling) {
    Rng rng(10);
    Tensor in = random_tensor(1, 2, 4, 4, rng);
    BatchNormState st(2);
    Tensor out = batch_norm(in, st, Mode::infer);
    const float scale = 1.0f / std::sqrt(1.0f + st.epsilon);
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_NEAR(out.data[i], in.data[i] * scale, 1e-6);
}

TEST(BatchNorm, ConstantChannelYieldsBeta) {
    Tensor in(2, 1, 4, 4);
    for (auto& v : in.data) v = 3.25f;
    BatchNormState st(1);
    st.beta[0] = 0.75f;
    Tensor out = batch_norm(in, st, Mode::train);
    for (const float v : out.data) EXPECT_NEAR(v, 0.75f, 1e-6);
}

TEST(BatchNorm, RunningStatsFollowEma) {
    Rng rng(11);
    Tensor in = random_tensor(1, 1, 4, 4, rng, 2.0, 4.0);
    BatchNormState st(1);
    double mean = 0.0;
    for (const float v : in.data) mean += v;
    mean /= in.size();
    double var = 0.0;
    for (const float v : in.data) var += (v - mean) * (v - mean);
    var /= in.size();
    batch_norm(in, st, Mode::train);
    EXPECT_NEAR(st.running_mean[0], 0.1 * mean, 1e-5);
    EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * var, 1e-5);
    EXPECT_GT(st.running_var[0], 0.0f);
}

TEST(BatchNorm, ChannelMismatchThrows) {
    Tensor in(1, 3, 4, 4);
    BatchNormState st(2);
    EXPECT_THROW(batch_norm(in, st, Mode::train), ShapeError);
}

TEST(BatchNormGrad, MatchesFiniteDifferences) {
    Rng rng(12);
    Tensor in = random_tensor(2, 2, 4, 4, rng, -1.0, 2.0);
    BatchNormState st(2);
    st.gamma = {1.2f, 0.8f};
    st.beta = {0.1f, -0.3f};
    Tensor proj = random_tensor(2, 2, 4, 4, rng);
    auto loss = [&] {
        BatchNormState fresh = st; // keep running-stat updates out of the loss
        Tensor out = batch_norm(in, fresh, Mode::train);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i)
            s += static_cast<double>(out.data[i]) * proj.data[i];
        return s;
    };
    BnCache cache;
    BatchNormState run = st;
    batch_norm(in, run, Mode::train, &cache);
    BatchNormGrads g = batch_norm_grad(in, st, cache, proj);
    for (int k = 0; k < 10; ++k) {
        const std::size_t i = rng.uniform_int(static_cast<int>(in.size()));
        EXPECT_LT(rel_err(central_diff(loss, &in.data[i]), g.input.data[i], 1e-4),
                  1e-3);
    }
    for (int c = 0; c < 2; ++c) {
        EXPECT_LT(rel_err(central_diff(loss, &st.gamma[c]), g.gamma[c]), 1e-3);
        EXPECT_LT(rel_err(central_diff(loss, &st.beta[c]), g.beta[c]), 1e-3);
    }
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

TEST(Relu, ClampsNegatives) {
    Tensor in(1, 1, 1, 3);
    in.data = {-1.0f, 0.0f, 2.0f};
    Tensor out = relu(in);
    EXPECT_EQ(out.data[0], 0.0f);
    EXPECT_EQ(out.data[1], 0.0f);
    EXPECT_EQ(out.data[2], 2.0f);
}

TEST(Relu, IdentityOnNonNegative) {
    Rng rng(13);
    Tensor in = random_tensor(1, 2, 3, 3, rng, 0.0, 5.0);
    Tensor out = relu(in);
    EXPECT_EQ(out.data, in.data);
}

TEST(ReluGrad, ZeroAtExactZero) {
    Tensor in(1, 1, 1, 3);
    in.data = {-0.5f, 0.0f, 0.5f};
    Tensor up(1, 1, 1, 3);
    up.data = {1.0f, 1.0f, 1.0f};
    Tensor g = relu_grad(in, up);
    EXPECT_EQ(g.data[0], 0.0f);
    EXPECT_EQ(g.data[1], 0.0f); // subgradient choice at 0
    EXPECT_EQ(g.data[2], 1.0f);
}

// ---------------------------------------------------------------------------
// max pool / unpool
// ---------------------------------------------------------------------------

TEST(MaxPool, RecordsArgmaxOffset) {
    Tensor in(1, 1, 2, 2);
    in.data = {1.0f, 2.0f, 3.0f, 4.0f};
    PoolResult r = max_pool_2x2(in);
    EXPECT_EQ(r.values.data[0], 4.0f);
    EXPECT_EQ(r.indices.data[0], 3); // bottom-right
}

TEST(MaxPool, TieBreaksToFirstRowMajor) {
    Tensor in(1, 1, 2, 2);
    for (auto& v : in.data) v = 7.0f;
    PoolResult r = max_pool_2x2(in);
    EXPECT_EQ(r.values.data[0], 7.0f);
    EXPECT_EQ(r.indices.data[0], 0);
}

TEST(MaxPool, OddDimsThrow) {
    Tensor in(1, 1, 3, 4);
    EXPECT_THROW(max_pool_2x2(in), ShapeError);
}

TEST(MaxUnpool, PlacesValueAtRecordedOffset) {
    Tensor v(1, 1, 1, 1);
    v.data = {4.0f};
    PoolIndices idx(1, 1, 1, 1);
    idx.data = {3};
    Tensor out = max_unpool_2x2(v, idx);
    EXPECT_EQ(out.data[0], 0.0f);
    EXPECT_EQ(out.data[1], 0.0f);
    EXPECT_EQ(out.data[2], 0.0f);
    EXPECT_EQ(out.data[3], 4.0f);
}

TEST(MaxUnpool, CorruptIndexThrows) {
    Tensor v(1, 1, 1, 1);
    v.data = {1.0f};
    PoolIndices idx(1, 1, 1, 1);
    idx.data = {5};
    EXPECT_THROW(max_unpool_2x2(v, idx), DataError);
}

TEST(MaxUnpool, PoolUnpoolScattersMaxAndConservesSum) {
    Rng rng(14);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor in = random_tensor(2, 3, 6, 6, rng);
        PoolResult r = max_pool_2x2(in);
        Tensor back = max_unpool_2x2(r.values, r.indices);
        double pooled_sum = 0.0, back_sum = 0.0;
        for (const float v : r.values.data) pooled_sum += v;
        for (const float v : back.data) back_sum += v;
        EXPECT_NEAR(pooled_sum, back_sum, 1e-4);
        // zero everywhere except recorded positions, max preserved there
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < 3; ++y)
                    for (int x = 0; x < 3; ++x) {
                        const float mx = r.values.at(n, c, y, x);
                        int nonzero = 0;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const float v = back.at(n, c, 2 * y + dy, 2 * x + dx);
                                if (v != 0.0f) {
                                    ++nonzero;
                                    EXPECT_EQ(v, mx);
                                }
                            }
                        EXPECT_LE(nonzero, 1);
                    }
    }
}

TEST(MaxPoolUnpool, GradientsMatchFiniteDifferences) {
    Rng rng(15);
    Tensor in = random_tensor(1, 2, 4, 4, rng);
    Tensor proj = random_tensor(1, 2, 4, 4, rng);
    auto loss = [&] {
        PoolResult r = max_pool_2x2(in);
        Tensor back = max_unpool_2x2(r.values, r.indices);
        double s = 0.0;
        for (std::size_t i = 0; i < back.size(); ++i)
            s += static_cast<double>(back.data[i]) * proj.data[i];
        return s;
    };
    PoolResult r = max_pool_2x2(in);
    Tensor g_values = max_unpool_2x2_grad(r.indices, proj);
    Tensor g_in = max_pool_2x2_grad(r.indices, g_values);
    for (int k = 0; k < 12; ++k) {
        const std::size_t i = rng.uniform_int(static_cast<int>(in.size()));
        EXPECT_LT(rel_err(central_diff(loss, &in.data[i]), g_in.data[i], 1e-4),
                  1e-3);
    }
}

// ---------------------------------------------------------------------------
// concat
// ---------------------------------------------------------------------------

TEST(Concat, EmptySecondOperandIsIdentity) {
    Rng rng(16);
    Tensor a = random_tensor(1, 3, 4, 4, rng);
    Tensor b(1, 0, 4, 4);
    Tensor out = concat_channels(a, b);
    EXPECT_TRUE(out.same_shape(a));
    EXPECT_EQ(out.data, a.data);
}

TEST(Concat, ShapesAdd) {
    Tensor a(1, 2, 4, 4), b(1, 3, 4, 4);
    Tensor out = concat_channels(a, b);
    EXPECT_EQ(out.c, 5);
    EXPECT_EQ(out.n, 1);
    EXPECT_EQ(out.h, 4);
    EXPECT_EQ(out.w, 4);
}

TEST(Concat, FirstOperandChannelsCopiedExactly) {
    Rng rng(17);
    Tensor a = random_tensor(2, 2, 3, 3, rng);
    Tensor b = random_tensor(2, 4, 3, 3, rng);
    Tensor out = concat_channels(a, b);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 2; ++c)
            for (int y = 0; y < 3; ++y)
                for (int x = 0; x < 3; ++x)
                    EXPECT_EQ(out.at(n, c, y, x), a.at(n, c, y, x));
}

TEST(Concat, SpatialMismatchThrows) {
    Tensor a(1, 2, 4, 4), b(1, 2, 4, 6);
    EXPECT_THROW(concat_channels(a, b), ShapeError);
}

TEST(Concat, SplitInvertsConcat) {
    Rng rng(18);
    Tensor a = random_tensor(1, 2, 4, 4, rng);
    Tensor b = random_tensor(1, 3, 4, 4, rng);
    auto [ga, gb] = split_channels(concat_channels(a, b), 2);
    EXPECT_EQ(ga.data, a.data);
    EXPECT_EQ(gb.data, b.data);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, UniformLogitsGiveUniformProbabilities) {
    Tensor in(1, 4, 2, 2);
    for (auto& v : in.data) v = 1.7f;
    Tensor out = softmax_channels(in);
    for (const float v : out.data) EXPECT_NEAR(v, 0.25f, 1e-6);
}

TEST(Softmax, SumsToOnePerPixel) {
    Rng rng(19);
    Tensor in = random_tensor(2, 3, 4, 4, rng, -5.0, 5.0);
    Tensor out = softmax_channels(in);
    const std::size_t plane = 16;
    for (int n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
            double s = 0.0;
            for (int c = 0; c < 3; ++c) s += out.at(n, c, i / 4, i % 4);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
}

TEST(Softmax, ClosedFormCase) {
    Tensor in(1, 3, 1, 1);
    in.data = {0.0f, std::log(2.0f), std::log(4.0f)};
    Tensor out = softmax_channels(in);
    EXPECT_NEAR(out.data[0], 1.0 / 7.0, 1e-6);
    EXPECT_NEAR(out.data[1], 2.0 / 7.0, 1e-6);
    EXPECT_NEAR(out.data[2], 4.0 / 7.0, 1e-6);
}

TEST(Softmax, InvariantToPerPixelConstantShift) {
    Rng rng(20);
    Tensor in = random_tensor(1, 3, 3, 3, rng, -2.0, 2.0);
    Tensor shifted = in;
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            const float c = static_cast<float>(rng.uniform(-3.0, 3.0));
            for (int ch = 0; ch < 3; ++ch) shifted.at(0, ch, y, x) += c;
        }
    Tensor a = softmax_channels(in);
    Tensor b = softmax_channels(shifted);
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a.data[i], b.data[i], 1e-6);
}

// ---------------------------------------------------------------------------
// Finiteness invariant across ops
// ---------------------------------------------------------------------------

TEST(Tensor, OpsPreserveFiniteness) {
    Rng rng(21);
    Tensor in = random_tensor(2, 3, 6, 6, rng, -10.0, 10.0);
    Tensor w = random_tensor(4, 3, 3, 3, rng);
    BatchNormState st(4);
    Tensor x = conv2d(in, w, std::vector<float>(4, 0.5f));
    x = batch_norm(x, st, Mode::train);
    x = relu(x);
    PoolResult p = max_pool_2x2(x);
    x = max_unpool_2x2(p.values, p.indices);
    x = softmax_channels(x);
    for (const float v : x.data) ASSERT_TRUE(std::isfinite(v));
}
