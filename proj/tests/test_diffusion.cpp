#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "modlora/diffusion.hpp"

using namespace modlora;

namespace {

DenoiserSpec tiny_spec(int T) {
    DenoiserSpec s;
    s.hidden = {32, 32};
    s.time_pairs = 4;
    s.concept_dim = 4;
    s.num_concepts = 2;
    s.num_steps = T;
    return s;
}

}  // namespace

TEST(Schedule, UnitNormAtEveryStep) {
    const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
    for (int t = 1; t <= s.T; ++t) {
        const double a = s.alpha_at(t), g = s.sigma_at(t);
        ASSERT_LE(std::abs(a * a + g * g - 1.0), 1e-12) << "t=" << t;
    }
}

// Independent cumulative product and linear spacing.
TEST(Schedule, CumprodOracle) {
    const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
        const double b = 1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0;
        prod *= 1.0 - b;
        ASSERT_NEAR(s.beta_at(t), b, 1e-15);
        ASSERT_NEAR(s.alpha_bar_at(t), prod, 1e-14);
    }
    EXPECT_NEAR(s.beta_at(1), 1e-4, 1e-18);
    EXPECT_NEAR(s.beta_at(100), 0.02, 1e-16);
    EXPECT_EQ(s.alpha_bar_at(0), 1.0);
    // β̃_1 = 0 because ᾱ_0 = 1
    EXPECT_EQ(s.posterior_variance(1), 0.0);
    const double pv = (1 - s.alpha_bar_at(49)) / (1 - s.alpha_bar_at(50)) * s.beta_at(50);
    EXPECT_DOUBLE_EQ(s.posterior_variance(50), pv);
}

TEST(Schedule, RejectsBadParameters) {
    EXPECT_THROW(make_linear_schedule(0, 1e-4, 0.02), ParameterError);
    EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), ParameterError);
    EXPECT_THROW(make_linear_schedule(10, 0.03, 0.02), ParameterError);
    EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), ParameterError);
    EXPECT_THROW(make_linear_schedule(10, 1e-4, 0.02).alpha_at(11), ParameterError);
}

TEST(Forward, MatchesDefinition) {
    const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
    const Matrix x0{{1.0, -2.0}, {0.5, 3.0}};
    const Matrix eps{{0.1, 0.2}, {-0.3, 0.4}};
    const Matrix xt = forward_sample(s, x0, {10, 90}, eps);
    EXPECT_DOUBLE_EQ(xt(0, 1), s.alpha_at(10) * -2.0 + s.sigma_at(10) * 0.2);
    EXPECT_DOUBLE_EQ(xt(1, 0), s.alpha_at(90) * 0.5 + s.sigma_at(90) * -0.3);
    EXPECT_EQ(forward_sample(s, x0, 7, eps), forward_sample(s, x0, {7, 7}, eps));
}

// Monte-Carlo oracle: x_t for a point mass x₀ has mean α_t·x₀ and variance σ_t².
TEST(Forward, NoisedMoments) {
    const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
    Rng rng(11);
    const std::size_t n = 100000;
    const Matrix x0(n, 2, 2.0);
    const Matrix xt = forward_sample(s, x0, 60, gaussian(rng, n, 2));
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += xt(i, 0);
    m /= n;
    for (std::size_t i = 0; i < n; ++i) v += (xt(i, 0) - m) * (xt(i, 0) - m);
    v /= n - 1;
    const double sg = s.sigma_at(60);
    EXPECT_NEAR(m, 2.0 * s.alpha_at(60), 5 * sg / std::sqrt(double(n)));
    EXPECT_NEAR(v, sg * sg, 5 * sg * sg * std::sqrt(2.0 / n));
}

TEST(Guidance, CollapseCasesAreExact) {
    Rng rng(12);
    const Matrix c = gaussian(rng, 5, 2), u = gaussian(rng, 5, 2);
    EXPECT_EQ(cfg_estimate(c, u, 1.0), c);
    EXPECT_EQ(cfg_estimate(c, u, 0.0), u);
    const Matrix same = cfg_estimate(c, c, 7.5);
    EXPECT_LE(max_abs_diff(same, c), 1e-14);
    const Matrix g = cfg_estimate(c, u, 3.0);
    EXPECT_NEAR(g(2, 1), u(2, 1) + 3.0 * (c(2, 1) - u(2, 1)), 1e-14);
}

TEST(Sampler, DeterministicBytes) {
    Rng rng(13);
    const DenoiserParams p = init_params(tiny_spec(20), rng);
    const NoiseSchedule s = make_linear_schedule(20, 1e-3, 0.1);
    SamplerConfig sc;
    sc.concept_id = 1;
    sc.num_samples = 64;
    sc.seed = 5;
    const Matrix a = sample(p, {}, s, sc), b = sample(p, {}, s, sc);
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(std::bit_cast<std::uint64_t>(a.values()[i]), std::bit_cast<std::uint64_t>(b.values()[i]));
    }
    sc.seed = 6;
    EXPECT_NE(sample(p, {}, s, sc), a);
}

TEST(Sampler, NullConditionMatchesUnconditional) {
    Rng rng(14);
    const DenoiserParams p = init_params(tiny_spec(10), rng);
    const NoiseSchedule s = make_linear_schedule(10, 1e-3, 0.1);
    SamplerConfig sc;
    sc.num_samples = 16;
    sc.concept_id = 0;
    sc.guidance = 1.0;
    const Matrix w1 = sample(p, {}, s, sc);
    sc.guidance = 0.0;
    sc.concept_id = p.spec.null_concept();
    const Matrix uncond_as_null = sample(p, {}, s, sc);
    sc.concept_id.reset();
    EXPECT_EQ(sample(p, {}, s, sc), uncond_as_null);
    EXPECT_NE(w1, uncond_as_null);
}

TEST(Sampler, RejectsMismatchedSchedule) {
    Rng rng(15);
    const DenoiserParams p = init_params(tiny_spec(10), rng);
    SamplerConfig sc;
    EXPECT_THROW(sample(p, {}, make_linear_schedule(11, 1e-3, 0.1), sc), SpecError);
    sc.num_samples = 0;
    EXPECT_THROW(sample(p, {}, make_linear_schedule(10, 1e-3, 0.1), sc), ParameterError);
}

// End to end: a small model trained on one Gaussian samples near it.
TEST(Sampler, TrainedModelRecoversAGaussian) {
    Rng rng(16);
    const int T = 50;
    DenoiserParams p = init_params(tiny_spec(T), rng);
    const NoiseSchedule s = make_linear_schedule(T, 1e-3, 0.15);
    AdamState st;
    const AdamConfig cfg{3e-3};
    for (int step = 0; step < 1500; ++step) {
        Matrix x0 = gaussian(rng, 128, 2, 0.0, 0.3);
        for (std::size_t i = 0; i < 128; ++i) x0(i, 0) += 1.0, x0(i, 1) -= 1.0;
        const auto lg = denoise_loss(p, {}, s, x0, std::vector<std::size_t>(128, 0), rng, Trainable::full_model());
        adam_step(p, lg.grads, st, cfg);
    }
    SamplerConfig sc;
    sc.concept_id = 0;
    sc.guidance = 1.0;
    sc.num_samples = 1000;
    const Matrix x = sample(p, {}, s, sc);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mx += x(i, 0), my += x(i, 1);
    EXPECT_NEAR(mx / 1000, 1.0, 0.15);
    EXPECT_NEAR(my / 1000, -1.0, 0.15);
}
