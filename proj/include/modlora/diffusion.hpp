// SPDX-License-Identifier: Apache-2.0
//
// DDPM pieces: linear β schedule, q(x_t | x₀) corruption, the ε-prediction
// loss, classifier-free guidance, and the ancestral sampler.
#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "modlora/denoiser.hpp"
#include "modlora/errors.hpp"
#include "modlora/rng.hpp"
#include "modlora/tensor.hpp"

namespace modlora {

/// Per-step coefficients, indexed by t - 1 for t = 1..T.
/// q(x_t | x₀) = N(alpha[t]·x₀, sigma[t]²·I) with alpha = √ᾱ, sigma = √(1 − ᾱ).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> alpha;
    std::vector<double> sigma;

    double alpha_at(int t) const { return alpha[index(t)]; }
    double sigma_at(int t) const { return sigma[index(t)]; }
    double beta_at(int t) const { return beta[index(t)]; }
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[index(t)]; }

    /// Posterior variance β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t.
    double posterior_variance(int t) const {
        return (1.0 - alpha_bar_at(t - 1)) / (1.0 - alpha_bar_at(t)) * beta_at(t);
    }

    std::size_t index(int t) const {
        if (t < 1 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ParameterError("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ParameterError("schedule needs 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b = T == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        prod *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha_bar.push_back(prod);
        s.alpha.push_back(std::sqrt(prod));
        s.sigma.push_back(std::sqrt(1.0 - prod));
    }
    return s;
}

/// alpha·x₀ + sigma·noise.
inline Matrix forward_sample(const Matrix& x0, double alpha, double sigma, const Matrix& noise) {
    detail::require_same_shape(x0, noise, "forward_sample");
    Matrix out(x0.rows(), x0.cols());
    auto o = out.values();
    auto xv = x0.values();
    auto nv = noise.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * xv[i] + sigma * nv[i];
    return out;
}

inline Matrix forward_sample(const NoiseSchedule& s, const Matrix& x0, int t, const Matrix& noise) {
    return forward_sample(x0, s.alpha_at(t), s.sigma_at(t), noise);
}

/// Row i of x₀ noised to its own step t[i].
inline Matrix forward_sample(const NoiseSchedule& s, const Matrix& x0, const std::vector<int>& t, const Matrix& noise) {
    detail::require_same_shape(x0, noise, "forward_sample");
    if (t.size() != x0.rows()) throw ShapeError("forward_sample: one timestep per row required");
    Matrix out(x0.rows(), x0.cols());
    for (std::size_t i = 0; i < x0.rows(); ++i) {
        const double a = s.alpha_at(t[i]), sg = s.sigma_at(t[i]);
        for (std::size_t j = 0; j < x0.cols(); ++j) out(i, j) = a * x0(i, j) + sg * noise(i, j);
    }
    return out;
}

/// A noised training batch and the noise that produced it.
struct NoisedBatch {
    Batch batch;
    Matrix noise;
};

/// Draws t ~ U{1..T} per row (one output each, in row order), then ε ~ N(0, I)
/// as one n×d gaussian matrix.
inline NoisedBatch make_noised_batch(const NoiseSchedule& s, const Matrix& x0, const std::vector<std::size_t>& concepts,
                                     Rng& rng) {
    if (x0.rows() == 0) throw ParameterError("empty batch");
    if (concepts.size() != x0.rows()) throw ShapeError("one concept per row required");
    NoisedBatch nb;
    nb.batch.t.resize(x0.rows());
    for (auto& t : nb.batch.t) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T))) + 1;
    nb.noise = gaussian(rng, x0.rows(), x0.cols());
    nb.batch.x = forward_sample(s, x0, nb.batch.t, nb.noise);
    nb.batch.c = concepts;
    return nb;
}

inline double mean_squared_error(const Matrix& pred, const Matrix& target) {
    detail::require_same_shape(pred, target, "mean_squared_error");
    return sum_squares(sub(pred, target)) / static_cast<double>(pred.rows());
}

/// mean ‖ε_θ(x_t, t, c) − ε‖² over a freshly noised batch, with gradients
/// for `trainable`.
inline LossAndGrad denoise_loss(const DenoiserParams& p, const std::vector<const LoraAdapter*>& adapters,
                                const NoiseSchedule& s, const Matrix& x0, const std::vector<std::size_t>& concepts,
                                Rng& rng, const Trainable& trainable) {
    NoisedBatch nb = make_noised_batch(s, x0, concepts, rng);
    return backward(p, adapters, nb.batch, nb.noise, trainable);
}

/// (1 − w)·ε_∅ + w·ε_c, which equals ε_∅ + w(ε_c − ε_∅) and collapses
/// exactly to ε_c at w = 1 and to ε_∅ at w = 0.
inline Matrix cfg_estimate(const Matrix& eps_cond, const Matrix& eps_null, double w) {
    detail::require_same_shape(eps_cond, eps_null, "cfg_estimate");
    Matrix out(eps_cond.rows(), eps_cond.cols());
    auto o = out.values();
    auto c = eps_cond.values();
    auto u = eps_null.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (1.0 - w) * u[i] + w * c[i];
    return out;
}

struct SamplerConfig {
    double guidance = 3.0;
    std::optional<std::size_t> concept_id;  // nullopt: unconditional
    std::size_t num_samples = 500;
    std::uint64_t seed = 0;
};

/// Ancestral DDPM sampling from x_T ~ N(0, I). Each step uses the guided
/// estimate (plain conditional when the concept is null or w = 1), then
///   x_{t-1} = (x_t − β_t/σ_t · ε̃) / √(1 − β_t) + √β̃_t · z,   z = 0 at t = 1.
/// Stream use: one n×2 gaussian for x_T, then one per step t = T..2.
inline Matrix sample_with_weights(const DenoiserParams& p, const std::map<std::string, Matrix>& weights,
                                  const NoiseSchedule& s, const SamplerConfig& cfg) {
    if (cfg.num_samples == 0) throw ParameterError("sampler needs at least one sample");
    if (s.T != p.spec.num_steps) throw SpecError("schedule T differs from the model's time encoding");
    const std::size_t n = cfg.num_samples;
    const std::size_t null_id = p.spec.null_concept();
    const std::size_t cond_id = cfg.concept_id.value_or(null_id);
    if (cond_id > null_id) throw LookupError("concept id " + std::to_string(cond_id) + " has no embedding row");
    const bool guided = cfg.concept_id.has_value() && cfg.guidance != 1.0;

    Rng rng(cfg.seed);
    Batch b;
    b.x = gaussian(rng, n, p.spec.input_dim);
    b.t.assign(n, s.T);
    b.c.assign(n, cond_id);
    Batch nb;
    if (guided) nb.c.assign(n, null_id);

    for (int t = s.T; t >= 1; --t) {
        std::fill(b.t.begin(), b.t.end(), t);
        Matrix eps = predict(p, weights, b);
        if (guided) {
            nb.x = b.x;
            nb.t = b.t;
            eps = cfg_estimate(eps, predict(p, weights, nb), cfg.guidance);
        }
        const double beta = s.beta_at(t);
        const double coef = beta / s.sigma_at(t);
        const double inv_sqrt = 1.0 / std::sqrt(1.0 - beta);
        Matrix next(n, p.spec.input_dim);
        auto xv = b.x.values();
        auto ev = eps.values();
        auto ov = next.values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = (xv[i] - coef * ev[i]) * inv_sqrt;
        if (t > 1) {
            const Matrix z = gaussian(rng, n, p.spec.input_dim);
            axpy(next, std::sqrt(s.posterior_variance(t)), z);
        }
        b.x = std::move(next);
    }
    return b.x;
}

inline Matrix sample(const DenoiserParams& p, const std::vector<const LoraAdapter*>& adapters, const NoiseSchedule& s,
                     const SamplerConfig& cfg) {
    return sample_with_weights(p, effective_weights(p, adapters), s, cfg);
}

}  // namespace modlora
