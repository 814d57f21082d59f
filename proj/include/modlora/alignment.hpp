// SPDX-License-Identifier: Apache-2.0
//
// Concept erasure (ESD, SDD) and the downstream fine-tuning pipelines,
// including the modular one that trains the fine-tune adapter with the
// safety adapter detached and re-attaches it for inference.
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "modlora/denoiser.hpp"
#include "modlora/diffusion.hpp"
#include "modlora/errors.hpp"
#include "modlora/lora.hpp"
#include "modlora/rng.hpp"

namespace modlora {

inline constexpr const char* kSafetyAdapterName = "safety";
inline constexpr const char* kFinetuneAdapterName = "finetune";

enum class Objective { ESD, SDD };
enum class TrainMode { Full, Lora };

inline std::string to_string(Objective o) { return o == Objective::ESD ? "esd" : "sdd"; }
inline std::string to_string(TrainMode m) { return m == TrainMode::Full ? "full" : "lora"; }

inline Objective parse_objective(const std::string& s) {
    if (s == "esd") return Objective::ESD;
    if (s == "sdd") return Objective::SDD;
    throw ValidationError("unknown objective '" + s + "'");
}

inline TrainMode parse_mode(const std::string& s) {
    if (s == "full") return TrainMode::Full;
    if (s == "lora") return TrainMode::Lora;
    throw ValidationError("unknown mode '" + s + "'");
}

/// ε*_∅ − η·(ε*_c − ε*_∅). Teacher outputs are plain values here, so no
/// gradient can reach the teacher.
inline Matrix esd_target(const Matrix& eps_null, const Matrix& eps_cond, double eta) {
    detail::require_same_shape(eps_null, eps_cond, "esd_target");
    if (!(eta >= 0.0)) throw ParameterError("esd_target: eta must be >= 0");
    Matrix out(eps_null.rows(), eps_null.cols());
    auto o = out.values();
    auto u = eps_null.values();
    auto c = eps_cond.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = u[i] - eta * (c[i] - u[i]);
    return out;
}

/// The teacher's unconditional estimate, unchanged.
inline Matrix sdd_target(const Matrix& eps_null) { return eps_null; }

/// Settings shared by every adapter or full-weight training run.
struct TrainSettings {
    TrainMode mode = TrainMode::Lora;
    std::size_t rank = 4;
    double scale = 1.0;
    std::vector<std::string> layers;  // adapted layers; empty means all
    std::size_t steps = 0;
    double lr = 1e-3;
    std::size_t batch_size = 128;
};

struct AlignmentConfig {
    Objective objective = Objective::ESD;
    std::optional<double> eta = 1.0;  // ESD only
    std::size_t target_concept = 3;
    TrainSettings train;
    std::size_t teacher_samples = 1000;
    double teacher_guidance = 3.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (objective == Objective::ESD && !eta) throw ValidationError("ESD alignment needs eta");
        if (objective == Objective::SDD && eta) throw ValidationError("SDD alignment takes no eta");
        if (eta && !(*eta >= 0.0)) throw ValidationError("eta must be >= 0");
        if (train.batch_size == 0 || teacher_samples == 0) throw ValidationError("batch and teacher sample counts must be positive");
    }
};

/// What alignment produces: a safety adapter (Lora mode) or fully trained
/// safe parameters plus their dense difference from W₀ (Full mode).
struct SafeArtifact {
    TrainMode mode = TrainMode::Lora;
    std::optional<LoraAdapter> adapter;
    std::optional<DenoiserParams> safe_params;
    std::vector<double> loss_trace;

    /// safe − W₀ over every parameter tensor (Full mode only).
    TensorMap dense_delta(const DenoiserParams& base) const {
        if (!safe_params) throw SpecError("dense delta requires a full-mode safety artifact");
        TensorMap out;
        const auto s = params_tensors(*safe_params), b = params_tensors(base);
        for (const auto& [k, v] : s) out.emplace(k, sub(v, b.at(k)));
        return out;
    }
};

inline std::vector<std::string> resolve_layers(const DenoiserSpec& spec, const std::vector<std::string>& layers) {
    return layers.empty() ? spec.layer_names() : layers;
}

/// W₀ + sign·delta over every parameter tensor.
inline DenoiserParams apply_dense_delta(const DenoiserParams& base, const TensorMap& delta, int sign) {
    TensorMap t = params_tensors(base);
    for (const auto& [k, d] : delta) {
        auto it = t.find(k);
        if (it == t.end()) throw SpecError("dense delta names unknown tensor '" + k + "'");
        axpy(it->second, static_cast<double>(sign), d);
    }
    return params_from_tensors(base.spec, t);
}

namespace detail {

inline void check_finite(double loss, std::size_t step, const char* what) {
    if (!std::isfinite(loss)) {
        throw DivergenceError(std::string(what) + ": non-finite loss at step " + std::to_string(step), step);
    }
}

/// Rows of `pool` at indices drawn uniformly with replacement (one output each).
inline Matrix draw_rows(const Matrix& pool, std::size_t n, Rng& rng) {
    Matrix out(n, pool.cols());
    for (std::size_t i = 0; i < n; ++i) {
        auto src = pool.row(rng.below(pool.rows()));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace detail

/// Erasure probe: noised teacher samples of the target concept and the
/// frozen teacher's estimates on them.
struct ErasureBatch {
    Batch student_input;  // conditioned on the target concept
    Matrix teacher_null;
    Matrix teacher_cond;
};

inline ErasureBatch make_erasure_batch(const DenoiserParams& teacher, const std::map<std::string, Matrix>& teacher_w,
                                       const NoiseSchedule& s, const Matrix& pool, std::size_t target, std::size_t n,
                                       Rng& rng) {
    const Matrix x0 = detail::draw_rows(pool, n, rng);
    NoisedBatch nb = make_noised_batch(s, x0, std::vector<std::size_t>(n, target), rng);
    ErasureBatch eb;
    eb.teacher_cond = predict(teacher, teacher_w, nb.batch);
    Batch null_batch = nb.batch;
    null_batch.c.assign(n, teacher.spec.null_concept());
    eb.teacher_null = predict(teacher, teacher_w, null_batch);
    eb.student_input = std::move(nb.batch);
    return eb;
}

/// Trains the safety artifact against a frozen teacher.
///
/// Teacher samples of the target concept are drawn once (sampler seed
/// derive_seed(seed, 1)), forward-noised per step (stream 2), and the student is
/// pulled toward the ESD or SDD target at the target concept. In Lora mode
/// the student is W₀ + ΔW_safe with only ΔW_safe trainable; in Full mode a
/// copy of W₀ (embedding table frozen) is trained.
inline SafeArtifact align_train(const DenoiserParams& teacher, const NoiseSchedule& s, const AlignmentConfig& cfg) {
    cfg.validate();
    const RngState root{cfg.seed, 0};
    const auto teacher_w = effective_weights(teacher, {});
    const Matrix pool = sample_with_weights(
        teacher, teacher_w, s,
        {cfg.teacher_guidance, cfg.target_concept, cfg.teacher_samples, derive_seed(cfg.seed, 1)});
    Rng rng(root.derive(2));
    Rng init_rng(root.derive(3));

    SafeArtifact art;
    art.mode = cfg.train.mode;
    AdamState opt;
    const AdamConfig adam{cfg.train.lr};
    if (cfg.train.mode == TrainMode::Lora) {
        art.adapter = init_adapter(teacher.spec.layer_shapes(), resolve_layers(teacher.spec, cfg.train.layers),
                                   cfg.train.rank, cfg.train.scale, init_rng, kSafetyAdapterName);
    } else {
        art.safe_params = teacher;
    }

    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
        ErasureBatch eb = make_erasure_batch(teacher, teacher_w, s, pool, cfg.target_concept, cfg.train.batch_size, rng);
        const Matrix target = cfg.objective == Objective::ESD ? esd_target(eb.teacher_null, eb.teacher_cond, *cfg.eta)
                                                              : sdd_target(eb.teacher_null);
        LossAndGrad lg;
        if (art.adapter) {
            lg = backward(teacher, {&*art.adapter}, eb.student_input, target, Trainable::adapter_only(kSafetyAdapterName));
            detail::check_finite(lg.loss, step, "alignment");
            adam_step(*art.adapter, lg.grads, opt, adam);
        } else {
            lg = backward(*art.safe_params, {}, eb.student_input, target, Trainable::full_model(false));
            detail::check_finite(lg.loss, step, "alignment");
            adam_step(*art.safe_params, lg.grads, opt, adam);
        }
        art.loss_trace.push_back(lg.loss);
    }
    return art;
}

// --- fine-tuning pipelines ------------------------------------------------

enum class PipelineKind { FullFull, FullLora, LoraLora, Modular };

inline std::string to_string(PipelineKind k) {
    switch (k) {
    case PipelineKind::FullFull: return "full-full";
    case PipelineKind::FullLora: return "full-lora";
    case PipelineKind::LoraLora: return "lora-lora";
    case PipelineKind::Modular: return "modular";
    }
    return "?";
}

inline PipelineKind parse_pipeline(const std::string& s) {
    if (s == "full-full") return PipelineKind::FullFull;
    if (s == "full-lora") return PipelineKind::FullLora;
    if (s == "lora-lora") return PipelineKind::LoraLora;
    if (s == "modular") return PipelineKind::Modular;
    throw ValidationError("unknown pipeline '" + s + "'");
}

inline TrainMode safety_mode(PipelineKind k) {
    return k == PipelineKind::FullFull || k == PipelineKind::FullLora ? TrainMode::Full : TrainMode::Lora;
}

inline TrainMode finetune_mode(PipelineKind k) { return k == PipelineKind::FullFull ? TrainMode::Full : TrainMode::Lora; }

/// A base parameter set plus attached adapters; what a pipeline evaluates.
struct ComposedModel {
    const DenoiserParams* base = nullptr;
    std::vector<const LoraAdapter*> adapters;

    std::map<std::string, Matrix> weights() const { return effective_weights(*base, adapters); }
};

struct FinetuneConfig {
    TrainSettings train;
    std::size_t concept_id = 4;
    std::size_t eval_every = 100;
    double cond_dropout = 0.0;
    std::size_t probe_size = 512;
    std::uint64_t seed = 0;
};

/// Called at step 0, every `eval_every` steps, and after the final step with
/// the inference-time composition and the probe loss at that step.
using EvalHook = std::function<void(std::size_t step, const ComposedModel& model, double probe_loss)>;

struct FinetuneResult {
    std::optional<LoraAdapter> adapter;        // ΔW_ft or ΔW_ft*
    std::optional<DenoiserParams> full_params;  // FullFull
    std::vector<double> loss_trace;
};

/// Runs one fine-tuning pipeline on `dataset` (rows of benign points).
///
/// Standard pipelines train on top of the safety-aligned weights with the
/// safety artifact frozen; Modular trains ΔW_ft* on W₀ alone and every
/// evaluation re-attaches ΔW_safe.
inline FinetuneResult finetune_train(const DenoiserParams& base, const SafeArtifact& safety, PipelineKind pipeline,
                                     const NoiseSchedule& s, const Matrix& dataset, const FinetuneConfig& cfg,
                                     const EvalHook& hook = {}) {
    if (safety.mode != safety_mode(pipeline)) {
        throw SpecError("pipeline " + to_string(pipeline) + " needs a " + to_string(safety_mode(pipeline)) +
                        "-mode safety artifact");
    }
    if (safety.mode == TrainMode::Lora && !safety.adapter) throw SpecError("safety artifact lacks its adapter");
    if (safety.mode == TrainMode::Full && !safety.safe_params) throw SpecError("safety artifact lacks safe parameters");
    if (cfg.train.mode != finetune_mode(pipeline)) {
        throw SpecError("pipeline " + to_string(pipeline) + " fine-tunes in " + to_string(finetune_mode(pipeline)) + " mode");
    }
    if (dataset.rows() == 0 || dataset.cols() != base.spec.input_dim) throw ParameterError("fine-tune dataset is empty or malformed");

    const RngState root{cfg.seed, 0};
    Rng rng(root.derive(1));
    Rng init_rng(root.derive(2));
    Rng probe_rng(root.derive(3));

    FinetuneResult res;
    AdamState opt;
    const AdamConfig adam{cfg.train.lr};
    const LoraAdapter* safe = safety.adapter ? &*safety.adapter : nullptr;

    // Parameters the trainer differentiates through.
    const DenoiserParams* train_base = &base;
    std::optional<DenoiserParams> full;
    if (pipeline == PipelineKind::FullFull) {
        full = *safety.safe_params;
        train_base = &*full;
    } else if (pipeline == PipelineKind::FullLora) {
        train_base = &*safety.safe_params;
    }
    if (cfg.train.mode == TrainMode::Lora) {
        res.adapter = init_adapter(base.spec.layer_shapes(), resolve_layers(base.spec, cfg.train.layers), cfg.train.rank,
                                   cfg.train.scale, init_rng, kFinetuneAdapterName);
    }

    auto training_adapters = [&]() {
        std::vector<const LoraAdapter*> a;
        if (pipeline == PipelineKind::LoraLora) a.push_back(safe);
        if (res.adapter) a.push_back(&*res.adapter);
        return a;
    };
    auto inference_model = [&]() {
        ComposedModel m{train_base, training_adapters()};
        if (pipeline == PipelineKind::Modular) m.adapters.insert(m.adapters.begin(), safe);
        return m;
    };
    const Trainable trainable = cfg.train.mode == TrainMode::Lora ? Trainable::adapter_only(kFinetuneAdapterName)
                                                                   : Trainable::full_model(false);

    const std::size_t probe_n = cfg.probe_size;
    const Matrix probe_x0 = detail::draw_rows(dataset, probe_n, probe_rng);
    const NoisedBatch probe = make_noised_batch(s, probe_x0, std::vector<std::size_t>(probe_n, cfg.concept_id), probe_rng);
    auto probe_loss = [&]() {
        return mean_squared_error(predict(*train_base, effective_weights(*train_base, training_adapters()), probe.batch),
                                  probe.noise);
    };
    auto evaluate = [&](std::size_t step) {
        if (hook) hook(step, inference_model(), probe_loss());
    };

    evaluate(0);
    for (std::size_t step = 1; step <= cfg.train.steps; ++step) {
        const Matrix x0 = detail::draw_rows(dataset, cfg.train.batch_size, rng);
        std::vector<std::size_t> concepts(cfg.train.batch_size, cfg.concept_id);
        if (cfg.cond_dropout > 0.0) {
            for (auto& c : concepts)
                if (rng.uniform() < cfg.cond_dropout) c = base.spec.null_concept();
        }
        LossAndGrad lg = denoise_loss(*train_base, training_adapters(), s, x0, concepts, rng, trainable);
        detail::check_finite(lg.loss, step, "fine-tune");
        if (res.adapter) {
            adam_step(*res.adapter, lg.grads, opt, adam);
        } else {
            adam_step(*full, lg.grads, opt, adam);
        }
        res.loss_trace.push_back(lg.loss);
        if (cfg.eval_every && (step % cfg.eval_every == 0 || step == cfg.train.steps)) evaluate(step);
    }
    if (full) res.full_params = std::move(full);
    return res;
}

}  // namespace modlora
