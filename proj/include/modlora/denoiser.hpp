// SPDX-License-Identifier: Apache-2.0
//
// Toy noise predictor ε_θ(x_t, t, c): an MLP over
//   x_t ⊕ time_features(t / T) ⊕ concept_embedding[c]
// with hand-written reverse-mode gradients for either the whole model or a
// single attached adapter.
#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modlora/errors.hpp"
#include "modlora/lora.hpp"
#include "modlora/rng.hpp"
#include "modlora/tensor.hpp"
#include "modlora/weight_store.hpp"

namespace modlora {

enum class Activation { SiLU, ReLU };

inline std::string to_string(Activation a) { return a == Activation::SiLU ? "silu" : "relu"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "silu") return Activation::SiLU;
    if (s == "relu") return Activation::ReLU;
    throw ValidationError("unknown activation '" + s + "'");
}

struct DenoiserSpec {
    std::size_t input_dim = 2;
    std::size_t time_pairs = 8;  // time features = 2·time_pairs
    std::size_t concept_dim = 8;
    std::vector<std::size_t> hidden{64, 64};
    Activation activation = Activation::SiLU;
    std::size_t num_concepts = 6;  // embedding table has num_concepts + 1 rows
    int num_steps = 100;           // T, for the t/T time encoding

    std::size_t time_dim() const { return 2 * time_pairs; }
    std::size_t feature_dim() const { return input_dim + time_dim() + concept_dim; }
    std::size_t num_layers() const { return hidden.size() + 1; }
    std::size_t null_concept() const { return num_concepts; }

    static std::string layer_name(std::size_t i) { return "fc" + std::to_string(i); }

    std::size_t layer_in(std::size_t i) const { return i == 0 ? feature_dim() : hidden[i - 1]; }
    std::size_t layer_out(std::size_t i) const { return i < hidden.size() ? hidden[i] : input_dim; }

    LayerShapes layer_shapes() const {
        LayerShapes s;
        for (std::size_t i = 0; i < num_layers(); ++i) s.emplace(layer_name(i), LayerShape{layer_out(i), layer_in(i)});
        return s;
    }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < num_layers(); ++i) out.push_back(layer_name(i));
        return out;
    }

    void validate() const {
        if (input_dim == 0 || concept_dim == 0 || num_concepts == 0 || num_steps < 1) {
            throw ValidationError("denoiser spec has a zero dimension");
        }
        for (auto w : hidden)
            if (w == 0) throw ValidationError("hidden widths must be positive");
    }

    friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

struct DenoiserParams {
    DenoiserSpec spec;
    std::map<std::string, Matrix> weights;  // layer -> out×in
    std::map<std::string, Matrix> biases;   // layer -> 1×out
    Matrix embedding;                       // (num_concepts + 1) × concept_dim; last row is c_∅

    friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

inline DenoiserParams init_params(const DenoiserSpec& spec, Rng& rng) {
    spec.validate();
    DenoiserParams p;
    p.spec = spec;
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
        const auto in = spec.layer_in(i), out = spec.layer_out(i);
        p.weights.emplace(DenoiserSpec::layer_name(i), gaussian(rng, out, in, 0.0, 1.0 / std::sqrt(double(in))));
        p.biases.emplace(DenoiserSpec::layer_name(i), Matrix(1, out));
    }
    p.embedding = gaussian(rng, spec.num_concepts + 1, spec.concept_dim, 0.0, 1.0);
    return p;
}

/// A batch of network inputs: n points, their steps in [1, T] and concept ids.
struct Batch {
    Matrix x;
    std::vector<int> t;
    std::vector<std::size_t> c;

    std::size_t size() const { return x.rows(); }
};

/// sin/cos(2^k · t/T) for k = 0 .. time_pairs-1, laid out [sin_0, cos_0, sin_1, ...].
inline void time_features(const DenoiserSpec& spec, int t, std::span<double> out) {
    const double u = static_cast<double>(t) / static_cast<double>(spec.num_steps);
    double freq = 1.0;
    for (std::size_t k = 0; k < spec.time_pairs; ++k) {
        out[2 * k] = std::sin(freq * u);
        out[2 * k + 1] = std::cos(freq * u);
        freq *= 2.0;
    }
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double activate(Activation a, double x) { return a == Activation::SiLU ? x * sigmoid(x) : (x > 0 ? x : 0.0); }

inline double activate_grad(Activation a, double x) {
    if (a == Activation::ReLU) return x > 0 ? 1.0 : 0.0;
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

inline void check_batch(const DenoiserSpec& spec, const Batch& b) {
    if (b.x.cols() != spec.input_dim) throw ShapeError("batch points have " + std::to_string(b.x.cols()) + " columns");
    if (b.t.size() != b.x.rows() || b.c.size() != b.x.rows()) throw ShapeError("batch t/c lengths differ from x rows");
    for (int t : b.t) {
        if (t < 1 || t > spec.num_steps) throw ParameterError("timestep " + std::to_string(t) + " outside [1, T]");
    }
    for (auto c : b.c) {
        if (c > spec.num_concepts) throw LookupError("concept id " + std::to_string(c) + " has no embedding row");
    }
}

}  // namespace detail

/// Concatenated network input rows: x ⊕ time features ⊕ concept embedding.
inline Matrix input_features(const DenoiserParams& p, const Batch& b) {
    const auto& s = p.spec;
    detail::check_batch(s, b);
    Matrix in(b.size(), s.feature_dim());
    for (std::size_t i = 0; i < b.size(); ++i) {
        auto r = in.row(i);
        for (std::size_t j = 0; j < s.input_dim; ++j) r[j] = b.x(i, j);
        time_features(s, b.t[i], r.subspan(s.input_dim, s.time_dim()));
        auto e = p.embedding.row(b.c[i]);
        std::copy(e.begin(), e.end(), r.begin() + static_cast<std::ptrdiff_t>(s.input_dim + s.time_dim()));
    }
    return in;
}

/// Base weights with every attached adapter's delta folded in.
inline std::map<std::string, Matrix> effective_weights(const DenoiserParams& p,
                                                       const std::vector<const LoraAdapter*>& adapters) {
    if (adapters.empty()) return p.weights;
    const auto shapes = p.spec.layer_shapes();
    for (const auto* a : adapters) validate_adapter(*a, &shapes);
    return apply_deltas(p.weights, compose(adapters));
}

/// Intermediate values kept for the backward pass.
struct ForwardTrace {
    std::vector<Matrix> inputs;  // input to each layer
    std::vector<Matrix> pre;     // pre-activation of each hidden layer
    Matrix output;
};

inline ForwardTrace forward_trace(const DenoiserParams& p, const std::map<std::string, Matrix>& weights,
                                  const Batch& b) {
    const auto& s = p.spec;
    ForwardTrace tr;
    Matrix h = input_features(p, b);
    for (std::size_t i = 0; i < s.num_layers(); ++i) {
        const auto name = DenoiserSpec::layer_name(i);
        Matrix z = matmul_nt(h, weights.at(name));
        add_row_broadcast(z, p.biases.at(name));
        tr.inputs.push_back(std::move(h));
        if (i + 1 == s.num_layers()) {
            tr.output = std::move(z);
        } else {
            Matrix a = z;
            for (double& v : a.values()) v = detail::activate(s.activation, v);
            tr.pre.push_back(std::move(z));
            h = std::move(a);
        }
    }
    return tr;
}

/// Predicted noise for each batch row (n×2), using precomputed effective weights.
inline Matrix predict(const DenoiserParams& p, const std::map<std::string, Matrix>& weights, const Batch& b) {
    const auto& s = p.spec;
    Matrix h = input_features(p, b);
    for (std::size_t i = 0; i < s.num_layers(); ++i) {
        const auto name = DenoiserSpec::layer_name(i);
        Matrix z = matmul_nt(h, weights.at(name));
        add_row_broadcast(z, p.biases.at(name));
        if (i + 1 < s.num_layers())
            for (double& v : z.values()) v = detail::activate(s.activation, v);
        h = std::move(z);
    }
    return h;
}

inline Matrix forward(const DenoiserParams& p, const std::vector<const LoraAdapter*>& adapters, const Batch& b) {
    return predict(p, effective_weights(p, adapters), b);
}

/// Which parameters receive gradients.
struct Trainable {
    enum class Kind { FullModel, AdapterOnly };
    Kind kind = Kind::FullModel;
    std::string adapter;
    bool train_embedding = true;  // FullModel only

    static Trainable full_model(bool train_embedding = true) { return {Kind::FullModel, {}, train_embedding}; }
    static Trainable adapter_only(std::string name) { return {Kind::AdapterOnly, std::move(name), false}; }
};

/// Named gradient tensors. FullModel keys: "{layer}.weight", "{layer}.bias",
/// "concept_embedding" (unless the embedding is frozen). AdapterOnly keys: "{layer}.lora_A", "{layer}.lora_B".
using Gradients = TensorMap;

struct LossAndGrad {
    double loss = 0.0;
    Gradients grads;
};

/// Mean over rows of ‖ε_θ(row) − target(row)‖² and its exact gradient.
inline LossAndGrad backward(const DenoiserParams& p, const std::vector<const LoraAdapter*>& adapters,
                            const Batch& b, const Matrix& target, const Trainable& trainable) {
    const auto& s = p.spec;
    const LoraAdapter* train_adapter = nullptr;
    if (trainable.kind == Trainable::Kind::AdapterOnly) {
        for (const auto* a : adapters)
            if (a->name == trainable.adapter) train_adapter = a;
        if (!train_adapter) throw SpecError("adapter '" + trainable.adapter + "' is not attached");
    }
    const auto weights = effective_weights(p, adapters);
    const ForwardTrace tr = forward_trace(p, weights, b);
    if (!target.same_shape(tr.output)) throw ShapeError("target " + target.shape() + " vs output " + tr.output.shape());

    const double n = static_cast<double>(b.size());
    LossAndGrad out;
    Matrix g = sub(tr.output, target);
    out.loss = sum_squares(g) / n;
    for (double& v : g.values()) v *= 2.0 / n;

    for (std::size_t li = s.num_layers(); li-- > 0;) {
        const auto name = DenoiserSpec::layer_name(li);
        const Matrix& in = tr.inputs[li];
        const Matrix gw = matmul_tn(g, in);  // d×k
        if (!train_adapter) {
            out.grads.emplace(name + ".weight", gw);
            out.grads.emplace(name + ".bias", column_sums(g));
        } else if (auto it = train_adapter->entries.find(name); it != train_adapter->entries.end()) {
            const double alpha = train_adapter->scale;
            out.grads.emplace(name + ".lora_B", scale(matmul_nt(gw, it->second.A), alpha));
            out.grads.emplace(name + ".lora_A", scale(matmul_tn(it->second.B, gw), alpha));
        }
        const bool need_input_grad = li > 0 || trainable.train_embedding;
        if (!need_input_grad) break;
        Matrix gin = matmul(g, weights.at(name));
        if (li > 0) {
            const Matrix& z = tr.pre[li - 1];
            auto gv = gin.values();
            auto zv = z.values();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= detail::activate_grad(s.activation, zv[i]);
            g = std::move(gin);
        } else {
            Matrix ge(p.embedding.rows(), p.embedding.cols());
            const std::size_t off = s.input_dim + s.time_dim();
            for (std::size_t i = 0; i < b.size(); ++i) {
                auto dst = ge.row(b.c[i]);
                for (std::size_t j = 0; j < s.concept_dim; ++j) dst[j] += gin(i, off + j);
            }
            out.grads.emplace("concept_embedding", std::move(ge));
        }
    }
    return out;
}

// --- parameter (de)serialization ---------------------------------------

inline TensorMap params_tensors(const DenoiserParams& p) {
    TensorMap t;
    for (const auto& [name, w] : p.weights) t.emplace(name + ".weight", w);
    for (const auto& [name, bias] : p.biases) t.emplace(name + ".bias", bias);
    t.emplace("concept_embedding", p.embedding);
    return t;
}

inline std::map<std::string, std::string> spec_provenance(const DenoiserSpec& s) {
    std::string hidden;
    for (std::size_t i = 0; i < s.hidden.size(); ++i) hidden += (i ? "," : "") + std::to_string(s.hidden[i]);
    return {{"model.activation", to_string(s.activation)},
            {"model.concept_dim", std::to_string(s.concept_dim)},
            {"model.hidden", hidden},
            {"model.input_dim", std::to_string(s.input_dim)},
            {"model.num_concepts", std::to_string(s.num_concepts)},
            {"model.num_steps", std::to_string(s.num_steps)},
            {"model.time_pairs", std::to_string(s.time_pairs)}};
}

inline DenoiserSpec spec_from_provenance(const std::map<std::string, std::string>& prov) {
    auto get = [&](const std::string& k) {
        auto it = prov.find(k);
        if (it == prov.end()) throw SpecError("checkpoint provenance lacks '" + k + "'");
        return it->second;
    };
    auto num = [&](const std::string& k) -> std::size_t {
        try {
            return static_cast<std::size_t>(std::stoull(get(k)));
        } catch (const std::logic_error&) {
            throw SpecError("checkpoint provenance '" + k + "' is not an integer");
        }
    };
    DenoiserSpec s;
    s.activation = parse_activation(get("model.activation"));
    s.concept_dim = num("model.concept_dim");
    s.input_dim = num("model.input_dim");
    s.num_concepts = num("model.num_concepts");
    s.num_steps = static_cast<int>(num("model.num_steps"));
    s.time_pairs = num("model.time_pairs");
    s.hidden.clear();
    std::stringstream ss(get("model.hidden"));
    for (std::string tok; std::getline(ss, tok, ',');) s.hidden.push_back(std::stoull(tok));
    s.validate();
    return s;
}

/// Rebuilds params from tensors; every expected tensor must be present with
/// the spec's shape and nothing else may be.
inline DenoiserParams params_from_tensors(const DenoiserSpec& spec, const TensorMap& t) {
    DenoiserParams p;
    p.spec = spec;
    auto take = [&](const std::string& key, std::size_t r, std::size_t c) {
        auto it = t.find(key);
        if (it == t.end()) throw SpecError("missing tensor '" + key + "'");
        if (it->second.rows() != r || it->second.cols() != c) {
            throw ShapeError("tensor '" + key + "' is " + it->second.shape() + ", expected " + Matrix::shape_string(r, c));
        }
        return it->second;
    };
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
        const auto name = DenoiserSpec::layer_name(i);
        p.weights.emplace(name, take(name + ".weight", spec.layer_out(i), spec.layer_in(i)));
        p.biases.emplace(name, take(name + ".bias", 1, spec.layer_out(i)));
    }
    p.embedding = take("concept_embedding", spec.num_concepts + 1, spec.concept_dim);
    if (t.size() != 2 * spec.num_layers() + 1) throw SpecError("unexpected extra tensors in parameter checkpoint");
    return p;
}

inline void save_params(const DenoiserParams& p, const std::filesystem::path& path,
                        std::map<std::string, std::string> provenance = {}) {
    CheckpointManifest m;
    m.kind = CheckpointKind::BaseWeights;
    m.provenance = std::move(provenance);
    for (auto& [k, v] : spec_provenance(p.spec)) m.provenance[k] = v;
    write_checkpoint(params_tensors(p), m, path);
}

inline DenoiserParams params_from_checkpoint(const Checkpoint& ck) {
    if (ck.manifest.kind != CheckpointKind::BaseWeights) throw SpecError("checkpoint does not hold base weights");
    return params_from_tensors(spec_from_provenance(ck.manifest.provenance), ck.tensors);
}

inline DenoiserParams load_params(const std::filesystem::path& path) {
    return params_from_checkpoint(read_checkpoint(path));
}

// --- Adam -----------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::uint64_t step = 0;
    TensorMap m;
    TensorMap v;
};

namespace detail {

inline void adam_update(const std::string& key, Matrix& param, const Matrix& grad, AdamState& st,
                        const AdamConfig& cfg) {
    if (!grad.same_shape(param)) {
        throw ShapeError("adam: gradient '" + key + "' " + grad.shape() + " vs parameter " + param.shape());
    }
    auto [mit, fresh_m] = st.m.try_emplace(key, param.rows(), param.cols());
    auto [vit, fresh_v] = st.v.try_emplace(key, param.rows(), param.cols());
    if (!mit->second.same_shape(param) || !vit->second.same_shape(param)) {
        throw ShapeError("adam: optimizer state for '" + key + "' does not match parameter " + param.shape());
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    auto pv = param.values();
    auto gv = grad.values();
    auto mv = mit->second.values();
    auto vv = vit->second.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * gv[i];
        vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
        const double mhat = mv[i] / c1;
        const double vhat = vv[i] / c2;
        pv[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace detail

/// One Adam step with bias correction over every tensor named in `grads`.
/// Parameters without a gradient entry are left untouched.
inline void adam_step(TensorMap& params, const Gradients& grads, AdamState& st, const AdamConfig& cfg) {
    ++st.step;
    for (const auto& [key, g] : grads) {
        auto it = params.find(key);
        if (it == params.end()) throw ShapeError("adam: gradient '" + key + "' has no parameter");
        detail::adam_update(key, it->second, g, st, cfg);
    }
}

inline void adam_step(DenoiserParams& p, const Gradients& grads, AdamState& st, const AdamConfig& cfg) {
    ++st.step;
    for (const auto& [key, g] : grads) {
        Matrix* target = nullptr;
        if (key == "concept_embedding") {
            target = &p.embedding;
        } else if (auto dot = key.rfind('.'); dot != std::string::npos) {
            const auto layer = key.substr(0, dot), field = key.substr(dot + 1);
            auto& m = field == "weight" ? p.weights : p.biases;
            if ((field == "weight" || field == "bias") && m.count(layer)) target = &m.at(layer);
        }
        if (!target) throw ShapeError("adam: gradient '" + key + "' matches no model parameter");
        detail::adam_update(key, *target, g, st, cfg);
    }
}

inline void adam_step(LoraAdapter& a, const Gradients& grads, AdamState& st, const AdamConfig& cfg) {
    ++st.step;
    for (const auto& [key, g] : grads) {
        const auto dot = key.rfind('.');
        Matrix* target = nullptr;
        if (dot != std::string::npos) {
            auto it = a.entries.find(key.substr(0, dot));
            const auto field = key.substr(dot + 1);
            if (it != a.entries.end()) target = field == "lora_A" ? &it->second.A : field == "lora_B" ? &it->second.B : nullptr;
        }
        if (!target) throw ShapeError("adam: gradient '" + key + "' matches no factor of adapter '" + a.name + "'");
        detail::adam_update(key, *target, g, st, cfg);
    }
}

}  // namespace modlora
