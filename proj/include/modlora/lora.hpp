// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter algebra. An adapter maps layer names to factor pairs
// (B: d×r, A: r×k) and contributes ΔW = α·B·A to each layer it touches.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "modlora/errors.hpp"
#include "modlora/rng.hpp"
#include "modlora/tensor.hpp"
#include "modlora/weight_store.hpp"

namespace modlora {

/// (out_features d, in_features k) of one adaptable layer.
struct LayerShape {
    std::size_t d = 0;
    std::size_t k = 0;
    friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

using LayerShapes = std::map<std::string, LayerShape>;

struct LoraFactors {
    Matrix B;  // d×r
    Matrix A;  // r×k
    friend bool operator==(const LoraFactors&, const LoraFactors&) = default;
};

struct LoraAdapter {
    std::string name;
    std::size_t rank = 0;
    double scale = 1.0;
    std::map<std::string, LoraFactors> entries;
    std::vector<std::string> warnings;

    bool has_layer(const std::string& layer) const { return entries.count(layer) != 0; }

    /// Equality over the algebraic content; warnings are diagnostics only.
    friend bool operator==(const LoraAdapter& a, const LoraAdapter& b) {
        return a.name == b.name && a.rank == b.rank && a.scale == b.scale && a.entries == b.entries;
    }
};

/// Per-layer ΔW, keyed by layer name.
using DeltaMap = std::map<std::string, Matrix>;

/// Throws unless every entry has consistent factor shapes and, when `shapes`
/// is given, names a known layer with matching (d, k).
inline void validate_adapter(const LoraAdapter& a, const LayerShapes* shapes = nullptr) {
    if (a.rank == 0) throw SpecError("adapter '" + a.name + "' has rank 0");
    for (const auto& [layer, f] : a.entries) {
        if (f.B.cols() != a.rank || f.A.rows() != a.rank) {
            throw ShapeError("adapter '" + a.name + "' layer '" + layer + "': factors " + f.B.shape() + ", " +
                             f.A.shape() + " inconsistent with rank " + std::to_string(a.rank));
        }
        if (shapes) {
            auto it = shapes->find(layer);
            if (it == shapes->end()) throw SpecError("adapter '" + a.name + "' targets unknown layer '" + layer + "'");
            if (it->second.d != f.B.rows() || it->second.k != f.A.cols()) {
                throw ShapeError("adapter '" + a.name + "' layer '" + layer + "' is " +
                                 Matrix::shape_string(f.B.rows(), f.A.cols()) + ", model expects " +
                                 Matrix::shape_string(it->second.d, it->second.k));
            }
        }
    }
}

/// Fresh adapter: A ~ N(0, 1/r), B = 0, so every delta is exactly zero.
/// Layers are drawn in lexicographic order regardless of `targets` order.
inline LoraAdapter init_adapter(const LayerShapes& shapes, std::vector<std::string> targets, std::size_t rank,
                                double scale, Rng& rng, std::string name = "adapter") {
    if (rank == 0) throw ParameterError("init_adapter: rank must be >= 1");
    std::sort(targets.begin(), targets.end());
    targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    LoraAdapter a;
    a.name = std::move(name);
    a.rank = rank;
    a.scale = scale;
    for (const auto& layer : targets) {
        auto it = shapes.find(layer);
        if (it == shapes.end()) throw SpecError("init_adapter: unknown layer '" + layer + "'");
        const auto [d, k] = it->second;
        if (rank > std::min(d, k)) {
            a.warnings.push_back("rank " + std::to_string(rank) + " exceeds min(d,k)=" +
                                 std::to_string(std::min(d, k)) + " on layer '" + layer + "'");
        }
        LoraFactors f{Matrix(d, rank), gaussian(rng, rank, k, 0.0, 1.0 / std::sqrt(static_cast<double>(rank)))};
        a.entries.emplace(layer, std::move(f));
    }
    return a;
}

/// α·(B×A).
inline Matrix delta(const LoraAdapter& a, const std::string& layer) {
    auto it = a.entries.find(layer);
    if (it == a.entries.end()) throw LookupError("adapter '" + a.name + "' has no layer '" + layer + "'");
    return scale(matmul(it->second.B, it->second.A), a.scale);
}

inline DeltaMap delta_map(const LoraAdapter& a) {
    DeltaMap out;
    for (const auto& [layer, f] : a.entries) out.emplace(layer, delta(a, layer));
    return out;
}

/// W ± ΔW on every adapted layer. Layers the adapter does not touch are
/// copied unchanged.
template <class WeightMap>
WeightMap attach(const WeightMap& weights, const LoraAdapter& a, int sign) {
    if (sign != 1 && sign != -1) throw ParameterError("attach: sign must be +1 or -1");
    WeightMap out = weights;
    for (const auto& [layer, f] : a.entries) {
        auto it = out.find(layer);
        if (it == out.end()) throw SpecError("attach: weights have no layer '" + layer + "'");
        const Matrix d = delta(a, layer);
        if (!it->second.same_shape(d)) {
            throw ShapeError("attach: layer '" + layer + "' weight " + it->second.shape() + " vs delta " + d.shape());
        }
        axpy(it->second, static_cast<double>(sign), d);
    }
    return out;
}

/// Adds a dense delta map onto weights; same contract as `attach`.
template <class WeightMap>
WeightMap apply_deltas(const WeightMap& weights, const DeltaMap& deltas, int sign = 1) {
    WeightMap out = weights;
    for (const auto& [layer, d] : deltas) {
        auto it = out.find(layer);
        if (it == out.end()) throw SpecError("apply_deltas: weights have no layer '" + layer + "'");
        if (!it->second.same_shape(d)) {
            throw ShapeError("apply_deltas: layer '" + layer + "' weight " + it->second.shape() + " vs delta " +
                             d.shape());
        }
        axpy(it->second, static_cast<double>(sign), d);
    }
    return out;
}

/// Sum of member deltas per layer. Members are visited in (name, scale,
/// rank) order and layers in name order, so any permutation of the input
/// list produces bit-identical sums.
inline DeltaMap compose(std::vector<const LoraAdapter*> adapters) {
    std::stable_sort(adapters.begin(), adapters.end(), [](const LoraAdapter* x, const LoraAdapter* y) {
        if (x->name != y->name) return x->name < y->name;
        if (x->scale != y->scale) return x->scale < y->scale;
        return x->rank < y->rank;
    });
    DeltaMap out;
    for (const LoraAdapter* a : adapters) {
        for (const auto& [layer, f] : a->entries) {
            Matrix d = delta(*a, layer);
            auto it = out.find(layer);
            if (it == out.end()) {
                out.emplace(layer, std::move(d));
            } else {
                if (!it->second.same_shape(d)) {
                    throw SpecError("compose: layer '" + layer + "' is " + it->second.shape() + " in one adapter and " +
                                    d.shape() + " in '" + a->name + "'");
                }
                axpy(it->second, 1.0, d);
            }
        }
    }
    return out;
}

inline DeltaMap compose(const std::vector<LoraAdapter>& adapters) {
    std::vector<const LoraAdapter*> ptrs;
    for (const auto& a : adapters) ptrs.push_back(&a);
    return compose(std::move(ptrs));
}

inline LoraAdapter negate(LoraAdapter a) {
    a.scale = -a.scale;
    return a;
}

/// Single adapter equivalent to attaching both: B' = [α₁B₁ | α₂B₂],
/// A' = [A₁ ; A₂], α' = 1, rank r₁ + r₂.
inline LoraAdapter merge_concat(const LoraAdapter& a1, const LoraAdapter& a2, std::string name = {}) {
    if (a1.entries.size() != a2.entries.size() ||
        !std::equal(a1.entries.begin(), a1.entries.end(), a2.entries.begin(),
                    [](const auto& x, const auto& y) { return x.first == y.first; })) {
        throw SpecError("merge_concat: adapters '" + a1.name + "' and '" + a2.name + "' target different layers");
    }
    LoraAdapter out;
    out.name = name.empty() ? a1.name + "+" + a2.name : std::move(name);
    out.rank = a1.rank + a2.rank;
    out.scale = 1.0;
    for (const auto& [layer, f1] : a1.entries) {
        const auto& f2 = a2.entries.at(layer);
        if (f1.B.rows() != f2.B.rows() || f1.A.cols() != f2.A.cols()) {
            throw SpecError("merge_concat: layer '" + layer + "' shapes differ");
        }
        out.entries.emplace(layer, LoraFactors{hconcat(scale(f1.B, a1.scale), scale(f2.B, a2.scale)),
                                               vconcat(f1.A, f2.A)});
    }
    return out;
}

/// Factors keyed "{layer}.lora_A" / "{layer}.lora_B".
inline TensorMap adapter_tensors(const LoraAdapter& a) {
    TensorMap t;
    for (const auto& [layer, f] : a.entries) {
        t.emplace(layer + ".lora_A", f.A);
        t.emplace(layer + ".lora_B", f.B);
    }
    return t;
}

inline CheckpointManifest adapter_manifest(const LoraAdapter& a, std::map<std::string, std::string> provenance = {}) {
    CheckpointManifest m;
    m.kind = CheckpointKind::Adapter;
    m.rank = a.rank;
    m.scale = a.scale;
    m.provenance = std::move(provenance);
    m.provenance["name"] = a.name;
    return m;
}

inline void save_adapter(const LoraAdapter& a, const std::filesystem::path& path,
                         std::map<std::string, std::string> provenance = {}) {
    write_checkpoint(adapter_tensors(a), adapter_manifest(a, std::move(provenance)), path);
}

inline LoraAdapter adapter_from_checkpoint(const Checkpoint& ck) {
    if (ck.manifest.kind != CheckpointKind::Adapter) throw SpecError("checkpoint is not an adapter");
    LoraAdapter a;
    a.rank = *ck.manifest.rank;
    a.scale = *ck.manifest.scale;
    auto name = ck.manifest.provenance.find("name");
    a.name = name != ck.manifest.provenance.end() ? name->second : "adapter";
    const std::string suffix_a = ".lora_A", suffix_b = ".lora_B";
    for (const auto& [key, m] : ck.tensors) {
        auto ends_with = [&](const std::string& s) {
            return key.size() > s.size() && key.compare(key.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with(suffix_a)) {
            a.entries[key.substr(0, key.size() - suffix_a.size())].A = m;
        } else if (ends_with(suffix_b)) {
            a.entries[key.substr(0, key.size() - suffix_b.size())].B = m;
        } else {
            throw SpecError("adapter checkpoint has unexpected tensor '" + key + "'");
        }
    }
    for (const auto& [layer, f] : a.entries) {
        if (f.A.empty() || f.B.empty()) throw SpecError("adapter layer '" + layer + "' lacks one of its factors");
    }
    validate_adapter(a);
    return a;
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) {
    return adapter_from_checkpoint(read_checkpoint(path));
}

}  // namespace modlora
