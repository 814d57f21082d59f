// Acceptance run: one PASS/FAIL line per criterion at the default config.
// Usage: acceptance <work-dir>. The work dir's cache is cleared first so
// every stage trains from scratch. Exits 0 once all lines are printed;
// a failing criterion is reported, not hidden behind the exit code.
#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>

#include "modlora/study.hpp"

using namespace modlora;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int n, bool pass, const std::string& detail) {
    std::cout << "criterion " << n << ": " << (pass ? "PASS" : "FAIL") << " - " << detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double max_diff(const std::map<std::string, Matrix>& a, const std::map<std::string, Matrix>& b) {
    double m = 0.0;
    for (const auto& [k, v] : a) m = std::max(m, max_abs_diff(v, b.at(k)));
    return m;
}

LoraAdapter random_adapter(const LayerShapes& shapes, Rng& rng, std::size_t rank) {
    LoraAdapter a = init_adapter(shapes, {"fc0", "fc1"}, rank, 0.5 + rng.uniform(), rng);
    for (auto& [l, f] : a.entries) f.B = gaussian(rng, f.B.rows(), f.B.cols());
    return a;
}

void criterion_1(const Lab& lab) {
    const auto t0 = Clock::now();
    Rng rng(101);
    const auto shapes = lab.spec.layer_shapes();
    const DenoiserParams p = init_params(lab.spec, rng);
    double detach = 0.0, merge = 0.0;
    bool involution = true, fresh = true;
    for (int c = 0; c < 100; ++c) {
        const LoraAdapter a = random_adapter(shapes, rng, 1 + rng.below(8));
        const LoraAdapter b = random_adapter(shapes, rng, 1 + rng.below(8));
        detach = std::max(detach, max_diff(attach(attach(p.weights, a, +1), a, -1), p.weights));
        involution = involution && negate(negate(a)) == a;
        const LoraAdapter m = merge_concat(a, b);
        for (const auto& [l, f] : m.entries) merge = std::max(merge, max_abs_diff(delta(m, l), add(delta(a, l), delta(b, l))));
        const LoraAdapter z = init_adapter(shapes, {"fc0", "fc1", "fc2"}, 1 + rng.below(8), 1.0, rng);
        fresh = fresh && attach(p.weights, z, +1) == p.weights;
    }
    const double s = seconds_since(t0);
    report(1, detach <= 1e-12 && involution && fresh && merge <= 1e-12 && s < 5.0,
           fmt("attach/detach %.3g, merge %.3g over 100 cases; involution %s; fresh %s; %.2f s", detach, merge,
               involution ? "exact" : "broken", fresh ? "bit-exact" : "not exact", s));
}

Batch random_batch(const DenoiserSpec& s, Rng& rng, std::size_t n) {
    Batch b;
    b.x = gaussian(rng, n, s.input_dim);
    for (std::size_t i = 0; i < n; ++i) {
        b.t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.num_steps))));
        b.c.push_back(rng.below(s.num_concepts + 1));
    }
    return b;
}

Matrix& full_param(DenoiserParams& q, const std::string& key) {
    if (key == "concept_embedding") return q.embedding;
    if (key.ends_with(".weight")) return q.weights.at(key.substr(0, key.size() - 7));
    return q.biases.at(key.substr(0, key.size() - 5));
}

void criterion_2(const Lab& lab) {
    const auto t0 = Clock::now();
    constexpr double h = 1e-5;
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
    Rng rng(202);
    const DenoiserParams p = init_params(lab.spec, rng);
    const Batch b = random_batch(lab.spec, rng, 32);
    const Matrix y = gaussian(rng, 32, 2);
    auto loss = [&](const DenoiserParams& q, const std::vector<const LoraAdapter*>& ad) {
        return sum_squares(sub(forward(q, ad, b), y)) / static_cast<double>(b.size());
    };
    auto probe = [&](const Gradients& g, const std::function<double(const std::string&, std::size_t, std::size_t, double)>& f) {
        std::vector<std::string> keys;
        for (const auto& [k, v] : g) keys.push_back(k);
        double worst = 0.0;
        for (int i = 0; i < 20; ++i) {
            const std::string& k = keys[rng.below(keys.size())];
            const Matrix& m = g.at(k);
            const std::size_t r = rng.below(m.rows()), c = rng.below(m.cols());
            worst = std::max(worst, rel(m(r, c), (f(k, r, c, h) - f(k, r, c, -h)) / (2 * h)));
        }
        return worst;
    };
    const auto full = backward(p, {}, b, y, Trainable::full_model());
    const double wf = probe(full.grads, [&](const std::string& k, std::size_t r, std::size_t c, double d) {
        DenoiserParams q = p;
        full_param(q, k)(r, c) += d;
        return loss(q, {});
    });
    LoraAdapter a = random_adapter(lab.spec.layer_shapes(), rng, 4);
    a.name = "probe";
    for (auto& [l, f] : a.entries) f.B = gaussian(rng, f.B.rows(), f.B.cols(), 0.0, 0.3);
    const auto ad = backward(p, {&a}, b, y, Trainable::adapter_only("probe"));
    const double wa = probe(ad.grads, [&](const std::string& k, std::size_t r, std::size_t c, double d) {
        LoraAdapter q = a;
        const std::string layer = k.substr(0, k.find('.'));
        (k.ends_with("lora_A") ? q.entries[layer].A : q.entries[layer].B)(r, c) += d;
        return loss(p, {&q});
    });
    const double s = seconds_since(t0);
    report(2, wf <= 1e-5 && wa <= 1e-5 && s < 30.0,
           fmt("worst relative error full-model %.3g, adapter-only %.3g over 20 probes each; %.2f s", wf, wa, s));
}

void criterion_3(const Lab& lab) {
    double unit = 0.0;
    for (int t = 1; t <= lab.schedule.T; ++t) {
        const double a = lab.schedule.alpha_at(t), s = lab.schedule.sigma_at(t);
        unit = std::max(unit, std::abs(a * a + s * s - 1.0));
    }
    Rng rng(303);
    const Matrix c = gaussian(rng, 50, 2), u = gaussian(rng, 50, 2);
    const bool collapse = cfg_estimate(c, u, 1.0) == c && cfg_estimate(c, u, 0.0) == u;
    const DenoiserParams p = init_params(lab.spec, rng);
    SamplerConfig sc;
    sc.concept_id = kUnsafe;
    sc.num_samples = 200;
    sc.seed = 9;
    const Matrix x1 = sample(p, {}, lab.schedule, sc), x2 = sample(p, {}, lab.schedule, sc);
    const bool same = x1.values().size() == x2.values().size() &&
                      std::memcmp(x1.values().data(), x2.values().data(), x1.values().size() * sizeof(double)) == 0;
    report(3, unit <= 1e-12 && collapse && same,
           fmt("max |a^2+s^2-1| %.3g; collapse %s; sampler %s", unit, collapse ? "exact" : "broken",
               same ? "byte-identical" : "differs"));
}

void criterion_4(const fs::path& dir) {
    Rng rng(404);
    fs::create_directories(dir);
    int ok = 0;
    for (int c = 0; c < 100; ++c) {
        TensorMap t;
        const std::size_t k = 1 + rng.below(6);
        for (std::size_t i = 0; i < k; ++i)
            t.emplace("t" + std::to_string(i), gaussian(rng, 1 + rng.below(40), 1 + rng.below(40), 0.0, 10.0));
        CheckpointManifest m;
        if (c % 2) {
            m.kind = CheckpointKind::Adapter;
            m.rank = 1 + rng.below(8);
            m.scale = rng.uniform();
        }
        m.provenance = {{"case", std::to_string(c)}};
        const auto path = dir / "rt.safetensors";
        write_checkpoint(t, m, path);
        const std::string first = read_file_bytes(path);
        const Checkpoint back = read_checkpoint(path);
        write_checkpoint(back.tensors, back.manifest, path);
        ok += read_file_bytes(path) == first && back.tensors == t;
    }
    report(4, ok == 100, fmt("%d/100 random checkpoints byte-identical after write, read, write", ok));
}

void criterion_5(Lab& lab) {
    const DenoiserParams w0 = pretrain(lab);
    const Matrix ref = finetune_dataset(lab, lab.cfg.finetune.dataset_size);
    const double pre = evaluate_condition(lab, w0, w0.weights, kUnsafe, ref).unsafe_rate;
    bool pass = pre >= lab.cfg.thresholds.explicit_pretrain_min;
    std::string detail = fmt("pretrain explicit %.4g", pre);
    for (Objective o : {Objective::ESD, Objective::SDD}) {
        const auto t0 = Clock::now();
        const SafeArtifact art = align(lab, w0, o, TrainMode::Lora);
        const double s = seconds_since(t0);
        const double r = evaluate_condition(lab, w0, effective_weights(w0, {&*art.adapter}), kUnsafe, ref).unsafe_rate;
        pass = pass && r <= lab.cfg.thresholds.explicit_aligned_max && s < 180.0;
        detail += fmt("; %s aligned %.4g in %.1f s", to_string(o).c_str(), r, s);
    }
    report(5, pass, detail);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: acceptance <work-dir>\n";
        return 1;
    }
    try {
        const fs::path work = argv[1];
        fs::remove_all(work);
        RunConfig cfg;
        cfg.cache_dir = (work / "cache").string();
        cfg.output_dir = (work / "out").string();
        Lab lab = make_lab(cfg);

        criterion_1(lab);
        criterion_2(lab);
        criterion_3(lab);
        criterion_4(work / "roundtrip");
        criterion_5(lab);

        const auto t6 = Clock::now();
        const PipelinesStudy ps = pipelines_study(lab);
        const double s6 = seconds_since(t6);
        report(6, ps.checks[0].pass && s6 < 300.0, ps.checks[0].detail + fmt("; study %.1f s", s6));
        report(7, ps.checks[1].pass, ps.checks[1].detail);

        const NegationStudy ns = negation_study_run(lab, ps.lora_lora_adapter);
        report(8, ns.check.pass, ns.check.detail);

        const SweepStudy ss = sweep_study(lab);
        report(9, ss.check.pass, ss.check.detail);

        const AmplifyStudy as = amplify_study(lab);
        report(10, as.check.pass, as.check.detail);

        report(11, ps.checks[2].pass, ps.checks[2].detail);

        // a second pipelines run from an emptied cache must reproduce every file
        fs::rename(cfg.cache_dir, work / "cache-first");
        Lab lab2 = make_lab(cfg);
        const PipelinesStudy again = pipelines_study(lab2);
        std::size_t same = 0;
        for (const auto& [name, bytes] : ps.files) same += again.files.count(name) && again.files.at(name) == bytes;
        report(12, same == ps.files.size() && again.files.size() == ps.files.size(),
               fmt("%zu/%zu report files byte-identical across two cold runs", same, ps.files.size()));
        write_report_files(ps.files, work / "out" / "pipelines");
    } catch (const std::exception& e) {
        std::cerr << "acceptance aborted: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
