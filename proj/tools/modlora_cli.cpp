// SPDX-License-Identifier: Apache-2.0
//
// modlora: every stage of the lab plus the adapter arithmetic utilities.
// Exit codes: 0 ok, 1 validation, 2 I/O or format, 3 divergence. Failures
// print one JSON line {"error": {...}} on stderr.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "modlora/bench.hpp"
#include "modlora/config.hpp"
#include "modlora/study.hpp"

namespace fs = std::filesystem;
using namespace modlora;

namespace {

void emit_error(const std::string& category, int code, const std::string& message,
                std::optional<std::size_t> step = std::nullopt) {
    nlohmann::json e{{"category", category}, {"exit_code", code}, {"message", message}};
    if (step) e["step"] = *step;
    std::cerr << nlohmann::json{{"error", e}}.dump() << "\n";
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

/// Outputs must not overwrite inputs.
void check_distinct(const fs::path& out, const std::vector<std::string>& inputs) {
    for (const auto& in : inputs) {
        std::error_code ec;
        if (fs::exists(out, ec) && fs::equivalent(out, in, ec)) {
            throw ValidationError("output '" + out.string() + "' would overwrite input '" + in + "'");
        }
    }
}

void copy_cached(const Lab& lab, const std::string& stage, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const std::string name = stage + ".safetensors";
    write_file_atomic(out_dir / name, read_file_bytes(lab.cache_root() / name));
    std::cout << (out_dir / name).string() << "\n";
}

void print_checks(const std::vector<Check>& checks) {
    for (const auto& c : checks) std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
}

std::optional<std::size_t> parse_concept(const std::string& s) {
    if (s == "null" || s == "none") return std::nullopt;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(s, &used);
        if (used == s.size()) return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
    }
    throw ValidationError("--concept must be a concept id or 'null', got '" + s + "'");
}

int parse_sign(const std::string& s) {
    if (s == "+1" || s == "1") return 1;
    if (s == "-1") return -1;
    throw ValidationError("--sign must be +1 or -1, got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modlora: safety adapters and fine-tuning on a 2-D diffusion toy"};
    app.require_subcommand(1);

    std::string config_path, out, objective, mode, pipeline, checkpoint, concept_arg = "null", adapter, base, sign,
        report, study_kind;
    std::vector<std::string> adapters;
    std::optional<std::size_t> steps;
    double w = 3.0;
    std::size_t n = 500;
    std::uint64_t seed = 0;

    auto* pre = app.add_subcommand("pretrain", "train W0 on the pretraining mixture");
    pre->add_option("--config", config_path, "run config (JSON)");
    pre->add_option("--out", out, "output directory")->required();

    auto* al = app.add_subcommand("align", "train the safety artifact");
    al->add_option("--config", config_path, "run config (JSON)");
    al->add_option("--objective", objective, "esd|sdd")->required()->check(CLI::IsMember({"esd", "sdd"}));
    al->add_option("--mode", mode, "full|lora")->required()->check(CLI::IsMember({"full", "lora"}));
    al->add_option("--out", out, "output directory")->required();

    auto* ft = app.add_subcommand("finetune", "run one fine-tuning pipeline with eval hooks");
    ft->add_option("--config", config_path, "run config (JSON)");
    ft->add_option("--pipeline", pipeline, "full-full|full-lora|lora-lora|modular")
        ->required()
        ->check(CLI::IsMember({"full-full", "full-lora", "lora-lora", "modular"}));
    ft->add_option("--steps", steps, "fine-tune steps (overrides the config)");
    ft->add_option("--out", out, "output directory (default: config output_dir)");

    auto* sa = app.add_subcommand("sample", "draw a point cloud");
    sa->add_option("--config", config_path, "run config supplying the schedule");
    sa->add_option("--checkpoint", checkpoint, "base weights")->required()->check(CLI::ExistingFile);
    sa->add_option("--adapters", adapters, "comma-separated adapters to attach")->delimiter(',');
    sa->add_option("--concept", concept_arg, "concept id, or 'null' for unconditional");
    sa->add_option("--w", w, "guidance scale");
    sa->add_option("--n", n, "number of points");
    sa->add_option("--seed", seed, "sampler seed");
    sa->add_option("--out", out, "output CSV")->required();

    auto* me = app.add_subcommand("merge", "concatenate adapters into one");
    me->add_option("--adapters", adapters, "comma-separated adapters")->required()->delimiter(',');
    me->add_option("--out", out, "output adapter")->required();

    auto* ne = app.add_subcommand("negate", "flip an adapter's sign");
    ne->add_option("--adapter", adapter, "input adapter")->required()->check(CLI::ExistingFile);
    ne->add_option("--out", out, "output adapter")->required();

    auto* at = app.add_subcommand("attach", "fold an adapter into base weights");
    at->add_option("--base", base, "base weights")->required()->check(CLI::ExistingFile);
    at->add_option("--adapter", adapter, "adapter")->required()->check(CLI::ExistingFile);
    at->add_option("--sign", sign, "+1 or -1")->required();
    at->add_option("--out", out, "output weights")->required();

    auto* st = app.add_subcommand("study", "run a study and write its reports");
    st->add_option("kind", study_kind, "negation|sweep|amplify|pipelines")
        ->required()
        ->check(CLI::IsMember({"negation", "sweep", "amplify", "pipelines"}));
    st->add_option("--config", config_path, "run config (JSON)");
    st->add_option("--out", out, "output directory (default: config output_dir)");

    auto* ev = app.add_subcommand("eval", "re-check a study summary against the acceptance thresholds");
    ev->add_option("--report", report, "summary.json")->required()->check(CLI::ExistingFile);
    ev->add_option("--config", config_path, "config supplying thresholds (default: built-in)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        emit_error("usage", 1, e.what());
        return 1;
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    try {
        if (*pre) {
            Lab lab = make_lab(config_or_default(config_path));
            pretrain(lab);
            copy_cached(lab, "pretrain", out);
            write_file_atomic(fs::path(out) / "config.json", dump_config(lab.cfg));
        } else if (*al) {
            RunConfig cfg = config_or_default(config_path);
            cfg.alignment.objective = objective;
            cfg.alignment.mode = mode;
            if (objective == "esd" && !cfg.alignment.eta) cfg.alignment.eta = 1.0;
            if (objective == "sdd") cfg.alignment.eta.reset();
            Lab lab = make_lab(cfg);
            const DenoiserParams w0 = pretrain(lab);
            const SafeArtifact art = align(lab, w0, parse_objective(objective), parse_mode(mode));
            copy_cached(lab, "safety-" + objective + "-" + mode, out);

            const Matrix ref = finetune_dataset(lab, lab.cfg.finetune.dataset_size);
            const auto safe_w = art.adapter ? effective_weights(w0, {&*art.adapter}) : art.safe_params->weights;
            const DenoiserParams& safe_base = art.adapter ? w0 : *art.safe_params;
            nlohmann::json s = summary_head(lab, "align");
            s["explicit_unsafe_rate"] = {
                {"pretrain", evaluate_condition(lab, w0, w0.weights, lab.world.unsafe_concept, ref).unsafe_rate},
                {"aligned", evaluate_condition(lab, safe_base, safe_w, lab.world.unsafe_concept, ref).unsafe_rate}};
            write_report_files(finish_files(lab, s, {}), out);
            std::cout << s["explicit_unsafe_rate"].dump() << "\n";
        } else if (*ft) {
            RunConfig cfg = config_or_default(config_path);
            if (steps) cfg.finetune.steps = *steps;
            Lab lab = make_lab(cfg);
            const fs::path dir = out.empty() ? fs::path(cfg.output_dir) : fs::path(out);
            const PipelineKind kind = parse_pipeline(pipeline);
            const DenoiserParams w0 = pretrain(lab);
            const SafeArtifact safe = align(lab, w0, safety_mode(kind));
            const Matrix data = finetune_dataset(lab, cfg.finetune.dataset_size);
            auto files_for = [&](const ExperimentReport& r) {
                nlohmann::json s = summary_head(lab, "finetune");
                s["reports"][r.name] = r.summary();
                return finish_files(lab, s, {{r.name + ".csv", r.csv()}});
            };
            try {
                PipelineRun run = run_pipeline(lab, w0, safe, kind, data);
                write_report_files(files_for(run.report), dir);
                const fs::path art = dir / ("finetune-" + pipeline + ".safetensors");
                const std::map<std::string, std::string> prov{{"stage", "finetune-" + pipeline}};
                if (run.result.adapter) save_adapter(*run.result.adapter, art, prov);
                else save_params(*run.result.full_params, art, prov);
                std::cout << art.string() << "\n";
            } catch (const PipelineDivergence& e) {
                write_report_files(files_for(e.report), dir);
                throw;
            }
        } else if (*sa) {
            check_distinct(out, {checkpoint});
            const Lab lab = make_lab(config_or_default(config_path));
            const DenoiserParams p = load_params(checkpoint);
            std::vector<LoraAdapter> loaded;
            for (const auto& a : adapters) loaded.push_back(load_adapter(a));
            std::vector<const LoraAdapter*> ptrs;
            for (const auto& a : loaded) ptrs.push_back(&a);
            SamplerConfig sc;
            sc.guidance = w;
            sc.concept_id = parse_concept(concept_arg);
            sc.num_samples = n;
            sc.seed = seed;
            const Matrix x = sample(p, ptrs, lab.schedule, sc);
            std::string csv = "x,y\n";
            for (std::size_t i = 0; i < x.rows(); ++i) csv += format_double(x(i, 0)) + "," + format_double(x(i, 1)) + "\n";
            write_file_atomic(out, csv);
        } else if (*me) {
            if (adapters.size() < 2) throw ValidationError("merge needs at least two adapters");
            check_distinct(out, adapters);
            LoraAdapter m = load_adapter(adapters[0]);
            for (std::size_t i = 1; i < adapters.size(); ++i) m = merge_concat(m, load_adapter(adapters[i]));
            save_adapter(m, out, {{"stage", "merge"}});
        } else if (*ne) {
            check_distinct(out, {adapter});
            // provenance carried over unchanged, so negating twice restores the original bytes
            const Checkpoint ck = read_checkpoint(adapter);
            save_adapter(negate(adapter_from_checkpoint(ck)), out, ck.manifest.provenance);
        } else if (*at) {
            check_distinct(out, {base, adapter});
            const int sg = parse_sign(sign);
            const Checkpoint ck = read_checkpoint(base);
            DenoiserParams p = params_from_checkpoint(ck);
            const LoraAdapter a = load_adapter(adapter);
            const auto shapes = p.spec.layer_shapes();
            validate_adapter(a, &shapes);
            p.weights = attach(p.weights, a, sg);
            auto prov = ck.manifest.provenance;
            prov["attached"] = a.name + (sg > 0 ? ":+1" : ":-1");
            save_params(p, out, prov);
        } else if (*st) {
            Lab lab = make_lab(config_or_default(config_path));
            const fs::path dir = out.empty() ? fs::path(lab.cfg.output_dir) : fs::path(out);
            std::vector<Check> checks;
            ReportFiles files;
            if (study_kind == "pipelines") {
                auto r = pipelines_study(lab);
                checks = r.checks;
                files = std::move(r.files);
            } else if (study_kind == "negation") {
                auto r = negation_study_run(lab);
                checks = {r.check};
                files = std::move(r.files);
            } else if (study_kind == "sweep") {
                auto r = sweep_study(lab);
                checks = {r.check};
                files = std::move(r.files);
            } else {
                auto r = amplify_study(lab);
                checks = {r.check};
                files = std::move(r.files);
            }
            write_report_files(files, dir);
            print_checks(checks);
        } else if (*ev) {
            nlohmann::json s;
            try {
                s = nlohmann::json::parse(read_file_bytes(report));
            } catch (const nlohmann::json::parse_error& e) {
                throw ValidationError(report + ": not valid JSON (" + e.what() + ")");
            }
            const auto checks = evaluate_summary(s, config_or_default(config_path).thresholds);
            print_checks(checks);
            for (const auto& c : checks) {
                if (!c.pass) {
                    emit_error("acceptance", 1, "check '" + c.name + "' failed");
                    return 1;
                }
            }
        }
        std::cout << "elapsed_s " << elapsed() << "\n";
        return 0;
    } catch (const DivergenceError& e) {
        emit_error(e.category(), e.exit_code(), e.what(), e.step());
        return e.exit_code();
    } catch (const Error& e) {
        emit_error(e.category(), e.exit_code(), e.what());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        emit_error("io", 2, e.what());
        return 2;
    } catch (const std::exception& e) {
        emit_error("internal", 1, e.what());
        return 1;
    }
}
