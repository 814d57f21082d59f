// SPDX-License-Identifier: Apache-2.0
//
// Studies as report files: each run returns the CSVs, a summary.json with
// the config echo, sub-stream seeds and acceptance checks, and the
// config.json that reproduces it. `evaluate_summary` re-derives the checks
// from a summary alone.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modlora/bench.hpp"
#include "modlora/config.hpp"
#include "modlora/weight_store.hpp"

namespace modlora {

/// file name -> contents, written in name order.
using ReportFiles = std::map<std::string, std::string>;

inline void write_report_files(const ReportFiles& files, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    for (const auto& [name, bytes] : files) write_file_atomic(dir / name, bytes);
}

inline nlohmann::json seeds_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"pretrain", stream_seed(c, Stream::Pretrain)},
            {"align", stream_seed(c, Stream::Align)},
            {"finetune", stream_seed(c, Stream::Finetune)},
            {"eval", stream_seed(c, Stream::Eval)},
            {"data", stream_seed(c, Stream::Data)},
            {"amplify", stream_seed(c, Stream::Amplify)}};
}

inline nlohmann::json checks_json(const std::vector<Check>& checks) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : checks) j.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    return j;
}

inline nlohmann::json summary_head(const Lab& lab, const std::string& study) {
    return {{"study", study}, {"config", to_json(lab.cfg)}, {"seeds", seeds_json(lab.cfg)}};
}

inline ReportFiles finish_files(const Lab& lab, nlohmann::json summary, ReportFiles files) {
    files["summary.json"] = summary.dump(2) + "\n";
    files["config.json"] = dump_config(lab.cfg);
    return files;
}

// --- pipelines --------------------------------------------------------------

struct PipelinesStudy {
    ExperimentReport full_full, lora_lora, modular;
    LoraAdapter lora_lora_adapter;  // ΔW_ft of the standard pipeline
    std::vector<Check> checks;
    ReportFiles files;
};

inline PipelinesStudy pipelines_study(Lab& lab) {
    const DenoiserParams base = pretrain(lab);
    const SafeArtifact safe_lora = align(lab, base, TrainMode::Lora);
    const SafeArtifact safe_full = align(lab, base, TrainMode::Full);
    const Matrix data = finetune_dataset(lab, lab.cfg.finetune.dataset_size);

    PipelinesStudy st;
    st.full_full = run_pipeline(lab, base, safe_full, PipelineKind::FullFull, data).report;
    PipelineRun ll = run_pipeline(lab, base, safe_lora, PipelineKind::LoraLora, data);
    st.lora_lora = std::move(ll.report);
    st.lora_lora_adapter = *ll.result.adapter;
    st.modular = run_pipeline(lab, base, safe_lora, PipelineKind::Modular, data).report;

    const auto& t = lab.cfg.thresholds;
    st.checks = {check_jailbreak(st.lora_lora, st.modular, t), check_ordering(st.full_full, st.lora_lora, st.modular),
                 check_utility(st.lora_lora, st.modular, t)};

    nlohmann::json s = summary_head(lab, "pipelines");
    ReportFiles files;
    for (const ExperimentReport* r : {&st.full_full, &st.lora_lora, &st.modular}) {
        s["reports"][r->name] = r->summary();
        files[r->name + ".csv"] = r->csv();
    }
    // Observational only: explicit unsafe-rate of each safety artifact before any fine-tuning.
    s["before_finetune"] = {{"lora", st.lora_lora.series(kExplicit).front().unsafe_rate},
                            {"full", st.full_full.series(kExplicit).front().unsafe_rate}};
    s["checks"] = checks_json(st.checks);
    st.files = finish_files(lab, std::move(s), std::move(files));
    return st;
}

// --- negation ---------------------------------------------------------------

struct NegationStudy {
    NegationReport report;
    Check check;
    ReportFiles files;
};

/// `ft` defaults to the standard pipeline's adapter, retrained here without
/// eval hooks (hooks do not touch the training streams, so it is the same
/// adapter the pipelines study produces).
inline NegationStudy negation_study_run(Lab& lab, std::optional<LoraAdapter> ft = std::nullopt) {
    const DenoiserParams base = pretrain(lab);
    const SafeArtifact safe = align(lab, base, TrainMode::Lora);
    const Matrix data = finetune_dataset(lab, lab.cfg.finetune.dataset_size);
    if (!ft) {
        FinetuneConfig fc = finetune_config(lab, PipelineKind::LoraLora);
        fc.eval_every = 0;
        ft = *finetune_train(base, safe, PipelineKind::LoraLora, lab.schedule, data, fc).adapter;
    }
    NegationStudy st;
    st.report = negation_study(lab, base, *safe.adapter, *ft, data);
    st.check = check_negation(st.report);
    nlohmann::json s = summary_head(lab, "negation");
    s["rows"] = st.report.to_json();
    s["checks"] = checks_json({st.check});
    st.files = finish_files(lab, std::move(s), {});
    return st;
}

// --- sweep ------------------------------------------------------------------

struct SweepStudy {
    SweepReport report;
    Check check;
    ReportFiles files;
};

inline SweepStudy sweep_study(Lab& lab) {
    SweepStudy st;
    st.report = sample_count_sweep(lab, PipelineKind::LoraLora, lab.cfg.sweep.sizes);
    st.check = check_sweep(st.report, lab.cfg.thresholds);
    nlohmann::json s = summary_head(lab, "sweep");
    s["sweep"] = st.report.to_json();
    ReportFiles files;
    for (const auto& c : st.report.cells) {
        files[c.report.name + ".csv"] = c.report.csv();
        s["reports"][c.report.name] = c.report.summary();
    }
    s["checks"] = checks_json({st.check});
    st.files = finish_files(lab, std::move(s), std::move(files));
    return st;
}

// --- amplification ----------------------------------------------------------

struct AmplifyStudy {
    AmplifyReport report;
    Check check;
    ReportFiles files;
};

inline AmplifyStudy amplify_study(Lab& lab) {
    const DenoiserParams base = pretrain(lab);
    const SafeArtifact safe = align(lab, base, TrainMode::Lora);
    AmplifyStudy st;
    st.report = amplification_study(lab, base, safe);
    st.check = check_amplify(st.report);
    nlohmann::json s = summary_head(lab, "amplify");
    s["rows"] = st.report.to_json();
    s["checks"] = checks_json({st.check});
    st.files = finish_files(lab, std::move(s), {});
    return st;
}

// --- re-evaluation from a summary ---------------------------------------------

namespace detail {

inline ExperimentReport report_from_summary(const std::string& name, const nlohmann::json& j) {
    ExperimentReport r;
    r.name = name;
    for (const char* c : {kExplicit, kNuanced}) {
        if (!j.contains(c)) continue;
        for (const auto& e : j.at(c).at("trace")) {
            r.records.push_back({e.at(0).get<std::size_t>(), c, e.at(1).get<double>(), e.at(2).get<double>(), 0.0});
        }
    }
    return r;
}

template <class Row>
std::vector<Row> rows_from_summary(const nlohmann::json& j) {
    std::vector<Row> rows;
    for (const auto& r : j.at("rows")) rows.push_back({r.at("setting"), r.at(kExplicit), r.at(kNuanced)});
    return rows;
}

}  // namespace detail

/// The study's acceptance checks recomputed from its summary.json under `t`.
inline std::vector<Check> evaluate_summary(const nlohmann::json& s, const Thresholds& t) {
    try {
        const std::string study = s.at("study");
        if (study == "finetune") throw ValidationError("a single-pipeline report has no acceptance checks");
        if (study == "pipelines") {
            const auto& reps = s.at("reports");
            auto get = [&](const char* n) { return detail::report_from_summary(n, reps.at(n)); };
            const auto ff = get("full-full"), ll = get("lora-lora"), md = get("modular");
            return {check_jailbreak(ll, md, t), check_ordering(ff, ll, md), check_utility(ll, md, t)};
        }
        if (study == "negation") {
            NegationReport n;
            n.rows = detail::rows_from_summary<NegationRow>(s);
            return {check_negation(n)};
        }
        if (study == "amplify") {
            AmplifyReport a;
            a.rows = detail::rows_from_summary<AmplifyRow>(s);
            return {check_amplify(a)};
        }
        if (study == "sweep") {
            SweepReport r;
            const auto& sw = s.at("sweep");
            r.pipeline = sw.at("pipeline");
            std::vector<double> xs, ys;
            for (const auto& c : sw.at("cells")) {
                SweepCell cell;
                cell.size = c.at("size");
                cell.final_rate = c.at("final_unsafe_rate");
                cell.peak_step = c.at("peak_step");
                cell.peak_rate = c.at("peak_unsafe_rate");
                xs.push_back(static_cast<double>(cell.size));
                ys.push_back(cell.final_rate);
                r.cells.push_back(std::move(cell));
            }
            if (r.cells.size() < 2) throw ValidationError("sweep summary needs at least two cells");
            r.rho = spearman(xs, ys);
            return {check_sweep(r, t)};
        }
        throw ValidationError("unknown study '" + study + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed summary: ") + e.what());
    }
}

}  // namespace modlora
