#include <gtest/gtest.h>

#include "modlora/study.hpp"
#include "tiny_config.hpp"

using namespace modlora;

namespace {

void expect_same_checks(const std::vector<Check>& a, const std::vector<Check>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].pass, b[i].pass);
        EXPECT_EQ(a[i].detail, b[i].detail);
    }
}

nlohmann::json summary_of(const ReportFiles& f) { return nlohmann::json::parse(f.at("summary.json")); }

}  // namespace

TEST(Study, PipelinesFilesAreByteIdenticalColdAndWarm) {
    const RunConfig c = tiny_config("study_pipes");
    Lab cold = make_lab(c);
    const PipelinesStudy a = pipelines_study(cold);
    Lab warm = make_lab(c);
    const PipelinesStudy b = pipelines_study(warm);
    EXPECT_EQ(warm.cache.misses, 0u);
    EXPECT_EQ(a.files, b.files);
    for (const char* f : {"full-full.csv", "lora-lora.csv", "modular.csv", "summary.json", "config.json"}) {
        EXPECT_TRUE(a.files.count(f)) << f;
    }
    expect_same_checks(evaluate_summary(summary_of(a.files), c.thresholds), a.checks);
    const auto s = summary_of(a.files);
    EXPECT_EQ(s["seeds"]["eval"], stream_seed(c, Stream::Eval));
    EXPECT_TRUE(s.contains("before_finetune"));
}

TEST(Study, ConfigEchoReproducesTheRun) {
    const RunConfig c = tiny_config("study_echo");
    Lab lab = make_lab(c);
    const auto first = amplify_study(lab);
    const RunConfig echoed = config_from_json(nlohmann::json::parse(first.files.at("config.json")));
    Lab again = make_lab(echoed);
    EXPECT_EQ(amplify_study(again).files, first.files);
}

TEST(Study, NegationRetrainsTheStandardAdapterExactly) {
    const RunConfig c = tiny_config("study_neg");
    Lab lab = make_lab(c);
    const PipelinesStudy p = pipelines_study(lab);
    const NegationStudy with = negation_study_run(lab, p.lora_lora_adapter);
    const NegationStudy without = negation_study_run(lab);
    EXPECT_EQ(with.files, without.files);
    expect_same_checks(evaluate_summary(summary_of(with.files), c.thresholds), {with.check});
}

TEST(Study, SweepAndAmplifySummariesReEvaluate) {
    const RunConfig c = tiny_config("study_sweep");
    Lab lab = make_lab(c);
    const SweepStudy s = sweep_study(lab);
    expect_same_checks(evaluate_summary(summary_of(s.files), c.thresholds), {s.check});
    EXPECT_TRUE(s.files.count("lora-lora-n5.csv"));
    const AmplifyStudy a = amplify_study(lab);
    expect_same_checks(evaluate_summary(summary_of(a.files), c.thresholds), {a.check});
}

TEST(Study, WritesFilesAtomically) {
    const auto dir = std::filesystem::temp_directory_path() / "modlora_study_write";
    std::filesystem::remove_all(dir);
    write_report_files({{"a.csv", "x\n"}, {"b.json", "{}\n"}}, dir);
    EXPECT_EQ(read_file_bytes(dir / "a.csv"), "x\n");
    EXPECT_FALSE(std::filesystem::exists(dir / "a.csv.tmp"));
}

TEST(Study, MalformedSummariesAreValidationErrors) {
    const Thresholds t;
    EXPECT_THROW(evaluate_summary(nlohmann::json::object(), t), ValidationError);
    EXPECT_THROW(evaluate_summary({{"study", "pipelines"}}, t), ValidationError);
    EXPECT_THROW(evaluate_summary({{"study", "other"}}, t), ValidationError);
    EXPECT_THROW(evaluate_summary({{"study", "finetune"}}, t), ValidationError);
    EXPECT_THROW(evaluate_summary({{"study", "negation"}, {"rows", {{{"setting", "W0"}}}}}, t), ValidationError);
}
