#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "convolt/convolt.hpp"
#include "test_util.hpp"

using namespace convolt;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Result run(const std::string& args, const fs::path& scratch) {
    const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd = std::string(CONVOLT_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Small, fast dataset shared by the tests in this file.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        tmp = new testutil::TempDir("cli");
        std::ofstream(tmp->path / "synth.json")
            << R"({"dims":[24,24,24],"radius_min":5,"radius_max":7,"cases":30,"seed":5})";
        const auto r = run("synth --config " + (tmp->path / "synth.json").string() + " --out " +
                               (tmp->path / "data").string(),
                           tmp->path);
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete tmp;
        tmp = nullptr;
    }
    static fs::path path(const std::string& name) { return tmp->path / name; }
    static Result cli(const std::string& args) { return run(args, tmp->path); }

    static testutil::TempDir* tmp;
};

testutil::TempDir* CliTest::tmp = nullptr;

} // namespace

TEST_F(CliTest, HelpListsDefaults) {
    const auto ev = cli("evaluate --help");
    EXPECT_EQ(ev.code, 0);
    for (const char* s : {"--alpha", "0.1", "--k", "50", "--cqr-lambda", "0.01", "--repeats", "100", "0.4",
                          "0.2", "--seed"})
        EXPECT_NE(ev.out.find(s), std::string::npos) << s;
    EXPECT_NE(cli("--help").out.find("--jobs"), std::string::npos);
    const auto sy = cli("synth --help");
    EXPECT_NE(sy.out.find("--shells"), std::string::npos);
    EXPECT_NE(sy.out.find("5"), std::string::npos);
}

TEST_F(CliTest, SynthWritesManifestAndIsIdempotent) {
    const auto idx = synth::open_dataset(path("data"));
    EXPECT_EQ(idx.size(), 30u);
    EXPECT_EQ(idx.config.seed, 5u);
    const auto again = cli("synth --config " + path("synth.json").string() + " --out " + path("data2").string());
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(slurp(path("data") / "manifest.json"), slurp(path("data2") / "manifest.json"));
    EXPECT_EQ(slurp(path("data") / "case_0007" / "u_est.raw"), slurp(path("data2") / "case_0007" / "u_est.raw"));
}

TEST_F(CliTest, FlagsOverrideConfig) {
    const auto r = cli("synth --config " + path("synth.json").string() + " --cases 2 --seed 9 --out " +
                       path("data3").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto idx = synth::open_dataset(path("data3"));
    EXPECT_EQ(idx.size(), 2u);
    EXPECT_EQ(idx.config.seed, 9u);
    EXPECT_EQ(idx.config.dims[0], 24u);
}

TEST_F(CliTest, EvaluateMatchesInProcessAndFeaturesRoute) {
    const std::string common = " --repeats 5 --k 5 --splits 0.4,0.4,0.2 --seed 3";
    auto r = cli("evaluate --dataset " + path("data").string() + common + " --out " + path("ev1").string());
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli("features --dataset " + path("data").string() + " --out " + path("f.csv").string());
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli("evaluate --features " + path("f.csv").string() + common + " --out " + path("ev2").string());
    ASSERT_EQ(r.code, 0) << r.err;

    eval::ExperimentConfig cfg;
    cfg.repeats = 5;
    cfg.calibration.lcp_k = 5;
    cfg.seed = 3;
    const auto recs = dataset_records(path("data"), RecordOptions::for_mode(LabelMode::Global));
    eval::write_report_json(path("inproc.json"), eval::run_experiment(recs, cfg));

    const auto a = slurp(path("ev1") / "report.json");
    EXPECT_EQ(a, slurp(path("ev2") / "report.json"));
    EXPECT_EQ(a, slurp(path("inproc.json")));
    EXPECT_TRUE(fs::exists(path("ev1") / "tables.csv"));
}

TEST_F(CliTest, EvaluateConfigFileAndJobs) {
    std::ofstream(path("exp.json")) << R"({"repeats":4,"methods":["SCP","ConVOLT"],"seed":2})";
    auto r = cli("--jobs 2 evaluate --dataset " + path("data").string() + " --config " + path("exp.json").string() +
                 " --out " + path("ev3").string());
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli("evaluate --jobs 1 --dataset " + path("data").string() + " --config " + path("exp.json").string() +
            " --out " + path("ev4").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("ev3") / "report.json"), slurp(path("ev4") / "report.json"));
    const auto j = nlohmann::ordered_json::parse(slurp(path("ev3") / "report.json"));
    EXPECT_EQ(j["config"]["repeats"], 4);
    EXPECT_EQ(j["summaries"].size(), 2u);
    r = cli("evaluate --dataset " + path("data").string() + " --config " + path("exp.json").string() +
            " --repeats 2 --out " + path("ev5").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(nlohmann::ordered_json::parse(slurp(path("ev5") / "report.json"))["config"]["repeats"], 2);
}

TEST_F(CliTest, CalibrateAndPredict) {
    auto recs = dataset_records(path("data"), RecordOptions::for_mode(LabelMode::Global));
    std::vector<CaseRecord> train(recs.begin(), recs.begin() + 15), cal(recs.begin() + 15, recs.end());
    write_features_csv(path("train.csv"), train);
    write_features_csv(path("cal.csv"), cal);
    auto r = cli("calibrate --train " + path("train.csv").string() + " --cal " + path("cal.csv").string() +
                 " --method ConVOLT --out " + path("model.json").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("q_hat=", 0), 0u);
    const auto p = calibrate(Method::ConVOLT, train, cal, 0.1);
    EXPECT_EQ(r.out, "q_hat=" + csv::format_double(*p.q_hat) + "\n");

    r = cli("predict --model " + path("model.json").string() + " --features " + path("cal.csv").string() +
            " --out " + path("iv.csv").string());
    ASSERT_EQ(r.code, 0) << r.err;
    write_intervals_csv(path("iv_ref.csv"), p, cal);
    EXPECT_EQ(slurp(path("iv.csv")), slurp(path("iv_ref.csv")));
}

TEST_F(CliTest, MissingTargetsExitOne) {
    auto recs = dataset_records(path("data"), RecordOptions::for_mode(LabelMode::Global));
    for (auto& r : recs) r.y_true.reset();
    write_features_csv(path("unlabelled.csv"), recs);
    const auto r = cli("calibrate --method SCP --cal " + path("unlabelled.csv").string() + " --out " +
                       path("m.json").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("targets required for calibration"), std::string::npos) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliTest, ExitCodes) {
    EXPECT_EQ(cli("evaluate --dataset " + path("nowhere").string() + " --out " + path("x").string()).code, 2);
    EXPECT_EQ(cli("predict --model " + path("none.json").string() + " --features a --out b").code, 2);
    EXPECT_EQ(cli("evaluate --bogus-flag").code, 1);
    EXPECT_EQ(cli("").code, 1);
    EXPECT_EQ(cli("evaluate --dataset " + path("data").string() + " --alpha 1.5 --out " + path("x").string()).code,
              1);
    EXPECT_EQ(cli("evaluate --dataset " + path("data").string() + " --methods Nope --out " + path("x").string()).code,
              1);
    EXPECT_EQ(cli("synth --preset nope --out " + path("x").string()).code, 1);
}

TEST_F(CliTest, AblateAndCoefficients) {
    auto r = cli("ablate --dataset " + path("data").string() + " --repeats 3 --out " + path("ab").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::ordered_json::parse(slurp(path("ab") / "report.json"));
    EXPECT_EQ(j["summaries"].size(), 4u);
    EXPECT_EQ(j["summaries"][0]["method"], "ConVOLT");
    r = cli("features --dataset " + path("data").string() + " --out " + path("fc.csv").string());
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli("coefficients --features " + path("fc.csv").string() + " --repeats 3 --out " + path("co").string());
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream is(path("co") / "coefficients.csv");
    std::string line;
    int rows = 0;
    std::getline(is, line);
    EXPECT_EQ(line, eval::kCoefficientsHeader);
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 23);
}
