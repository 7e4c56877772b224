#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "convolt/eval.hpp"
#include "test_util.hpp"

using namespace convolt;
using namespace convolt::eval;

namespace {

std::vector<CaseRecord> records(int cases, int labels, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(10.0, 40.0);
    std::vector<CaseRecord> out;
    for (int c = 0; c < cases; ++c)
        for (int l = 1; l <= labels; ++l) {
            CaseRecord r;
            r.case_id = synth::case_name(c);
            r.label_id = labels == 1 ? 0 : static_cast<LabelId>(l);
            for (auto& v : r.features.values) v = nd(rng);
            r.global_features = r.features;
            r.y_hat0 = ud(rng);
            r.y_true = (1.0 + 0.05 * r.features.values[2] + 0.01 * nd(rng)) * r.y_hat0;
            out.push_back(r);
        }
    return out;
}

ExperimentConfig quick() {
    ExperimentConfig c;
    c.repeats = 20;
    c.calibration.lcp_k = 20;
    return c;
}

} // namespace

TEST(Splits, SizesDisjointAndFixedTraining) {
    std::vector<std::string> ids;
    for (int i = 0; i < 101; ++i) ids.push_back(synth::case_name(i));
    ExperimentConfig cfg;
    const auto a = eval::detail::make_split(ids, cfg, 0), b = eval::detail::make_split(ids, cfg, 1);
    EXPECT_EQ(a.train.size(), 40u);
    EXPECT_EQ(a.cal.size(), 40u);
    EXPECT_EQ(a.test.size(), 20u);
    EXPECT_EQ(a.train, b.train);
    EXPECT_NE(a.cal, b.cal);
    std::set<std::string> seen;
    for (const auto* v : {&a.train, &a.cal, &a.test})
        for (const auto& id : *v) EXPECT_TRUE(seen.insert(id).second);
    cfg.retrain = true;
    EXPECT_NE(eval::detail::make_split(ids, cfg, 0).train, eval::detail::make_split(ids, cfg, 1).train);
    cfg.train_fraction = 0.9;
    EXPECT_THROW(cfg.validate(), ValidationError);
    EXPECT_THROW(eval::detail::make_split({"a", "b", "c"}, ExperimentConfig{}, 0), ValidationError);
}

TEST(Experiment, CoverageNearNominal) {
    const auto recs = records(300, 1, 1);
    auto cfg = quick();
    cfg.repeats = 40;
    const auto rep = run_experiment(recs, cfg);
    for (auto m : cfg.methods) {
        const auto& s = rep.find(m);
        EXPECT_NEAR(s.coverage_mean, 0.9, 0.03) << method_name(m);
        EXPECT_EQ(s.rows.size(), 40u);
        EXPECT_EQ(s.rows[0].n_cal, 120u);
        EXPECT_EQ(s.rows[0].n_test, 60u);
    }
    EXPECT_LT(rep.find(Method::ConVOLT).width_mean, 0.8 * rep.find(Method::SCP).width_mean);
}

TEST(Experiment, RowsMatchDirectRecomputation) {
    const auto recs = records(100, 1, 2);
    auto cfg = quick();
    cfg.methods = {Method::SCP, Method::ConVOLT};
    const auto rep = run_experiment(recs, cfg);
    const auto ids = eval::detail::case_ids(recs);
    const auto units = eval::detail::make_units(recs, cfg.label_mode);
    const auto split0 = eval::detail::make_split(ids, cfg, 0);
    const auto model = fit_method(Method::ConVOLT, units[0].select(split0.train), cfg.alpha);
    for (int r : {0, 7, 19}) {
        const auto split = eval::detail::make_split(ids, cfg, r);
        const auto cal = units[0].select(split.cal), test = units[0].select(split.test);
        const auto p = conformalize(model, cal, cfg.alpha);
        double w = 0, cov = 0;
        for (const auto& t : test) {
            const auto iv = p.predict(t);
            w += iv.width();
            cov += iv.contains(*t.y_true);
            EXPECT_NEAR(iv.width(), 2 * *p.q_hat * t.y_hat0, 1e-9);
        }
        const auto& row = rep.find(Method::ConVOLT).rows[r];
        EXPECT_DOUBLE_EQ(row.width, w / test.size());
        EXPECT_DOUBLE_EQ(row.coverage, cov / test.size());
        EXPECT_EQ(row.q_hat, *p.q_hat);
    }
}

TEST(Experiment, InflationIsZeroForReferenceAndRelativeOtherwise) {
    const auto recs = records(120, 1, 3);
    auto cfg = quick();
    cfg.methods = {Method::SCP, Method::ConVOLT};
    const auto rep = run_experiment(recs, cfg);
    const auto& c = rep.find(Method::ConVOLT);
    const auto& s = rep.find(Method::SCP);
    EXPECT_EQ(*c.inflation_mean, 0.0);
    for (std::size_t r = 0; r < s.rows.size(); ++r)
        EXPECT_NEAR(*s.rows[r].inflation, (s.rows[r].width / c.rows[r].width - 1) * 100, 1e-9);
}

TEST(Experiment, DeterministicAcrossJobCounts) {
    const auto recs = records(80, 1, 4);
    auto cfg = quick();
    const auto a = run_experiment(recs, cfg);
    cfg.jobs = 3;
    const auto b = run_experiment(recs, cfg);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Experiment, AggregatedShellsCoverage) {
    const auto recs = records(200, 5, 5);
    auto cfg = quick();
    cfg.label_mode = LabelMode::Shells;
    cfg.methods = {Method::SCP, Method::ConVOLT, Method::GlobalFeatures};
    cfg.aggregators = {Aggregator::max(), Aggregator::quantile(0.9)};
    const auto rep = run_experiment(recs, cfg);
    EXPECT_EQ(rep.summaries.size(), 6u);
    for (const char* agg : {"max", "q0.9"}) {
        const auto& s = rep.find(Method::ConVOLT, agg);
        EXPECT_NEAR(s.coverage_mean, 0.9, 0.05) << agg;
        EXPECT_EQ(s.rows[0].n_test, 40u * 5);
    }
    cfg.methods = {Method::LCP};
    EXPECT_THROW(run_experiment(recs, cfg), ValidationError);
    cfg.label_mode = LabelMode::Global;
    cfg.methods = {Method::GlobalFeatures};
    cfg.aggregators.clear();
    EXPECT_THROW(run_experiment(recs, cfg), ValidationError);
}

TEST(Experiment, PerLabelUnits) {
    const auto recs = records(150, 3, 6);
    auto cfg = quick();
    cfg.label_mode = LabelMode::PerLabel;
    cfg.methods = {Method::ConVOLT};
    const auto rep = run_experiment(recs, cfg);
    for (const char* l : {"1", "2", "3"}) EXPECT_NO_THROW(rep.find(Method::ConVOLT, "none", l));
    const auto coefs = export_coefficients(rep);
    EXPECT_EQ(coefs.size(), 3 * kFeatureCount);
    // The generating feature ranks first in every label.
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(coefs[l * kFeatureCount].feature, kFeatureNames[2]);
    for (std::size_t i = 1; i < kFeatureCount; ++i) EXPECT_GE(coefs[i - 1].mean, coefs[i].mean);
}

TEST(Experiment, OracleUsesAllCases) {
    const auto recs = records(100, 1, 7);
    auto cfg = quick();
    cfg.methods = {Method::ConVOLT, Method::Oracle};
    const auto rep = run_experiment(recs, cfg);
    EXPECT_NEAR(rep.find(Method::Oracle).coverage_mean, 0.9, 0.06);
}

TEST(Ablations, VariantSet) {
    const auto recs = records(100, 1, 8);
    auto cfg = quick();
    const auto rep = run_ablations(recs, cfg, false);
    EXPECT_EQ(rep.summaries.size(), 4u);
    EXPECT_GT(*rep.find(Method::NoLearning).inflation_mean, 0.0);
    EXPECT_THROW(run_ablations(recs, cfg, true), ValidationError);
}

TEST(Outputs, FilesHaveContractHeaders) {
    testutil::TempDir tmp("eval_out");
    const auto recs = records(60, 1, 9);
    auto cfg = quick();
    cfg.repeats = 3;
    const auto rep = run_experiment(recs, cfg);
    write_report_json(tmp.path / "r.json", rep);
    write_tables_csv(tmp.path / "t.csv", rep);
    write_coefficients_csv(tmp.path / "c.csv", export_coefficients(rep));
    std::ifstream rj(tmp.path / "r.json");
    const auto j = nlohmann::ordered_json::parse(rj);
    EXPECT_EQ(j["format"], "convolt-report");
    EXPECT_EQ(j["summaries"].size(), 4u);
    EXPECT_EQ(j["summaries"][0]["repeats"].size(), 3u);
    for (auto [file, header] : {std::pair{"t.csv", kTablesHeader}, std::pair{"c.csv", kCoefficientsHeader}}) {
        std::ifstream is(tmp.path / file);
        std::string line;
        std::getline(is, line);
        EXPECT_EQ(line, header);
    }
}

TEST(Summaries, InfiniteQuantilesReported) {
    const auto recs = records(20, 1, 10);
    auto cfg = quick();
    cfg.methods = {Method::SCP};
    cfg.train_fraction = 0.5;
    cfg.cal_fraction = 0.2;
    cfg.test_fraction = 0.3;
    const auto rep = run_experiment(recs, cfg);
    const auto& s = rep.find(Method::SCP);
    EXPECT_TRUE(std::isinf(s.width_mean));
    EXPECT_EQ(s.coverage_mean, 1.0);
    EXPECT_EQ(s.infinite, 20 * 6);
    EXPECT_EQ(to_json(rep)["summaries"][0]["width_mean_ml"], "inf");
}
