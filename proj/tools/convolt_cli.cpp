// convolt: synthetic data, features, calibration, prediction and evaluation.
//
// Exit codes: 0 success, 1 invalid input, 2 file or format problem.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "convolt/convolt.hpp"

namespace fs = std::filesystem;
using namespace convolt;
using json = nlohmann::ordered_json;

namespace {

json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": malformed JSON: " + e.what());
    }
}

RegionMode parse_region(const std::string& s) {
    if (s == "global") return RegionMode::Global;
    if (s == "restricted") return RegionMode::RegionRestricted;
    if (s == "band") return RegionMode::BoundaryBand;
    throw ValidationError("unknown region '" + s + "' (auto, global, restricted, band)");
}

BandSide parse_band_side(const std::string& s) {
    if (s == "both") return BandSide::Both;
    if (s == "inside") return BandSide::Inside;
    if (s == "outside") return BandSide::Outside;
    throw ValidationError("unknown band side '" + s + "' (both, inside, outside)");
}

bool given(const CLI::Option* o) { return o->count() > 0; }

// Feature-region flags shared by features, evaluate, ablate and coefficients.
struct RegionFlags {
    std::string mode = "global";
    std::string region = "auto";
    int band_radius = 2;
    std::string band_side = "both";

    void add(CLI::App* app) {
        app->add_option("--mode", mode, "Label mode: global, shells or per_label")->capture_default_str();
        app->add_option("--region", region, "Feature region: auto (per mode), global, restricted or band")
            ->capture_default_str();
        app->add_option("--band-radius", band_radius, "Boundary band radius in voxels")->capture_default_str();
        app->add_option("--band-side", band_side, "Boundary band side: both, inside or outside")
            ->capture_default_str();
    }

    RecordOptions options() const {
        auto o = RecordOptions::for_mode(parse_label_mode(mode));
        if (region != "auto") o.region = parse_region(region);
        if (band_radius < 1) throw ValidationError("band radius must be >= 1");
        o.band_radius = band_radius;
        o.band_side = parse_band_side(band_side);
        return o;
    }
};

// Experiment flags; values given on the command line override the config file.
struct ExperimentFlags {
    std::string config;
    double alpha = 0.1;
    int repeats = 100;
    std::vector<double> splits{0.4, 0.4, 0.2};
    std::vector<std::string> methods{"SCP", "CQR", "LCP", "ConVOLT"};
    std::vector<std::string> aggregation;
    std::uint64_t seed = 1;
    bool retrain = false;
    double ridge_lambda = 1.0;
    double cqr_lambda = 0.01;
    int lcp_k = 50;
    bool clamp = false;
    std::map<std::string, CLI::Option*> opts;

    void add(CLI::App* app, bool with_methods) {
        app->add_option("--config", config, "Experiment config JSON (flags override its values)");
        opts["alpha"] = app->add_option("--alpha", alpha, "Miscoverage level")->capture_default_str();
        opts["repeats"] = app->add_option("--repeats", repeats, "Calibration/test resplits")->capture_default_str();
        opts["splits"] = app->add_option("--splits", splits, "Train,cal,test case fractions")
                             ->expected(3)
                             ->delimiter(',')
                             ->capture_default_str();
        if (with_methods)
            opts["methods"] = app->add_option("--methods", methods, "Methods to run")
                                  ->delimiter(',')
                                  ->capture_default_str();
        opts["aggregation"] =
            app->add_option("--aggregation", aggregation, "Case-level aggregators (shells mode): max, q<level>")
                ->delimiter(',');
        opts["seed"] = app->add_option("--seed", seed, "Master seed")->capture_default_str();
        opts["retrain"] = app->add_flag("--retrain", retrain, "Redraw the training split every repeat");
        opts["ridge_lambda"] =
            app->add_option("--ridge-lambda", ridge_lambda, "ConVOLT ridge penalty")->capture_default_str();
        opts["cqr_lambda"] = app->add_option("--cqr-lambda", cqr_lambda, "CQR quantile penalty")->capture_default_str();
        opts["lcp_k"] = app->add_option("--k", lcp_k, "LCP neighbour count")->capture_default_str();
        opts["clamp_at_zero"] = app->add_flag("--clamp", clamp, "Clamp interval bounds at 0 mL");
    }

    eval::ExperimentConfig build(LabelMode mode) const {
        eval::ExperimentConfig c;
        c.label_mode = mode;
        if (!config.empty()) c = eval::config_from_json(read_json(config), c);
        const auto set = [&](const char* key) { return opts.count(key) && given(opts.at(key)); };
        if (set("alpha")) c.alpha = alpha;
        if (set("repeats")) c.repeats = repeats;
        if (set("splits")) {
            c.train_fraction = splits[0];
            c.cal_fraction = splits[1];
            c.test_fraction = splits[2];
        }
        if (set("methods")) {
            c.methods.clear();
            for (const auto& m : methods) c.methods.push_back(parse_method(m));
        }
        if (set("aggregation")) {
            c.aggregators.clear();
            for (const auto& a : aggregation) c.aggregators.push_back(Aggregator::parse(a));
        }
        if (set("seed")) c.seed = seed;
        if (set("retrain")) c.retrain = retrain;
        if (set("ridge_lambda")) c.calibration.ridge_lambda = ridge_lambda;
        if (set("cqr_lambda")) c.calibration.cqr_lambda = cqr_lambda;
        if (set("lcp_k")) c.calibration.lcp_k = lcp_k;
        if (set("clamp_at_zero")) c.calibration.clamp_at_zero = clamp;
        // The label mode comes from --mode.
        c.label_mode = mode;
        return c;
    }
};

struct Input {
    std::string dataset;
    std::string features;

    void add(CLI::App* app) {
        auto* d = app->add_option("--dataset", dataset, "Dataset directory");
        auto* f = app->add_option("--features", features, "features.csv instead of a dataset");
        d->excludes(f);
    }

    std::vector<CaseRecord> load(const RecordOptions& opt, unsigned jobs) const {
        if (!features.empty()) return read_features_csv(features);
        if (dataset.empty()) throw ValidationError("one of --dataset or --features is required");
        return dataset_records(dataset, opt, jobs);
    }
};

void write_report(const fs::path& out, const eval::Report& rep) {
    fs::create_directories(out);
    eval::write_report_json(out / "report.json", rep);
    eval::write_tables_csv(out / "tables.csv", rep);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Volume intervals for registration-based segmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    unsigned jobs = 1;
    app.add_option("--jobs", jobs, "Worker threads (0 = all cores)")->capture_default_str();

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
    std::string synth_out, synth_config, preset = "default", layout, driver;
    auto sc = synth::SynthConfig{};
    synth_cmd->add_option("--out", synth_out, "Output dataset directory")->required();
    synth_cmd->add_option("--config", synth_config, "Generator config JSON (flags override its values)");
    synth_cmd->add_option("--preset", preset, "Base config: default or single_driver")->capture_default_str();
    auto* o_cases = synth_cmd->add_option("--cases", sc.cases, "Number of cases")->capture_default_str();
    auto* o_seed = synth_cmd->add_option("--seed", sc.seed, "Master seed")->capture_default_str();
    auto* o_gamma = synth_cmd->add_option("--gamma", sc.gamma, "Error coupling to the driver")->capture_default_str();
    auto* o_a0 = synth_cmd->add_option("--a0", sc.a0, "Baseline strain amplitude")->capture_default_str();
    auto* o_shells = synth_cmd->add_option("--shells", sc.shells, "Shell count L (shells layout)")->capture_default_str();
    auto* o_blobs = synth_cmd->add_option("--blobs", sc.blobs, "Blob count (blobs layout)")->capture_default_str();
    auto* o_layout = synth_cmd->add_option("--layout", layout, "ball, shells or blobs (default ball)");
    auto* o_driver = synth_cmd->add_option("--driver", driver, "logj_std or curl_mean (default logj_std)");

    // features
    auto* feat_cmd = app.add_subcommand("features", "Extract features.csv from a dataset");
    std::string feat_dataset, feat_out;
    RegionFlags feat_region;
    feat_cmd->add_option("--dataset", feat_dataset, "Dataset directory")->required();
    feat_cmd->add_option("--out", feat_out, "Output features.csv")->required();
    feat_region.add(feat_cmd);

    // calibrate
    auto* cal_cmd = app.add_subcommand("calibrate", "Fit a method and compute its conformal quantile");
    std::string cal_train, cal_cal, cal_out, cal_method = "ConVOLT", cal_agg, cal_config;
    double cal_alpha = 0.1, cal_ridge = 1.0, cal_cqr = 0.01;
    int cal_k = 50;
    bool cal_clamp = false;
    cal_cmd->add_option("--train", cal_train, "Training features.csv (not needed for SCP, LCP, NoLearning)");
    cal_cmd->add_option("--cal", cal_cal, "Calibration features.csv")->required();
    cal_cmd->add_option("--out", cal_out, "Output model.json")->required();
    cal_cmd->add_option("--method", cal_method, "Method")->capture_default_str();
    cal_cmd->add_option("--config", cal_config, "Experiment config JSON for alpha and penalties");
    auto* c_alpha = cal_cmd->add_option("--alpha", cal_alpha, "Miscoverage level")->capture_default_str();
    auto* c_ridge = cal_cmd->add_option("--ridge-lambda", cal_ridge, "ConVOLT ridge penalty")->capture_default_str();
    auto* c_cqr = cal_cmd->add_option("--cqr-lambda", cal_cqr, "CQR quantile penalty")->capture_default_str();
    auto* c_k = cal_cmd->add_option("--k", cal_k, "LCP neighbour count")->capture_default_str();
    auto* c_agg = cal_cmd->add_option("--aggregation", cal_agg, "Case-level aggregator: max or q<level>");
    auto* c_clamp = cal_cmd->add_flag("--clamp", cal_clamp, "Clamp interval bounds at 0 mL");

    // predict
    auto* pred_cmd = app.add_subcommand("predict", "Write intervals.csv for a features file");
    std::string pred_model, pred_features, pred_out;
    pred_cmd->add_option("--model", pred_model, "model.json from calibrate")->required();
    pred_cmd->add_option("--features", pred_features, "features.csv")->required();
    pred_cmd->add_option("--out", pred_out, "Output intervals.csv")->required();

    // evaluate, ablate, coefficients
    struct ExperimentCmd {
        CLI::App* app;
        Input input;
        RegionFlags region;
        ExperimentFlags flags;
        std::string out;
    };
    ExperimentCmd ev{app.add_subcommand("evaluate", "Repeated split-conformal evaluation"), {}, {}, {}, {}};
    ExperimentCmd ab{app.add_subcommand("ablate", "ConVOLT against its ablation variants"), {}, {}, {}, {}};
    ExperimentCmd co{app.add_subcommand("coefficients", "Per-label ConVOLT coefficient magnitudes"), {}, {}, {}, {}};
    bool fixed_training = false;
    for (auto* c : {&ev, &ab, &co}) {
        c->input.add(c->app);
        c->region.add(c->app);
        c->flags.add(c->app, c == &ev);
        c->app->add_option("--out", c->out, "Output directory")->required();
    }
    co.app->add_flag("--fixed-training", fixed_training, "Fit once instead of once per repeat");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth_cmd) {
            synth::SynthConfig cfg = preset == "single_driver" ? synth::single_driver_config()
                                     : preset == "default"     ? synth::SynthConfig{}
                                                               : throw ValidationError("unknown preset '" + preset + "'");
            if (!synth_config.empty()) cfg = synth::config_from_json(read_json(synth_config), cfg);
            if (given(o_cases)) cfg.cases = sc.cases;
            if (given(o_seed)) cfg.seed = sc.seed;
            if (given(o_gamma)) cfg.gamma = sc.gamma;
            if (given(o_a0)) cfg.a0 = sc.a0;
            if (given(o_shells)) cfg.shells = sc.shells;
            if (given(o_blobs)) cfg.blobs = sc.blobs;
            if (given(o_layout)) cfg.layout = synth::parse_layout(layout);
            if (given(o_driver)) cfg.driver = synth::parse_driver(driver);
            cfg.validate();
            synth::generate_dataset(cfg, synth_out, jobs);
            std::cout << "wrote " << cfg.cases << " cases to " << synth_out << '\n';
        } else if (*feat_cmd) {
            const auto recs = dataset_records(feat_dataset, feat_region.options(), jobs);
            write_features_csv(feat_out, recs);
            std::cout << "wrote " << recs.size() << " records to " << feat_out << '\n';
        } else if (*cal_cmd) {
            eval::ExperimentConfig base;
            if (!cal_config.empty()) base = eval::config_from_json(read_json(cal_config), base);
            CalibrationOptions opt = base.calibration;
            double alpha = base.alpha;
            if (given(c_alpha)) alpha = cal_alpha;
            if (given(c_ridge)) opt.ridge_lambda = cal_ridge;
            if (given(c_cqr)) opt.cqr_lambda = cal_cqr;
            if (given(c_k)) opt.lcp_k = cal_k;
            if (given(c_clamp)) opt.clamp_at_zero = cal_clamp;
            if (given(c_agg)) opt.aggregator = Aggregator::parse(cal_agg);
            else if (!base.aggregators.empty()) opt.aggregator = base.aggregators.front();
            const Method method = parse_method(cal_method);
            const auto cal = read_features_csv(cal_cal);
            std::vector<CaseRecord> train;
            if (!cal_train.empty()) train = read_features_csv(cal_train);
            const auto p = calibrate(method, train, cal, alpha, opt);
            eval::write_text(cal_out, to_json(p).dump(2) + "\n");
            if (p.q_hat) std::cout << "q_hat=" << csv::format_double(*p.q_hat) << '\n';
            else std::cout << "q_hat=local (LCP, k=" << p.lcp_k << ")\n";
        } else if (*pred_cmd) {
            const auto p = predictor_from_json(read_json(pred_model));
            const auto recs = read_features_csv(pred_features);
            write_intervals_csv(pred_out, p, recs);
            std::cout << "wrote " << recs.size() << " intervals to " << pred_out << '\n';
        } else {
            for (auto* c : {&ev, &ab, &co}) {
                if (!*c->app) continue;
                const auto ropt = c->region.options();
                auto cfg = c->flags.build(ropt.mode);
                cfg.jobs = jobs;
                const auto recs = c->input.load(ropt, jobs);
                if (c == &ev) {
                    write_report(c->out, eval::run_experiment(recs, cfg));
                } else if (c == &ab) {
                    const bool global = ropt.mode == LabelMode::Shells &&
                                        std::all_of(recs.begin(), recs.end(),
                                                    [](const CaseRecord& r) { return r.global_features.has_value(); });
                    write_report(c->out, eval::run_ablations(recs, cfg, global));
                } else {
                    cfg.methods = {Method::ConVOLT};
                    cfg.retrain = !fixed_training;
                    const auto rep = eval::run_experiment(recs, cfg);
                    write_report(c->out, rep);
                    eval::write_coefficients_csv(fs::path(c->out) / "coefficients.csv", eval::export_coefficients(rep));
                }
                std::cout << "wrote " << (fs::path(c->out) / "report.json").string() << '\n';
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
