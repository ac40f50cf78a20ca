#include "advbench/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "advbench/attack.hpp"
#include "advbench/dataset.hpp"
#include "advbench/harness.hpp"
#include "advbench/model.hpp"

namespace advbench {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

GenerateConfig config_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    is >> j;
    GenerateConfig cfg = default_generate_config(2000, 0);
    if (j.contains("n_samples")) cfg.n_samples = j.at("n_samples").get<std::size_t>();
    if (j.contains("noise_sigma")) cfg.noise_sigma = j.at("noise_sigma").get<float>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("label_names")) {
        auto names = j.at("label_names").get<std::vector<std::string>>();
        if (names.size() != kNumLabels) {
            throw std::invalid_argument("label_names must carry 18 entries");
        }
        std::copy(names.begin(), names.end(), cfg.label_space.names.begin());
    }
    if (j.contains("first_label_prior")) {
        auto prior = j.at("first_label_prior").get<std::vector<float>>();
        if (prior.size() != kNumLabels) {
            throw std::invalid_argument("first_label_prior must carry 18 entries");
        }
        std::copy(prior.begin(), prior.end(), cfg.first_label_prior.begin());
    }
    if (j.contains("affinity")) {
        auto rows = j.at("affinity").get<std::vector<std::vector<float>>>();
        if (rows.size() != kNumLabels) throw std::invalid_argument("affinity must be 18x18");
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            if (rows[i].size() != kNumLabels) {
                throw std::invalid_argument("affinity must be 18x18");
            }
            std::copy(rows[i].begin(), rows[i].end(), cfg.affinity[i].begin());
        }
    } else if (j.contains("affinity_pairs")) {
        for (auto& row : cfg.affinity) row.fill(0.f);
        for (const auto& p : j.at("affinity_pairs")) {
            std::size_t a = p.at(0).get<std::size_t>();
            std::size_t b = p.at(1).get<std::size_t>();
            float v = p.at(2).get<float>();
            if (a >= kNumLabels || b >= kNumLabels || a == b) {
                throw std::invalid_argument("affinity_pairs entries must be distinct labels");
            }
            cfg.affinity[a][b] = v;
            cfg.affinity[b][a] = v;
        }
    }
    return cfg;
}

struct GenDataArgs {
    std::string config, out, cooc_out, counts_out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> samples;
    std::optional<float> noise;
};

struct TrainArgs {
    std::string data, arch = "cnn-small", out, val_data;
    std::size_t epochs = 10, batch = 64;
    float lr = 0.05f, momentum = 0.9f, weight_decay = 0.f;
    std::uint64_t seed = 0;
};

struct AttackArgs {
    std::string model, data, eps, alpha, loss = "bce", cooc, out;
    std::size_t steps = 1, count = 0;
    bool targeted = false, random_start = false;
    std::uint64_t seed = 0;
};

struct EvalArgs {
    std::string model, adv, data, metrics = "k_robust_acc", k = "1,3", out, cooc;
    std::string reference = "truth";
};

struct PlanArgs {
    std::string plan, out;
    std::optional<int> jobs;
};

struct ReportArgs {
    std::string in, format, out, kind = "auto";
};

int do_gen_data(const GenDataArgs& a) {
    GenerateConfig cfg = a.config.empty() ? default_generate_config(2000, 0)
                                          : config_from_json_file(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (a.samples) cfg.n_samples = *a.samples;
    if (a.noise) cfg.noise_sigma = *a.noise;
    auto ds = generate_dataset(cfg);
    save_dataset(ds, a.out);
    if (!a.cooc_out.empty() || !a.counts_out.empty()) {
        auto tables = build_co_occurrence(ds);
        if (!a.counts_out.empty()) save_matrix_csv(tables.raw_counts, ds.label_space, a.counts_out);
        if (!a.cooc_out.empty()) {
            save_matrix_csv(tables.inverse_normalized, ds.label_space, a.cooc_out);
        }
    }
    return 0;
}

int do_train(const TrainArgs& a) {
    auto ds = load_dataset(a.data);
    ModelConfig mcfg;
    mcfg.arch = architecture_from_name(a.arch);
    mcfg.input_hw = ds.height();
    mcfg.seed = a.seed;
    TrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch_size = a.batch;
    tc.learning_rate = a.lr;
    tc.momentum = a.momentum;
    tc.weight_decay = a.weight_decay;
    tc.seed = a.seed;
    Model model = train(init_model(mcfg), ds, tc);
    model.provenance.dataset_id = stem_of(a.data);
    if (!a.val_data.empty()) {
        auto val = load_dataset(a.val_data);
        model.thresholds = calibrate_thresholds(model, val);
    }
    save_model(model, a.out);
    return 0;
}

int do_attack(const AttackArgs& a) {
    Model model = load_model(a.model);
    auto ds = load_dataset(a.data);
    std::size_t n = a.count == 0 ? ds.size() : std::min(a.count, ds.size());
    const std::size_t hw = ds.height() * ds.width();
    Tensor x = Tensor::zeros({n, 1, ds.height(), ds.width()});
    std::copy_n(ds.images.data.begin(), n * hw, x.data.begin());
    std::vector<GroundTruthVector> truths(ds.labels.begin(), ds.labels.begin() + n);

    AttackConfig cfg;
    cfg.epsilon = parse_ratio_float(a.eps);
    cfg.steps = a.steps;
    if (!a.alpha.empty()) cfg.alpha = parse_ratio_float(a.alpha);
    cfg.loss_kind = attack_loss_from_name(a.loss);
    cfg.targeted = a.targeted;
    cfg.random_start = a.random_start;
    cfg.seed = a.seed;
    cfg.validate();

    AdversarialBatch batch;
    if (a.targeted) {
        if (a.cooc.empty()) {
            throw std::invalid_argument("--targeted requires --cooc <inverse co-occurrence CSV>");
        }
        CoOccurrenceTables tables;
        tables.inverse_normalized = load_matrix_csv(a.cooc);
        batch = pgd_targeted_risk(model, x, tables, cfg);
    } else {
        batch = pgd_untargeted(model, x, truths, cfg);
    }
    batch.source_model_id = stem_of(a.model);
    save_adversarial(batch, a.out);
    return 0;
}

int do_eval(const EvalArgs& a) {
    std::vector<std::string> metrics = split_list(a.metrics);
    for (const auto& metric : metrics) {
        if ((metric == "mlacc" || metric == "risk") && a.cooc.empty()) {
            throw std::invalid_argument("metric `" + metric +
                                        "` requires --cooc <inverse co-occurrence CSV>");
        }
    }
    Model model = load_model(a.model);
    auto adv = load_adversarial(a.adv);
    auto ds = load_dataset(a.data);
    std::vector<std::size_t> ks;
    for (const auto& s : split_list(a.k)) ks.push_back(std::stoull(s));
    FloatMatrix cooc{};
    const FloatMatrix* cooc_ptr = nullptr;
    if (!a.cooc.empty()) {
        cooc = load_matrix_csv(a.cooc);
        cooc_ptr = &cooc;
    }
    if (a.reference != "truth" && a.reference != "clean_pred") {
        throw std::invalid_argument("--reference must be truth or clean_pred");
    }
    auto report = evaluate_adversarial(model, stem_of(a.model), adv, ds, stem_of(a.data),
                                       metrics, ks, a.reference, cooc_ptr);
    emit_report_csv(report, a.out);
    return 0;
}

int do_plan_op(const PlanArgs& a, const std::string& op) {
    ExperimentPlan plan = load_plan(a.plan);
    if (a.jobs) plan.jobs = *a.jobs;
    fs::create_directories(a.out);
    fs::path dir(a.out);
    if (op == "matrix") {
        auto report = transfer_matrix(plan);
        emit_report_csv(report, dir / "report.csv");
        emit_report_markdown(report, dir / "report.md");
        if (plan.datasets.size() > 1) {
            auto cross = cross_dataset_eval(plan);
            emit_report_csv(cross, dir / "cross.csv");
            emit_report_markdown(cross, dir / "cross.md");
        }
    } else if (op == "grid") {
        auto report = loss_metric_grid(plan);
        emit_report_csv(report, dir / "report.csv");
        emit_report_markdown(report, dir / "report.md");
        emit_correlation_csv(metric_correlation(report), dir / "correlation.csv");
    } else {
        auto report = budget_sweep(plan);
        emit_report_csv(report, dir / "report.csv");
        emit_report_markdown(report, dir / "report.md");
    }
    return 0;
}

int do_report(const ReportArgs& a) {
    auto report = load_report_csv(fs::path(a.in) / "report.csv", a.kind);
    if (a.format == "csv") {
        emit_report_csv(report, a.out);
    } else if (a.format == "md") {
        emit_report_markdown(report, a.out);
    } else {
        throw std::invalid_argument("--format must be csv or md");
    }
    return 0;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& err) {
    CLI::App app{"advbench: adversarial robustness benchmarks for multi-label classifiers"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic multi-label dataset");
    cmd_gen->add_option("--config", gen.config, "generation config JSON");
    cmd_gen->add_option("--out", gen.out, "output dataset path (.xrds)")->required();
    cmd_gen->add_option("--seed", gen.seed, "generation seed")->envname("ADVBENCH_SEED");
    cmd_gen->add_option("--samples", gen.samples, "sample count override");
    cmd_gen->add_option("--noise", gen.noise, "pixel noise sigma override");
    cmd_gen->add_option("--cooc-out", gen.cooc_out,
                        "write the normalized inverse co-occurrence matrix C (CSV)");
    cmd_gen->add_option("--counts-out", gen.counts_out, "write raw co-occurrence counts (CSV)");

    TrainArgs tr;
    auto* cmd_train = app.add_subcommand("train", "Train a model on a dataset");
    cmd_train->add_option("--data", tr.data, "training dataset (.xrds)")->required();
    cmd_train->add_option("--arch", tr.arch, "architecture: mlp-small | cnn-small")
        ->check(CLI::IsMember({"mlp-small", "cnn-small"}));
    cmd_train->add_option("--epochs", tr.epochs, "training epochs");
    cmd_train->add_option("--batch", tr.batch, "mini-batch size");
    cmd_train->add_option("--lr", tr.lr, "SGD learning rate");
    cmd_train->add_option("--momentum", tr.momentum, "SGD momentum");
    cmd_train->add_option("--weight-decay", tr.weight_decay, "L2 weight decay");
    cmd_train->add_option("--seed", tr.seed, "init/shuffle seed")->envname("ADVBENCH_SEED");
    cmd_train->add_option("--val-data", tr.val_data,
                          "validation dataset for per-label threshold calibration");
    cmd_train->add_option("--out", tr.out, "output model path (.xrmw)")->required();

    AttackArgs at;
    auto* cmd_attack = app.add_subcommand("attack", "Craft adversarial examples");
    cmd_attack->add_option("--model", at.model, "source model (.xrmw)")->required();
    cmd_attack->add_option("--data", at.data, "clean inputs dataset (.xrds)")->required();
    cmd_attack
        ->add_option("--eps", at.eps,
                     "L-inf budget on the [0,1] pixel scale; decimals or rationals "
                     "(e.g. 0.0039 or 1/255)")
        ->required();
    cmd_attack->add_option("--steps", at.steps, "PGD iteration count (1 + --alpha eps = FGSM)");
    cmd_attack->add_option("--alpha", at.alpha,
                           "per-step size on the [0,1] pixel scale (default eps*2.5/steps)");
    cmd_attack->add_option("--loss", at.loss, "attack loss: mse | bce | ol")
        ->check(CLI::IsMember({"mse", "bce", "ol"}));
    cmd_attack->add_flag("--targeted", at.targeted,
                         "risk-targeted attack toward the improbable-label row of C");
    cmd_attack->add_option("--cooc", at.cooc, "inverse co-occurrence CSV (targeted attacks)");
    cmd_attack->add_flag("--random-start", at.random_start, "uniform start inside the eps ball");
    cmd_attack->add_option("--count", at.count, "attack only the first N inputs (0 = all)");
    cmd_attack->add_option("--seed", at.seed, "attack seed")->envname("ADVBENCH_SEED");
    cmd_attack->add_option("--out", at.out, "output adversarial batch (.xrds + manifest)")
        ->required();

    EvalArgs ev;
    auto* cmd_eval = app.add_subcommand("eval", "Score an adversarial batch against a model");
    cmd_eval->add_option("--model", ev.model, "target model (.xrmw)")->required();
    cmd_eval->add_option("--adv", ev.adv, "adversarial batch (.xrds)")->required();
    cmd_eval->add_option("--data", ev.data, "dataset carrying the ground truth")->required();
    cmd_eval->add_option("--metrics", ev.metrics,
                         "comma list: k_robust_acc,auc,mse,bce,ol,mlacc,risk");
    cmd_eval->add_option("--k", ev.k, "comma list of k values for k_robust_acc");
    cmd_eval->add_option("--cooc", ev.cooc, "inverse co-occurrence CSV (mlacc/risk)");
    cmd_eval->add_option("--reference", ev.reference,
                         "error-metric reference: truth | clean_pred");
    cmd_eval->add_option("--out", ev.out, "output CSV")->required();

    PlanArgs matrix_args, grid_args, sweep_args;
    auto* cmd_matrix =
        app.add_subcommand("matrix", "Transfer matrix (and cross-dataset grid when the plan "
                                     "lists several datasets)");
    cmd_matrix->add_option("--plan", matrix_args.plan, "experiment plan JSON")->required();
    cmd_matrix->add_option("--out", matrix_args.out, "output directory")->required();
    cmd_matrix->add_option("--jobs", matrix_args.jobs, "parallel cells (default from plan)");

    auto* cmd_grid = app.add_subcommand("grid", "Targeted loss x metric grid");
    cmd_grid->add_option("--plan", grid_args.plan, "experiment plan JSON")->required();
    cmd_grid->add_option("--out", grid_args.out, "output directory")->required();
    cmd_grid->add_option("--jobs", grid_args.jobs, "parallel cells (default from plan)");

    auto* cmd_sweep = app.add_subcommand("sweep", "eps x steps budget sweep");
    cmd_sweep->add_option("--plan", sweep_args.plan, "experiment plan JSON")->required();
    cmd_sweep->add_option("--out", sweep_args.out, "output directory")->required();
    cmd_sweep->add_option("--jobs", sweep_args.jobs, "parallel cells (default from plan)");

    ReportArgs rep;
    auto* cmd_report = app.add_subcommand("report", "Re-render a report directory");
    cmd_report->add_option("--in", rep.in, "directory containing report.csv")->required();
    cmd_report->add_option("--format", rep.format, "output format: csv | md")->required();
    cmd_report->add_option("--out", rep.out, "output file")->required();
    cmd_report->add_option("--kind", rep.kind, "pivot layout: auto|matrix|cross|grid|sweep");

    std::vector<std::string> argv = args;
    std::reverse(argv.begin(), argv.end());  // CLI11's vector parse expects reversed args
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        err << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (cmd_gen->parsed()) return do_gen_data(gen);
        if (cmd_train->parsed()) return do_train(tr);
        if (cmd_attack->parsed()) return do_attack(at);
        if (cmd_eval->parsed()) return do_eval(ev);
        if (cmd_matrix->parsed()) return do_plan_op(matrix_args, "matrix");
        if (cmd_grid->parsed()) return do_plan_op(grid_args, "grid");
        if (cmd_sweep->parsed()) return do_plan_op(sweep_args, "sweep");
        if (cmd_report->parsed()) return do_report(rep);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    err << "error: no subcommand given\n";
    return 1;
}

}  // namespace advbench
