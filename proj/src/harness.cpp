#include "advbench/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "advbench/kernels.hpp"
#include "advbench/rng.hpp"

namespace advbench {

const char* kToolVersion = "advbench 1.0.0";

float parse_ratio_float(const std::string& text) {
    auto slash = text.find('/');
    if (slash == std::string::npos) {
        std::size_t pos = 0;
        float v = std::stof(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("invalid number: " + text);
        return v;
    }
    const std::string num = text.substr(0, slash);
    const std::string den = text.substr(slash + 1);
    std::size_t p1 = 0, p2 = 0;
    float a = std::stof(num, &p1);
    float b = std::stof(den, &p2);
    if (p1 != num.size() || p2 != den.size() || b == 0.f) {
        throw std::invalid_argument("invalid rational literal: " + text);
    }
    return a / b;
}

namespace {

std::string float_repr(float v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string double_repr(double v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<float> default_sweep_eps() {
    return {0.5f / 255.f, 1.f / 255.f, 2.f / 255.f, 4.f / 255.f, 8.f / 255.f};
}

std::vector<std::size_t> default_sweep_steps() { return {1, 5, 10, 25, 50}; }

AttackConfig plan_attack(const ExperimentPlan& plan) {
    if (!plan.attacks.empty()) return plan.attacks[0];
    AttackConfig cfg;  // common transfer-evaluation setting
    cfg.epsilon = 1.f / 255.f;
    cfg.steps = 25;
    cfg.loss_kind = AttackLoss::Bce;
    return cfg;
}

// ---------------------------------------------------------------------------
// Plan JSON
// ---------------------------------------------------------------------------

float json_eps(const nlohmann::json& j) {
    if (j.is_string()) return parse_ratio_float(j.get<std::string>());
    return j.get<float>();
}

AttackConfig attack_from_json(const nlohmann::json& j) {
    AttackConfig cfg;
    if (j.contains("eps")) cfg.epsilon = json_eps(j.at("eps"));
    if (j.contains("steps")) cfg.steps = j.at("steps").get<std::size_t>();
    if (j.contains("alpha") && !j.at("alpha").is_null()) cfg.alpha = json_eps(j.at("alpha"));
    if (j.contains("loss")) cfg.loss_kind = attack_loss_from_name(j.at("loss").get<std::string>());
    if (j.contains("targeted")) cfg.targeted = j.at("targeted").get<bool>();
    if (j.contains("random_start")) cfg.random_start = j.at("random_start").get<bool>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

nlohmann::json attack_to_json(const AttackConfig& cfg) {
    nlohmann::json j;
    j["eps"] = cfg.epsilon;
    j["steps"] = cfg.steps;
    if (cfg.alpha) {
        j["alpha"] = *cfg.alpha;
    } else {
        j["alpha"] = nullptr;
    }
    j["loss"] = attack_loss_name(cfg.loss_kind);
    j["targeted"] = cfg.targeted;
    j["random_start"] = cfg.random_start;
    j["seed"] = cfg.seed;
    return j;
}

}  // namespace

ExperimentPlan load_plan(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open plan: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("invalid plan JSON: " + std::string(e.what()));
    }
    ExperimentPlan plan;
    for (const auto& m : j.at("models")) {
        plan.models.push_back({m.at("id").get<std::string>(), m.at("path").get<std::string>()});
    }
    for (const auto& d : j.at("datasets")) {
        plan.datasets.push_back({d.at("id").get<std::string>(), d.at("path").get<std::string>()});
    }
    if (j.contains("attacks")) {
        for (const auto& a : j.at("attacks")) plan.attacks.push_back(attack_from_json(a));
    } else if (j.contains("attack")) {
        plan.attacks.push_back(attack_from_json(j.at("attack")));
    }
    if (j.contains("k")) plan.k_values = j.at("k").get<std::vector<std::size_t>>();
    if (j.contains("sample_count")) plan.sample_count = j.at("sample_count").get<std::size_t>();
    if (j.contains("master_seed")) plan.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("series_batch")) plan.series_batch = j.at("series_batch").get<std::size_t>();
    if (j.contains("metric_reference")) {
        plan.metric_reference = j.at("metric_reference").get<std::string>();
        if (plan.metric_reference != "truth" && plan.metric_reference != "clean_pred") {
            throw std::runtime_error("metric_reference must be `truth` or `clean_pred`");
        }
    }
    if (j.contains("cooc_csv")) plan.cooc_csv = j.at("cooc_csv").get<std::string>();
    if (j.contains("sweep_eps")) {
        for (const auto& e : j.at("sweep_eps")) plan.sweep_eps.push_back(json_eps(e));
    }
    if (j.contains("sweep_steps")) {
        plan.sweep_steps = j.at("sweep_steps").get<std::vector<std::size_t>>();
    }
    if (j.contains("jobs")) plan.jobs = j.at("jobs").get<int>();
    if (plan.models.empty()) throw std::runtime_error("plan needs at least one model");
    if (plan.datasets.empty()) throw std::runtime_error("plan needs at least one dataset");
    if (plan.k_values.empty()) throw std::runtime_error("plan needs at least one k value");
    return plan;
}

void save_plan(const ExperimentPlan& plan, const std::filesystem::path& path) {
    nlohmann::json j;
    j["models"] = nlohmann::json::array();
    for (const auto& m : plan.models) j["models"].push_back({{"id", m.id}, {"path", m.path}});
    j["datasets"] = nlohmann::json::array();
    for (const auto& d : plan.datasets) {
        j["datasets"].push_back({{"id", d.id}, {"path", d.path}});
    }
    j["attacks"] = nlohmann::json::array();
    for (const auto& a : plan.attacks) j["attacks"].push_back(attack_to_json(a));
    j["k"] = plan.k_values;
    j["sample_count"] = plan.sample_count;
    j["master_seed"] = plan.master_seed;
    j["series_batch"] = plan.series_batch;
    j["metric_reference"] = plan.metric_reference;
    j["cooc_csv"] = plan.cooc_csv;
    j["sweep_eps"] = plan.sweep_eps;
    j["sweep_steps"] = plan.sweep_steps;
    j["jobs"] = plan.jobs;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Shared harness machinery
// ---------------------------------------------------------------------------

namespace {

struct SampledData {
    Tensor images;
    std::vector<GroundTruthVector> truths;
};

std::vector<std::size_t> sample_indices(std::uint64_t master_seed, const std::string& key,
                                        std::size_t want, std::size_t have) {
    if (want > have) {
        throw std::runtime_error("sample_count " + std::to_string(want) +
                                 " exceeds dataset size " + std::to_string(have));
    }
    std::vector<std::size_t> idx(have);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(Rng::derive(master_seed, key));
    rng.shuffle(idx.data(), idx.size());
    idx.resize(want);
    return idx;
}

SampledData take_samples(const MultiLabelDataset& ds, const std::vector<std::size_t>& idx) {
    SampledData out;
    const std::size_t hw = ds.height() * ds.width();
    out.images = Tensor::zeros({idx.size(), 1, ds.height(), ds.width()});
    out.truths.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(ds.images.data.begin() + idx[i] * hw, hw,
                    out.images.data.begin() + i * hw);
        out.truths.push_back(ds.labels[idx[i]]);
    }
    return out;
}

struct Cell {
    std::function<void()> run;            // fills rows/series below
    std::vector<ReportRow> rows;          // results, or failure skeleton
    std::map<std::string, MetricSeries> series;
    std::vector<ReportRow> skeleton;      // emitted with failed=true on error
};

void run_cells(std::vector<Cell>& cells, int jobs) {
    auto work = [&](Cell& cell) {
        try {
            cell.run();
        } catch (const std::exception&) {
            cell.rows = cell.skeleton;
            for (auto& r : cell.rows) r.failed = true;
        }
    };
    if (jobs <= 1 || cells.size() <= 1) {
        for (auto& cell : cells) work(cell);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            work(cells[i]);
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min<std::size_t>(jobs, cells.size());
    pool.reserve(n);
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

EvaluationReport collect(const ExperimentPlan& plan, const std::string& kind,
                         std::vector<Cell>& cells) {
    EvaluationReport report;
    report.kind = kind;
    report.provenance.master_seed = plan.master_seed;
    report.provenance.sample_count = plan.sample_count;
    report.provenance.tool_version = kToolVersion;
    for (auto& cell : cells) {
        report.rows.insert(report.rows.end(), cell.rows.begin(), cell.rows.end());
        for (auto& [name, series] : cell.series) {
            auto& dst = report.series[name];
            dst.name = name;
            dst.values.insert(dst.values.end(), series.values.begin(), series.values.end());
            dst.batch_ids.insert(dst.batch_ids.end(), series.batch_ids.begin(),
                                 series.batch_ids.end());
        }
    }
    // sanity: the plan's grid must be complete and key-unique
    std::set<std::string> keys;
    for (const auto& r : report.rows) {
        std::ostringstream key;
        key << r.source_model << '|' << r.target_model << '|' << r.dataset << '|' << r.attack
            << '|' << r.eps << '|' << r.steps << '|' << r.loss << '|' << r.metric << '|' << r.k;
        if (!keys.insert(key.str()).second) {
            throw std::logic_error("duplicate report cell: " + key.str());
        }
    }
    return report;
}

std::vector<Model> load_models(const ExperimentPlan& plan) {
    std::vector<Model> models;
    models.reserve(plan.models.size());
    for (const auto& ref : plan.models) models.push_back(load_model(ref.path));
    for (std::size_t i = 1; i < models.size(); ++i) {
        if (models[i].config.input_hw != models[0].config.input_hw) {
            throw std::runtime_error("models disagree on the input size");
        }
    }
    return models;
}

MultiLabelDataset load_plan_dataset(const ExperimentPlan::DatasetRef& ref) {
    return load_dataset(ref.path);
}

double percent(double fraction) { return 100.0 * fraction; }

ReportRow base_row(const std::string& src, const std::string& tgt, const std::string& data,
                   const std::string& attack, const AttackConfig& cfg) {
    ReportRow r;
    r.source_model = src;
    r.target_model = tgt;
    r.dataset = data;
    r.attack = attack;
    r.eps = cfg.epsilon;
    r.steps = cfg.steps;
    r.loss = attack_loss_name(cfg.loss_kind);
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Harness operations
// ---------------------------------------------------------------------------

EvaluationReport transfer_matrix(const ExperimentPlan& plan) {
    auto models = load_models(plan);
    auto ds = load_plan_dataset(plan.datasets.at(0));
    auto idx = sample_indices(plan.master_seed, "transfer|sample|" + plan.datasets[0].id,
                              plan.sample_count, ds.size());
    auto sampled = take_samples(ds, idx);
    const AttackConfig attack = plan_attack(plan);

    std::vector<Cell> cells(models.size());
    for (std::size_t s = 0; s < models.size(); ++s) {
        Cell& cell = cells[s];
        for (std::size_t t = 0; t < models.size(); ++t) {
            for (std::size_t k : plan.k_values) {
                ReportRow r = base_row(plan.models[s].id, plan.models[t].id, plan.datasets[0].id,
                                       "pgd", attack);
                r.metric = "k_robust_acc";
                r.k = static_cast<int>(k);
                r.direction = "up";
                cell.skeleton.push_back(r);
            }
        }
        cell.run = [&, s]() {
            AttackConfig cfg = attack;
            cfg.targeted = false;
            cfg.seed = Rng::derive(plan.master_seed, "transfer|src=" + plan.models[s].id);
            auto adv = pgd_untargeted(models[s], sampled.images, sampled.truths, cfg);
            for (std::size_t t = 0; t < models.size(); ++t) {
                Tensor probs = predict_probabilities(models[t], adv.adversarials);
                for (std::size_t k : plan.k_values) {
                    ReportRow r = base_row(plan.models[s].id, plan.models[t].id,
                                           plan.datasets[0].id, "pgd", attack);
                    r.metric = "k_robust_acc";
                    r.k = static_cast<int>(k);
                    r.direction = "up";
                    r.value = percent(k_accuracy_mean(probs, sampled.truths, k));
                    cells[s].rows.push_back(r);
                }
            }
        };
    }
    run_cells(cells, plan.jobs);
    return collect(plan, "matrix", cells);
}

EvaluationReport cross_dataset_eval(const ExperimentPlan& plan) {
    auto models = load_models(plan);
    const AttackConfig attack = plan_attack(plan);

    std::vector<MultiLabelDataset> datasets;
    std::vector<SampledData> sampled;
    for (const auto& ref : plan.datasets) {
        datasets.push_back(load_plan_dataset(ref));
        auto idx = sample_indices(plan.master_seed, "cross|sample|" + ref.id, plan.sample_count,
                                  datasets.back().size());
        sampled.push_back(take_samples(datasets.back(), idx));
    }

    std::vector<Cell> cells(models.size() * datasets.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t d = 0; d < datasets.size(); ++d) {
            Cell& cell = cells[m * datasets.size() + d];
            for (std::size_t k : plan.k_values) {
                ReportRow r = base_row(plan.models[m].id, plan.models[m].id, plan.datasets[d].id,
                                       "pgd", attack);
                r.metric = "k_robust_acc";
                r.k = static_cast<int>(k);
                r.direction = "up";
                cell.skeleton.push_back(r);
            }
            cell.run = [&, m, d]() {
                AttackConfig cfg = attack;
                cfg.targeted = false;
                cfg.seed = Rng::derive(plan.master_seed, "cross|model=" + plan.models[m].id +
                                                             "|data=" + plan.datasets[d].id);
                auto adv = pgd_untargeted(models[m], sampled[d].images, sampled[d].truths, cfg);
                Tensor probs = predict_probabilities(models[m], adv.adversarials);
                Cell& me = cells[m * datasets.size() + d];
                for (std::size_t k : plan.k_values) {
                    ReportRow r = base_row(plan.models[m].id, plan.models[m].id,
                                           plan.datasets[d].id, "pgd", attack);
                    r.metric = "k_robust_acc";
                    r.k = static_cast<int>(k);
                    r.direction = "up";
                    r.value = percent(k_accuracy_mean(probs, sampled[d].truths, k));
                    me.rows.push_back(r);
                }
            };
        }
    }
    run_cells(cells, plan.jobs);
    return collect(plan, "cross", cells);
}

namespace {

struct GridMetricDef {
    const char* name;
    int k;
    const char* direction;
};

constexpr GridMetricDef kGridMetrics[] = {
    {"k_robust_acc", 1, "up"}, {"k_robust_acc", 3, "up"}, {"auc", -1, "up"},
    {"mse", -1, "down"},       {"bce", -1, "down"},       {"mlacc", -1, "down"},
    {"risk", -1, "down"},
};

}  // namespace

EvaluationReport loss_metric_grid(const ExperimentPlan& plan) {
    auto models = load_models(plan);
    auto ds = load_plan_dataset(plan.datasets.at(0));
    auto idx = sample_indices(plan.master_seed, "grid|sample|" + plan.datasets[0].id,
                              plan.sample_count, ds.size());
    auto sampled = take_samples(ds, idx);

    CoOccurrenceTables tables;
    if (!plan.cooc_csv.empty()) {
        tables.inverse_normalized = load_matrix_csv(plan.cooc_csv);
    } else {
        tables = build_co_occurrence(ds);
    }

    const AttackConfig attack = plan_attack(plan);
    const std::array<AttackLoss, 3> losses = {AttackLoss::Mse, AttackLoss::Bce, AttackLoss::Ol};
    const bool ref_is_truth = plan.metric_reference == "truth";

    std::vector<Cell> cells(models.size() * losses.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t li = 0; li < losses.size(); ++li) {
            Cell& cell = cells[m * losses.size() + li];
            AttackConfig cfg = attack;
            cfg.targeted = true;
            cfg.loss_kind = losses[li];
            for (const auto& def : kGridMetrics) {
                ReportRow r = base_row(plan.models[m].id, plan.models[m].id, plan.datasets[0].id,
                                       "pgd-targeted", cfg);
                r.metric = def.name;
                r.k = def.k;
                r.direction = def.direction;
                cell.skeleton.push_back(r);
            }
            cell.run = [&, m, li]() {
                Cell& me = cells[m * losses.size() + li];
                const Model& model = models[m];
                AttackConfig acfg = attack;
                acfg.targeted = true;
                acfg.loss_kind = losses[li];
                acfg.seed = Rng::derive(plan.master_seed,
                                        "grid|model=" + plan.models[m].id +
                                            "|loss=" + attack_loss_name(losses[li]));
                auto adv = pgd_targeted_risk(model, sampled.images, tables, acfg);

                Tensor adv_logits = predict_logits(model, adv.adversarials);
                Tensor adv_probs = Tensor::zeros(adv_logits.shape);
                kernels::sigmoid_fwd(adv_logits.data.data(), adv_probs.data.data(),
                                     adv_logits.size());
                Tensor clean_probs = predict_probabilities(model, sampled.images);
                const auto thresholds = model.thresholds_or_default();
                const std::size_t n = sampled.truths.size();

                // per-input scalar metrics
                std::vector<double> k1(n), k3(n), mse_v(n), bce_v(n), mlacc_v(n), risk_v(n);
                for (std::size_t i = 0; i < n; ++i) {
                    std::span<const float> pl(adv_probs.data.data() + i * kNumLabels, kNumLabels);
                    std::span<const float> zl(adv_logits.data.data() + i * kNumLabels,
                                              kNumLabels);
                    const float* clean = clean_probs.data.data() + i * kNumLabels;
                    std::size_t argmax = 0;
                    for (std::size_t l = 1; l < kNumLabels; ++l) {
                        if (clean[l] > clean[argmax]) argmax = l;
                    }
                    const auto& c_row = tables.inverse_normalized[argmax];
                    auto rank = sampled.truths[i].ranking_view();
                    std::span<const float> rank_sp(rank.data(), kNumLabels);

                    k1[i] = k_accuracy_input(pl, rank_sp, 1);
                    k3[i] = k_accuracy_input(pl, rank_sp, 3);
                    if (ref_is_truth) {
                        auto mask = sampled.truths[i].present_mask();
                        mse_v[i] = metric_mse(zl, rank_sp, mask);
                        bce_v[i] = metric_bce(zl, rank_sp, mask);
                    } else {
                        std::span<const float> clean_sp(clean, kNumLabels);
                        mse_v[i] = metric_mse(zl, clean_sp, all_labels_mask());
                        bce_v[i] = metric_bce(zl, clean_sp, all_labels_mask());
                    }
                    std::span<const float> target(c_row.data(), kNumLabels);
                    mlacc_v[i] = mlacc(pl, target,
                                       std::span<const float>(thresholds.data(), kNumLabels),
                                       all_labels_mask());
                    risk_v[i] = risk(pl, target);
                }
                auto mean_of = [](const std::vector<double>& v) {
                    double acc = 0;
                    for (double x : v) acc += x;
                    return acc / static_cast<double>(v.size());
                };
                const double auc_all = macro_auc(adv_probs, sampled.truths).value;
                const double cell_values[] = {percent(mean_of(k1)), percent(mean_of(k3)),
                                              auc_all,              mean_of(mse_v),
                                              mean_of(bce_v),       mean_of(mlacc_v),
                                              mean_of(risk_v)};
                for (std::size_t q = 0; q < std::size(kGridMetrics); ++q) {
                    ReportRow r = me.skeleton[q];
                    r.value = cell_values[q];
                    me.rows.push_back(r);
                }

                // per-batch series for the correlation harness
                const std::string cell_id =
                    plan.models[m].id + "|" + attack_loss_name(losses[li]);
                const char* series_names[] = {"k_robust_acc@1", "k_robust_acc@3", "auc",
                                              "mse",            "bce",            "mlacc",
                                              "risk"};
                for (std::size_t begin = 0, batch = 0; begin < n;
                     begin += plan.series_batch, ++batch) {
                    const std::size_t count = std::min(plan.series_batch, n - begin);
                    if (count < 2) break;  // AUC needs at least two samples
                    Tensor bp = Tensor::zeros({count, kNumLabels});
                    std::copy_n(adv_probs.data.begin() + begin * kNumLabels, count * kNumLabels,
                                bp.data.begin());
                    std::vector<GroundTruthVector> bt(sampled.truths.begin() + begin,
                                                      sampled.truths.begin() + begin + count);
                    double bauc;
                    try {
                        bauc = macro_auc(bp, bt).value;
                    } catch (const std::exception&) {
                        continue;  // a batch without both classes anywhere is dropped whole
                    }
                    auto slice_mean = [&](const std::vector<double>& v) {
                        double acc = 0;
                        for (std::size_t i = begin; i < begin + count; ++i) acc += v[i];
                        return acc / static_cast<double>(count);
                    };
                    const double batch_values[] = {percent(slice_mean(k1)),
                                                   percent(slice_mean(k3)),
                                                   bauc,
                                                   slice_mean(mse_v),
                                                   slice_mean(bce_v),
                                                   slice_mean(mlacc_v),
                                                   slice_mean(risk_v)};
                    for (std::size_t q = 0; q < std::size(series_names); ++q) {
                        auto& series = me.series[series_names[q]];
                        series.name = series_names[q];
                        series.values.push_back(batch_values[q]);
                        series.batch_ids.push_back(cell_id + "|b" + std::to_string(batch));
                    }
                }
            };
        }
    }
    run_cells(cells, plan.jobs);
    return collect(plan, "grid", cells);
}

EvaluationReport budget_sweep(const ExperimentPlan& plan) {
    auto models = load_models(plan);
    auto ds = load_plan_dataset(plan.datasets.at(0));
    auto idx = sample_indices(plan.master_seed, "sweep|sample|" + plan.datasets[0].id,
                              plan.sample_count, ds.size());
    auto sampled = take_samples(ds, idx);

    const auto eps_list = plan.sweep_eps.empty() ? default_sweep_eps() : plan.sweep_eps;
    const auto steps_list = plan.sweep_steps.empty() ? default_sweep_steps() : plan.sweep_steps;
    const AttackConfig attack = plan_attack(plan);

    std::vector<Cell> cells(models.size() * eps_list.size() * steps_list.size());
    std::size_t ci = 0;
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t e = 0; e < eps_list.size(); ++e) {
            for (std::size_t s = 0; s < steps_list.size(); ++s, ++ci) {
                Cell& cell = cells[ci];
                AttackConfig cfg = attack;
                cfg.targeted = false;
                cfg.epsilon = eps_list[e];
                cfg.steps = steps_list[s];
                cfg.alpha.reset();  // default eps*2.5/steps per point
                for (std::size_t k : plan.k_values) {
                    ReportRow r = base_row(plan.models[m].id, plan.models[m].id,
                                           plan.datasets[0].id, "pgd", cfg);
                    r.metric = "k_robust_acc";
                    r.k = static_cast<int>(k);
                    r.direction = "up";
                    cell.skeleton.push_back(r);
                }
                cell.run = [&, m, e, s, ci]() {
                    Cell& me = cells[ci];
                    AttackConfig cfg2 = attack;
                    cfg2.targeted = false;
                    cfg2.epsilon = eps_list[e];
                    cfg2.steps = steps_list[s];
                    cfg2.alpha.reset();
                    cfg2.seed = Rng::derive(
                        plan.master_seed, "sweep|model=" + plan.models[m].id +
                                              "|eps=" + std::to_string(e) +
                                              "|steps=" + std::to_string(s));
                    auto adv = pgd_untargeted(models[m], sampled.images, sampled.truths, cfg2);
                    Tensor probs = predict_probabilities(models[m], adv.adversarials);
                    for (std::size_t q = 0; q < plan.k_values.size(); ++q) {
                        ReportRow r = me.skeleton[q];
                        r.value = percent(
                            k_accuracy_mean(probs, sampled.truths, plan.k_values[q]));
                        me.rows.push_back(r);
                    }
                };
            }
        }
    }
    run_cells(cells, plan.jobs);
    return collect(plan, "sweep", cells);
}

std::vector<CorrelationEntry> metric_correlation(const EvaluationReport& report) {
    if (report.series.empty()) {
        throw std::runtime_error("report carries no per-batch metric series");
    }
    std::vector<const MetricSeries*> series;
    for (const auto& [name, s] : report.series) series.push_back(&s);
    for (const auto* s : series) {
        if (s->values.size() < 3) {
            throw std::runtime_error("metric series `" + s->name +
                                     "` has fewer than 3 batches");
        }
    }
    std::vector<CorrelationEntry> out;
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t j = i; j < series.size(); ++j) {
            auto res = pearson_with_pvalue(*series[i], *series[j]);
            CorrelationEntry e;
            e.metric_a = series[i]->name;
            e.metric_b = series[j]->name;
            e.r = res.r;
            e.p = res.p;
            e.flagged = res.p >= 1e-3;
            out.push_back(e);
        }
    }
    return out;
}

EvaluationReport evaluate_adversarial(const Model& model, const std::string& model_id,
                                      const LoadedAdversarial& adv,
                                      const MultiLabelDataset& data,
                                      const std::string& dataset_id,
                                      const std::vector<std::string>& metrics,
                                      const std::vector<std::size_t>& k_values,
                                      const std::string& reference, const FloatMatrix* cooc) {
    const std::size_t n = adv.adversarials.shape[0];
    if (n > data.size()) {
        throw std::runtime_error("adversarial batch has more rows than the dataset");
    }
    // adversarial row i corresponds to dataset row i (attack preserves order)
    std::vector<GroundTruthVector> truths(data.labels.begin(), data.labels.begin() + n);

    Tensor adv_logits = predict_logits(model, adv.adversarials);
    Tensor adv_probs = Tensor::zeros(adv_logits.shape);
    kernels::sigmoid_fwd(adv_logits.data.data(), adv_probs.data.data(), adv_logits.size());

    const std::size_t hw = data.height() * data.width();
    Tensor clean = Tensor::zeros({n, 1, data.height(), data.width()});
    std::copy_n(data.images.data.begin(), n * hw, clean.data.begin());
    Tensor clean_probs = predict_probabilities(model, clean);
    const bool ref_is_truth = reference != "clean_pred";
    const auto thresholds = model.thresholds_or_default();
    const std::string attack_name = adv.config.targeted ? "pgd-targeted" : "pgd";

    EvaluationReport report;
    report.kind = "eval";
    report.provenance.sample_count = n;
    report.provenance.tool_version = kToolVersion;

    for (const auto& metric : metrics) {
        if (metric == "k_robust_acc") {
            for (std::size_t k : k_values) {
                ReportRow r = base_row(adv.source_model_id, model_id, dataset_id, attack_name,
                                       adv.config);
                r.metric = metric;
                r.k = static_cast<int>(k);
                r.direction = "up";
                r.value = 100.0 * k_accuracy_mean(adv_probs, truths, k);
                report.rows.push_back(r);
            }
            continue;
        }
        ReportRow r = base_row(adv.source_model_id, model_id, dataset_id, attack_name,
                               adv.config);
        r.metric = metric;
        if (metric == "auc") {
            r.direction = "up";
            r.value = macro_auc(adv_probs, truths).value;
        } else if (metric == "mse" || metric == "bce" || metric == "ol") {
            r.direction = "down";
            double acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                std::span<const float> zl(adv_logits.data.data() + i * kNumLabels, kNumLabels);
                auto rank = truths[i].ranking_view();
                std::span<const float> ref_sp(rank.data(), kNumLabels);
                std::span<const float> clean_sp(clean_probs.data.data() + i * kNumLabels,
                                                kNumLabels);
                const LabelMask mask =
                    ref_is_truth ? truths[i].present_mask() : all_labels_mask();
                std::span<const float> use = ref_is_truth ? ref_sp : clean_sp;
                if (metric == "mse") acc += metric_mse(zl, use, mask);
                if (metric == "bce") acc += metric_bce(zl, use, mask);
                if (metric == "ol") acc += metric_ol(zl, use, mask);
            }
            r.value = acc / static_cast<double>(n);
        } else if (metric == "mlacc" || metric == "risk") {
            if (cooc == nullptr) {
                throw std::runtime_error("metric `" + metric +
                                         "` needs the inverse co-occurrence matrix (--cooc)");
            }
            r.direction = "down";
            double acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                std::span<const float> pl(adv_probs.data.data() + i * kNumLabels, kNumLabels);
                const float* cp = clean_probs.data.data() + i * kNumLabels;
                std::size_t argmax = 0;
                for (std::size_t l = 1; l < kNumLabels; ++l) {
                    if (cp[l] > cp[argmax]) argmax = l;
                }
                std::span<const float> target((*cooc)[argmax].data(), kNumLabels);
                if (metric == "mlacc") {
                    acc += mlacc(pl, target,
                                 std::span<const float>(thresholds.data(), kNumLabels),
                                 all_labels_mask());
                } else {
                    acc += risk(pl, target);
                }
            }
            r.value = acc / static_cast<double>(n);
        } else {
            throw std::runtime_error("unknown metric: " + metric);
        }
        report.rows.push_back(r);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCsvHeader =
    "source_model,target_model,dataset,attack,eps,steps,loss,metric,k,value,direction";

std::string row_to_csv(const ReportRow& r) {
    std::ostringstream os;
    os << r.source_model << ',' << r.target_model << ',' << r.dataset << ',' << r.attack << ','
       << float_repr(r.eps) << ',' << r.steps << ',' << r.loss << ',' << r.metric << ',';
    if (r.k >= 0) os << r.k;
    os << ',';
    if (r.failed) {
        os << "failed";
    } else {
        os << double_repr(r.value);
    }
    os << ',' << r.direction;
    return os.str();
}

std::vector<std::string> split_cells(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

std::string format_cell(double v) { return double_repr(v); }

// pivot helper: unique values in first-seen order
template <typename Key>
std::vector<Key> ordered_unique(const std::vector<Key>& values) {
    std::vector<Key> out;
    for (const auto& v : values) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    return out;
}

void write_pivot(std::ostream& os, const std::string& title,
                 const std::vector<std::string>& row_keys,
                 const std::vector<std::string>& col_keys, const std::string& corner,
                 const std::function<std::string(const std::string&, const std::string&)>& cell) {
    os << "### " << title << "\n\n";
    os << "| " << corner << " |";
    for (const auto& c : col_keys) os << ' ' << c << " |";
    os << "\n|";
    for (std::size_t i = 0; i <= col_keys.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& r : row_keys) {
        os << "| " << r << " |";
        for (const auto& c : col_keys) os << ' ' << cell(r, c) << " |";
        os << '\n';
    }
    os << '\n';
}

}  // namespace

void emit_report_csv(const EvaluationReport& report, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << kCsvHeader << '\n';
    for (const auto& r : report.rows) os << row_to_csv(r) << '\n';
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

void emit_report_markdown(const EvaluationReport& report, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "# advbench report: " << report.kind << "\n\n";
    os << "- tool: " << report.provenance.tool_version << '\n';
    os << "- master_seed: " << report.provenance.master_seed << '\n';
    os << "- sample_count: " << report.provenance.sample_count << "\n\n";

    auto find_value = [&](auto pred) -> std::string {
        for (const auto& r : report.rows) {
            if (pred(r)) return r.failed ? "failed" : format_cell(r.value);
        }
        return "-";
    };

    std::vector<std::string> sources, targets, datasets, losses;
    for (const auto& r : report.rows) {
        sources.push_back(r.source_model);
        targets.push_back(r.target_model);
        datasets.push_back(r.dataset);
        losses.push_back(r.loss);
    }
    sources = ordered_unique(sources);
    targets = ordered_unique(targets);
    datasets = ordered_unique(datasets);
    losses = ordered_unique(losses);

    std::vector<int> ks;
    for (const auto& r : report.rows) {
        if (r.k >= 0 && std::find(ks.begin(), ks.end(), r.k) == ks.end()) ks.push_back(r.k);
    }

    if (report.kind == "matrix") {
        // a bare per-model average is ambiguous, so name the averaging
        // set; render both row means (model as attack source) and column
        // means (model as target) explicitly
        auto cell_value = [&](const std::string& s, const std::string& t, int k,
                              double* out) -> bool {
            for (const auto& r : report.rows) {
                if (r.source_model == s && r.target_model == t && r.k == k && !r.failed) {
                    *out = r.value;
                    return true;
                }
            }
            return false;
        };
        for (int k : ks) {
            std::vector<std::string> cols = targets;
            cols.push_back("mean as source");
            std::vector<std::string> rows_keys = sources;
            rows_keys.push_back("mean as target");
            write_pivot(
                os, "k-robust accuracy (%), k=" + std::to_string(k), rows_keys, cols,
                "source \\ target", [&](const std::string& s, const std::string& t) {
                    if (s == "mean as target" && t == "mean as source") return std::string("-");
                    double acc = 0;
                    std::size_t n = 0;
                    double v;
                    if (s == "mean as target") {
                        for (const auto& src : sources) {
                            if (cell_value(src, t, k, &v)) {
                                acc += v;
                                ++n;
                            }
                        }
                    } else if (t == "mean as source") {
                        for (const auto& tgt : targets) {
                            if (cell_value(s, tgt, k, &v)) {
                                acc += v;
                                ++n;
                            }
                        }
                    } else {
                        return find_value([&](const ReportRow& r) {
                            return r.source_model == s && r.target_model == t && r.k == k;
                        });
                    }
                    return n ? format_cell(acc / static_cast<double>(n)) : std::string("-");
                });
        }
    } else if (report.kind == "cross") {
        for (int k : ks) {
            write_pivot(os, "whitebox k-robust accuracy (%), k=" + std::to_string(k), sources,
                        datasets, "model \\ dataset",
                        [&](const std::string& m, const std::string& d) {
                            return find_value([&](const ReportRow& r) {
                                return r.source_model == m && r.dataset == d && r.k == k;
                            });
                        });
        }
    } else if (report.kind == "grid") {
        const std::vector<std::string> metric_rows = {"k=1 up",  "k=3 up",    "auc up",
                                                      "mse down", "bce down", "mlacc down",
                                                      "risk down"};
        for (const auto& loss : losses) {
            write_pivot(
                os, "targeted PGD, attack loss = " + loss, metric_rows, targets,
                "metric (direction = more robust)",
                [&](const std::string& mrow, const std::string& model) {
                    std::istringstream ms(mrow);
                    std::string mname;
                    ms >> mname;
                    int k = -1;
                    std::string metric = mname;
                    if (mname == "k=1") {
                        metric = "k_robust_acc";
                        k = 1;
                    } else if (mname == "k=3") {
                        metric = "k_robust_acc";
                        k = 3;
                    }
                    return find_value([&](const ReportRow& r) {
                        return r.loss == loss && r.target_model == model && r.metric == metric &&
                               r.k == k;
                    });
                });
        }
    } else if (report.kind == "sweep") {
        std::vector<std::string> eps_keys, step_keys;
        for (const auto& r : report.rows) eps_keys.push_back(float_repr(r.eps));
        for (const auto& r : report.rows) step_keys.push_back(std::to_string(r.steps));
        eps_keys = ordered_unique(eps_keys);
        step_keys = ordered_unique(step_keys);
        for (const auto& model : sources) {
            for (int k : ks) {
                write_pivot(os,
                            "model " + model + ", k=" + std::to_string(k) +
                                " robust accuracy (%)",
                            eps_keys, step_keys, "eps \\ steps",
                            [&](const std::string& e, const std::string& s) {
                                return find_value([&](const ReportRow& r) {
                                    return r.source_model == model && float_repr(r.eps) == e &&
                                           std::to_string(r.steps) == s && r.k == k;
                                });
                            });
            }
        }
    } else {
        os << "| metric | k | value | direction |\n|---|---|---|---|\n";
        for (const auto& r : report.rows) {
            os << "| " << r.metric << " | " << (r.k >= 0 ? std::to_string(r.k) : "-") << " | "
               << (r.failed ? "failed" : format_cell(r.value)) << " | " << r.direction
               << " |\n";
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

void emit_correlation_csv(const std::vector<CorrelationEntry>& table,
                          const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "metric_a,metric_b,r,p,flagged\n";
    for (const auto& e : table) {
        os << e.metric_a << ',' << e.metric_b << ',' << double_repr(e.r) << ','
           << double_repr(e.p) << ',' << (e.flagged ? 1 : 0) << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

EvaluationReport load_report_csv(const std::filesystem::path& path, const std::string& kind) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("report is empty: " + path.string());
    if (line != kCsvHeader && line != std::string(kCsvHeader) + "\r") {
        throw std::runtime_error("report header mismatch in " + path.string());
    }
    EvaluationReport report;
    report.provenance.tool_version = kToolVersion;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_cells(line);
        if (cells.size() != 11) {
            throw std::runtime_error("report row must have 11 cells: " + line);
        }
        ReportRow r;
        r.source_model = cells[0];
        r.target_model = cells[1];
        r.dataset = cells[2];
        r.attack = cells[3];
        r.eps = std::strtof(cells[4].c_str(), nullptr);
        r.steps = std::strtoull(cells[5].c_str(), nullptr, 10);
        r.loss = cells[6];
        r.metric = cells[7];
        r.k = cells[8].empty() ? -1 : std::atoi(cells[8].c_str());
        if (cells[9] == "failed") {
            r.failed = true;
        } else {
            r.value = std::strtod(cells[9].c_str(), nullptr);
        }
        r.direction = cells[10];
        report.rows.push_back(r);
    }
    if (kind != "auto") {
        report.kind = kind;
        return report;
    }
    // infer the experiment kind from the row structure
    std::set<std::string> metrics, datasets;
    std::set<std::pair<float, std::size_t>> budgets;
    bool targeted = false;
    for (const auto& r : report.rows) {
        metrics.insert(r.metric);
        datasets.insert(r.dataset);
        budgets.insert({r.eps, r.steps});
        targeted = targeted || r.attack == "pgd-targeted";
    }
    if (targeted && metrics.size() > 1) {
        report.kind = "grid";
    } else if (budgets.size() > 1) {
        report.kind = "sweep";
    } else if (datasets.size() > 1) {
        report.kind = "cross";
    } else {
        report.kind = "matrix";
    }
    return report;
}

}  // namespace advbench
