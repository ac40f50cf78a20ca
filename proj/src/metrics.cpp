#include "advbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace advbench {

namespace {

void check_18(std::span<const float> v, const char* what) {
    if (v.size() != kNumLabels) {
        throw std::invalid_argument(std::string(what) + " must have 18 entries, got " +
                                    std::to_string(v.size()));
    }
}

std::size_t mask_count(const LabelMask& mask) {
    std::size_t c = 0;
    for (bool b : mask) c += b ? 1 : 0;
    return c;
}

double dsoftplus(double x) {
    double m = x > 0 ? x : 0;
    return m + std::log1p(std::exp(-std::fabs(x)));
}

double dsigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

TopKSet topk_indices(std::span<const float> scores, std::size_t k) {
    check_18(scores, "scores");
    if (k < 1 || k > kNumLabels) {
        throw std::invalid_argument("k must lie in [1,18], got " + std::to_string(k));
    }
    std::array<std::size_t, kNumLabels> order;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    TopKSet out;
    out.k = k;
    out.indices.assign(order.begin(), order.begin() + k);
    std::sort(out.indices.begin(), out.indices.end());
    return out;
}

double k_accuracy_input(std::span<const float> predicted, std::span<const float> truth_ranking,
                        std::size_t k) {
    TopKSet pred = topk_indices(predicted, k);
    TopKSet truth = topk_indices(truth_ranking, k);
    std::size_t inter = 0;
    std::size_t pi = 0;
    for (std::size_t idx : truth.indices) {
        while (pi < pred.indices.size() && pred.indices[pi] < idx) ++pi;
        if (pi < pred.indices.size() && pred.indices[pi] == idx) ++inter;
    }
    return static_cast<double>(inter) / static_cast<double>(k);
}

double k_accuracy_mean(const Tensor& pred_scores, const std::vector<GroundTruthVector>& truths,
                       std::size_t k) {
    if (truths.empty()) throw std::invalid_argument("k_accuracy over an empty input set");
    if (pred_scores.shape.size() != 2 || pred_scores.shape[0] != truths.size() ||
        pred_scores.shape[1] != kNumLabels) {
        throw std::invalid_argument("prediction scores must be [N,18] matching the truth count");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        std::span<const float> row(pred_scores.data.data() + i * kNumLabels, kNumLabels);
        auto rank = truths[i].ranking_view();
        acc += k_accuracy_input(row, std::span<const float>(rank.data(), kNumLabels), k);
    }
    return acc / static_cast<double>(truths.size());
}

double mlacc(std::span<const float> adv_probs, std::span<const float> target,
             std::span<const float> thresholds, const LabelMask& mask) {
    check_18(adv_probs, "adv_probs");
    check_18(target, "target");
    check_18(thresholds, "thresholds");
    for (float t : thresholds) {
        if (!(t > 0.f && t < 1.f)) {
            throw std::invalid_argument("thresholds must lie strictly inside (0,1)");
        }
    }
    const std::size_t n = mask_count(mask);
    if (n == 0) throw std::invalid_argument("mlacc with all labels masked");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!mask[i]) continue;
        const bool predicted = adv_probs[i] >= thresholds[i];
        const bool wanted = target[i] >= 0.5f;
        hits += predicted == wanted ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

double metric_mse(std::span<const float> adv_logits, std::span<const float> reference,
                  const LabelMask& mask) {
    check_18(adv_logits, "logits");
    check_18(reference, "reference");
    const std::size_t n = mask_count(mask);
    if (n == 0) throw std::invalid_argument("MSE with all labels masked");
    double acc = 0.0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!mask[i]) continue;
        double d = dsigmoid(adv_logits[i]) - static_cast<double>(reference[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(n);
}

double metric_bce(std::span<const float> adv_logits, std::span<const float> reference,
                  const LabelMask& mask) {
    check_18(adv_logits, "logits");
    check_18(reference, "reference");
    const std::size_t n = mask_count(mask);
    if (n == 0) throw std::invalid_argument("BCE with all labels masked");
    double acc = 0.0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!mask[i]) continue;
        const double z = adv_logits[i];
        acc += dsoftplus(z) - z * static_cast<double>(reference[i]);
    }
    return acc / static_cast<double>(n);
}

double metric_ol(std::span<const float> adv_logits, std::span<const float> reference,
                 const LabelMask& mask) {
    check_18(adv_logits, "logits");
    check_18(reference, "reference");
    if (mask_count(mask) == 0) throw std::invalid_argument("OL with all labels masked");
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (!mask[j] || reference[i] <= reference[j]) continue;
            const double margin = 1.0 - (static_cast<double>(adv_logits[i]) -
                                         static_cast<double>(adv_logits[j]));
            acc += margin > 0 ? margin : 0.0;
            ++pairs;
        }
    }
    if (pairs == 0) {
        throw std::invalid_argument("OL needs at least one ordered target pair");
    }
    return acc / static_cast<double>(pairs);
}

MacroAucResult macro_auc(const Tensor& probs, const std::vector<GroundTruthVector>& truths) {
    if (truths.size() < 2) throw std::invalid_argument("macro_auc needs at least 2 samples");
    if (probs.shape.size() != 2 || probs.shape[0] != truths.size() ||
        probs.shape[1] != kNumLabels) {
        throw std::invalid_argument("probabilities must be [N,18] matching the truth count");
    }
    MacroAucResult res;
    double total = 0.0;
    for (std::size_t label = 0; label < kNumLabels; ++label) {
        std::vector<std::pair<float, bool>> samples;  // (score, is_positive)
        for (std::size_t i = 0; i < truths.size(); ++i) {
            const LabelState s = truths[i].states[label];
            if (s == LabelState::Positive || s == LabelState::Negative) {
                samples.emplace_back(probs.data[i * kNumLabels + label],
                                     s == LabelState::Positive);
            }
        }
        std::size_t npos = 0;
        for (const auto& [score, is_pos] : samples) npos += is_pos ? 1 : 0;
        const std::size_t nneg = samples.size() - npos;
        if (npos == 0 || nneg == 0) {
            res.skipped_labels.push_back(label);
            continue;
        }
        std::sort(samples.begin(), samples.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        // midranks over ties
        double pos_rank_sum = 0.0;
        std::size_t i = 0;
        while (i < samples.size()) {
            std::size_t j = i;
            while (j < samples.size() && samples[j].first == samples[i].first) ++j;
            const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
            for (std::size_t q = i; q < j; ++q) {
                if (samples[q].second) pos_rank_sum += midrank;
            }
            i = j;
        }
        const double auc =
            (pos_rank_sum - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1)) /
            (static_cast<double>(npos) * static_cast<double>(nneg));
        total += auc;
        res.used_labels.push_back(label);
    }
    if (res.used_labels.empty()) {
        throw std::runtime_error("macro_auc: no label has both a positive and a negative sample");
    }
    res.value = total / static_cast<double>(res.used_labels.size());
    return res;
}

double risk(std::span<const float> adv_probs, std::span<const float> c_row) {
    check_18(adv_probs, "adv_probs");
    check_18(c_row, "C row");
    double acc = 0.0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        acc += static_cast<double>(adv_probs[i]) * static_cast<double>(c_row[i]);
    }
    return acc / static_cast<double>(kNumLabels - 1);
}

namespace {

// regularized incomplete beta via the continued fraction (Lentz)
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double reg_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
        b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

PearsonResult pearson_with_pvalue(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("pearson: series lengths differ (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    }
    const std::size_t n = a.size();
    if (n < 3) throw std::invalid_argument("pearson needs at least 3 points");
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) throw std::invalid_argument("pearson: zero-variance series");

    // r through r^2 = cov^2/(va*vb): bit-exact 1 for identical series
    double r2 = (cov * cov) / (va * vb);
    if (r2 > 1.0) r2 = 1.0;
    PearsonResult res;
    res.r = std::copysign(std::sqrt(r2), cov);

    const double df = static_cast<double>(n - 2);
    if (r2 >= 1.0) {
        res.p = 0.0;
    } else {
        const double t2 = r2 * df / (1.0 - r2);
        res.p = reg_incomplete_beta(0.5 * df, 0.5, df / (df + t2));
    }
    return res;
}

PearsonResult pearson_with_pvalue(const MetricSeries& a, const MetricSeries& b) {
    return pearson_with_pvalue(std::span<const double>(a.values),
                               std::span<const double>(b.values));
}

}  // namespace advbench
