#include "spatseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "spatseg/tensor.hpp"

namespace spatseg {

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth, std::uint8_t positive_class) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw ShapeError("confusion: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.labels[i] == positive_class;
        const bool t = truth.labels[i] == positive_class;
        if (p && t) {
            ++c.tp;
        } else if (p) {
            ++c.fp;
        } else if (t) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

SegmentationScores scores(const ConfusionCounts& c) {
    const bool pred_empty = c.tp + c.fp == 0;
    const bool truth_empty = c.tp + c.fn == 0;
    if (pred_empty && truth_empty) return {1.0, 1.0, 1.0};
    if (pred_empty || truth_empty) return {0.0, 0.0, 0.0};
    const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
    return {2.0 * tp / (2.0 * tp + fp + fn), tp / (tp + fp), tp / (tp + fn)};
}

MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("mean_std: empty input");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n)};
}

MetricsReport aggregate(std::vector<ImageScores> per_image, std::string method, std::string dataset) {
    if (per_image.empty()) throw std::invalid_argument("aggregate: no per-image scores");
    MetricsReport r;
    r.method = std::move(method);
    r.dataset = std::move(dataset);
    std::vector<double> d, p, rc;
    for (const auto& s : per_image) {
        d.push_back(s.dice);
        p.push_back(s.precision);
        rc.push_back(s.recall);
    }
    r.dice = mean_std(d);
    r.precision = mean_std(p);
    r.recall = mean_std(rc);
    r.per_image = std::move(per_image);
    return r;
}

nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["method"] = r.method;
    j["dataset"] = r.dataset;
    j["per_image"] = nlohmann::json::array();
    for (const auto& s : r.per_image) {
        j["per_image"].push_back({{"id", s.id}, {"dice", s.dice}, {"precision", s.precision}, {"recall", s.recall}});
    }
    auto ms = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
    j["aggregate"] = {{"dice", ms(r.dice)}, {"precision", ms(r.precision)}, {"recall", ms(r.recall)}};
    return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
    std::vector<ImageScores> rows;
    for (const auto& row : j.at("per_image")) {
        rows.push_back({row.at("id").get<std::string>(), row.at("dice").get<double>(),
                        row.at("precision").get<double>(), row.at("recall").get<double>()});
    }
    return aggregate(std::move(rows), j.value("method", std::string{}), j.value("dataset", std::string{}));
}

// ---- Wilcoxon ---------------------------------------------------------------------------

std::vector<double> average_ranks(const std::vector<double>& values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double wilcoxon_exact_p(const std::vector<double>& ranks, double w) {
    // Ranks are multiples of 1/2, so doubled ranks are integers and the null
    // distribution of 2*W+ can be counted with a subset-sum table.
    std::vector<long> twice;
    long max_sum = 0;
    for (double r : ranks) {
        twice.push_back(std::lround(2.0 * r));
        max_sum += twice.back();
    }
    std::vector<double> count(static_cast<std::size_t>(max_sum) + 1, 0.0);
    count[0] = 1.0;
    long reach = 0;
    for (long t : twice) {
        for (long s = reach; s >= 0; --s) count[static_cast<std::size_t>(s + t)] += count[static_cast<std::size_t>(s)];
        reach += t;
    }
    const long limit = std::lround(2.0 * w);
    double tail = 0.0;
    for (long s = 0; s <= std::min(limit, max_sum); ++s) tail += count[static_cast<std::size_t>(s)];
    const double p = 2.0 * tail / std::ldexp(1.0, static_cast<int>(ranks.size()));
    return std::min(1.0, p);
}

double wilcoxon_normal_p(const std::vector<double>& ranks, double w) {
    double sum = 0.0, sum_sq = 0.0;
    for (double r : ranks) {
        sum += r;
        sum_sq += r * r;
    }
    // Under the null, W+ has mean sum(r)/2 and variance sum(r^2)/4; with
    // average ranks this is the usual tie-corrected n(n+1)(2n+1)/24 - sum(t^3-t)/48.
    const double mean = sum / 2.0;
    const double sd = std::sqrt(sum_sq / 4.0);
    const double z = std::min(0.0, w - mean + 0.5) / sd;
    return std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("wilcoxon_signed_rank: sample sizes differ (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.size() < kWilcoxonMinPairs) {
        throw std::invalid_argument("wilcoxon_signed_rank: need at least " + std::to_string(kWilcoxonMinPairs) +
                                    " nonzero differences, got " + std::to_string(diffs.size()));
    }
    std::vector<double> mags(diffs.size());
    std::transform(diffs.begin(), diffs.end(), mags.begin(), [](double d) { return std::abs(d); });
    const std::vector<double> ranks = average_ranks(mags);

    WilcoxonResult res;
    res.n_effective = diffs.size();
    for (std::size_t i = 0; i < diffs.size(); ++i) (diffs[i] > 0 ? res.w_plus : res.w_minus) += ranks[i];
    res.w = std::min(res.w_plus, res.w_minus);
    if (res.n_effective <= kWilcoxonExactMaxN) {
        res.method = WilcoxonMethod::Exact;
        res.p_value = wilcoxon_exact_p(ranks, res.w);
    } else {
        res.method = WilcoxonMethod::NormalApproximation;
        res.p_value = wilcoxon_normal_p(ranks, res.w);
    }
    return res;
}

}  // namespace spatseg
