#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spatseg/image.hpp"
#include "json.hpp"

namespace spatseg {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::uint64_t total() const { return tp + fp + fn + tn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth, std::uint8_t positive_class = 1);

/// Dice, precision and recall. Degenerate cases: both masks empty gives 1
/// for all three; exactly one side empty gives 0 for all three.
struct SegmentationScores {
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

SegmentationScores scores(const ConfusionCounts& c);

struct ImageScores {
    std::string id;
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population (N divisor)
};

struct MetricsReport {
    std::string method;
    std::string dataset;
    std::vector<ImageScores> per_image;
    MeanStd dice, precision, recall;
};

MeanStd mean_std(const std::vector<double>& values);

/// Fills the aggregate fields from per_image. Throws on an empty list.
MetricsReport aggregate(std::vector<ImageScores> per_image, std::string method = {}, std::string dataset = {});

nlohmann::json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

// ---- Wilcoxon signed-rank -------------------------------------------------------

enum class WilcoxonMethod { Exact, NormalApproximation };

struct WilcoxonResult {
    std::size_t n_effective = 0;
    double w = 0.0;  // min(W+, W-)
    double w_plus = 0.0;
    double w_minus = 0.0;
    double p_value = 1.0;  // two-sided
    WilcoxonMethod method = WilcoxonMethod::Exact;
};

inline constexpr std::size_t kWilcoxonMinPairs = 5;
inline constexpr std::size_t kWilcoxonExactMaxN = 20;

/// Average ranks (1-based) of the values; ties share the mean of their ranks.
std::vector<double> average_ranks(const std::vector<double>& values);

/// Paired two-sided test on a_i - b_i. Zero differences are dropped; fewer
/// than 5 remaining pairs is an error. n <= 20 uses the exact null
/// distribution of the observed ranks; larger n uses the normal
/// approximation with tie and continuity corrections.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

/// Two-sided exact p for statistic w given the (possibly tied) ranks:
/// 2 * P(W+ <= w) under independent fair signs, capped at 1.
double wilcoxon_exact_p(const std::vector<double>& ranks, double w);

/// Two-sided normal-approximation p for statistic w, with the tie
/// correction computed from the ranks and a 0.5 continuity correction.
double wilcoxon_normal_p(const std::vector<double>& ranks, double w);

}  // namespace spatseg
