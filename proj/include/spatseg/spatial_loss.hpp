#pragma once

// Spatially consistent training loss: mean cross entropy against the
// (possibly inaccurate) training labels plus a local pairwise term over
// each pixel's 8-neighborhood.
//
// For pixel i with in-image neighbors j, predicted labels Yhat and
// confidences P (probability of the predicted class):
//
//   mu_ij  = -exp(-(I_i - I_j)^2 / (2 sigma^2))   if Yhat_i == Yhat_j
//            +exp(-(I_i - I_j)^2 / (2 sigma^2))   otherwise
//   psi_i  = sum_j mu_ij P_i P_j / sum_j |mu_ij|
//   L      = mean_i(-log p_i[Y_i]) + lambda * sum_i psi_i
//
// Yhat and mu are constants within a step; gradients reach the network only
// through P (and through the cross entropy).

#include <array>
#include <cstdint>
#include <vector>

#include "spatseg/autodiff.hpp"
#include "spatseg/image.hpp"
#include "json.hpp"

namespace spatseg {

enum class Reduction { Sum, Mean };

struct SpatialLossConfig {
    double sigma = 0.5;
    double lambda = 1.0;
    Reduction pairwise_reduction = Reduction::Sum;

    void validate() const;
};

void to_json(nlohmann::json& j, const SpatialLossConfig& c);
void from_json(const nlohmann::json& j, SpatialLossConfig& c);

/// Neighbor slot order: (dy,dx) row-major over the 3x3 window without its center.
inline constexpr std::array<std::array<int, 2>, 8> kNeighborOffsets = {
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

struct PairwiseField {
    std::size_t height = 0;
    std::size_t width = 0;
    /// mu[(y*width + x)*8 + slot]; zero for neighbors outside the image.
    std::vector<double> mu;
    /// Per-pixel normalized cost psi_i; filled by pairwise_cost.
    std::vector<double> psi;

    double mu_at(std::size_t y, std::size_t x, std::size_t slot) const { return mu[(y * width + x) * 8 + slot]; }
};

PairwiseField neighbor_weights(const Image& image, const LabelMap& labels, const SpatialLossConfig& config);

/// Reduced pairwise cost as a differentiable scalar in `confidence` ([H,W]).
/// Fills field.psi with the per-pixel costs.
Var pairwise_cost(PairwiseField& field, Var confidence, Reduction reduction);

struct ConfidenceMap {
    LabelMap predicted;  // argmax labels (constant)
    Var confidence;      // [H,W] probability of the predicted class
};

ConfidenceMap confidence_map(Var probs);

struct LossBreakdown {
    double unary = 0.0;
    double pairwise = 0.0;
    double total = 0.0;
    Var total_var;
    PairwiseField field;
    LabelMap predicted;
};

/// Unary + lambda * pairwise. With include_pairwise false the pairwise
/// term is skipped outright (cross-entropy-only training) and reported as 0.
LossBreakdown total_loss(Var probs, const LabelMap& target, const Image& image, const SpatialLossConfig& config,
                         bool include_pairwise = true);

/// Independent reference for the reduced pairwise cost: loops over every
/// ordered pixel pair, testing adjacency directly. No code shared with
/// neighbor_weights / pairwise_cost.
double brute_force_pairwise(const Image& image, const LabelMap& labels, const std::vector<double>& confidence,
                            const SpatialLossConfig& config);

}  // namespace spatseg
