#include "spatseg/spatial_loss.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace spatseg {

void SpatialLossConfig::validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("SpatialLossConfig: sigma must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("SpatialLossConfig: lambda must be >= 0");
}

void to_json(nlohmann::json& j, const SpatialLossConfig& c) {
    j = nlohmann::json{{"sigma", c.sigma},
                       {"lambda", c.lambda},
                       {"pairwise_reduction", c.pairwise_reduction == Reduction::Sum ? "sum" : "mean"}};
}

void from_json(const nlohmann::json& j, SpatialLossConfig& c) {
    SpatialLossConfig d;
    c.sigma = j.value("sigma", d.sigma);
    c.lambda = j.value("lambda", d.lambda);
    const std::string red = j.value("pairwise_reduction", std::string("sum"));
    if (red == "sum") {
        c.pairwise_reduction = Reduction::Sum;
    } else if (red == "mean") {
        c.pairwise_reduction = Reduction::Mean;
    } else {
        throw ConfigError("pairwise_reduction must be 'sum' or 'mean', got '" + red + "'");
    }
}

PairwiseField neighbor_weights(const Image& image, const LabelMap& labels, const SpatialLossConfig& config) {
    config.validate();
    if (image.height != labels.height || image.width != labels.width) {
        throw ShapeError("neighbor_weights: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " vs labels " + std::to_string(labels.height) + "x" + std::to_string(labels.width));
    }
    const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
    const double inv_two_sigma_sq = 1.0 / (2.0 * config.sigma * config.sigma);
    PairwiseField f;
    f.height = image.height;
    f.width = image.width;
    f.mu.assign(image.size() * 8, 0.0);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y * w + x);
            for (std::size_t s = 0; s < 8; ++s) {
                const long ny = y + kNeighborOffsets[s][0], nx = x + kNeighborOffsets[s][1];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                const std::size_t j = static_cast<std::size_t>(ny * w + nx);
                const double d = image.pixels[i] - image.pixels[j];
                const double k = std::exp(-d * d * inv_two_sigma_sq);
                f.mu[i * 8 + s] = labels.labels[i] == labels.labels[j] ? -k : k;
            }
        }
    return f;
}

Var pairwise_cost(PairwiseField& field, Var confidence, Reduction reduction) {
    const Shape expect{field.height, field.width};
    if (confidence.shape() != expect) {
        throw ShapeError("pairwise_cost: confidence " + shape_str(confidence.shape()) + " vs field " +
                         shape_str(expect));
    }
    const long h = static_cast<long>(field.height), w = static_cast<long>(field.width);
    const std::size_t n = field.height * field.width;
    const Tensor& p = confidence.value();

    // coef[i*8+s] = mu_is / S_i, the weight of P_i * P_j in psi_i.
    std::vector<double> coef(n * 8, 0.0);
    field.psi.assign(n, 0.0);
    double total = 0.0;
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y * w + x);
            double norm = 0.0;
            for (std::size_t s = 0; s < 8; ++s) norm += std::abs(field.mu[i * 8 + s]);
            if (!(norm > 0.0)) {
                throw std::domain_error("pairwise_cost: pixel (" + std::to_string(y) + "," + std::to_string(x) +
                                        ") has no weighted neighbor (sum |mu| = 0)");
            }
            double acc = 0.0;
            for (std::size_t s = 0; s < 8; ++s) {
                const double m = field.mu[i * 8 + s];
                if (m == 0.0) continue;
                const std::size_t j = static_cast<std::size_t>((y + kNeighborOffsets[s][0]) * w + x +
                                                               kNeighborOffsets[s][1]);
                coef[i * 8 + s] = m / norm;
                acc += coef[i * 8 + s] * p[j];
            }
            field.psi[i] = acc * p[i];
            total += field.psi[i];
        }
    const double red = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
    return confidence.tape().record(
        "pairwise_cost", Tensor({1}, {total * red}), {confidence},
        [h, w, red, p, coef = std::move(coef)](const Tensor& g, std::span<Tensor*> gi) {
            Tensor& dp = *gi[0];
            const double gs = g[0] * red;
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y * w + x);
                    for (std::size_t s = 0; s < 8; ++s) {
                        const double c = coef[i * 8 + s];
                        if (c == 0.0) continue;
                        const std::size_t j = static_cast<std::size_t>((y + kNeighborOffsets[s][0]) * w + x +
                                                                       kNeighborOffsets[s][1]);
                        dp[i] += gs * c * p[j];
                        dp[j] += gs * c * p[i];
                    }
                }
        });
}

ConfidenceMap confidence_map(Var probs) {
    ConfidenceMap c;
    c.predicted = argmax_channels(probs.value());
    const std::size_t k = probs.shape()[0], hw = c.predicted.size();
    // Record how close each pixel is to flipping its argmax.
    double margin = std::numeric_limits<double>::infinity();
    const Tensor& p = probs.value();
    for (std::size_t i = 0; i < hw; ++i) {
        const double best = p[c.predicted.labels[i] * hw + i];
        for (std::size_t cls = 0; cls < k; ++cls)
            if (cls != c.predicted.labels[i]) margin = std::min(margin, best - p[cls * hw + i]);
    }
    probs.tape().note_decision_margin(margin);
    c.confidence = select_channels(probs, c.predicted);
    return c;
}

LossBreakdown total_loss(Var probs, const LabelMap& target, const Image& image, const SpatialLossConfig& config,
                         bool include_pairwise) {
    config.validate();
    LossBreakdown out;
    Var unary = cross_entropy_mean(probs, target);
    out.unary = unary.value()[0];
    if (!include_pairwise) {
        out.total = out.unary;
        out.total_var = unary;
        return out;
    }
    ConfidenceMap conf = confidence_map(probs);
    out.field = neighbor_weights(image, conf.predicted, config);
    Var pair = pairwise_cost(out.field, conf.confidence, config.pairwise_reduction);
    out.pairwise = pair.value()[0];
    out.total_var = add(unary, scale(pair, config.lambda));
    out.total = out.total_var.value()[0];
    out.predicted = std::move(conf.predicted);
    return out;
}

double brute_force_pairwise(const Image& image, const LabelMap& labels, const std::vector<double>& confidence,
                            const SpatialLossConfig& config) {
    const std::size_t n = image.height * image.width;
    if (labels.size() != n || confidence.size() != n || labels.width != image.width) {
        throw ShapeError("brute_force_pairwise: inputs disagree in size");
    }
    const double sigma = config.sigma;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const long yi = static_cast<long>(i / image.width), xi = static_cast<long>(i % image.width);
        double numer = 0.0, denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const long yj = static_cast<long>(j / image.width), xj = static_cast<long>(j % image.width);
            const bool in_r = std::labs(yi - yj) <= 1 && std::labs(xi - xj) <= 1;
            double mu = 0.0;
            if (in_r) {
                const double diff = image.pixels[i] - image.pixels[j];
                const double g = std::exp(-(diff * diff) / (2.0 * sigma * sigma));
                mu = labels.labels[i] == labels.labels[j] ? -g : +g;
            }
            numer += mu * confidence[i] * confidence[j];
            denom += std::abs(mu);
        }
        total += numer / denom;
    }
    return config.pairwise_reduction == Reduction::Mean ? total / static_cast<double>(n) : total;
}

}  // namespace spatseg
