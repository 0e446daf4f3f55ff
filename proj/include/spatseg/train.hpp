#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spatseg/metrics.hpp"
#include "spatseg/spatial_loss.hpp"
#include "spatseg/unet.hpp"
#include "json.hpp"

namespace spatseg {

// ---- Adam -----------------------------------------------------------------------------

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

void to_json(nlohmann::json& j, const AdamHyper& h);
void from_json(const nlohmann::json& j, AdamHyper& h);

struct AdamState {
    std::uint64_t t = 0;
    std::vector<Tensor> m;  // one per trainable entry, in entry order
    std::vector<Tensor> v;

    static AdamState zeros_like(const ModelParams& params);
};

class NonFiniteGradient : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update of every trainable entry. `grads` is
/// aligned with params.entries (entries without a gradient may be empty and
/// are treated as zero). Throws NonFiniteGradient naming the parameter
/// before anything is modified.
void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state, const AdamHyper& hyper);

// ---- run configuration -------------------------------------------------------------------

enum class LabelSource { Pseudo, Truth };
enum class LossKind { Spatial, CrossEntropyOnly };

struct RunConfig {
    UNetConfig model;
    SpatialLossConfig loss;
    LossKind loss_kind = LossKind::Spatial;
    AdamHyper optimizer;
    std::size_t epochs = 50;
    std::size_t batch_size = 1;
    std::uint64_t seed = 1;
    std::uint64_t init_seed = 1;
    std::string data_dir;
    LabelSource label_source = LabelSource::Pseudo;
    /// Resize inputs to this size (0 = keep) with bilinear interpolation.
    std::size_t resize = 0;
    /// Half-open index range of the dataset used for training; end 0 = all.
    std::size_t range_begin = 0;
    std::size_t range_end = 0;
    bool log_wall_time = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// ---- data ----------------------------------------------------------------------------------

struct DatasetItem {
    std::string id;
    Image image;
    LabelMap pseudo;
    LabelMap truth;  // empty when the dataset has no truth/ directory
};

class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Loads images/ plus labels/ and/or truth/ (matching file stems). Missing
/// directories only raise when required.
std::vector<DatasetItem> load_dataset(const std::filesystem::path& dir, bool need_pseudo, bool need_truth,
                                      std::size_t resize = 0);

// ---- training ------------------------------------------------------------------------------

struct LogRow {
    std::size_t epoch = 0;
    std::size_t step = 0;  // global step, 0-based
    double unary = 0.0;
    double pairwise = 0.0;
    double total = 0.0;
    double wall_time = 0.0;
};

inline constexpr const char* kTrainLogHeader = "epoch,step,unary,pairwise,total,wall_time";
std::string format_log_row(const LogRow& row);

struct TrainOptions {
    /// Stop after this many global steps (0 = run all epochs). Used to
    /// produce mid-run checkpoints.
    std::size_t max_steps = 0;
    std::function<void(const LogRow&)> on_step;
};

struct TrainResult {
    ModelParams params;
    AdamState adam;
    std::vector<LogRow> log;
    TrainingState state;
};

/// Trains on the given items. Each epoch visits the items in an order
/// shuffled from (seed, epoch); each step runs forward (train mode),
/// the loss, backward and one Adam update; dropout masks come from a tape
/// seeded by (seed, step). `resume` continues a previous run exactly.
TrainResult train(const RunConfig& config, const std::vector<DatasetItem>& items, const TrainOptions& options = {},
                  const Checkpoint* resume = nullptr);

/// The seeded shuffle used for an epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);
std::uint64_t step_seed(std::uint64_t seed, std::size_t global_step);

void write_train_log(const std::filesystem::path& path, const std::vector<LogRow>& rows);

// ---- evaluation ----------------------------------------------------------------------------

/// Scores per image against truth; `predict_fn` produces a label map for
/// each item. Runs over up to `threads` workers with results ordered by
/// item index.
MetricsReport evaluate(const std::vector<DatasetItem>& items,
                       const std::function<LabelMap(const DatasetItem&)>& predict_fn, std::size_t threads,
                       std::string method = {}, std::string dataset = {});

/// Worker count from SPATSEG_THREADS (default: hardware concurrency, >= 1).
std::size_t eval_threads_from_env();

double pixel_accuracy(const LabelMap& pred, const LabelMap& truth);

}  // namespace spatseg
