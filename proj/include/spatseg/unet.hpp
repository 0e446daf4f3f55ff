#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spatseg/autodiff.hpp"
#include "spatseg/image.hpp"
#include "spatseg/tensor.hpp"

#include "json.hpp"

namespace spatseg {

struct UNetConfig {
    std::size_t depth = 3;  // resolution levels; depth d has d-1 poolings
    std::size_t base_channels = 8;
    std::size_t in_channels = 1;
    std::size_t num_classes = 2;
    double dropout_rate = 0.25;
    bool use_batchnorm = true;

    void validate() const;
    /// Spatial sizes must be multiples of this.
    std::size_t required_divisor() const { return std::size_t{1} << (depth - 1); }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

enum class ParamKind { Kernel, Bias, Gamma, Beta, RunningMean, RunningVar };

struct ParamEntry {
    std::string name;
    ParamKind kind;
    Tensor value;

    bool trainable() const { return kind != ParamKind::RunningMean && kind != ParamKind::RunningVar; }
};

/// All network state in a fixed order. For each encoder level l = 0..depth-1:
///   enc{l}.conv1, enc{l}.conv2
/// then for each decoder level l = depth-2..0:
///   dec{l}.up.weight [C_{l+1},C_l,2,2], dec{l}.up.bias, dec{l}.conv1, dec{l}.conv2
/// then head.weight [K,C_0,1,1], head.bias [K].
/// Each 3x3 conv "X" contributes X.weight [C_out,C_in,3,3] followed by either
/// X.bias (no batchnorm) or X.bn.gamma, X.bn.beta, X.bn.running_mean,
/// X.bn.running_var (batchnorm; the conv then carries no bias). C_l = base * 2^l.
struct ModelParams {
    UNetConfig config;
    std::vector<ParamEntry> entries;

    std::size_t index_of(const std::string& name) const;
    const Tensor& at(const std::string& name) const { return entries[index_of(name)].value; }
    Tensor& at(const std::string& name) { return entries[index_of(name)].value; }
    std::size_t trainable_count() const;
};

/// Names, kinds and shapes of every entry, values zero.
ModelParams param_layout(const UNetConfig& config);

/// He-normal kernels (std sqrt(2/fan_in)), zero biases, gamma 1, beta 0,
/// running mean 0, running var 1. Deterministic per seed.
ModelParams init_params(const UNetConfig& config, std::uint64_t seed);

/// fan_in used for the He initialization of a kernel entry.
std::size_t kernel_fan_in(const ParamEntry& entry);

/// Tape handles aligned with ModelParams::entries. Trainable entries are
/// variables; running statistics are constants.
std::vector<Var> bind_params(const ModelParams& params, Tape& tape);

struct ForwardResult {
    Var probs;  // [K,H,W]
    /// Batch statistics per batchnorm layer, keyed by the index of its
    /// running_mean entry (train mode only).
    std::vector<std::pair<std::size_t, BatchNormStats>> batch_stats;
};

ForwardResult forward(const ModelParams& params, std::span<const Var> bound, const Image& image, Mode mode,
                      Tape& tape);
ForwardResult forward(const ModelParams& params, const Image& image, Mode mode, Tape& tape);

void apply_batch_stats(ModelParams& params, const ForwardResult& result);

struct Prediction {
    LabelMap labels;
    Tensor probs;
};

/// Eval-mode forward pass with per-pixel argmax (ties to the lower class id).
Prediction predict(const ModelParams& params, const Image& image);

// ---- checkpoints -------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Optional trainer state carried after the model entries so a run can be
/// resumed exactly.
struct TrainingState {
    std::uint64_t global_step = 0;
    std::uint64_t epoch = 0;       // next epoch to run
    std::uint64_t epoch_step = 0;  // steps already taken inside `epoch`
    std::uint64_t adam_t = 0;
    std::vector<Tensor> adam_m;  // aligned with trainable entries
    std::vector<Tensor> adam_v;
    nlohmann::json run_config;
};

struct Checkpoint {
    ModelParams params;
    std::optional<TrainingState> training;
};

/// Layout: "SCDN", u32 version, u32 header length, header JSON
/// {"model": UNetConfig, ["training": {...}]}, then per entry:
/// u32 name length, name bytes, u32 rank, u32 dims..., little-endian f64 values.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const TrainingState* training = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected = nullptr);

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params, const TrainingState* training = nullptr);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const UNetConfig* expected = nullptr);

}  // namespace spatseg
