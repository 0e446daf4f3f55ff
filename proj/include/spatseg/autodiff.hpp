#pragma once

// Reverse-mode differentiation over dense double tensors.
//
// A Tape owns every node produced during one forward computation. Ops append
// a record (inputs, output, backward closure) only when at least one input
// requires a gradient, so records are in topological order by construction
// and backward() simply replays them in reverse.

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spatseg/image.hpp"
#include "spatseg/tensor.hpp"

namespace spatseg {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
   public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    /// Accumulated gradient; empty Tensor until backward() has reached this node.
    const Tensor& grad() const;

   private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Backward closure: receives d(root)/d(output) and a gradient buffer per
/// input (nullptr for inputs that do not require a gradient). Buffers are
/// pre-sized and must be accumulated into, never overwritten.
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor*> in_grads)>;

class BackwardError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

class Tape {
   public:
    explicit Tape(std::uint64_t seed = 0) : rng_(seed) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);

    /// Appends an op result. `backward` may be empty for ops with no
    /// differentiable inputs.
    Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    void backward(Var root);
    bool backward_done() const { return backward_done_; }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t record_count() const { return records_.size(); }

    /// Deterministic stream for stochastic ops (dropout).
    std::mt19937_64& rng() { return rng_; }

    /// Smallest margin seen at a discrete decision (maxpool winner vs runner-up,
    /// class argmax). Finite-difference checks are only meaningful when this
    /// exceeds the perturbation size.
    void note_decision_margin(double m) { decision_margin_ = std::min(decision_margin_, m); }
    double decision_margin() const { return decision_margin_; }
    /// Smallest |x| fed to a ReLU.
    void note_relu_margin(double m) { relu_margin_ = std::min(relu_margin_, m); }
    double relu_margin() const { return relu_margin_; }

   private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
    };
    struct Record {
        std::string op;
        std::vector<std::size_t> inputs;
        std::size_t output;
        BackwardFn backward;
    };

    Var push(Tensor value, bool requires_grad);

    std::deque<Node> nodes_;
    std::vector<Record> records_;
    std::mt19937_64 rng_;
    bool backward_done_ = false;
    double decision_margin_ = std::numeric_limits<double>::infinity();
    double relu_margin_ = std::numeric_limits<double>::infinity();
};

enum class Padding { Same, None };
enum class Mode { Train, Eval };

// ---- elementwise / reductions -------------------------------------------

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);

// ---- layers ---------------------------------------------------------------

/// Cross-correlation of input [C_in,H,W] with kernel [C_out,C_in,kh,kw].
/// Same padding zero-pads by k/2 and needs odd kernel sizes.
Var conv2d(Var input, Var kernel, Var bias, Padding padding = Padding::Same);
/// Bias-free variant (used ahead of batch normalization).
Var conv2d(Var input, Var kernel, Padding padding = Padding::Same);

struct MaxPoolResult {
    Var output;
    /// Flat input index of the winner for every output element.
    std::vector<std::size_t> argmax;
};
/// 2x2 stride-2 max pooling; ties go to the first element in row-major order.
MaxPoolResult maxpool_2x2(Var input);

/// Stride-2 transposed convolution, kernel [C_in,C_out,2,2], output [C_out,2H,2W].
Var upconv_2x2(Var input, Var kernel, Var bias);

Var relu(Var input);
/// Softmax over axis 0 of a [K,H,W] tensor.
Var softmax_channels(Var logits);
/// Stacks channels of two [C,H,W] tensors: a first, then b.
Var concat_channels(Var a, Var b);

/// Inverted dropout driven by the tape's RNG stream. Identity in eval mode
/// or when rate == 0.
Var dropout(Var input, double rate, Mode mode);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct BatchNormStats {
    std::vector<double> mean;
    std::vector<double> var;
};

/// Per-channel normalization over spatial positions of [C,H,W] followed by
/// the affine map gamma * x + beta. Train mode normalizes with the batch
/// statistics and, when `batch_stats` is given, writes them there; eval mode
/// uses the running statistics.
Var batchnorm(Var input, Var gamma, Var beta, Mode mode, const Tensor& running_mean, const Tensor& running_var,
              BatchNormStats* batch_stats = nullptr);

/// Blends a batch statistic into a running one with kBatchNormMomentum.
void update_running_stats(Tensor& running_mean, Tensor& running_var, const BatchNormStats& batch);

// ---- classification ---------------------------------------------------------

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over pixels of -log(max(p[target], 1e-12)) for probs [K,H,W].
Var cross_entropy_mean(Var probs, const LabelMap& target);

/// Per-pixel argmax over channels of [K,H,W]; ties go to the lower class id.
LabelMap argmax_channels(const Tensor& probs);

/// Picks probs[labels(y,x), y, x] into an [H,W] tensor.
Var select_channels(Var probs, const LabelMap& labels);

// ---- gradient verification --------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_coordinate = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares the tape gradient of f at `point` against central differences
/// (f(x+h e_k) - f(x-h e_k)) / 2h, coordinate by coordinate, with relative
/// error |a - n| / max(1e-8, |a| + |n|). Every evaluation of f runs on a
/// fresh tape seeded with `tape_seed`, so stochastic ops see the same draws.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-5, std::uint64_t tape_seed = 0);

double relative_error(double analytic, double numeric);

}  // namespace spatseg
