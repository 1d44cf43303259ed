#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace safepred {

enum class Activation { relu, tanh, sigmoid, identity };
enum class LossKind { ce, bce, mse };

const char* activation_name(Activation act);
Activation parse_activation(const std::string& name);

inline constexpr double kProbEpsilon = 1e-7;

/// Sparse input vector. Dense inputs are converted by dropping exact zeros.
struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  static SparseVector from_dense(std::span<const double> x);
  std::vector<double> to_dense() const;
  std::size_t nnz() const { return index.size(); }
};

struct LayerShape {
  int in = 0;
  int out = 0;
  Activation act = Activation::identity;
  std::size_t weight_offset = 0;  // row-major out x in
  std::size_t bias_offset = 0;
};

/// Feedforward net with all parameters in one flat vector.
class DenseNet {
 public:
  DenseNet() = default;

  /// dims = {input, hidden..., output}; one activation per layer. Weights are
  /// uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  DenseNet(const std::vector<int>& dims, const std::vector<Activation>& acts, std::uint64_t seed);

  int input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
  int output_dim() const { return layers_.empty() ? 0 : layers_.back().out; }
  std::span<const LayerShape> layers() const { return layers_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::vector<double> forward(std::span<const double> x) const;
  std::vector<double> forward(const SparseVector& x) const;

  /// Post-activation outputs of every layer, kept for backward.
  struct Tape {
    std::vector<std::vector<double>> outputs;
  };
  void forward(const SparseVector& x, Tape& tape) const;

  /// Backpropagates `delta` (dL/d pre-activation of the last layer) and adds
  /// the parameter gradient into `grad` (skipped when `grad` is empty). If
  /// `input_grad` is non-null it receives dL/dx (dense).
  void backward(const SparseVector& x, const Tape& tape, std::span<const double> delta, std::span<double> grad,
                std::vector<double>* input_grad = nullptr) const;

  nlohmann::json to_json() const;
  static DenseNet from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DenseNet load(const std::filesystem::path& path);

  bool operator==(const DenseNet& other) const;

 private:
  void check_input(std::size_t dim) const;

  std::vector<LayerShape> layers_;
  std::vector<double> params_;
};

double softmax_first(std::span<const double> logits);
std::vector<double> softmax(std::span<const double> logits);

/// ce: prediction holds logits, target a class distribution (sum over classes).
/// bce: prediction holds probabilities, mean over elements.
/// mse: mean over elements. Probabilities are clamped to [eps, 1 - eps].
double loss(LossKind kind, std::span<const double> prediction, std::span<const double> target);

/// dL/d pre-activation of the last layer given the net output. bce over a
/// sigmoid output uses the fused form (p - t) / n.
std::vector<double> output_delta(LossKind kind, Activation last, std::span<const double> output,
                                 std::span<const double> target);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> grad;  // same layout as DenseNet::params()
};

LossGradient loss_gradient(const DenseNet& net, std::span<const double> input, std::span<const double> target,
                           LossKind kind);

struct Example {
  SparseVector input;
  std::vector<double> target;
};

/// Mean loss and mean gradient over `batch` (indices into `examples`).
/// Works in fixed chunks reduced in chunk order, so the result does not
/// depend on the thread count. OpenMP over chunks.
double batch_gradient(const DenseNet& net, std::span<const Example> examples, std::span<const std::size_t> batch,
                      LossKind kind, std::span<double> grad);

/// Serial reference: plain left-to-right accumulation.
double batch_gradient_serial(const DenseNet& net, std::span<const Example> examples,
                             std::span<const std::size_t> batch, LossKind kind, std::span<double> grad);

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t batch_size = 128;
  int max_epochs = 100;
  double lr_reduction_factor = 0.1;
  int patience_epochs = 5;
  int early_stop_patience = 15;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Reduce-on-plateau learning rate plus early stopping, driven by epoch loss.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainConfig& cfg);
  /// Records one epoch; returns false when training should stop.
  bool record(double epoch_loss);
  double learning_rate() const { return lr_; }

 private:
  TrainConfig cfg_;
  double lr_;
  double best_;
  int since_best_ = 0;
  int since_reduction_ = 0;
};

struct TrainResult {
  DenseNet net;
  std::vector<double> loss_history;  // one entry per epoch
};

/// Minibatch SGD with seeded shuffling. Throws Errc::divergence on a non-finite loss.
TrainResult sgd_train(DenseNet net, std::span<const Example> examples, LossKind kind, const TrainConfig& cfg);

/// Same Glorot bound used for initialisation.
double glorot_bound(int fan_in, int fan_out);

}  // namespace safepred
