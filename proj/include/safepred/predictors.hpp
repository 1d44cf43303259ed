#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "safepred/data.hpp"
#include "safepred/nets.hpp"

namespace safepred {

/// Nets see "darkness" (1 - pixel), so the white background encodes as zeros.
void append_darkness(const Observation& obs, std::size_t offset, SparseVector& out);
SparseVector encode_frame(const Observation& obs);
std::vector<double> darkness(const Observation& obs);
Observation observation_from_darkness(std::span<const double> dark);

/// Flattened m-frame window, optionally followed by the m actions as +-1.
SparseVector encode_window(std::span<const ObservationPtr> frames, std::span<const double> actions);

/// Class index 0 is "safe": label 1 -> (1, 0), label 0 -> (0, 1).
std::vector<double> one_hot_safety(int label);

/// Hidden widths and latent size for every learned component.
struct ArchConfig {
  int monolithic_hidden = 64;
  int forecaster_hidden = 64;
  int evaluator_hidden = 32;
  int autoencoder_hidden = 128;
  int latent_dim = 8;
  int latent_forecaster_hidden = 64;
};

struct MonolithicPredictor {
  DenseNet net;
  int m = 1;
  int k = 0;
  bool controller_specific = true;
};

struct ImageForecaster {
  DenseNet net;
  int m = 1;
  bool uses_actions = false;

  /// One-step forecast of the frame after `frames`.
  Observation forecast(std::span<const ObservationPtr> frames, std::span<const double> actions) const;
};

struct SafetyAutoencoder {
  DenseNet encoder;  // H*W darkness -> (mean, log-variance), 2L outputs
  DenseNet decoder;  // L -> H*W darkness, sigmoid
  int latent_dim = 8;
  double lambda1 = 1.0;
  double lambda2 = static_cast<double>(Observation::kPixels);

  void validate() const;
  /// Latent mean.
  std::vector<double> encode(const Observation& obs) const;
  Observation decode(std::span<const double> z) const;
};

struct LatentForecaster {
  DenseNet net;
  int m = 1;
  int latent_dim = 8;
  bool uses_actions = false;

  std::vector<double> forecast(std::span<const std::vector<double>> latents, std::span<const double> actions) const;
};

enum class EvaluatorKind { learned, robust_feature };

struct Evaluator {
  EvaluatorKind kind = EvaluatorKind::robust_feature;
  std::optional<DenseNet> net;
  bool augmented = false;

  void validate() const;
  /// Probability of "safe"; the robust-feature rule returns 0 or 1.
  double score(const Observation& obs) const;
};

/// Geometric evaluator: undo inversion via the global median, fit the pole's
/// angle from per-row dark-pixel centroids, return 1 iff |angle| <= 6 degrees.
int robust_evaluate(const Observation& obs);

struct CompositeImagePredictor {
  ImageForecaster forecaster;
  Evaluator evaluator;
  int k = 0;
  bool controller_specific = true;
};

struct CompositeLatentPredictor {
  SafetyAutoencoder autoencoder;
  LatentForecaster forecaster;
  Evaluator evaluator;
  int k = 0;
  bool controller_specific = true;
};

using LabelPredictor = std::variant<MonolithicPredictor, CompositeImagePredictor, CompositeLatentPredictor>;

enum class PredictorKind { monolithic, composite_image, composite_latent };
const char* predictor_kind_name(PredictorKind kind);
PredictorKind parse_predictor_kind(const std::string& name);
PredictorKind kind_of(const LabelPredictor& p);
int window_length(const LabelPredictor& p);
int horizon(const LabelPredictor& p);
bool controller_specific(const LabelPredictor& p);

/// Counts forecaster applications during rollouts.
struct RolloutCounter {
  std::size_t steps = 0;
};

/// Safe-class softmax probability after rolling the forecaster k times.
/// Actions beyond the window are unknown and fed as 0.
double predict_score(const LabelPredictor& p, const Sample& window, RolloutCounter* counter = nullptr);
/// 1 iff predict_score > 0.5; an exact 0.5 goes to unsafe.
int predict_label(const LabelPredictor& p, const Sample& window, RolloutCounter* counter = nullptr);

/// Scores for every sample; OpenMP over samples.
std::vector<double> predict_scores(const LabelPredictor& p, const Dataset& ds);
std::vector<double> predict_scores_serial(const LabelPredictor& p, const Dataset& ds);

/// Image and the safety label of the state it shows.
struct LabelledImage {
  ObservationPtr image;
  int label = 0;
};

/// Frames paired with their own safety: the frame at t+k of a trajectory is
/// the last frame of sample (traj, t+k) and carries the label of sample (traj, t).
std::vector<LabelledImage> labelled_frames(const Dataset& ds);

MonolithicPredictor train_monolithic(const Dataset& train, const TrainConfig& cfg, const ArchConfig& arch,
                                     std::vector<double>* loss_history = nullptr);

/// Trains on (window, next frame) pairs from consecutive samples. Works best
/// on the unbalanced split, where consecutive windows survive.
ImageForecaster train_image_forecaster(const Dataset& train, const TrainConfig& cfg, const ArchConfig& arch,
                                       std::vector<double>* loss_history = nullptr);

struct Augmentation {
  double brightness = 0.2;
  double invert_prob = 0.5;
  double blur_prob = 0.5;
  double blur_sigma = 0.8;
};

/// Brightness shift, inversion and 3x3 Gaussian blur, each drawn independently.
Observation augment(const Observation& obs, const Augmentation& aug, Rng& rng);
Observation invert(const Observation& obs);
Observation blur3x3(const Observation& obs, double sigma);

/// CE classifier on single frames. Classes are rebalanced 1:1 first, which
/// throws Errc::rebalance_impossible when one class is missing.
Evaluator train_evaluator(std::span<const LabelledImage> images, bool augment_images, const TrainConfig& cfg,
                          const ArchConfig& arch, std::vector<double>* loss_history = nullptr);

struct AutoencoderLoss {
  double total = 0.0;
  double reconstruction = 0.0;  // squared error summed over pixels
  double kl = 0.0;
  double safety = 0.0;  // evaluator CE on the reconstruction
};

/// Mean loss terms over `images`, using latent means (no sampling). The
/// safety term is reported whenever the evaluator is learned, even if lambda2 = 0.
AutoencoderLoss autoencoder_loss(const SafetyAutoencoder& ae, const Evaluator& evaluator,
                                 std::span<const LabelledImage> images);

/// Loss terms for one image with a given noise draw. Adds the parameter
/// gradient into `grad` (encoder then decoder) unless `grad` is empty.
AutoencoderLoss autoencoder_sample_gradient(const SafetyAutoencoder& ae, const Evaluator& evaluator,
                                            const LabelledImage& image, std::span<const double> noise,
                                            std::span<double> grad);

/// Minimises recon + lambda1 * KL + lambda2 * CE(e(dec(z)), phi) with
/// reparameterised sampling from seeded noise. The evaluator stays frozen.
SafetyAutoencoder train_autoencoder(std::span<const LabelledImage> images, const Evaluator& evaluator,
                                    double lambda1, double lambda2, const TrainConfig& cfg, const ArchConfig& arch,
                                    std::vector<double>* loss_history = nullptr);

/// MSE on encoder means of the next frame.
LatentForecaster train_latent_forecaster(const Dataset& train, const SafetyAutoencoder& ae, const TrainConfig& cfg,
                                         const ArchConfig& arch, std::vector<double>* loss_history = nullptr);

/// Bundle: JSON manifest with kind, m, k, controller flag and embedded nets.
nlohmann::json predictor_to_json(const LabelPredictor& p);
LabelPredictor predictor_from_json(const nlohmann::json& j);
void save_predictor(const LabelPredictor& p, const std::filesystem::path& path);
LabelPredictor load_predictor(const std::filesystem::path& path);

nlohmann::json evaluator_to_json(const Evaluator& e);
Evaluator evaluator_from_json(const nlohmann::json& j);

}  // namespace safepred
