#include "safepred/predictors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include "safepred/error.hpp"
#include "safepred/parallel.hpp"
#include "safepred/rng.hpp"

namespace safepred {

using nlohmann::json;

namespace {

constexpr int kBundleVersion = 1;
constexpr std::size_t kPixels = Observation::kPixels;
constexpr double kLogVarLimit = 10.0;
constexpr std::size_t kAutoencoderChunk = 8;

std::vector<double> window_actions(const Sample& s, bool uses_actions, int m) {
  if (!uses_actions) return {};
  if (s.actions.size() != static_cast<std::size_t>(m)) {
    throw Error(Errc::dimension_mismatch, "predictor expects " + std::to_string(m) + " actions, window has " +
                                              std::to_string(s.actions.size()));
  }
  std::vector<double> a;
  a.reserve(s.actions.size());
  for (auto act : s.actions) a.push_back(action_value(act));
  return a;
}

void check_window(const Sample& s, int m) {
  if (s.window.size() != static_cast<std::size_t>(m)) {
    throw Error(Errc::dimension_mismatch, "predictor expects a window of " + std::to_string(m) + " frames, got " +
                                              std::to_string(s.window.size()));
  }
}

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw Error(Errc::invalid_argument, std::string("cannot train ") + what + " on an empty dataset");
}

TrainConfig stage_config(const TrainConfig& cfg, std::string_view stage) {
  TrainConfig c = cfg;
  c.seed = derive_seed(cfg.seed, stage, 1);
  return c;
}

void shift_in(std::vector<double>& actions) {
  if (actions.empty()) return;
  actions.erase(actions.begin());
  actions.push_back(0.0);
}

double clamp_logvar(double s) { return std::clamp(s, -kLogVarLimit, kLogVarLimit); }

}  // namespace

void append_darkness(const Observation& obs, std::size_t offset, SparseVector& out) {
  for (std::size_t i = 0; i < kPixels; ++i) {
    const double d = 1.0 - static_cast<double>(obs.pixels[i]);
    if (d != 0.0) {
      out.index.push_back(static_cast<std::uint32_t>(offset + i));
      out.value.push_back(d);
    }
  }
}

SparseVector encode_frame(const Observation& obs) {
  SparseVector v;
  v.dim = kPixels;
  append_darkness(obs, 0, v);
  return v;
}

std::vector<double> darkness(const Observation& obs) {
  std::vector<double> d(kPixels);
  for (std::size_t i = 0; i < kPixels; ++i) d[i] = 1.0 - static_cast<double>(obs.pixels[i]);
  return d;
}

Observation observation_from_darkness(std::span<const double> dark) {
  if (dark.size() != kPixels) throw Error(Errc::dimension_mismatch, "frame must have H*W values");
  Observation obs;
  for (std::size_t i = 0; i < kPixels; ++i) obs.pixels[i] = static_cast<float>(std::clamp(1.0 - dark[i], 0.0, 1.0));
  return obs;
}

SparseVector encode_window(std::span<const ObservationPtr> frames, std::span<const double> actions) {
  SparseVector v;
  v.dim = frames.size() * kPixels + actions.size();
  for (std::size_t f = 0; f < frames.size(); ++f) append_darkness(*frames[f], f * kPixels, v);
  for (std::size_t a = 0; a < actions.size(); ++a) {
    if (actions[a] != 0.0) {
      v.index.push_back(static_cast<std::uint32_t>(frames.size() * kPixels + a));
      v.value.push_back(actions[a]);
    }
  }
  return v;
}

std::vector<double> one_hot_safety(int label) { return label == 1 ? std::vector{1.0, 0.0} : std::vector{0.0, 1.0}; }

Observation ImageForecaster::forecast(std::span<const ObservationPtr> frames, std::span<const double> actions) const {
  if (frames.size() != static_cast<std::size_t>(m)) throw Error(Errc::dimension_mismatch, "forecaster window size");
  return observation_from_darkness(net.forward(encode_window(frames, actions)));
}

void SafetyAutoencoder::validate() const {
  if (latent_dim < 1) throw Error(Errc::dimension_mismatch, "latent_dim must be positive");
  if (encoder.input_dim() != static_cast<int>(kPixels) || encoder.output_dim() != 2 * latent_dim ||
      decoder.input_dim() != latent_dim || decoder.output_dim() != static_cast<int>(kPixels)) {
    throw Error(Errc::dimension_mismatch, "autoencoder nets do not match H*W and latent_dim");
  }
}

std::vector<double> SafetyAutoencoder::encode(const Observation& obs) const {
  auto out = encoder.forward(encode_frame(obs));
  out.resize(static_cast<std::size_t>(latent_dim));
  return out;
}

Observation SafetyAutoencoder::decode(std::span<const double> z) const {
  if (z.size() != static_cast<std::size_t>(latent_dim)) throw Error(Errc::dimension_mismatch, "latent size");
  return observation_from_darkness(decoder.forward(z));
}

std::vector<double> LatentForecaster::forecast(std::span<const std::vector<double>> latents,
                                               std::span<const double> actions) const {
  if (latents.size() != static_cast<std::size_t>(m)) throw Error(Errc::dimension_mismatch, "latent window size");
  std::vector<double> x;
  x.reserve(latents.size() * static_cast<std::size_t>(latent_dim) + actions.size());
  for (const auto& z : latents) {
    if (z.size() != static_cast<std::size_t>(latent_dim)) throw Error(Errc::dimension_mismatch, "latent size");
    x.insert(x.end(), z.begin(), z.end());
  }
  x.insert(x.end(), actions.begin(), actions.end());
  return net.forward(std::span<const double>(x));
}

void Evaluator::validate() const {
  if (kind == EvaluatorKind::learned) {
    if (!net) throw Error(Errc::invalid_argument, "learned evaluator without a network");
    if (net->input_dim() != static_cast<int>(kPixels) || net->output_dim() != 2) {
      throw Error(Errc::dimension_mismatch, "evaluator net must map H*W to 2 logits");
    }
  }
}

double Evaluator::score(const Observation& obs) const {
  if (kind == EvaluatorKind::robust_feature) return robust_evaluate(obs);
  validate();
  return softmax_first(net->forward(encode_frame(obs)));
}

int robust_evaluate(const Observation& obs) {
  std::array<float, kPixels> sorted = obs.pixels;
  std::nth_element(sorted.begin(), sorted.begin() + kPixels / 2, sorted.end());
  const bool inverted = sorted[kPixels / 2] < 0.5f;
  auto value = [&](int r, int c) {
    const double p = obs.at(r, c);
    return inverted ? 1.0 - p : p;
  };

  const int pivot = static_cast<int>(PoleGeometry::pivot_row);
  double cart_w = 0.0, cart_c = 0.0;
  for (int r = pivot; r < pivot + PoleGeometry::cart_rows; ++r) {
    for (int c = 0; c < Observation::kWidth; ++c) {
      const double p = value(r, c);
      if (p < 0.5) {
        cart_w += 1.0 - p;
        cart_c += (1.0 - p) * (c + 0.5);
      }
    }
  }
  if (cart_w <= 0.0) return 0;
  const double x0 = cart_c / cart_w;

  double sdu = 0.0, sdd = 0.0;
  bool any = false;
  for (int r = 0; r < pivot; ++r) {
    double w = 0.0, wc = 0.0;
    for (int c = 0; c < Observation::kWidth; ++c) {
      const double p = value(r, c);
      if (p < 0.5) {
        w += 1.0 - p;
        wc += (1.0 - p) * (c + 0.5);
      }
    }
    if (w <= 0.0) continue;
    any = true;
    const double d = PoleGeometry::pivot_row - (r + 0.5);
    sdu += d * (wc / w - x0);
    sdd += d * d;
  }
  if (!any) return 0;
  const double angle = std::atan(sdu / sdd);
  return std::abs(angle) <= kSafeAngle ? 1 : 0;
}

const char* predictor_kind_name(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::monolithic: return "monolithic";
    case PredictorKind::composite_image: return "composite_image";
    case PredictorKind::composite_latent: return "composite_latent";
  }
  return "?";
}

PredictorKind parse_predictor_kind(const std::string& name) {
  if (name == "monolithic") return PredictorKind::monolithic;
  if (name == "composite_image") return PredictorKind::composite_image;
  if (name == "composite_latent") return PredictorKind::composite_latent;
  throw Error(Errc::invalid_argument, "unknown predictor kind '" + name + "'");
}

PredictorKind kind_of(const LabelPredictor& p) { return static_cast<PredictorKind>(p.index()); }

int window_length(const LabelPredictor& p) {
  return std::visit(
      [](const auto& q) {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, MonolithicPredictor>) return q.m;
        else return q.forecaster.m;
      },
      p);
}

int horizon(const LabelPredictor& p) {
  return std::visit([](const auto& q) { return q.k; }, p);
}

bool controller_specific(const LabelPredictor& p) {
  return std::visit([](const auto& q) { return q.controller_specific; }, p);
}

namespace {

double score_monolithic(const MonolithicPredictor& p, const Sample& s) {
  check_window(s, p.m);
  const auto actions = window_actions(s, !p.controller_specific, p.m);
  return softmax_first(p.net.forward(encode_window(s.window, actions)));
}

double score_image(const CompositeImagePredictor& p, const Sample& s, RolloutCounter* counter) {
  const auto& f = p.forecaster;
  check_window(s, f.m);
  std::vector<ObservationPtr> frames = s.window;
  auto actions = window_actions(s, f.uses_actions, f.m);
  for (int step = 0; step < p.k; ++step) {
    auto next = std::make_shared<const Observation>(f.forecast(frames, actions));
    frames.erase(frames.begin());
    frames.push_back(std::move(next));
    shift_in(actions);
    if (counter) ++counter->steps;
  }
  return p.evaluator.score(*frames.back());
}

double score_latent(const CompositeLatentPredictor& p, const Sample& s, RolloutCounter* counter) {
  const auto& f = p.forecaster;
  p.autoencoder.validate();
  if (f.latent_dim != p.autoencoder.latent_dim) {
    throw Error(Errc::dimension_mismatch, "latent forecaster and autoencoder disagree on latent_dim");
  }
  check_window(s, f.m);
  std::vector<std::vector<double>> latents;
  latents.reserve(s.window.size());
  for (const auto& frame : s.window) latents.push_back(p.autoencoder.encode(*frame));
  auto actions = window_actions(s, f.uses_actions, f.m);
  for (int step = 0; step < p.k; ++step) {
    auto next = f.forecast(latents, actions);
    latents.erase(latents.begin());
    latents.push_back(std::move(next));
    shift_in(actions);
    if (counter) ++counter->steps;
  }
  return p.evaluator.score(p.autoencoder.decode(latents.back()));
}

}  // namespace

double predict_score(const LabelPredictor& p, const Sample& window, RolloutCounter* counter) {
  switch (kind_of(p)) {
    case PredictorKind::monolithic: return score_monolithic(std::get<MonolithicPredictor>(p), window);
    case PredictorKind::composite_image:
      return score_image(std::get<CompositeImagePredictor>(p), window, counter);
    case PredictorKind::composite_latent:
      return score_latent(std::get<CompositeLatentPredictor>(p), window, counter);
  }
  return 0.0;
}

int predict_label(const LabelPredictor& p, const Sample& window, RolloutCounter* counter) {
  return predict_score(p, window, counter) > 0.5 ? 1 : 0;
}

std::vector<double> predict_scores(const LabelPredictor& p, const Dataset& ds) {
  std::vector<double> out(ds.size());
  parallel_for(static_cast<std::ptrdiff_t>(ds.size()), [&](std::ptrdiff_t i) {
    const auto u = static_cast<std::size_t>(i);
    out[u] = predict_score(p, ds.samples[u]);
  });
  return out;
}

std::vector<double> predict_scores_serial(const LabelPredictor& p, const Dataset& ds) {
  std::vector<double> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(predict_score(p, s));
  return out;
}

std::vector<LabelledImage> labelled_frames(const Dataset& ds) {
  std::map<std::pair<std::uint64_t, std::size_t>, const Sample*> index;
  for (const auto& s : ds.samples) index.emplace(std::make_pair(s.trajectory_id, s.time_index), &s);
  std::vector<LabelledImage> out;
  out.reserve(index.size());
  for (const auto& [key, sample] : index) {
    auto later = index.find({key.first, key.second + static_cast<std::size_t>(ds.k)});
    if (later == index.end()) continue;
    out.push_back({later->second->window.back(), sample->label});
  }
  return out;
}

MonolithicPredictor train_monolithic(const Dataset& train, const TrainConfig& cfg, const ArchConfig& arch,
                                     std::vector<double>* loss_history) {
  require_nonempty(train.size(), "a monolithic predictor");
  train.validate();
  MonolithicPredictor p;
  p.m = train.m;
  p.k = train.k;
  p.controller_specific = train.kind == DatasetKind::obs_controller;

  std::vector<Example> examples;
  examples.reserve(train.size());
  for (const auto& s : train.samples) {
    examples.push_back({encode_window(s.window, window_actions(s, !p.controller_specific, p.m)),
                        one_hot_safety(s.label)});
  }
  const int in = p.m * static_cast<int>(kPixels) + (p.controller_specific ? 0 : p.m);
  DenseNet net({in, arch.monolithic_hidden, 2}, {Activation::relu, Activation::identity},
               derive_seed(cfg.seed, "monolithic-init"));
  auto result = sgd_train(std::move(net), examples, LossKind::ce, stage_config(cfg, "monolithic-train"));
  p.net = std::move(result.net);
  if (loss_history) *loss_history = std::move(result.loss_history);
  return p;
}

ImageForecaster train_image_forecaster(const Dataset& train, const TrainConfig& cfg, const ArchConfig& arch,
                                       std::vector<double>* loss_history) {
  train.validate();
  const auto pairs = forecast_pairs(train);
  require_nonempty(pairs.size(), "an image forecaster");
  ImageForecaster f;
  f.m = train.m;
  f.uses_actions = train.kind == DatasetKind::obs_action;

  std::vector<Example> examples;
  examples.reserve(pairs.size());
  for (const auto& pair : pairs) {
    const auto& s = *pair.source;
    examples.push_back({encode_window(s.window, window_actions(s, f.uses_actions, f.m)), darkness(*pair.next)});
  }
  const int in = f.m * static_cast<int>(kPixels) + (f.uses_actions ? f.m : 0);
  DenseNet net({in, arch.forecaster_hidden, static_cast<int>(kPixels)}, {Activation::relu, Activation::sigmoid},
               derive_seed(cfg.seed, "image-forecaster-init"));
  auto result = sgd_train(std::move(net), examples, LossKind::bce, stage_config(cfg, "image-forecaster-train"));
  f.net = std::move(result.net);
  if (loss_history) *loss_history = std::move(result.loss_history);
  return f;
}

Observation invert(const Observation& obs) {
  Observation out;
  for (std::size_t i = 0; i < kPixels; ++i) out.pixels[i] = 1.0f - obs.pixels[i];
  return out;
}

Observation blur3x3(const Observation& obs, double sigma) {
  std::array<double, 9> kernel{};
  double sum = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      kernel[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)] = w;
      sum += w;
    }
  }
  for (auto& w : kernel) w /= sum;
  Observation out;
  constexpr int H = Observation::kHeight, W = Observation::kWidth;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double v = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int rr = std::clamp(r + dy, 0, H - 1);
          const int cc = std::clamp(c + dx, 0, W - 1);
          v += kernel[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)] * obs.at(rr, cc);
        }
      }
      out.at(r, c) = static_cast<float>(v);
    }
  }
  return out;
}

Observation augment(const Observation& obs, const Augmentation& aug, Rng& rng) {
  const double shift = uniform(rng, -aug.brightness, aug.brightness);
  const bool do_invert = bernoulli(rng, aug.invert_prob);
  const bool do_blur = bernoulli(rng, aug.blur_prob);
  Observation out;
  for (std::size_t i = 0; i < kPixels; ++i) {
    out.pixels[i] = static_cast<float>(std::clamp(static_cast<double>(obs.pixels[i]) + shift, 0.0, 1.0));
  }
  if (do_invert) out = invert(out);
  if (do_blur) out = blur3x3(out, aug.blur_sigma);
  return out;
}

Evaluator train_evaluator(std::span<const LabelledImage> images, bool augment_images, const TrainConfig& cfg,
                          const ArchConfig& arch, std::vector<double>* loss_history) {
  require_nonempty(images.size(), "an evaluator");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < images.size(); ++i) by_class[images[i].label == 1 ? 1 : 0].push_back(i);
  if (by_class[0].empty() || by_class[1].empty()) {
    throw Error(Errc::rebalance_impossible, "evaluator training images contain a single class");
  }
  Rng rng = make_rng(cfg.seed, "evaluator-balance");
  const std::size_t target = std::max(by_class[0].size(), by_class[1].size());
  std::vector<std::size_t> picked;
  picked.reserve(2 * target);
  for (const auto& members : by_class) {
    for (std::size_t i = 0; i < target; ++i) picked.push_back(members[uniform_index(rng, members.size())]);
  }
  for (std::size_t i = picked.size(); i > 1; --i) std::swap(picked[i - 1], picked[uniform_index(rng, i)]);

  Rng aug_rng = make_rng(cfg.seed, "evaluator-augment");
  const Augmentation aug;
  std::vector<Example> examples;
  examples.reserve(picked.size());
  for (auto i : picked) {
    const auto& img = images[i];
    const auto input = augment_images ? encode_frame(augment(*img.image, aug, aug_rng)) : encode_frame(*img.image);
    examples.push_back({input, one_hot_safety(img.label)});
  }
  DenseNet net({static_cast<int>(kPixels), arch.evaluator_hidden, 2}, {Activation::relu, Activation::identity},
               derive_seed(cfg.seed, "evaluator-init"));
  auto result = sgd_train(std::move(net), examples, LossKind::ce, stage_config(cfg, "evaluator-train"));
  if (loss_history) *loss_history = std::move(result.loss_history);
  Evaluator e;
  e.kind = EvaluatorKind::learned;
  e.net = std::move(result.net);
  e.augmented = augment_images;
  return e;
}

AutoencoderLoss autoencoder_sample_gradient(const SafetyAutoencoder& ae, const Evaluator& evaluator,
                                            const LabelledImage& image, std::span<const double> noise,
                                            std::span<double> grad) {
  const auto L = static_cast<std::size_t>(ae.latent_dim);
  if (noise.size() != L) throw Error(Errc::dimension_mismatch, "noise size != latent_dim");
  const bool want_grad = !grad.empty();
  const std::size_t n_enc = ae.encoder.param_count();
  if (want_grad && grad.size() != n_enc + ae.decoder.param_count()) {
    throw Error(Errc::dimension_mismatch, "autoencoder gradient buffer size mismatch");
  }

  const auto x = encode_frame(*image.image);
  DenseNet::Tape enc_tape;
  ae.encoder.forward(x, enc_tape);
  const auto& head = enc_tape.outputs.back();
  std::vector<double> z(L), sigma(L), logvar(L);
  AutoencoderLoss out;
  for (std::size_t i = 0; i < L; ++i) {
    logvar[i] = clamp_logvar(head[L + i]);
    sigma[i] = std::exp(0.5 * logvar[i]);
    z[i] = head[i] + sigma[i] * noise[i];
    out.kl += 0.5 * (head[i] * head[i] + std::exp(logvar[i]) - 1.0 - logvar[i]);
  }

  SparseVector zin;
  zin.dim = L;
  for (std::size_t i = 0; i < L; ++i) {
    zin.index.push_back(static_cast<std::uint32_t>(i));
    zin.value.push_back(z[i]);
  }
  DenseNet::Tape dec_tape;
  ae.decoder.forward(zin, dec_tape);
  const auto& recon = dec_tape.outputs.back();
  const auto target = darkness(*image.image);
  std::vector<double> dy(kPixels);
  for (std::size_t p = 0; p < kPixels; ++p) {
    const double diff = recon[p] - target[p];
    out.reconstruction += diff * diff;
    dy[p] = 2.0 * diff;
  }

  if (ae.lambda2 > 0.0 && !evaluator.net) throw Error(Errc::invalid_argument, "safety loss needs a learned evaluator");
  if (evaluator.net) {
    const auto onehot = one_hot_safety(image.label);
    const auto ein = SparseVector::from_dense(recon);
    DenseNet::Tape eval_tape;
    evaluator.net->forward(ein, eval_tape);
    const auto& logits = eval_tape.outputs.back();
    out.safety = loss(LossKind::ce, logits, onehot);
    if (want_grad && ae.lambda2 > 0.0) {
      const auto delta = output_delta(LossKind::ce, Activation::identity, logits, onehot);
      std::vector<double> dx;
      evaluator.net->backward(ein, eval_tape, delta, {}, &dx);
      for (std::size_t p = 0; p < kPixels; ++p) dy[p] += ae.lambda2 * dx[p];
    }
  }
  out.total = out.reconstruction + ae.lambda1 * out.kl + ae.lambda2 * out.safety;
  if (!want_grad) return out;

  for (std::size_t p = 0; p < kPixels; ++p) dy[p] *= recon[p] * (1.0 - recon[p]);
  std::vector<double> dz;
  ae.decoder.backward(zin, dec_tape, dy, grad.subspan(n_enc), &dz);

  std::vector<double> dhead(2 * L);
  for (std::size_t i = 0; i < L; ++i) {
    dhead[i] = dz[i] + ae.lambda1 * head[i];
    const bool clamped = head[L + i] != logvar[i];
    dhead[L + i] = clamped ? 0.0 : dz[i] * noise[i] * 0.5 * sigma[i] + ae.lambda1 * 0.5 * (std::exp(logvar[i]) - 1.0);
  }
  ae.encoder.backward(x, enc_tape, dhead, grad.subspan(0, n_enc));
  return out;
}

AutoencoderLoss autoencoder_loss(const SafetyAutoencoder& ae, const Evaluator& evaluator,
                                 std::span<const LabelledImage> images) {
  AutoencoderLoss sum;
  if (images.empty()) return sum;
  const std::vector<double> zero(static_cast<std::size_t>(ae.latent_dim), 0.0);
  std::vector<AutoencoderLoss> parts(images.size());
  parallel_for(static_cast<std::ptrdiff_t>(images.size()), [&](std::ptrdiff_t i) {
    const auto u = static_cast<std::size_t>(i);
    parts[u] = autoencoder_sample_gradient(ae, evaluator, images[u], zero, {});
  });
  for (const auto& p : parts) {
    sum.total += p.total;
    sum.reconstruction += p.reconstruction;
    sum.kl += p.kl;
    sum.safety += p.safety;
  }
  const double n = static_cast<double>(images.size());
  sum.total /= n;
  sum.reconstruction /= n;
  sum.kl /= n;
  sum.safety /= n;
  return sum;
}

SafetyAutoencoder train_autoencoder(std::span<const LabelledImage> images, const Evaluator& evaluator,
                                    double lambda1, double lambda2, const TrainConfig& cfg, const ArchConfig& arch,
                                    std::vector<double>* loss_history) {
  cfg.validate();
  require_nonempty(images.size(), "an autoencoder");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error(Errc::invalid_argument, "lambda1, lambda2 must be >= 0");
  if (lambda2 > 0.0 && evaluator.kind != EvaluatorKind::learned) {
    throw Error(Errc::invalid_argument, "the safety loss needs a learned evaluator");
  }
  evaluator.validate();

  SafetyAutoencoder ae;
  ae.latent_dim = arch.latent_dim;
  ae.lambda1 = lambda1;
  ae.lambda2 = lambda2;
  const int hidden = arch.autoencoder_hidden;
  ae.encoder = DenseNet({static_cast<int>(kPixels), hidden, 2 * ae.latent_dim}, {Activation::relu, Activation::identity},
                        derive_seed(cfg.seed, "autoencoder-encoder-init"));
  ae.decoder = DenseNet({ae.latent_dim, hidden, static_cast<int>(kPixels)}, {Activation::relu, Activation::sigmoid},
                        derive_seed(cfg.seed, "autoencoder-decoder-init"));

  const std::size_t n_enc = ae.encoder.param_count();
  std::vector<double> grad(n_enc + ae.decoder.param_count());
  Rng order_rng = make_rng(cfg.seed, "autoencoder-shuffle");
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PlateauSchedule schedule(cfg);
  std::vector<double> history;
  const auto L = static_cast<std::size_t>(ae.latent_dim);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(order_rng, i)]);
    const double lr = schedule.learning_rate();
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double batch_loss = chunked_sum(end - start, kAutoencoderChunk, grad, [&](std::size_t b, std::span<double> g) {
        const std::size_t pos = start + b;
        Rng noise_rng = make_rng(cfg.seed, "autoencoder-noise",
                                 static_cast<std::uint64_t>(epoch) * order.size() + pos);
        std::vector<double> noise(L);
        for (auto& v : noise) v = standard_normal(noise_rng);
        return autoencoder_sample_gradient(ae, evaluator, images[order[pos]], noise, g).total;
      });
      if (!std::isfinite(batch_loss)) {
        throw Error(Errc::divergence, "autoencoder training diverged at epoch " + std::to_string(epoch));
      }
      total += batch_loss;
      const double scale = lr / static_cast<double>(end - start);
      auto enc = ae.encoder.params();
      auto dec = ae.decoder.params();
      for (std::size_t p = 0; p < enc.size(); ++p) enc[p] -= scale * grad[p];
      for (std::size_t p = 0; p < dec.size(); ++p) dec[p] -= scale * grad[n_enc + p];
    }
    history.push_back(total / static_cast<double>(order.size()));
    if (!schedule.record(history.back())) break;
  }
  if (loss_history) *loss_history = std::move(history);
  return ae;
}

LatentForecaster train_latent_forecaster(const Dataset& train, const SafetyAutoencoder& ae, const TrainConfig& cfg,
                                         const ArchConfig& arch, std::vector<double>* loss_history) {
  ae.validate();
  train.validate();
  const auto pairs = forecast_pairs(train);
  require_nonempty(pairs.size(), "a latent forecaster");
  LatentForecaster f;
  f.m = train.m;
  f.latent_dim = ae.latent_dim;
  f.uses_actions = train.kind == DatasetKind::obs_action;

  std::unordered_map<const Observation*, std::vector<double>> cache;
  auto latent = [&](const ObservationPtr& frame) -> const std::vector<double>& {
    auto it = cache.find(frame.get());
    if (it == cache.end()) it = cache.emplace(frame.get(), ae.encode(*frame)).first;
    return it->second;
  };
  std::vector<Example> examples;
  examples.reserve(pairs.size());
  for (const auto& pair : pairs) {
    const auto& s = *pair.source;
    std::vector<double> x;
    for (const auto& frame : s.window) {
      const auto& z = latent(frame);
      x.insert(x.end(), z.begin(), z.end());
    }
    const auto actions = window_actions(s, f.uses_actions, f.m);
    x.insert(x.end(), actions.begin(), actions.end());
    examples.push_back({SparseVector::from_dense(x), latent(pair.next)});
  }
  const int in = f.m * f.latent_dim + (f.uses_actions ? f.m : 0);
  DenseNet net({in, arch.latent_forecaster_hidden, f.latent_dim}, {Activation::tanh, Activation::identity},
               derive_seed(cfg.seed, "latent-forecaster-init"));
  auto result = sgd_train(std::move(net), examples, LossKind::mse, stage_config(cfg, "latent-forecaster-train"));
  f.net = std::move(result.net);
  if (loss_history) *loss_history = std::move(result.loss_history);
  return f;
}

json evaluator_to_json(const Evaluator& e) {
  json j;
  j["kind"] = e.kind == EvaluatorKind::learned ? "learned" : "robust_feature";
  j["augmented"] = e.augmented;
  if (e.net) j["net"] = e.net->to_json();
  return j;
}

Evaluator evaluator_from_json(const json& j) {
  Evaluator e;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "learned") e.kind = EvaluatorKind::learned;
  else if (kind == "robust_feature") e.kind = EvaluatorKind::robust_feature;
  else throw Error(Errc::format, "unknown evaluator kind '" + kind + "'");
  e.augmented = j.value("augmented", false);
  if (j.contains("net")) e.net = DenseNet::from_json(j.at("net"));
  e.validate();
  return e;
}

json predictor_to_json(const LabelPredictor& p) {
  json j;
  j["format"] = "safepred-predictor";
  j["version"] = kBundleVersion;
  j["kind"] = predictor_kind_name(kind_of(p));
  j["m"] = window_length(p);
  j["k"] = horizon(p);
  j["controller_specific"] = controller_specific(p);
  if (const auto* mono = std::get_if<MonolithicPredictor>(&p)) {
    j["net"] = mono->net.to_json();
  } else if (const auto* img = std::get_if<CompositeImagePredictor>(&p)) {
    j["forecaster"] = {{"uses_actions", img->forecaster.uses_actions}, {"net", img->forecaster.net.to_json()}};
    j["evaluator"] = evaluator_to_json(img->evaluator);
  } else if (const auto* lat = std::get_if<CompositeLatentPredictor>(&p)) {
    const auto& ae = lat->autoencoder;
    j["autoencoder"] = {{"latent_dim", ae.latent_dim},
                        {"lambda1", ae.lambda1},
                        {"lambda2", ae.lambda2},
                        {"encoder", ae.encoder.to_json()},
                        {"decoder", ae.decoder.to_json()}};
    j["forecaster"] = {{"uses_actions", lat->forecaster.uses_actions},
                       {"latent_dim", lat->forecaster.latent_dim},
                       {"net", lat->forecaster.net.to_json()}};
    j["evaluator"] = evaluator_to_json(lat->evaluator);
  }
  return j;
}

LabelPredictor predictor_from_json(const json& j) {
  try {
    if (j.at("format") != "safepred-predictor") throw Error(Errc::format, "not a predictor bundle");
    if (j.at("version").get<int>() != kBundleVersion) throw Error(Errc::format, "unsupported bundle version");
    const auto kind = parse_predictor_kind(j.at("kind").get<std::string>());
    const int m = j.at("m").get<int>();
    const int k = j.at("k").get<int>();
    const bool specific = j.at("controller_specific").get<bool>();
    switch (kind) {
      case PredictorKind::monolithic: {
        MonolithicPredictor p{DenseNet::from_json(j.at("net")), m, k, specific};
        return p;
      }
      case PredictorKind::composite_image: {
        CompositeImagePredictor p;
        p.forecaster.net = DenseNet::from_json(j.at("forecaster").at("net"));
        p.forecaster.m = m;
        p.forecaster.uses_actions = j.at("forecaster").at("uses_actions").get<bool>();
        p.evaluator = evaluator_from_json(j.at("evaluator"));
        p.k = k;
        p.controller_specific = specific;
        return p;
      }
      case PredictorKind::composite_latent: {
        CompositeLatentPredictor p;
        const auto& a = j.at("autoencoder");
        p.autoencoder.latent_dim = a.at("latent_dim").get<int>();
        p.autoencoder.lambda1 = a.at("lambda1").get<double>();
        p.autoencoder.lambda2 = a.at("lambda2").get<double>();
        p.autoencoder.encoder = DenseNet::from_json(a.at("encoder"));
        p.autoencoder.decoder = DenseNet::from_json(a.at("decoder"));
        p.autoencoder.validate();
        const auto& f = j.at("forecaster");
        p.forecaster.net = DenseNet::from_json(f.at("net"));
        p.forecaster.m = m;
        p.forecaster.latent_dim = f.at("latent_dim").get<int>();
        p.forecaster.uses_actions = f.at("uses_actions").get<bool>();
        p.evaluator = evaluator_from_json(j.at("evaluator"));
        p.k = k;
        p.controller_specific = specific;
        return p;
      }
    }
    throw Error(Errc::format, "unknown predictor kind");
  } catch (const json::exception& e) {
    throw Error(Errc::format, std::string("malformed predictor bundle: ") + e.what());
  }
}

void save_predictor(const LabelPredictor& p, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << predictor_to_json(p).dump() << '\n';
}

LabelPredictor load_predictor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  try {
    return predictor_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::format, path.string() + ": " + e.what());
  }
}

}  // namespace safepred
