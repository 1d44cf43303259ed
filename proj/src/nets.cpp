#include "safepred/nets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "safepred/error.hpp"
#include "safepred/parallel.hpp"
#include "safepred/rng.hpp"

namespace safepred {

using nlohmann::json;

namespace {

constexpr int kNetFormatVersion = 1;
constexpr std::size_t kGradientChunk = 32;

double activate(Activation act, double z) {
  switch (act) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
    case Activation::identity: return z;
  }
  return z;
}

// Derivative expressed through the activation's output.
double activation_slope(Activation act, double y) {
  switch (act) {
    case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

}  // namespace

const char* activation_name(Activation act) {
  switch (act) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "identity") return Activation::identity;
  throw Error(Errc::format, "unknown activation '" + name + "'");
}

SparseVector SparseVector::from_dense(std::span<const double> x) {
  SparseVector v;
  v.dim = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != 0.0) {
      v.index.push_back(static_cast<std::uint32_t>(i));
      v.value.push_back(x[i]);
    }
  }
  return v;
}

std::vector<double> SparseVector::to_dense() const {
  std::vector<double> x(dim, 0.0);
  for (std::size_t k = 0; k < index.size(); ++k) x[index[k]] = value[k];
  return x;
}

double glorot_bound(int fan_in, int fan_out) { return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)); }

DenseNet::DenseNet(const std::vector<int>& dims, const std::vector<Activation>& acts, std::uint64_t seed) {
  if (dims.size() < 2 || acts.size() + 1 != dims.size()) {
    throw Error(Errc::invalid_argument, "DenseNet needs one activation per layer and at least one layer");
  }
  if (std::any_of(dims.begin(), dims.end(), [](int d) { return d < 1; })) {
    throw Error(Errc::invalid_argument, "DenseNet layer widths must be positive");
  }
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    LayerShape shape;
    shape.in = dims[l];
    shape.out = dims[l + 1];
    shape.act = acts[l];
    shape.weight_offset = offset;
    offset += static_cast<std::size_t>(shape.in) * static_cast<std::size_t>(shape.out);
    shape.bias_offset = offset;
    offset += static_cast<std::size_t>(shape.out);
    layers_.push_back(shape);
  }
  params_.assign(offset, 0.0);
  Rng rng(seed);
  for (const auto& shape : layers_) {
    const double bound = glorot_bound(shape.in, shape.out);
    const std::size_t n = static_cast<std::size_t>(shape.in) * static_cast<std::size_t>(shape.out);
    for (std::size_t i = 0; i < n; ++i) params_[shape.weight_offset + i] = uniform(rng, -bound, bound);
  }
}

void DenseNet::check_input(std::size_t dim) const {
  if (layers_.empty()) throw Error(Errc::invalid_argument, "empty network");
  if (dim != static_cast<std::size_t>(input_dim())) {
    throw Error(Errc::dimension_mismatch, "network expects input of size " + std::to_string(input_dim()) + ", got " +
                                              std::to_string(dim));
  }
}

std::vector<double> DenseNet::forward(std::span<const double> x) const {
  return forward(SparseVector::from_dense(x));
}

std::vector<double> DenseNet::forward(const SparseVector& x) const {
  Tape tape;
  forward(x, tape);
  return std::move(tape.outputs.back());
}

void DenseNet::forward(const SparseVector& x, Tape& tape) const {
  check_input(x.dim);
  tape.outputs.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& shape = layers_[l];
    auto& out = tape.outputs[l];
    out.resize(static_cast<std::size_t>(shape.out));
    const double* w = params_.data() + shape.weight_offset;
    const double* b = params_.data() + shape.bias_offset;
    const auto in = static_cast<std::size_t>(shape.in);
    if (l == 0) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = w + i * in;
        double z = b[i];
        for (std::size_t k = 0; k < x.index.size(); ++k) z += row[x.index[k]] * x.value[k];
        out[i] = activate(shape.act, z);
      }
    } else {
      const auto& a = tape.outputs[l - 1];
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = w + i * in;
        double z = b[i];
        for (std::size_t j = 0; j < in; ++j) z += row[j] * a[j];
        out[i] = activate(shape.act, z);
      }
    }
  }
}

void DenseNet::backward(const SparseVector& x, const Tape& tape, std::span<const double> delta,
                        std::span<double> grad, std::vector<double>* input_grad) const {
  const bool want_params = !grad.empty();
  if (want_params && grad.size() != params_.size()) {
    throw Error(Errc::dimension_mismatch, "gradient buffer size mismatch");
  }
  if (delta.size() != static_cast<std::size_t>(output_dim())) {
    throw Error(Errc::dimension_mismatch, "output delta size mismatch");
  }
  std::vector<double> cur(delta.begin(), delta.end());
  std::vector<double> prev;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& shape = layers_[l];
    const double* w = params_.data() + shape.weight_offset;
    double* gw = want_params ? grad.data() + shape.weight_offset : nullptr;
    double* gb = want_params ? grad.data() + shape.bias_offset : nullptr;
    const auto in = static_cast<std::size_t>(shape.in);
    const auto out = static_cast<std::size_t>(shape.out);
    if (want_params) {
      for (std::size_t i = 0; i < out; ++i) gb[i] += cur[i];
    }

    if (l == 0) {
      for (std::size_t i = 0; want_params && i < out; ++i) {
        if (cur[i] == 0.0) continue;
        double* grow = gw + i * in;
        for (std::size_t k = 0; k < x.index.size(); ++k) grow[x.index[k]] += cur[i] * x.value[k];
      }
      if (input_grad) {
        input_grad->assign(in, 0.0);
        for (std::size_t i = 0; i < out; ++i) {
          if (cur[i] == 0.0) continue;
          const double* row = w + i * in;
          for (std::size_t j = 0; j < in; ++j) (*input_grad)[j] += row[j] * cur[i];
        }
      }
      break;
    }

    const auto& a = tape.outputs[l - 1];
    prev.assign(in, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
      if (cur[i] == 0.0) continue;
      const double* row = w + i * in;
      if (want_params) {
        double* grow = gw + i * in;
        for (std::size_t j = 0; j < in; ++j) grow[j] += cur[i] * a[j];
      }
      for (std::size_t j = 0; j < in; ++j) prev[j] += row[j] * cur[i];
    }
    const Activation below = layers_[l - 1].act;
    for (std::size_t j = 0; j < in; ++j) prev[j] *= activation_slope(below, a[j]);
    cur.swap(prev);
  }
}

json DenseNet::to_json() const {
  json j;
  j["format"] = "safepred-net";
  j["version"] = kNetFormatVersion;
  json layers = json::array();
  for (const auto& shape : layers_) {
    json layer;
    layer["in"] = shape.in;
    layer["out"] = shape.out;
    layer["activation"] = activation_name(shape.act);
    const auto nw = static_cast<std::size_t>(shape.in) * static_cast<std::size_t>(shape.out);
    layer["weight"] = std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(shape.weight_offset),
                                          params_.begin() + static_cast<std::ptrdiff_t>(shape.weight_offset + nw));
    layer["bias"] = std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(shape.bias_offset),
                                        params_.begin() + static_cast<std::ptrdiff_t>(shape.bias_offset) + shape.out);
    layers.push_back(std::move(layer));
  }
  j["layers"] = std::move(layers);
  return j;
}

DenseNet DenseNet::from_json(const json& j) {
  try {
    if (j.at("format") != "safepred-net") throw Error(Errc::format, "not a network object");
    if (j.at("version").get<int>() != kNetFormatVersion) {
      throw Error(Errc::format, "unsupported network version " + j.at("version").dump());
    }
    DenseNet net;
    std::size_t offset = 0;
    int prev_out = -1;
    for (const auto& layer : j.at("layers")) {
      LayerShape shape;
      shape.in = layer.at("in").get<int>();
      shape.out = layer.at("out").get<int>();
      shape.act = parse_activation(layer.at("activation").get<std::string>());
      if (shape.in < 1 || shape.out < 1) throw Error(Errc::format, "layer widths must be positive");
      if (prev_out != -1 && prev_out != shape.in) throw Error(Errc::format, "layer dimensions do not chain");
      prev_out = shape.out;
      const auto weight = layer.at("weight").get<std::vector<double>>();
      const auto bias = layer.at("bias").get<std::vector<double>>();
      if (weight.size() != static_cast<std::size_t>(shape.in) * static_cast<std::size_t>(shape.out) ||
          bias.size() != static_cast<std::size_t>(shape.out)) {
        throw Error(Errc::format, "layer parameter count does not match its dimensions");
      }
      shape.weight_offset = offset;
      shape.bias_offset = offset + weight.size();
      offset = shape.bias_offset + bias.size();
      net.params_.insert(net.params_.end(), weight.begin(), weight.end());
      net.params_.insert(net.params_.end(), bias.begin(), bias.end());
      net.layers_.push_back(shape);
    }
    if (net.layers_.empty()) throw Error(Errc::format, "network has no layers");
    if (!std::all_of(net.params_.begin(), net.params_.end(), [](double v) { return std::isfinite(v); })) {
      throw Error(Errc::format, "network has non-finite weights");
    }
    return net;
  } catch (const json::exception& e) {
    throw Error(Errc::format, std::string("malformed network: ") + e.what());
  }
}

void DenseNet::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

DenseNet DenseNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::format, path.string() + ": " + e.what());
  }
}

bool DenseNet::operator==(const DenseNet& other) const {
  if (layers_.size() != other.layers_.size() || params_ != other.params_) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& a = layers_[l];
    const auto& b = other.layers_[l];
    if (a.in != b.in || a.out != b.out || a.act != b.act) return false;
  }
  return true;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

double softmax_first(std::span<const double> logits) { return softmax(logits)[0]; }

double loss(LossKind kind, std::span<const double> prediction, std::span<const double> target) {
  if (prediction.size() != target.size() || prediction.empty()) {
    throw Error(Errc::dimension_mismatch, "loss: prediction and target sizes differ");
  }
  const double n = static_cast<double>(prediction.size());
  double total = 0.0;
  switch (kind) {
    case LossKind::ce: {
      const auto p = softmax(prediction);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (target[i] != 0.0) total -= target[i] * std::log(clamp_prob(p[i]));
      }
      return total;
    }
    case LossKind::bce:
      for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double p = clamp_prob(prediction[i]);
        total -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
      }
      return total / n;
    case LossKind::mse:
      for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double d = prediction[i] - target[i];
        total += d * d;
      }
      return total / n;
  }
  return total;
}

std::vector<double> output_delta(LossKind kind, Activation last, std::span<const double> output,
                                 std::span<const double> target) {
  if (output.size() != target.size()) throw Error(Errc::dimension_mismatch, "output_delta: size mismatch");
  const double n = static_cast<double>(output.size());
  std::vector<double> delta(output.size());
  switch (kind) {
    case LossKind::ce: {
      const auto p = softmax(output);
      const double mass = std::accumulate(target.begin(), target.end(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) delta[i] = (p[i] * mass - target[i]) * activation_slope(last, output[i]);
      return delta;
    }
    case LossKind::bce:
      for (std::size_t i = 0; i < output.size(); ++i) {
        if (last == Activation::sigmoid) {
          delta[i] = (output[i] - target[i]) / n;
        } else {
          const double p = output[i];
          const double dp = (p < kProbEpsilon || p > 1.0 - kProbEpsilon) ? 0.0 : (p - target[i]) / (p * (1.0 - p)) / n;
          delta[i] = dp * activation_slope(last, output[i]);
        }
      }
      return delta;
    case LossKind::mse:
      for (std::size_t i = 0; i < output.size(); ++i) {
        delta[i] = 2.0 * (output[i] - target[i]) / n * activation_slope(last, output[i]);
      }
      return delta;
  }
  return delta;
}

LossGradient loss_gradient(const DenseNet& net, std::span<const double> input, std::span<const double> target,
                           LossKind kind) {
  const auto x = SparseVector::from_dense(input);
  DenseNet::Tape tape;
  net.forward(x, tape);
  const auto& out = tape.outputs.back();
  if (target.size() != out.size()) throw Error(Errc::dimension_mismatch, "target size != network output size");
  LossGradient result;
  result.loss = loss(kind, out, target);
  result.grad.assign(net.param_count(), 0.0);
  const auto delta = output_delta(kind, net.layers().back().act, out, target);
  net.backward(x, tape, delta, result.grad);
  return result;
}

namespace {

double accumulate_example(const DenseNet& net, const Example& ex, LossKind kind, DenseNet::Tape& tape,
                          std::span<double> grad) {
  net.forward(ex.input, tape);
  const auto& out = tape.outputs.back();
  if (ex.target.size() != out.size()) throw Error(Errc::dimension_mismatch, "target size != network output size");
  const double value = loss(kind, out, ex.target);
  const auto delta = output_delta(kind, net.layers().back().act, out, ex.target);
  net.backward(ex.input, tape, delta, grad);
  return value;
}

}  // namespace

double batch_gradient(const DenseNet& net, std::span<const Example> examples, std::span<const std::size_t> batch,
                      LossKind kind, std::span<double> grad) {
  if (batch.empty()) throw Error(Errc::invalid_argument, "empty batch");
  if (grad.size() != net.param_count()) throw Error(Errc::dimension_mismatch, "gradient buffer size mismatch");
  const double total = chunked_sum(batch.size(), kGradientChunk, grad, [&](std::size_t b, std::span<double> g) {
    DenseNet::Tape tape;
    return accumulate_example(net, examples[batch[b]], kind, tape, g);
  });
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& v : grad) v *= inv;
  return total * inv;
}

double batch_gradient_serial(const DenseNet& net, std::span<const Example> examples,
                             std::span<const std::size_t> batch, LossKind kind, std::span<double> grad) {
  if (batch.empty()) throw Error(Errc::invalid_argument, "empty batch");
  std::fill(grad.begin(), grad.end(), 0.0);
  DenseNet::Tape tape;
  double total = 0.0;
  for (auto idx : batch) total += accumulate_example(net, examples[idx], kind, tape, grad);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& v : grad) v *= inv;
  return total * inv;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(Errc::invalid_argument, "learning_rate must be positive");
  if (batch_size < 1) throw Error(Errc::invalid_argument, "batch_size must be at least 1");
  if (patience_epochs < 1 || early_stop_patience < 1) throw Error(Errc::invalid_argument, "patience must be >= 1");
  if (max_epochs < 0) throw Error(Errc::invalid_argument, "max_epochs must be >= 0");
  if (!(lr_reduction_factor > 0.0 && lr_reduction_factor <= 1.0)) {
    throw Error(Errc::invalid_argument, "lr_reduction_factor must lie in (0, 1]");
  }
}

PlateauSchedule::PlateauSchedule(const TrainConfig& cfg)
    : cfg_(cfg), lr_(cfg.learning_rate), best_(std::numeric_limits<double>::infinity()) {}

bool PlateauSchedule::record(double epoch_loss) {
  // Relative improvement threshold of 1e-4.
  if (epoch_loss < best_ - 1e-4 * std::abs(best_) || !std::isfinite(best_)) {
    best_ = epoch_loss;
    since_best_ = 0;
    since_reduction_ = 0;
    return true;
  }
  ++since_best_;
  if (++since_reduction_ >= cfg_.patience_epochs) {
    lr_ *= cfg_.lr_reduction_factor;
    since_reduction_ = 0;
  }
  return since_best_ < cfg_.early_stop_patience;
}

TrainResult sgd_train(DenseNet net, std::span<const Example> examples, LossKind kind, const TrainConfig& cfg) {
  cfg.validate();
  if (examples.empty()) throw Error(Errc::invalid_argument, "cannot train on an empty dataset");
  TrainResult result;
  Rng rng(cfg.seed);
  PlateauSchedule schedule(cfg);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> grad(net.param_count());
  auto params = net.params();

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double total = 0.0;
    const double lr = schedule.learning_rate();
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      const double batch_loss = batch_gradient(net, examples, batch, kind, grad);
      if (!std::isfinite(batch_loss)) {
        throw Error(Errc::divergence, "training diverged at epoch " + std::to_string(epoch));
      }
      total += batch_loss * static_cast<double>(batch.size());
      for (std::size_t p = 0; p < params.size(); ++p) params[p] -= lr * grad[p];
    }
    const double epoch_loss = total / static_cast<double>(order.size());
    result.loss_history.push_back(epoch_loss);
    if (!schedule.record(epoch_loss)) break;
  }
  result.net = std::move(net);
  return result;
}

}  // namespace safepred
