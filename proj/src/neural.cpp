#include "miencap/neural.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "miencap/error.hpp"

namespace miencap {

// ---------------------------------------------------------------------------
// Rng

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; u1 is shifted away from zero so the log stays finite.
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

size_t Rng::below(size_t n) {
  const uint64_t bound = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return static_cast<size_t>(v % bound);
}

// ---------------------------------------------------------------------------
// Model

size_t NetworkModel::input_dim() const {
  return layers.empty() ? 0 : layers.front().in_dim;
}

size_t NetworkModel::output_dim() const {
  return layers.empty() ? 0 : layers.back().out_dim;
}

size_t NetworkModel::parameter_count() const {
  size_t n = 0;
  for (const auto& l : layers) {
    n += l.parameter_count();
  }
  return n;
}

void NetworkModel::validate() const {
  MIENCAP_THROW_IF(layers.empty(), ValidationError, "model '{}' has no layers", name);
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    MIENCAP_THROW_IF(
        l.in_dim == 0 || l.out_dim == 0 || l.weights.size() != l.in_dim * l.out_dim || l.bias.size() != l.out_dim,
        ValidationError,
        "layer {} of '{}' has inconsistent dimensions",
        i,
        name);
    if (i > 0) {
      MIENCAP_THROW_IF(
          layers[i - 1].out_dim != l.in_dim,
          ValidationError,
          "layer {} input {} does not chain from output {}",
          i,
          l.in_dim,
          layers[i - 1].out_dim);
    }
    for (double v : l.weights) {
      MIENCAP_THROW_IF(!std::isfinite(v), ValidationError, "layer {} has a non-finite weight", i);
    }
    for (double v : l.bias) {
      MIENCAP_THROW_IF(!std::isfinite(v), ValidationError, "layer {} has a non-finite bias", i);
    }
  }
  MIENCAP_THROW_IF(
      layers.back().activation != Activation::identity, ValidationError, "final layer of '{}' must be linear", name);
}

NetworkModel make_mlp(size_t input_dim, std::span<const size_t> hidden, size_t output_dim, uint64_t seed, std::string name) {
  NetworkModel model;
  model.name = std::move(name);
  model.seed = seed;
  Rng rng(seed);
  std::vector<size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer layer;
    layer.in_dim = dims[i];
    layer.out_dim = dims[i + 1];
    layer.activation = i + 2 < dims.size() ? Activation::relu : Activation::identity;
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in_dim + layer.out_dim));
    layer.weights.resize(layer.in_dim * layer.out_dim);
    for (auto& w : layer.weights) {
      w = rng.uniform(-limit, limit);
    }
    layer.bias.assign(layer.out_dim, 0.0);
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

namespace {

void apply_activation(Activation act, std::span<double> v) {
  if (act == Activation::relu) {
    for (auto& x : v) {
      x = x > 0.0 ? x : 0.0;
    }
  }
}

void check_input(const NetworkModel& model, size_t n) {
  MIENCAP_THROW_IF(
      n != model.input_dim(), DimensionError, "model '{}' expects input of {} values, got {}", model.name, model.input_dim(), n);
}

} // namespace

void forward_into(const NetworkModel& model, std::span<const double> x, InferenceScratch& scratch, std::vector<double>& out) {
  check_input(model, x.size());
  std::span<const double> current = x;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    auto& dst = (i + 1 == model.layers.size()) ? out : (i % 2 == 0 ? scratch.a : scratch.b);
    dst.resize(l.out_dim);
    kernels::dense_forward(l.weights, l.bias, l.in_dim, l.out_dim, current, 1, dst, Execution::serial);
    apply_activation(l.activation, dst);
    current = dst;
  }
}

std::vector<double> forward(const NetworkModel& model, std::span<const double> x) {
  InferenceScratch scratch;
  std::vector<double> out;
  forward_into(model, x, scratch, out);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

double mse_loss(std::span<const double> output, std::span<const double> target) {
  MIENCAP_THROW_IF(output.size() != target.size(), DimensionError, "loss on {} outputs vs {} targets", output.size(), target.size());
  double sum = 0.0;
  for (size_t i = 0; i < output.size(); ++i) {
    const double d = output[i] - target[i];
    sum += d * d;
  }
  return sum;
}

namespace {

double log_sum_exp(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double a : logits) {
    s += std::exp(a - m);
  }
  return m + std::log(s);
}

} // namespace

double softmax_cross_entropy(std::span<const double> logits, std::span<const double> target) {
  MIENCAP_THROW_IF(logits.size() != target.size(), DimensionError, "loss on {} logits vs {} targets", logits.size(), target.size());
  MIENCAP_THROW_IF(logits.empty(), DimensionError, "cross-entropy needs at least one logit");
  const double lse = log_sum_exp(logits);
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (target[i] != 0.0) {
      sum -= target[i] * (logits[i] - lse);
    }
  }
  return sum;
}

double loss(LossKind kind, std::span<const double> output, std::span<const double> target) {
  return kind == LossKind::squared_error ? mse_loss(output, target) : softmax_cross_entropy(output, target);
}

void loss_gradient(LossKind kind, std::span<const double> output, std::span<const double> target, std::span<double> grad) {
  MIENCAP_THROW_IF(output.size() != target.size(), DimensionError, "loss on {} outputs vs {} targets", output.size(), target.size());
  if (kind == LossKind::squared_error) {
    for (size_t i = 0; i < output.size(); ++i) {
      grad[i] = 2.0 * (output[i] - target[i]);
    }
    return;
  }
  // d/da_k of -sum_i t_i (a_i - lse) = softmax_k * sum_i t_i - t_k
  const double lse = log_sum_exp(output);
  const double mass = std::accumulate(target.begin(), target.end(), 0.0);
  for (size_t i = 0; i < output.size(); ++i) {
    grad[i] = std::exp(output[i] - lse) * mass - target[i];
  }
}

// ---------------------------------------------------------------------------
// Backpropagation

Gradients Gradients::zeros_like(const NetworkModel& model) {
  Gradients g;
  for (const auto& l : model.layers) {
    g.weights.emplace_back(l.weights.size(), 0.0);
    g.bias.emplace_back(l.bias.size(), 0.0);
  }
  return g;
}

void Gradients::set_zero() {
  for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
  for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
}

namespace {

/// Activation and delta buffers for one mini-batch.
struct BatchWorkspace {
  std::vector<std::vector<double>> acts; // acts[0] = inputs, acts[l + 1] = output of layer l
  std::vector<double> delta;
  std::vector<double> delta_prev;

  BatchWorkspace(const NetworkModel& model, size_t batch) {
    acts.emplace_back(batch * model.input_dim());
    for (const auto& l : model.layers) {
      acts.emplace_back(batch * l.out_dim);
    }
  }
};

/// Forward pass over `batch` samples already loaded into ws.acts[0]; leaves
/// d loss / d output in ws.delta and returns the summed loss.
double forward_batch(
    const NetworkModel& model,
    std::span<const std::vector<double>* const> targets,
    size_t batch,
    LossKind kind,
    BatchWorkspace& ws,
    Execution exec) {
  const size_t depth = model.layers.size();
  for (size_t i = 0; i < depth; ++i) {
    const auto& l = model.layers[i];
    std::span<double> out(ws.acts[i + 1].data(), batch * l.out_dim);
    kernels::dense_forward(
        l.weights, l.bias, l.in_dim, l.out_dim, std::span<const double>(ws.acts[i].data(), batch * l.in_dim), batch, out, exec);
    apply_activation(l.activation, out);
  }

  const size_t out_dim = model.output_dim();
  ws.delta.resize(batch * out_dim);
  double total = 0.0;
  for (size_t s = 0; s < batch; ++s) {
    std::span<const double> y(ws.acts[depth].data() + s * out_dim, out_dim);
    MIENCAP_THROW_IF(targets[s]->size() != out_dim, DimensionError, "target of {} values for {} outputs", targets[s]->size(), out_dim);
    total += loss(kind, y, *targets[s]);
    loss_gradient(kind, y, *targets[s], std::span<double>(ws.delta.data() + s * out_dim, out_dim));
  }
  return total;
}

/// Moves ws.delta from the output of layer i to its input.
void propagate_delta(const NetworkModel& model, size_t i, size_t batch, BatchWorkspace& ws, Execution exec) {
  const auto& l = model.layers[i];
  ws.delta_prev.resize(batch * l.in_dim);
  kernels::dense_backpropagate(
      l.weights, l.in_dim, l.out_dim, std::span<const double>(ws.delta.data(), batch * l.out_dim), batch, ws.delta_prev, exec);
  if (model.layers[i - 1].activation == Activation::relu) {
    const double* in = ws.acts[i].data();
    for (size_t k = 0; k < batch * l.in_dim; ++k) {
      if (in[k] <= 0.0) {
        ws.delta_prev[k] = 0.0;
      }
    }
  }
}

/// Summed per-sample gradients; returns the summed loss.
double accumulate_batch(
    const NetworkModel& model,
    std::span<const std::vector<double>* const> targets,
    size_t batch,
    LossKind kind,
    BatchWorkspace& ws,
    Gradients& grads,
    Execution exec) {
  const double total = forward_batch(model, targets, batch, kind, ws, exec);
  for (size_t i = model.layers.size(); i-- > 0;) {
    const auto& l = model.layers[i];
    const std::span<const double> in(ws.acts[i].data(), batch * l.in_dim);
    kernels::dense_accumulate_gradients(
        std::span<const double>(ws.delta.data(), batch * l.out_dim), in, batch, l.in_dim, l.out_dim, grads.weights[i], grads.bias[i], exec);
    if (i == 0) {
      break;
    }
    propagate_delta(model, i, batch, ws, exec);
    std::swap(ws.delta, ws.delta_prev);
  }
  return total;
}

/// One SGD step with the mean batch gradient, applied layer by layer as the
/// delta moves down (each layer's delta is propagated before its weights
/// change). Returns the summed loss.
double step_batch(
    NetworkModel& model,
    std::span<const std::vector<double>* const> targets,
    size_t batch,
    LossKind kind,
    double learning_rate,
    BatchWorkspace& ws,
    Execution exec) {
  const double total = forward_batch(model, targets, batch, kind, ws, exec);
  if (!std::isfinite(total)) {
    return total;
  }
  const double scale = learning_rate / static_cast<double>(batch);
  for (size_t i = model.layers.size(); i-- > 0;) {
    auto& l = model.layers[i];
    if (i > 0) {
      propagate_delta(model, i, batch, ws, exec);
    }
    kernels::dense_sgd_step(
        std::span<const double>(ws.delta.data(), batch * l.out_dim),
        std::span<const double>(ws.acts[i].data(), batch * l.in_dim),
        batch,
        l.in_dim,
        l.out_dim,
        l.weights,
        l.bias,
        scale,
        exec);
    if (i > 0) {
      std::swap(ws.delta, ws.delta_prev);
    }
  }
  return total;
}

} // namespace

Gradients backward(const NetworkModel& model, std::span<const double> x, std::span<const double> target, LossKind kind) {
  model.validate();
  check_input(model, x.size());
  MIENCAP_THROW_IF(
      target.size() != model.output_dim(), DimensionError, "target of {} values for {} outputs", target.size(), model.output_dim());
  BatchWorkspace ws(model, 1);
  std::copy(x.begin(), x.end(), ws.acts[0].begin());
  const std::vector<double> t(target.begin(), target.end());
  const std::vector<double>* targets[] = {&t};
  auto grads = Gradients::zeros_like(model);
  accumulate_batch(model, targets, 1, kind, ws, grads, Execution::serial);
  return grads;
}

// ---------------------------------------------------------------------------
// Training

void Dataset::validate() const {
  MIENCAP_THROW_IF(inputs.empty(), ValidationError, "dataset is empty");
  MIENCAP_THROW_IF(
      inputs.size() != targets.size(), ValidationError, "{} inputs but {} targets", inputs.size(), targets.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    MIENCAP_THROW_IF(
        inputs[i].size() != inputs[0].size() || targets[i].size() != targets[0].size(),
        ValidationError,
        "dataset sample {} has non-uniform dimensions",
        i);
  }
}

void TrainConfig::validate() const {
  MIENCAP_THROW_IF(!(learning_rate >= 0.0) || !std::isfinite(learning_rate), ValidationError, "learning rate must be finite and non-negative");
  MIENCAP_THROW_IF(batch_size < 1, ValidationError, "batch size must be at least 1");
  MIENCAP_THROW_IF(epochs < 0, ValidationError, "epoch count must be non-negative");
}

TrainResult sgd_train(NetworkModel model, const Dataset& data, const TrainConfig& config, LossKind kind, Execution exec) {
  model.validate();
  data.validate();
  config.validate();
  check_input(model, data.inputs[0].size());
  MIENCAP_THROW_IF(
      data.targets[0].size() != model.output_dim(),
      DimensionError,
      "dataset targets have {} values, model outputs {}",
      data.targets[0].size(),
      model.output_dim());

  const size_t n = data.size();
  const size_t in_dim = model.input_dim();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(config.seed);
  BatchWorkspace ws(model, config.batch_size);
  std::vector<const std::vector<double>*> targets(config.batch_size);

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (config.shuffle) {
      for (size_t i = n - 1; i > 0; --i) {
        std::swap(order[i], order[rng.below(i + 1)]);
      }
    }
    double epoch_loss = 0.0;
    for (size_t begin = 0; begin < n; begin += config.batch_size) {
      const size_t batch = std::min(config.batch_size, n - begin);
      for (size_t s = 0; s < batch; ++s) {
        const auto& x = data.inputs[order[begin + s]];
        std::copy(x.begin(), x.end(), ws.acts[0].begin() + s * in_dim);
        targets[s] = &data.targets[order[begin + s]];
      }
      const double batch_loss = step_batch(model, targets, batch, kind, config.learning_rate, ws, exec);
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError(epoch, fmt::format("training loss became non-finite in epoch {}", epoch));
      }
      epoch_loss += batch_loss;
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(n));
    result.epoch_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  result.model = std::move(model);
  return result;
}

double evaluate_loss(const NetworkModel& model, const Dataset& data, LossKind kind) {
  data.validate();
  InferenceScratch scratch;
  std::vector<double> out;
  double total = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    forward_into(model, data.inputs[i], scratch, out);
    total += loss(kind, out, data.targets[i]);
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Finite-difference verification

double compare_gradients(
    const NetworkModel& model,
    std::span<const double> x,
    std::span<const double> target,
    LossKind kind,
    double eps,
    const Gradients& analytic) {
  MIENCAP_THROW_IF(!(eps > 0.0), ValidationError, "finite-difference step must be positive");
  NetworkModel probe = model;
  InferenceScratch scratch;
  std::vector<double> out;
  auto eval = [&] {
    forward_into(probe, x, scratch, out);
    return loss(kind, out, target);
  };
  double worst = 0.0;
  auto check = [&](double& param, double g_analytic) {
    const double saved = param;
    param = saved + eps;
    const double up = eval();
    param = saved - eps;
    const double down = eval();
    param = saved;
    const double g_numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(g_analytic - g_numeric) / std::max(1e-8, std::abs(g_analytic) + std::abs(g_numeric));
    worst = std::max(worst, rel);
  };
  for (size_t i = 0; i < probe.layers.size(); ++i) {
    auto& l = probe.layers[i];
    for (size_t k = 0; k < l.weights.size(); ++k) {
      check(l.weights[k], analytic.weights[i][k]);
    }
    for (size_t k = 0; k < l.bias.size(); ++k) {
      check(l.bias[k], analytic.bias[i][k]);
    }
  }
  return worst;
}

double gradient_check(
    const NetworkModel& model,
    std::span<const double> x,
    std::span<const double> target,
    LossKind kind,
    double eps) {
  return compare_gradients(model, x, target, kind, eps, backward(model, x, target, kind));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr const char* kModelMagic = "miencap-model";
constexpr int kModelVersion = 1;

const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

void append_values(std::string& text, const char* tag, const std::vector<double>& values) {
  text += tag;
  for (double v : values) {
    text += fmt::format(" {:.17g}", v);
  }
  text += '\n';
}

bool single_token(const std::string& s) {
  return !s.empty() && std::none_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

} // namespace

std::string serialize_model(const NetworkModel& model) {
  model.validate();
  std::string text = fmt::format("{} {}\n", kModelMagic, kModelVersion);
  text += fmt::format("name {}\n", model.name.empty() ? "-" : model.name);
  text += fmt::format("seed {}\n", model.seed);
  text += fmt::format("meta {}\n", model.metadata.size());
  for (const auto& [k, v] : model.metadata) {
    MIENCAP_THROW_IF(!single_token(k) || v.find('\n') != std::string::npos, ValidationError, "metadata key '{}' is not serializable", k);
    text += fmt::format("{} {}\n", k, v);
  }
  text += fmt::format("layers {}\n", model.layers.size());
  for (const auto& l : model.layers) {
    text += fmt::format("layer {} {} {}\n", l.in_dim, l.out_dim, activation_name(l.activation));
    append_values(text, "w", l.weights);
    append_values(text, "b", l.bias);
  }
  text += "end\n";
  return text;
}

NetworkModel parse_model(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  auto next = [&](const char* what) -> std::istringstream {
    MIENCAP_THROW_IF(!std::getline(in, line), FormatError, "model file truncated: expected {} at line {}", what, lineno + 1);
    ++lineno;
    return std::istringstream(line);
  };
  auto expect_key = [&](std::istringstream& ss, const char* key) {
    std::string k;
    MIENCAP_THROW_IF(!(ss >> k) || k != key, FormatError, "model line {}: expected '{}'", lineno, key);
  };

  NetworkModel model;
  {
    auto ss = next("header");
    std::string magic;
    int version = 0;
    MIENCAP_THROW_IF(!(ss >> magic >> version) || magic != kModelMagic, FormatError, "not a model file");
    MIENCAP_THROW_IF(version != kModelVersion, FormatError, "unsupported model version {}", version);
  }
  {
    auto ss = next("name");
    expect_key(ss, "name");
    ss >> model.name;
    if (model.name == "-") model.name.clear();
  }
  {
    auto ss = next("seed");
    expect_key(ss, "seed");
    MIENCAP_THROW_IF(!(ss >> model.seed), FormatError, "model line {}: bad seed", lineno);
  }
  size_t meta_count = 0;
  {
    auto ss = next("meta");
    expect_key(ss, "meta");
    MIENCAP_THROW_IF(!(ss >> meta_count), FormatError, "model line {}: bad metadata count", lineno);
  }
  for (size_t i = 0; i < meta_count; ++i) {
    next("metadata entry");
    const auto space = line.find(' ');
    MIENCAP_THROW_IF(space == std::string::npos, FormatError, "model line {}: bad metadata entry", lineno);
    model.metadata[line.substr(0, space)] = line.substr(space + 1);
  }
  size_t layer_count = 0;
  {
    auto ss = next("layers");
    expect_key(ss, "layers");
    MIENCAP_THROW_IF(!(ss >> layer_count) || layer_count == 0, FormatError, "model line {}: bad layer count", lineno);
  }
  auto read_values = [&](const char* tag, size_t count) {
    auto ss = next(tag);
    expect_key(ss, tag);
    std::vector<double> values(count);
    std::string tok;
    for (auto& v : values) {
      MIENCAP_THROW_IF(!(ss >> tok), FormatError, "model line {}: expected {} values", lineno, count);
      char* end = nullptr;
      v = std::strtod(tok.c_str(), &end);
      MIENCAP_THROW_IF(end != tok.c_str() + tok.size(), FormatError, "model line {}: bad number '{}'", lineno, tok);
    }
    MIENCAP_THROW_IF(static_cast<bool>(ss >> tok), FormatError, "model line {}: too many values", lineno);
    return values;
  };
  for (size_t i = 0; i < layer_count; ++i) {
    auto ss = next("layer");
    expect_key(ss, "layer");
    DenseLayer l;
    std::string act;
    MIENCAP_THROW_IF(!(ss >> l.in_dim >> l.out_dim >> act), FormatError, "model line {}: bad layer header", lineno);
    MIENCAP_THROW_IF(act != "relu" && act != "identity", FormatError, "model line {}: unknown activation '{}'", lineno, act);
    l.activation = act == "relu" ? Activation::relu : Activation::identity;
    l.weights = read_values("w", l.in_dim * l.out_dim);
    l.bias = read_values("b", l.out_dim);
    model.layers.push_back(std::move(l));
  }
  next("end");
  MIENCAP_THROW_IF(line != "end", FormatError, "model line {}: expected 'end'", lineno);
  try {
    model.validate();
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  return model;
}

void save_model(const NetworkModel& model, const std::filesystem::path& path) {
  const auto text = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << text;
  MIENCAP_THROW_IF(!out, IoError, "write failed for '{}'", path.string());
}

NetworkModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_model(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
}

} // namespace miencap
