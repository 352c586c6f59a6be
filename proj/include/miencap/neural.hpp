#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "miencap/kernels.hpp"

namespace miencap {

enum class Activation { identity, relu };

struct DenseLayer {
  size_t in_dim = 0;
  size_t out_dim = 0;
  std::vector<double> weights; // out_dim x in_dim, row-major
  std::vector<double> bias;
  Activation activation = Activation::identity;

  size_t parameter_count() const {
    return weights.size() + bias.size();
  }
  bool operator==(const DenseLayer&) const = default;
};

struct NetworkModel {
  std::vector<DenseLayer> layers;
  std::string name;
  uint64_t seed = 0;
  /// Free-form key/value tags (character ids, input layout).
  std::map<std::string, std::string> metadata;

  size_t input_dim() const;
  size_t output_dim() const;
  size_t parameter_count() const;
  void validate() const;
  bool operator==(const NetworkModel&) const = default;
};

/// Fully connected ReLU network with an identity output layer. Weights are
/// drawn uniformly from +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
NetworkModel make_mlp(
    size_t input_dim,
    std::span<const size_t> hidden,
    size_t output_dim,
    uint64_t seed,
    std::string name = {});

/// Reusable activation buffers for allocation-free inference.
struct InferenceScratch {
  std::vector<double> a;
  std::vector<double> b;
};

std::vector<double> forward(const NetworkModel& model, std::span<const double> x);

/// Writes the output into `out` (resized to output_dim).
void forward_into(const NetworkModel& model, std::span<const double> x, InferenceScratch& scratch, std::vector<double>& out);

enum class LossKind {
  squared_error,         ///< sum_i (a_i - t_i)^2, unreduced
  softmax_cross_entropy, ///< -sum_i t_i ln softmax(a)_i
};

double mse_loss(std::span<const double> output, std::span<const double> target);
double softmax_cross_entropy(std::span<const double> logits, std::span<const double> target);
double loss(LossKind kind, std::span<const double> output, std::span<const double> target);

/// d loss / d output.
void loss_gradient(LossKind kind, std::span<const double> output, std::span<const double> target, std::span<double> grad);

/// Per-layer parameter gradients, laid out like the model.
struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;

  static Gradients zeros_like(const NetworkModel& model);
  void set_zero();
};

Gradients backward(const NetworkModel& model, std::span<const double> x, std::span<const double> target, LossKind kind);

struct Dataset {
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> targets;

  size_t size() const {
    return inputs.size();
  }
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.01;
  size_t batch_size = 10;
  int epochs = 100;
  uint64_t seed = 1;
  bool shuffle = true;

  void validate() const;
};

struct TrainResult {
  NetworkModel model;
  std::vector<double> loss_curve; ///< mean per-sample loss seen during each epoch
  std::vector<double> epoch_ms;
};

/// Mini-batch SGD; the batch gradient is the mean of per-sample gradients.
TrainResult sgd_train(
    NetworkModel model,
    const Dataset& data,
    const TrainConfig& config,
    LossKind kind,
    Execution exec = Execution::parallel);

/// Mean per-sample loss over a dataset.
double evaluate_loss(const NetworkModel& model, const Dataset& data, LossKind kind);

/// Max relative error between `analytic` and central differences of the loss.
double compare_gradients(
    const NetworkModel& model,
    std::span<const double> x,
    std::span<const double> target,
    LossKind kind,
    double eps,
    const Gradients& analytic);

double gradient_check(
    const NetworkModel& model,
    std::span<const double> x,
    std::span<const double> target,
    LossKind kind,
    double eps = 1e-5);

void save_model(const NetworkModel& model, const std::filesystem::path& path);
NetworkModel load_model(const std::filesystem::path& path);
std::string serialize_model(const NetworkModel& model);
NetworkModel parse_model(const std::string& text);

/// Seeded generator used by init, shuffling and synthetic data. Built on raw
/// mt19937_64 output (fully specified by the standard) rather than the
/// implementation-defined std distributions, so sequences match everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  uint64_t next() {
    return engine_();
  }
  double uniform(); ///< [0, 1)
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }
  double normal();
  size_t below(size_t n); ///< unbiased in [0, n)

 private:
  std::mt19937_64 engine_;
};

} // namespace miencap
