#pragma once

#include <cstddef>
#include <span>

namespace miencap {

/// Selects between the serial reference kernels and their OpenMP
/// counterparts. Both produce bit-identical results: parallel loops only
/// split independent output elements, never a reduction.
enum class Execution { serial, parallel };

int max_threads();

namespace kernels {

/// Dot product with eight fixed-order partial sums.
double dot(const double* a, const double* b, size_t n);

/// out[s][o] = weights[o] . in[s] + bias[o] for a batch of `batch` samples.
/// `weights` is out_dim x in_dim row-major.
void dense_forward(
    std::span<const double> weights,
    std::span<const double> bias,
    size_t in_dim,
    size_t out_dim,
    std::span<const double> in,
    size_t batch,
    std::span<double> out,
    Execution exec);

/// Accumulates grad_w[o][i] += sum_s delta[s][o] * in[s][i] and
/// grad_b[o] += sum_s delta[s][o], samples summed in ascending order.
void dense_accumulate_gradients(
    std::span<const double> delta,
    std::span<const double> in,
    size_t batch,
    size_t in_dim,
    size_t out_dim,
    std::span<double> grad_w,
    std::span<double> grad_b,
    Execution exec);

/// weights[o][i] -= scale * sum_s delta[s][o] * in[s][i], and likewise for
/// the bias. The sums are formed exactly as dense_accumulate_gradients forms
/// them from zeroed buffers, so a fused step matches accumulate-then-update.
void dense_sgd_step(
    std::span<const double> delta,
    std::span<const double> in,
    size_t batch,
    size_t in_dim,
    size_t out_dim,
    std::span<double> weights,
    std::span<double> bias,
    double scale,
    Execution exec);

/// grad_in[s][i] = sum_o weights[o][i] * delta[s][o], o ascending.
void dense_backpropagate(
    std::span<const double> weights,
    size_t in_dim,
    size_t out_dim,
    std::span<const double> delta,
    size_t batch,
    std::span<double> grad_in,
    Execution exec);

/// params -= scale * grads.
void axpy_update(std::span<double> params, std::span<const double> grads, double scale, Execution exec);

} // namespace kernels
} // namespace miencap
