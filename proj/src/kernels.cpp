#include "miencap/kernels.hpp"

#include <algorithm>
#include <vector>

#include <omp.h>

namespace miencap {

int max_threads() {
  return omp_get_max_threads();
}

namespace kernels {

namespace {

// Eight-lane double vectors. Lane semantics are fixed by the type, so the
// arithmetic is the same whatever instruction set the compiler picks.
typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) {
  __builtin_memcpy(p, &v, sizeof v);
}

inline double fold(v8d a, double tail) {
  return ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
}

} // namespace

double dot(const double* a, const double* b, size_t n) {
  v8d acc = {};
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc += load8(a + i) * load8(b + i);
  }
  double tail = 0.0;
  for (; i < n; ++i) {
    tail += a[i] * b[i];
  }
  return fold(acc, tail);
}

namespace {

// Four samples against one weight row; each lane keeps the exact
// accumulation order of dot().
inline void dot4(const double* w, const double* const* x, size_t n, double* r) {
  v8d acc[4] = {};
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const v8d wv = load8(w + i);
    for (size_t k = 0; k < 4; ++k) {
      acc[k] += wv * load8(x[k] + i);
    }
  }
  for (size_t k = 0; k < 4; ++k) {
    double t = 0.0;
    for (size_t j = i; j < n; ++j) {
      t += w[j] * x[k][j];
    }
    r[k] = fold(acc[k], t);
  }
}

inline void forward_row(
    const double* w, double b, size_t in_dim, size_t out_dim, const double* in, size_t batch, double* out, size_t o) {
  const double* row = w + o * in_dim;
  size_t s = 0;
  for (; s + 4 <= batch; s += 4) {
    const double* x[4] = {in + s * in_dim, in + (s + 1) * in_dim, in + (s + 2) * in_dim, in + (s + 3) * in_dim};
    double r[4];
    dot4(row, x, in_dim, r);
    for (size_t k = 0; k < 4; ++k) {
      out[(s + k) * out_dim + o] = r[k] + b;
    }
  }
  for (; s < batch; ++s) {
    out[s * out_dim + o] = dot(row, in + s * in_dim, in_dim) + b;
  }
}

// Samples are added to each gradient entry one after another in ascending
// order; zero deltas are skipped.
inline void gradient_row(
    const double* delta, const double* in, size_t batch, size_t in_dim, size_t out_dim, double* gw, double* gb, size_t o) {
  constexpr size_t kMaxLive = 16;
  double* row = gw + o * in_dim;
  double bias_acc = 0.0;
  double d[kMaxLive];
  const double* x[kMaxLive];
  size_t s = 0;
  while (s < batch) {
    size_t live = 0;
    for (; s < batch && live < kMaxLive; ++s) {
      const double v = delta[s * out_dim + o];
      bias_acc += v;
      if (v != 0.0) {
        d[live] = v;
        x[live] = in + s * in_dim;
        ++live;
      }
    }
    if (live == 0) {
      continue;
    }
    size_t i = 0;
    for (; i + 8 <= in_dim; i += 8) {
      v8d acc = load8(row + i);
      for (size_t k = 0; k < live; ++k) {
        acc += d[k] * load8(x[k] + i);
      }
      store8(row + i, acc);
    }
    for (; i < in_dim; ++i) {
      double acc = row[i];
      for (size_t k = 0; k < live; ++k) {
        acc += d[k] * x[k][i];
      }
      row[i] = acc;
    }
  }
  gb[o] += bias_acc;
}

inline void sgd_row(
    const double* delta, const double* in, size_t batch, size_t in_dim, size_t out_dim, double* w, double* b, double scale, size_t o) {
  thread_local std::vector<double> d;
  thread_local std::vector<const double*> x;
  d.clear();
  x.clear();
  double bias_acc = 0.0;
  for (size_t s = 0; s < batch; ++s) {
    const double v = delta[s * out_dim + o];
    bias_acc += v;
    if (v != 0.0) {
      d.push_back(v);
      x.push_back(in + s * in_dim);
    }
  }
  b[o] -= scale * bias_acc;
  const size_t live = d.size();
  if (live == 0) {
    return;
  }
  double* row = w + o * in_dim;
  const v8d sv = {scale, scale, scale, scale, scale, scale, scale, scale};
  size_t i = 0;
  for (; i + 8 <= in_dim; i += 8) {
    v8d acc = {};
    for (size_t k = 0; k < live; ++k) {
      acc += d[k] * load8(x[k] + i);
    }
    store8(row + i, load8(row + i) - sv * acc);
  }
  for (; i < in_dim; ++i) {
    double acc = 0.0;
    for (size_t k = 0; k < live; ++k) {
      acc += d[k] * x[k][i];
    }
    row[i] -= scale * acc;
  }
}

// grad_in rows for samples [first, last); each entry sums over o ascending.
inline void backprop_samples(
    const double* w, size_t in_dim, size_t out_dim, const double* delta, double* grad_in, size_t first, size_t last) {
  for (size_t s0 = first; s0 < last; s0 += 4) {
    const size_t ns = std::min<size_t>(4, last - s0);
    size_t i = 0;
    for (; i + 16 <= in_dim; i += 16) {
      v8d lo[4] = {}, hi[4] = {};
      for (size_t o = 0; o < out_dim; ++o) {
        const v8d wl = load8(w + o * in_dim + i), wh = load8(w + o * in_dim + i + 8);
        for (size_t k = 0; k < ns; ++k) {
          const double dv = delta[(s0 + k) * out_dim + o];
          lo[k] += wl * dv;
          hi[k] += wh * dv;
        }
      }
      for (size_t k = 0; k < ns; ++k) {
        store8(grad_in + (s0 + k) * in_dim + i, lo[k]);
        store8(grad_in + (s0 + k) * in_dim + i + 8, hi[k]);
      }
    }
    for (; i < in_dim; ++i) {
      for (size_t k = 0; k < ns; ++k) {
        double acc = 0.0;
        for (size_t o = 0; o < out_dim; ++o) {
          acc += w[o * in_dim + i] * delta[(s0 + k) * out_dim + o];
        }
        grad_in[(s0 + k) * in_dim + i] = acc;
      }
    }
  }
}

// Below this many multiply-adds the fork/join costs more than it saves.
constexpr size_t kParallelThreshold = 1 << 14;

} // namespace

void dense_forward(
    std::span<const double> weights,
    std::span<const double> bias,
    size_t in_dim,
    size_t out_dim,
    std::span<const double> in,
    size_t batch,
    std::span<double> out,
    Execution exec) {
  const double* w = weights.data();
  const double* b = bias.data();
  const double* x = in.data();
  double* y = out.data();
  const auto n = static_cast<std::ptrdiff_t>(out_dim);
  if (exec == Execution::parallel && in_dim * out_dim * batch >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      forward_row(w, b[o], in_dim, out_dim, x, batch, y, static_cast<size_t>(o));
    }
  } else {
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      forward_row(w, b[o], in_dim, out_dim, x, batch, y, static_cast<size_t>(o));
    }
  }
}

void dense_accumulate_gradients(
    std::span<const double> delta,
    std::span<const double> in,
    size_t batch,
    size_t in_dim,
    size_t out_dim,
    std::span<double> grad_w,
    std::span<double> grad_b,
    Execution exec) {
  const auto n = static_cast<std::ptrdiff_t>(out_dim);
  if (exec == Execution::parallel && in_dim * out_dim * batch >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      gradient_row(delta.data(), in.data(), batch, in_dim, out_dim, grad_w.data(), grad_b.data(), static_cast<size_t>(o));
    }
  } else {
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      gradient_row(delta.data(), in.data(), batch, in_dim, out_dim, grad_w.data(), grad_b.data(), static_cast<size_t>(o));
    }
  }
}

void dense_sgd_step(
    std::span<const double> delta,
    std::span<const double> in,
    size_t batch,
    size_t in_dim,
    size_t out_dim,
    std::span<double> weights,
    std::span<double> bias,
    double scale,
    Execution exec) {
  const auto n = static_cast<std::ptrdiff_t>(out_dim);
  if (exec == Execution::parallel && in_dim * out_dim * batch >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      sgd_row(delta.data(), in.data(), batch, in_dim, out_dim, weights.data(), bias.data(), scale, static_cast<size_t>(o));
    }
  } else {
    for (std::ptrdiff_t o = 0; o < n; ++o) {
      sgd_row(delta.data(), in.data(), batch, in_dim, out_dim, weights.data(), bias.data(), scale, static_cast<size_t>(o));
    }
  }
}

void dense_backpropagate(
    std::span<const double> weights,
    size_t in_dim,
    size_t out_dim,
    std::span<const double> delta,
    size_t batch,
    std::span<double> grad_in,
    Execution exec) {
  const auto blocks = static_cast<std::ptrdiff_t>((batch + 3) / 4);
  if (exec == Execution::parallel && blocks > 1 && in_dim * out_dim * batch >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
      const size_t first = static_cast<size_t>(blk) * 4;
      backprop_samples(weights.data(), in_dim, out_dim, delta.data(), grad_in.data(), first, std::min(first + 4, batch));
    }
  } else {
    backprop_samples(weights.data(), in_dim, out_dim, delta.data(), grad_in.data(), 0, batch);
  }
}

void axpy_update(std::span<double> params, std::span<const double> grads, double scale, Execution exec) {
  const auto n = static_cast<std::ptrdiff_t>(params.size());
  double* p = params.data();
  const double* g = grads.data();
  if (exec == Execution::parallel && params.size() >= kParallelThreshold) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      p[i] -= scale * g[i];
    }
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      p[i] -= scale * g[i];
    }
  }
}

} // namespace kernels
} // namespace miencap
