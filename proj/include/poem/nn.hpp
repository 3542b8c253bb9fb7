#pragma once

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "poem/tensor.hpp"

namespace poem {

// ---------------------------------------------------------------------------
// GEMM wrappers (row-major). The ±1 products used by the simulated binary path
// stay integer-exact under any accumulation order, so BLAS threading does not
// disturb the packed/simulated equivalence.
// ---------------------------------------------------------------------------

// c[n,m] = a[n,k] * b[m,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  if constexpr (std::is_same_v<T, float>)
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)n, (int)m, (int)k, 1.0f, a, (int)k,
                b, (int)k, 0.0f, c, (int)m);
  else
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)n, (int)m, (int)k, 1.0, a, (int)k, b,
                (int)k, 0.0, c, (int)m);
}

// c[n,k] = a[n,m] * b[m,k]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  if constexpr (std::is_same_v<T, float>)
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)n, (int)k, (int)m, 1.0f, a, (int)m,
                b, (int)k, 0.0f, c, (int)k);
  else
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)n, (int)k, (int)m, 1.0, a, (int)m,
                b, (int)k, 0.0, c, (int)k);
}

// c[m,k] = a[n,m]^T * b[n,k]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  if constexpr (std::is_same_v<T, float>)
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)m, (int)k, (int)n, 1.0f, a, (int)m,
                b, (int)k, 0.0f, c, (int)k);
  else
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)m, (int)k, (int)n, 1.0, a, (int)m, b,
                (int)k, 0.0, c, (int)k);
}

// ---------------------------------------------------------------------------
// Gradient container: parameter grads keyed by name, plus the input grad.
// ---------------------------------------------------------------------------

template <class T>
struct GradBundle {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  Tensor<T> input;

  void add(std::string name, Tensor<T> g) { params.emplace_back(std::move(name), std::move(g)); }
  const Tensor<T>& get(std::string_view name) const {
    for (const auto& [n, g] : params)
      if (n == name) return g;
    throw std::out_of_range("GradBundle: no gradient named " + std::string(name));
  }
};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("linear_forward: shape mismatch " + shape_str(x.shape()) + " x " +
                                shape_str(w.shape()));
  const std::size_t n = x.dim(0), out = w.dim(0);
  Tensor<T> y({n, out});
  gemm_nt(x.data(), w.data(), y.data(), n, out, x.dim(1));
  if (bias) {
    if (bias->size() != out) throw std::invalid_argument("linear_forward: bias size mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out; ++j) y.at(i, j) += (*bias)[j];
  }
  return y;
}

template <class T>
GradBundle<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                              bool has_bias = false) {
  if (grad_out.ndim() != 2 || grad_out.dim(0) != x.dim(0) || grad_out.dim(1) != w.dim(0))
    throw std::invalid_argument("linear_backward: grad shape mismatch");
  const std::size_t n = x.dim(0), out = w.dim(0), in = w.dim(1);
  GradBundle<T> g;
  Tensor<T> dw({out, in});
  gemm_tn(grad_out.data(), x.data(), dw.data(), n, out, in);
  g.add("w", std::move(dw));
  if (has_bias) {
    Tensor<T> db({out});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out; ++j) db[j] += grad_out.at(i, j);
    g.add("bias", std::move(db));
  }
  g.input = Tensor<T>({n, in});
  gemm_nn(grad_out.data(), w.data(), g.input.data(), n, out, in);
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel over rows of an [n, C] tensor)
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

template <class T>
struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T epsilon = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  explicit BatchNormState(std::size_t channels = 0)
      : gamma(Tensor<T>::full({channels}, T{1})), beta(Tensor<T>({channels})),
        running_mean(Tensor<T>({channels})), running_var(Tensor<T>::full({channels}, T{1})) {}

  std::size_t channels() const { return gamma.size(); }
};

template <class T>
struct BatchNormCache {
  Tensor<T> xhat;      // normalized pre-affine values
  Tensor<T> inv_std;   // per channel 1/sqrt(var + eps)
  BnMode mode = BnMode::train;
};

template <class T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormState<T>& state, BnMode mode,
                            std::type_identity_t<BatchNormCache<T>>* cache = nullptr,
                            bool update_running = true) {
  if (x.ndim() != 2 || x.dim(1) != state.channels())
    throw std::invalid_argument("batchnorm_forward: shape mismatch");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (mode == BnMode::train && n < 2)
    throw std::invalid_argument("batchnorm_forward: train mode needs batch >= 2");

  Tensor<T> mean({c}), var({c});
  if (mode == BnMode::train) {
    for (std::size_t j = 0; j < c; ++j) {
      T m = 0;
      for (std::size_t i = 0; i < n; ++i) m += x.at(i, j);
      m /= static_cast<T>(n);
      T v = 0;
      for (std::size_t i = 0; i < n; ++i) {
        T d = x.at(i, j) - m;
        v += d * d;
      }
      v /= static_cast<T>(n);
      mean[j] = m;
      var[j] = v;
    }
    if (update_running) {
      const T mom = state.momentum;
      for (std::size_t j = 0; j < c; ++j) {
        state.running_mean[j] = (T{1} - mom) * state.running_mean[j] + mom * mean[j];
        // unbiased variance feeds the running estimate
        T unbiased = var[j] * static_cast<T>(n) / static_cast<T>(n - 1);
        state.running_var[j] = (T{1} - mom) * state.running_var[j] + mom * unbiased;
      }
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor<T> y({n, c});
  Tensor<T> inv_std({c});
  for (std::size_t j = 0; j < c; ++j)
    inv_std[j] = T{1} / std::sqrt(var[j] + state.epsilon);
  Tensor<T> xhat({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      T h = (x.at(i, j) - mean[j]) * inv_std[j];
      xhat.at(i, j) = h;
      y.at(i, j) = state.gamma[j] * h + state.beta[j];
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

template <class T>
GradBundle<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                 const BatchNormState<T>& state) {
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1);
  if (!cache.xhat.same_shape(grad_out)) throw std::invalid_argument("batchnorm_backward: cache mismatch");
  GradBundle<T> g;
  Tensor<T> dgamma({c}), dbeta({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      dgamma[j] += grad_out.at(i, j) * cache.xhat.at(i, j);
      dbeta[j] += grad_out.at(i, j);
    }
  g.input = Tensor<T>({n, c});
  if (cache.mode == BnMode::train) {
    for (std::size_t j = 0; j < c; ++j) {
      const T mg = dbeta[j] / static_cast<T>(n);           // mean of grad
      const T mgx = dgamma[j] / static_cast<T>(n);         // mean of grad*xhat
      const T s = state.gamma[j] * cache.inv_std[j];
      for (std::size_t i = 0; i < n; ++i)
        g.input.at(i, j) = s * (grad_out.at(i, j) - mg - cache.xhat.at(i, j) * mgx);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      const T s = state.gamma[j] * cache.inv_std[j];
      for (std::size_t i = 0; i < n; ++i) g.input.at(i, j) = s * grad_out.at(i, j);
    }
  }
  g.add("gamma", std::move(dgamma));
  g.add("beta", std::move(dbeta));
  return g;
}

// ---------------------------------------------------------------------------
// PReLU (per-layer scalar slope)
// ---------------------------------------------------------------------------

template <class T>
struct PReLUState {
  T slope = static_cast<T>(0.25);
};

template <class T>
Tensor<T> prelu_forward(const Tensor<T>& x, const PReLUState<T>& state) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : state.slope * x[i];
  return y;
}

template <class T>
GradBundle<T> prelu_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const PReLUState<T>& state) {
  if (!grad_out.same_shape(x)) throw std::invalid_argument("prelu_backward: shape mismatch");
  GradBundle<T> g;
  g.input = Tensor<T>(x.shape());
  T dslope = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > T{0}) {
      g.input[i] = grad_out[i];
    } else {
      g.input[i] = grad_out[i] * state.slope;
      dslope += grad_out[i] * x[i];
    }
  }
  g.add("slope", Tensor<T>({1}, {dslope}));
  return g;
}

// ---------------------------------------------------------------------------
// Max-pool over the points axis of a [B, P, C] tensor
// ---------------------------------------------------------------------------

template <class T>
struct MaxPoolResult {
  Tensor<T> pooled;                  // [B, C]
  std::vector<std::uint32_t> argmax; // B*C entries, first max index on ties
};

template <class T>
MaxPoolResult<T> maxpool_points_forward(const Tensor<T>& x) {
  if (x.ndim() != 3) throw std::invalid_argument("maxpool: expected [batch, points, channels]");
  const std::size_t b = x.dim(0), p = x.dim(1), c = x.dim(2);
  if (p == 0) throw std::invalid_argument("maxpool: empty points axis");
  MaxPoolResult<T> r;
  r.pooled = Tensor<T>({b, c});
  r.argmax.assign(b * c, 0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      T best = x.at(i, 0, j);
      std::uint32_t bi = 0;
      for (std::size_t q = 1; q < p; ++q)
        if (x.at(i, q, j) > best) {
          best = x.at(i, q, j);
          bi = static_cast<std::uint32_t>(q);
        }
      r.pooled.at(i, j) = best;
      r.argmax[i * c + j] = bi;
    }
  return r;
}

template <class T>
Tensor<T> maxpool_points_backward(const Tensor<T>& grad, std::span<const std::uint32_t> argmax,
                                  std::size_t points) {
  const std::size_t b = grad.dim(0), c = grad.dim(1);
  if (argmax.size() != b * c) throw std::invalid_argument("maxpool backward: argmax size mismatch");
  Tensor<T> dx({b, points, c});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) dx.at(i, argmax[i * c + j], j) = grad.at(i, j);
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy (mean over batch)
// ---------------------------------------------------------------------------

template <class T>
struct CrossEntropyResult {
  T loss;
  Tensor<T> dlogits; // (softmax - onehot) / batch
};

template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size())
    throw std::invalid_argument("softmax_cross_entropy: shape mismatch");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  CrossEntropyResult<T> r;
  r.loss = 0;
  r.dlogits = Tensor<T>({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    T mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits.at(i, j) - mx);
    T lse = mx + std::log(sum);
    r.loss += lse - logits.at(i, static_cast<std::size_t>(label));
    for (std::size_t j = 0; j < c; ++j) {
      T p = std::exp(logits.at(i, j) - lse);
      r.dlogits.at(i, j) = (p - (static_cast<std::size_t>(label) == j ? T{1} : T{0})) /
                           static_cast<T>(n);
    }
  }
  r.loss /= static_cast<T>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Adam + cosine schedule
// ---------------------------------------------------------------------------

template <class T>
struct AdamSlot {
  Tensor<T> m, v;
};

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update; `t` is the 1-based step count shared across the run.
template <class T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& slot, std::uint64_t t,
               const AdamParams& hp) {
  if (!param.same_shape(grad)) throw std::invalid_argument("adam_step: grad shape mismatch");
  if (slot.m.size() != param.size()) {
    slot.m = Tensor<T>(param.shape());
    slot.v = Tensor<T>(param.shape());
  }
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T c1 = T{1} - static_cast<T>(std::pow(hp.beta1, static_cast<double>(t)));
  const T c2 = T{1} - static_cast<T>(std::pow(hp.beta2, static_cast<double>(t)));
  for (std::size_t i = 0; i < param.size(); ++i) {
    T g = grad[i];
    slot.m[i] = b1 * slot.m[i] + (T{1} - b1) * g;
    slot.v[i] = b2 * slot.v[i] + (T{1} - b2) * g * g;
    T mhat = slot.m[i] / c1;
    T vhat = slot.v[i] / c2;
    param[i] -= static_cast<T>(hp.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(hp.eps));
  }
}

inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr,
                        double floor = 0.0) {
  if (total_epochs == 0) return base_lr;
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return floor + 0.5 * (base_lr - floor) * (1.0 + std::cos(t * 3.14159265358979323846));
}

// sign with the paper's tie-break: sign(0) = -1.
template <class T>
Tensor<T> sign_tensor(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? T{1} : T{-1};
  return y;
}

} // namespace poem
