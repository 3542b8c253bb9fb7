#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>

#include "poem/bitops.hpp"
#include "poem/em.hpp"
#include "poem/nn.hpp"
#include "poem/tensor.hpp"

namespace poem {

inline constexpr double kAlphaFloor = 1e-8;

enum class GradVariant { analytic, paper };

// One 1-bit fully-connected block: latent real weights, channel-wise scale,
// batch norm, PReLU, and one GMM per output channel. The binary cache is
// versioned against the latent weights; mutate weights through the helpers
// (or bump_weights_version) so staleness is detectable.
template <class T>
struct BiFCLayer {
  Tensor<T> weights; // [out, in] latent real
  Tensor<T> alpha;   // [out], > 0 (clamped to kAlphaFloor)
  BatchNormState<T> bn;
  PReLUState<T> prelu;
  std::vector<GmmChannelState> gmm; // one per output channel; empty until EM init
  PackedBitMatrix cached_binary;
  std::uint64_t weights_version = 0;
  std::uint64_t cache_version = std::uint64_t(-1);
  T ste_clip = T{1}; // <= 0 disables the clip window

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }

  void bump_weights_version() { ++weights_version; }
  bool cache_fresh() const { return cache_version == weights_version; }

  std::span<const T> channel_weights(std::size_t j) const {
    return {weights.data() + j * in_channels(), in_channels()};
  }
};

template <class T>
struct LayerForwardCache {
  Tensor<T> input;    // x as given
  Tensor<T> scaled;   // alpha ∘ (x · sign(W)^T)
  Tensor<T> pre_bn;   // x · sign(W)^T (needed for the alpha gradient)
  Tensor<T> pre_sign; // post-PReLU activation, the STE clip reference
  Tensor<T> pre_prelu;
  BatchNormCache<T> bn_cache;
  std::uint64_t weights_version = 0;
};

// alpha* per channel: mean |w|. Used for construction and as a test oracle.
template <class T>
Tensor<T> optimal_alpha(const BiFCLayer<T>& layer) {
  const std::size_t out = layer.out_channels(), in = layer.in_channels();
  Tensor<T> a({out});
  for (std::size_t j = 0; j < out; ++j) {
    T s = 0;
    for (std::size_t n = 0; n < in; ++n) s += std::abs(layer.weights.at(j, n));
    a[j] = std::max(s / static_cast<T>(in), static_cast<T>(kAlphaFloor));
  }
  return a;
}

template <class T>
BiFCLayer<T> make_bifc_layer(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  BiFCLayer<T> layer;
  layer.weights = Tensor<T>({out, in});
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  for (auto& w : layer.weights.flat()) w = static_cast<T>(dist(rng));
  layer.alpha = optimal_alpha(layer);
  layer.bn = BatchNormState<T>(out);
  layer.prelu = PReLUState<T>{};
  return layer;
}

template <class T>
void refresh_binary_cache(BiFCLayer<T>& layer) {
  layer.cached_binary = pack<T>(layer.weights.flat(), layer.out_channels(), layer.in_channels());
  layer.cache_version = layer.weights_version;
}

// Initializes (or re-fits) the per-channel mixtures from the current weights.
template <class T>
void em_init_layer(BiFCLayer<T>& layer) {
  layer.gmm.clear();
  layer.gmm.reserve(layer.out_channels());
  for (std::size_t j = 0; j < layer.out_channels(); ++j)
    layer.gmm.push_back(init_channel(layer.channel_weights(j)));
}

// One E+M refresh per channel on the current latent weights.
template <class T>
void em_refresh_layer(BiFCLayer<T>& layer, int epoch) {
  if (layer.gmm.size() != layer.out_channels())
    throw std::runtime_error("em_refresh_layer: GMM states not initialized");
  for (std::size_t j = 0; j < layer.out_channels(); ++j) {
    auto w = layer.channel_weights(j);
    e_step(w, layer.gmm[j]);
    m_step(w, layer.gmm[j]);
    layer.gmm[j].refresh_epoch = epoch;
  }
}

// Shared scalar tail of both forward paths: scale -> BN -> PReLU. Keeping one
// code path (same dtype, same order) is what makes packed and simulated
// outputs bit-identical.
template <class T>
Tensor<T> apply_scale_bn_prelu(const Tensor<T>& z, BiFCLayer<T>& layer, BnMode mode,
                               std::type_identity_t<LayerForwardCache<T>>* cache,
                               bool update_running) {
  const std::size_t n = z.dim(0), out = z.dim(1);
  Tensor<T> s({n, out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) s.at(i, j) = layer.alpha[j] * z.at(i, j);
  Tensor<T> u = batchnorm_forward(s, layer.bn, mode, cache ? &cache->bn_cache : nullptr,
                                  update_running);
  Tensor<T> v = prelu_forward(u, layer.prelu);
  if (cache) {
    cache->pre_bn = z;
    cache->scaled = std::move(s);
    cache->pre_prelu = std::move(u);
    cache->pre_sign = v;
    cache->weights_version = layer.weights_version;
  }
  return v;
}

// Simulated-binarization forward up to (not including) the output sign.
template <class T>
Tensor<T> forward_presign(const Tensor<T>& x, BiFCLayer<T>& layer, BnMode mode,
                          std::type_identity_t<LayerForwardCache<T>>* cache,
                          bool update_running = true) {
  if (x.ndim() != 2 || x.dim(1) != layer.in_channels())
    throw std::invalid_argument("bifc forward: shape mismatch " + shape_str(x.shape()));
  Tensor<T> bsign = sign_tensor(layer.weights);
  Tensor<T> z({x.dim(0), layer.out_channels()});
  gemm_nt(x.data(), bsign.data(), z.data(), x.dim(0), layer.out_channels(), x.dim(1));
  Tensor<T> v = apply_scale_bn_prelu(z, layer, mode, cache, update_running);
  if (cache) cache->input = x;
  return v;
}

// Full training forward: ±1 output plus the cache for ste_backward.
template <class T>
Tensor<T> forward_train(const Tensor<T>& x, BiFCLayer<T>& layer, LayerForwardCache<T>& cache,
                        BnMode mode = BnMode::train, bool update_running = true) {
  return sign_tensor(forward_presign(x, layer, mode, &cache, update_running));
}

// Packed inference up to the sign: integer XNOR/popcount matmul, then the
// same scalar tail in real arithmetic (BN always eval mode).
template <class T>
Tensor<T> forward_infer_presign(const PackedBitMatrix& x, BiFCLayer<T>& layer) {
  if (!layer.cache_fresh())
    throw std::runtime_error("forward_infer: stale binary weight cache");
  Int32Matrix ints = xnor_popcount_matmul(x, layer.cached_binary);
  Tensor<T> z({ints.rows, ints.cols});
  for (std::size_t i = 0; i < ints.data.size(); ++i) z[i] = static_cast<T>(ints.data[i]);
  return apply_scale_bn_prelu(z, layer, BnMode::eval, nullptr, false);
}

template <class T>
PackedBitMatrix forward_infer(const PackedBitMatrix& x, BiFCLayer<T>& layer) {
  Tensor<T> v = forward_infer_presign<T>(x, layer);
  return pack<T>(v.flat(), v.dim(0), v.dim(1));
}

// STE mask for the sign nonlinearity: pass-through inside |v| <= clip.
template <class T>
Tensor<T> ste_mask_grad(const Tensor<T>& grad_out, const Tensor<T>& pre_sign, T clip) {
  if (clip <= T{0}) return grad_out;
  Tensor<T> g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = std::abs(pre_sign[i]) <= clip ? grad_out[i] : T{0};
  return g;
}

// Backward from a gradient on the pre-sign activation v. Produces grads for
// the latent weights (straight-through, no clip), alpha (task part), and the
// BN/PReLU parameters, plus the input gradient.
template <class T>
GradBundle<T> ste_backward_from_presign(const Tensor<T>& grad_v, const LayerForwardCache<T>& cache,
                                        BiFCLayer<T>& layer) {
  if (cache.weights_version != layer.weights_version)
    throw std::runtime_error("ste_backward: cache does not match current weights");
  GradBundle<T> pg = prelu_backward(grad_v, cache.pre_prelu, layer.prelu);
  GradBundle<T> bg = batchnorm_backward(pg.input, cache.bn_cache, layer.bn);
  const std::size_t n = bg.input.dim(0), out = layer.out_channels(), in = layer.in_channels();

  Tensor<T> dalpha({out});
  Tensor<T> dz({n, out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      dalpha[j] += bg.input.at(i, j) * cache.pre_bn.at(i, j);
      dz.at(i, j) = bg.input.at(i, j) * layer.alpha[j];
    }

  Tensor<T> bsign = sign_tensor(layer.weights);
  GradBundle<T> g;
  Tensor<T> dw({out, in});
  gemm_tn(dz.data(), cache.input.data(), dw.data(), n, out, in);
  g.add("w", std::move(dw));
  g.add("alpha", std::move(dalpha));
  g.add("gamma", bg.get("gamma"));
  g.add("beta", bg.get("beta"));
  g.add("slope", pg.get("slope"));
  g.input = Tensor<T>({n, in});
  gemm_nn(dz.data(), bsign.data(), g.input.data(), n, out, in);
  return g;
}

// Backward from a gradient on the sign output (applies the STE window first).
template <class T>
GradBundle<T> ste_backward(const Tensor<T>& grad_out, const LayerForwardCache<T>& cache,
                           BiFCLayer<T>& layer) {
  Tensor<T> grad_v = ste_mask_grad(grad_out, cache.pre_sign, layer.ste_clip);
  return ste_backward_from_presign(grad_v, cache, layer);
}

// L_R = 1/2 * sum (W - alpha ∘ sign(W))^2, alpha broadcast per output channel.
template <class T>
double reconstruction_loss(const BiFCLayer<T>& layer) {
  const std::size_t out = layer.out_channels(), in = layer.in_channels();
  double loss = 0.0;
  for (std::size_t j = 0; j < out; ++j) {
    double a = static_cast<double>(layer.alpha[j]);
    for (std::size_t n = 0; n < in; ++n) {
      double w = static_cast<double>(layer.weights.at(j, n));
      double b = w > 0.0 ? 1.0 : -1.0;
      double d = w - a * b;
      loss += d * d;
    }
  }
  return 0.5 * loss;
}

// d L_R / d W with sign(W) treated as constant. The `paper` variant keeps the
// printed extra ∘alpha factor; `analytic` is the true derivative and the
// default (the printed form fails finite-difference checks).
template <class T>
Tensor<T> grad_reconstruction_w(const BiFCLayer<T>& layer, GradVariant variant) {
  const std::size_t out = layer.out_channels(), in = layer.in_channels();
  Tensor<T> g({out, in});
  for (std::size_t j = 0; j < out; ++j) {
    T a = layer.alpha[j];
    for (std::size_t n = 0; n < in; ++n) {
      T w = layer.weights.at(j, n);
      T b = w > T{0} ? T{1} : T{-1};
      T r = w - a * b;
      g.at(j, n) = variant == GradVariant::paper ? r * a : r;
    }
  }
  return g;
}

// d L_R / d alpha per channel. `analytic` carries the minus sign the paper's
// Eq. for the alpha gradient omits.
template <class T>
Tensor<T> grad_reconstruction_alpha(const BiFCLayer<T>& layer, GradVariant variant) {
  const std::size_t out = layer.out_channels(), in = layer.in_channels();
  Tensor<T> g({out});
  for (std::size_t j = 0; j < out; ++j) {
    T a = layer.alpha[j];
    T s = 0;
    for (std::size_t n = 0; n < in; ++n) {
      T w = layer.weights.at(j, n);
      T b = w > T{0} ? T{1} : T{-1};
      s += (w - a * b) * b;
    }
    g[j] = variant == GradVariant::paper ? s : -s;
  }
  return g;
}

template <class T>
void clamp_alpha(BiFCLayer<T>& layer) {
  for (auto& a : layer.alpha.flat())
    if (!(a > static_cast<T>(kAlphaFloor))) a = static_cast<T>(kAlphaFloor);
}

} // namespace poem
