#include "poem/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "poem/threading.hpp"

namespace poem {

void TrainConfig::validate() const {
  if (lambda < 0 || tau < 0 || base_lr < 0)
    throw std::invalid_argument("train config: lambda, tau, base_lr must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("train config: batch_size must be >= 2");
}

void write_report_csv(const TrainReport& report, std::ostream& os) {
  os << "epoch,lr,L_S,L_R,train_acc,test_acc,mean_bimodality\n";
  os.precision(17);
  for (const auto& r : report.epochs)
    os << r.epoch << ',' << r.lr << ',' << r.loss_s << ',' << r.loss_r << ',' << r.train_acc
       << ',' << r.test_acc << ',' << r.mean_bimodality << '\n';
}

LossComponents total_loss(Model& m, const Tensor<float>& clouds, std::span<const int> labels,
                          const TrainConfig& cfg) {
  TrainForward fwd = run_train_forward(m, clouds, /*update_running=*/false);
  auto ce = softmax_cross_entropy<float>(fwd.logits, labels);
  LossComponents out;
  out.task = ce.loss;
  for (const auto& st : m.stages)
    if (st.binarized) out.recon_sum += reconstruction_loss(st.layer);
  out.total = out.task + cfg.lambda * out.recon_sum;
  return out;
}

Tensor<float> assemble_weight_update(const BiFCLayer<float>& layer, const Tensor<float>& task_grad,
                                     const TrainConfig& cfg) {
  if (!task_grad.same_shape(layer.weights))
    throw std::invalid_argument("assemble_weight_update: task grad shape mismatch");
  Tensor<float> delta = task_grad;
  if (cfg.lambda > 0) {
    Tensor<float> gr = grad_reconstruction_w(layer, cfg.grad_variant);
    for (std::size_t i = 0; i < delta.size(); ++i)
      delta[i] += static_cast<float>(cfg.lambda) * gr[i];
  }
  if (cfg.tau > 0) {
    if (layer.gmm.size() != layer.out_channels())
      throw std::runtime_error("assemble_weight_update: GMM state missing or stale");
    const double s = cfg.em_sign == EmSign::attract ? -1.0 : 1.0;
    for (std::size_t j = 0; j < layer.out_channels(); ++j) {
      const GmmChannelState& ch = layer.gmm[j];
      for (std::size_t n = 0; n < layer.in_channels(); ++n) {
        double w = layer.weights.at(j, n);
        if (!(w > ch.mu[0] && w < ch.mu[1])) continue; // Eq. 25 else-branch
        auto xi = responsibilities(w, ch);
        delta.at(j, n) += static_cast<float>(s * cfg.tau * em_force(w, ch, xi));
      }
    }
  }
  return delta;
}

Tensor<float> assemble_alpha_update(const BiFCLayer<float>& layer,
                                    const Tensor<float>& task_grad_alpha, const TrainConfig& cfg) {
  if (!task_grad_alpha.same_shape(layer.alpha))
    throw std::invalid_argument("assemble_alpha_update: task grad shape mismatch");
  Tensor<float> delta = task_grad_alpha;
  if (cfg.lambda > 0) {
    Tensor<float> gr = grad_reconstruction_alpha(layer, cfg.grad_variant);
    for (std::size_t i = 0; i < delta.size(); ++i)
      delta[i] += static_cast<float>(cfg.lambda) * gr[i];
  }
  return delta;
}

namespace {

struct ScalarAdam {
  double m = 0, v = 0;
  void step(float& param, double grad, std::uint64_t t, const AdamParams& hp) {
    m = hp.beta1 * m + (1 - hp.beta1) * grad;
    v = hp.beta2 * v + (1 - hp.beta2) * grad * grad;
    double mhat = m / (1 - std::pow(hp.beta1, static_cast<double>(t)));
    double vhat = v / (1 - std::pow(hp.beta2, static_cast<double>(t)));
    param -= static_cast<float>(hp.lr * mhat / (std::sqrt(vhat) + hp.eps));
  }
};

struct StageSlots {
  AdamSlot<float> w, alpha, gamma, beta;
  ScalarAdam slope;
};

} // namespace

TrainReport train(Model& m, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training set");
  set_num_threads(cfg.deterministic ? 1 : 0);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<StageSlots> slots(m.stages.size());
  AdamSlot<float> final_w_slot, final_b_slot;
  std::uint64_t t = 0;

  TrainReport report;
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    AdamParams hp;
    hp.lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_floor);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_s_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) break; // batch norm needs at least two rows
      Tensor<float> xb = make_batch(data.train, {order.data() + start, n}, &labels);
      TrainForward fwd = run_train_forward(m, xb, true);
      auto ce = softmax_cross_entropy<float>(fwd.logits, labels);

      double recon_sum = 0.0;
      for (const auto& st : m.stages)
        if (st.binarized) recon_sum += reconstruction_loss(st.layer);
      double total = ce.loss + cfg.lambda * recon_sum;
      if (!std::isfinite(total)) {
        std::string dump = cfg.checkpoint_path.empty() ? std::string("poem_abort.ckpt")
                                                       : cfg.checkpoint_path + ".abort";
        save_checkpoint(m, dump);
        throw NonFiniteLossError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                     " (L_S=" + std::to_string(ce.loss) + ", state dumped to " +
                                     dump + ")",
                                 dump);
      }

      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < fwd.logits.dim(1); ++j)
          if (fwd.logits.at(i, j) > fwd.logits.at(i, best)) best = j;
        if (static_cast<int>(best) == labels[i]) ++correct;
      }
      loss_s_sum += ce.loss * static_cast<double>(n);
      seen += n;

      ModelGrads grads = run_backward(m, fwd, ce.dlogits);
      ++t;
      for (std::size_t k = 0; k < m.stages.size(); ++k) {
        Stage& st = m.stages[k];
        if (st.binarized) {
          Tensor<float> dw = assemble_weight_update(st.layer, grads.stages[k].w, cfg);
          adam_step(st.layer.weights, dw, slots[k].w, t, hp);
          Tensor<float> da = assemble_alpha_update(st.layer, grads.stages[k].alpha, cfg);
          adam_step(st.layer.alpha, da, slots[k].alpha, t, hp);
          clamp_alpha(st.layer);
        } else {
          adam_step(st.layer.weights, grads.stages[k].w, slots[k].w, t, hp);
        }
        adam_step(st.layer.bn.gamma, grads.stages[k].gamma, slots[k].gamma, t, hp);
        adam_step(st.layer.bn.beta, grads.stages[k].beta, slots[k].beta, t, hp);
        slots[k].slope.step(st.layer.prelu.slope, grads.stages[k].slope, t, hp);
        st.layer.bump_weights_version();
      }
      adam_step(m.final_w, grads.final_w, final_w_slot, t, hp);
      adam_step(m.final_b, grads.final_b, final_b_slot, t, hp);
    }

    // once-per-epoch EM refresh on the current latent weights
    for (auto& st : m.stages)
      if (st.binarized) em_refresh_layer(st.layer, static_cast<int>(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = hp.lr;
    rec.loss_s = seen ? loss_s_sum / static_cast<double>(seen) : 0.0;
    double recon_sum = 0.0;
    for (const auto& st : m.stages)
      if (st.binarized) recon_sum += reconstruction_loss(st.layer);
    rec.loss_r = recon_sum;
    rec.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    rec.test_acc = data.test.empty() ? 0.0 : accuracy(m, data.test, false);
    rec.mean_bimodality = model_mean_bimodality(m);
    report.epochs.push_back(rec);

    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_interval > 0 &&
        (epoch + 1) % cfg.checkpoint_interval == 0)
      save_checkpoint(m, cfg.checkpoint_path);
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(m, cfg.checkpoint_path);
  return report;
}

double sign_flip_rate(std::span<const float> weights, double noise_std, std::size_t trials,
                      std::mt19937_64& rng) {
  if (noise_std < 0) throw std::invalid_argument("sign_flip_rate: negative noise std");
  if (weights.empty() || trials == 0) return 0.0;
  if (noise_std == 0.0) return 0.0;
  std::normal_distribution<double> g(0.0, noise_std);
  std::size_t flips = 0;
  for (std::size_t tr = 0; tr < trials; ++tr)
    for (float w : weights) {
      double noisy = static_cast<double>(w) + g(rng);
      bool before = w > 0.0f, after = noisy > 0.0;
      if (before != after) ++flips;
    }
  return static_cast<double>(flips) / static_cast<double>(trials * weights.size());
}

double sign_flip_rate(const BiFCLayer<float>& layer, double noise_std, std::size_t trials,
                      std::mt19937_64& rng) {
  return sign_flip_rate(layer.weights.flat(), noise_std, trials, rng);
}

std::vector<double> sweep_sign_flip_rates(std::span<const float> weights,
                                          std::span<const double> stds, std::size_t trials,
                                          std::uint64_t seed) {
  std::vector<double> rates(stds.size(), 0.0);
  if (weights.empty() || trials == 0) return rates;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::size_t> flips(stds.size(), 0);
  for (std::size_t tr = 0; tr < trials; ++tr)
    for (float w : weights) {
      double base = g(rng); // same draw scaled by every std
      for (std::size_t s = 0; s < stds.size(); ++s) {
        bool before = w > 0.0f;
        bool after = static_cast<double>(w) + stds[s] * base > 0.0;
        if (before != after) ++flips[s];
      }
    }
  for (std::size_t s = 0; s < stds.size(); ++s)
    rates[s] = static_cast<double>(flips[s]) / static_cast<double>(trials * weights.size());
  return rates;
}

double bimodality_metric(std::span<const float> channel_weights, double mu1, double mu2) {
  if (channel_weights.empty()) return 0.0;
  std::vector<float> sorted(channel_weights.begin(), channel_weights.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  double median = n % 2 == 1 ? sorted[n / 2]
                             : 0.5 * (static_cast<double>(sorted[n / 2 - 1]) + sorted[n / 2]);
  double band = 0.25 * (mu2 - mu1);
  std::size_t inside = 0;
  for (float w : channel_weights)
    if (std::abs(static_cast<double>(w) - median) < band) ++inside;
  return static_cast<double>(inside) / static_cast<double>(n);
}

double layer_mean_bimodality(const BiFCLayer<float>& layer) {
  if (layer.gmm.size() != layer.out_channels())
    throw std::runtime_error("layer_mean_bimodality: GMM states missing");
  double sum = 0.0;
  for (std::size_t j = 0; j < layer.out_channels(); ++j)
    sum += bimodality_metric(layer.channel_weights(j), layer.gmm[j].mu[0], layer.gmm[j].mu[1]);
  return sum / static_cast<double>(layer.out_channels());
}

double model_mean_bimodality(const Model& m) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& st : m.stages)
    if (st.binarized) {
      sum += layer_mean_bimodality(st.layer);
      ++count;
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

} // namespace poem
