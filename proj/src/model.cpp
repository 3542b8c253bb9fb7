#include "poem/model.hpp"

#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace poem {

using nlohmann::json;

ModelSpec ModelSpec::defaults(std::size_t num_classes, std::size_t points) {
  ModelSpec s;
  s.num_classes = num_classes;
  s.points = points;
  s.classifier_widths = {128, num_classes};
  s.binarize.assign(s.layer_count(), true);
  s.binarize.front() = false;
  s.binarize.back() = false;
  return s;
}

void ModelSpec::validate() const {
  if (point_widths.empty() || classifier_widths.empty())
    throw std::invalid_argument("model spec: empty width list");
  for (std::size_t w : point_widths)
    if (w == 0) throw std::invalid_argument("model spec: zero width");
  for (std::size_t w : classifier_widths)
    if (w == 0) throw std::invalid_argument("model spec: zero width");
  if (classifier_widths.back() != num_classes)
    throw std::invalid_argument("model spec: classifier must end at num_classes");
  if (binarize.size() != layer_count())
    throw std::invalid_argument("model spec: binarize flag count != layer count");
  if (binarize.front() || binarize.back())
    throw std::invalid_argument("model spec: first and last layers must stay real-valued");
  if (num_classes < 2) throw std::invalid_argument("model spec: need at least 2 classes");
  if (points == 0) throw std::invalid_argument("model spec: need at least 1 point");
}

Model build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  m.build_seed = seed;
  std::mt19937_64 rng(seed);

  std::size_t in = 3;
  std::vector<std::size_t> widths = spec.point_widths;
  widths.insert(widths.end(), spec.classifier_widths.begin(), spec.classifier_widths.end() - 1);
  for (std::size_t k = 0; k < widths.size(); ++k) {
    Stage st;
    st.binarized = spec.binarize[k];
    st.layer = make_bifc_layer<float>(widths[k], in, rng);
    st.layer.ste_clip = spec.ste_clip;
    if (st.binarized) {
      em_init_layer(st.layer);
      refresh_binary_cache(st.layer);
    }
    m.stages.push_back(std::move(st));
    in = widths[k];
  }

  m.final_w = Tensor<float>({spec.num_classes, in});
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in)));
  for (auto& w : m.final_w.flat()) w = static_cast<float>(dist(rng));
  m.final_b = Tensor<float>({spec.num_classes});
  return m;
}

std::size_t count_parameters(const Model& m) {
  std::size_t n = 0;
  for (const auto& st : m.stages) {
    n += st.layer.weights.size();
    if (st.binarized) n += st.layer.alpha.size();
    n += st.layer.bn.gamma.size() + st.layer.bn.beta.size();
    n += 1; // prelu slope
  }
  return n + m.final_w.size() + m.final_b.size();
}

namespace {

Tensor<float> real_stage_forward(const Tensor<float>& x, Stage& st, BnMode mode,
                                 LayerForwardCache<float>* cache, bool update_running) {
  Tensor<float> z = linear_forward(x, st.layer.weights);
  Tensor<float> u = batchnorm_forward(z, st.layer.bn, mode, cache ? &cache->bn_cache : nullptr,
                                      update_running);
  Tensor<float> h = prelu_forward(u, st.layer.prelu);
  if (cache) {
    cache->input = x;
    cache->pre_bn = std::move(z);
    cache->pre_prelu = std::move(u);
    cache->pre_sign = h;
    cache->weights_version = st.layer.weights_version;
  }
  return h;
}

GradBundle<float> real_stage_backward(const Tensor<float>& grad_h,
                                      const LayerForwardCache<float>& cache, Stage& st) {
  GradBundle<float> pg = prelu_backward(grad_h, cache.pre_prelu, st.layer.prelu);
  GradBundle<float> bg = batchnorm_backward(pg.input, cache.bn_cache, st.layer.bn);
  GradBundle<float> lg = linear_backward(cache.input, st.layer.weights, bg.input);
  GradBundle<float> g;
  g.add("w", lg.get("w"));
  g.add("gamma", bg.get("gamma"));
  g.add("beta", bg.get("beta"));
  g.add("slope", pg.get("slope"));
  g.input = std::move(lg.input);
  return g;
}

// Shared eval walk used by predict and predict_packed. Keeping the scalar
// pipeline and pooling identical in both is what pins their bit-equality.
Tensor<float> eval_walk(Model& m, const Tensor<float>& clouds, bool packed) {
  const std::size_t batch = clouds.dim(0), points = clouds.dim(1);
  Tensor<float> x = clouds.reshaped({batch * points, 3});
  PackedBitMatrix xp;
  bool is_packed = false; // real tensor vs packed rows
  const std::size_t pool_at = m.pool_stage();

  for (std::size_t k = 0; k < m.stages.size(); ++k) {
    Stage& st = m.stages[k];
    if (st.binarized) {
      if (!st.layer.cache_fresh()) refresh_binary_cache(st.layer);
      if (!is_packed) {
        if (packed) {
          xp = pack<float>(x.flat(), x.dim(0), x.dim(1));
          is_packed = true;
        } else {
          x = sign_tensor(x);
        }
      }
      if (k == pool_at) {
        // pre-sign values feed the pool; the sign lands after pooling
        Tensor<float> v = is_packed
                              ? forward_infer_presign<float>(xp, st.layer)
                              : forward_presign(x, st.layer, BnMode::eval, nullptr, false);
        auto pooled = maxpool_points_forward(v.reshaped({batch, points, v.dim(1)}));
        if (packed) {
          xp = pack<float>(pooled.pooled.flat(), batch, pooled.pooled.dim(1));
          is_packed = true;
        } else {
          x = sign_tensor(pooled.pooled);
          is_packed = false;
        }
      } else if (is_packed) {
        xp = forward_infer(xp, st.layer);
      } else {
        x = sign_tensor(forward_presign(x, st.layer, BnMode::eval, nullptr, false));
      }
    } else {
      if (is_packed) {
        x = Tensor<float>({xp.rows(), xp.cols()});
        unpack<float>(xp, x.flat());
        is_packed = false;
      }
      x = real_stage_forward(x, st, BnMode::eval, nullptr, false);
      if (k == pool_at) {
        auto pooled = maxpool_points_forward(x.reshaped({batch, points, x.dim(1)}));
        x = std::move(pooled.pooled);
      }
    }
  }
  if (is_packed) {
    x = Tensor<float>({xp.rows(), xp.cols()});
    unpack<float>(xp, x.flat());
  }
  return linear_forward(x, m.final_w, &m.final_b);
}

constexpr std::size_t kEvalChunk = 256; // clouds per eval slice

Tensor<float> chunked_eval(Model& m, const Tensor<float>& clouds, bool packed) {
  const std::size_t batch = clouds.dim(0), points = clouds.dim(1);
  if (batch <= kEvalChunk) return eval_walk(m, clouds, packed);
  Tensor<float> scores({batch, m.spec.num_classes});
  for (std::size_t start = 0; start < batch; start += kEvalChunk) {
    std::size_t n = std::min(kEvalChunk, batch - start);
    Tensor<float> slice({n, points, 3});
    std::copy_n(clouds.data() + start * points * 3, n * points * 3, slice.data());
    Tensor<float> s = eval_walk(m, slice, packed);
    std::copy_n(s.data(), n * m.spec.num_classes, scores.data() + start * m.spec.num_classes);
  }
  return scores;
}

} // namespace

TrainForward run_train_forward(Model& m, const Tensor<float>& clouds, bool update_running) {
  if (clouds.ndim() != 3 || clouds.dim(2) != 3)
    throw std::invalid_argument("run_train_forward: expected [batch, points, 3] clouds");
  TrainForward fwd;
  fwd.batch = clouds.dim(0);
  fwd.points = clouds.dim(1);
  fwd.caches.resize(m.stages.size());
  fwd.input_presign.resize(m.stages.size());
  const std::size_t pool_at = m.pool_stage();

  Tensor<float> x = clouds.reshaped({fwd.batch * fwd.points, 3});
  bool is_binary = false;
  for (std::size_t k = 0; k < m.stages.size(); ++k) {
    Stage& st = m.stages[k];
    if (st.binarized) {
      if (!is_binary) {
        fwd.input_presign[k] = x; // sign applied at this stage's input
        x = sign_tensor(x);
      }
      Tensor<float> v = forward_presign(x, st.layer, BnMode::train, &fwd.caches[k],
                                        update_running);
      if (k == pool_at) {
        auto pooled = maxpool_points_forward(v.reshaped({fwd.batch, fwd.points, v.dim(1)}));
        fwd.pool_argmax = std::move(pooled.argmax);
        fwd.pooled_presign = pooled.pooled;
        x = sign_tensor(pooled.pooled);
        is_binary = true;
      } else {
        x = sign_tensor(v);
        is_binary = true;
      }
    } else {
      x = real_stage_forward(x, st, BnMode::train, &fwd.caches[k], update_running);
      is_binary = false;
      if (k == pool_at) {
        auto pooled = maxpool_points_forward(x.reshaped({fwd.batch, fwd.points, x.dim(1)}));
        fwd.pool_argmax = std::move(pooled.argmax);
        x = std::move(pooled.pooled);
      }
    }
  }
  fwd.final_input = x;
  fwd.logits = linear_forward(x, m.final_w, &m.final_b);
  return fwd;
}

ModelGrads run_backward(Model& m, const TrainForward& fwd, const Tensor<float>& dlogits) {
  ModelGrads grads;
  grads.stages.resize(m.stages.size());
  const std::size_t pool_at = m.pool_stage();

  GradBundle<float> fin = linear_backward(fwd.final_input, m.final_w, dlogits, true);
  grads.final_w = fin.get("w");
  grads.final_b = fin.get("bias");
  Tensor<float> g = std::move(fin.input);

  for (std::size_t k = m.stages.size(); k-- > 0;) {
    Stage& st = m.stages[k];
    GradBundle<float> bundle;
    if (st.binarized) {
      if (k == pool_at) {
        Tensor<float> gp = ste_mask_grad(g, fwd.pooled_presign, st.layer.ste_clip);
        Tensor<float> gv3 = maxpool_points_backward(gp, fwd.pool_argmax, fwd.points);
        Tensor<float> gv = gv3.reshaped({fwd.batch * fwd.points, gv3.dim(2)});
        bundle = ste_backward_from_presign(gv, fwd.caches[k], st.layer);
      } else {
        bundle = ste_backward(g, fwd.caches[k], st.layer);
      }
      grads.stages[k].has_alpha = true;
      grads.stages[k].alpha = bundle.get("alpha");
    } else {
      if (k == pool_at) {
        Tensor<float> gv3 = maxpool_points_backward(g, fwd.pool_argmax, fwd.points);
        g = gv3.reshaped({fwd.batch * fwd.points, gv3.dim(2)});
      }
      bundle = real_stage_backward(g, fwd.caches[k], st);
    }
    grads.stages[k].w = bundle.get("w");
    grads.stages[k].gamma = bundle.get("gamma");
    grads.stages[k].beta = bundle.get("beta");
    grads.stages[k].slope = bundle.get("slope")[0];
    g = std::move(bundle.input);
    if (fwd.input_presign[k].size() > 0)
      g = ste_mask_grad(g, fwd.input_presign[k], st.layer.ste_clip);
  }
  return grads;
}

Tensor<float> predict(Model& m, const Tensor<float>& clouds) {
  return chunked_eval(m, clouds, false);
}

Tensor<float> predict_packed(Model& m, const Tensor<float>& clouds) {
  return chunked_eval(m, clouds, true);
}

Tensor<float> make_batch(const std::vector<PointCloud>& clouds,
                         std::span<const std::size_t> indices, std::vector<int>* labels) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index set");
  const std::size_t points = clouds[indices[0]].points.dim(0);
  Tensor<float> batch({indices.size(), points, 3});
  if (labels) labels->clear();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const PointCloud& c = clouds[indices[i]];
    std::copy_n(c.points.data(), points * 3, batch.data() + i * points * 3);
    if (labels) labels->push_back(c.label);
  }
  return batch;
}

std::vector<int> predict_labels(Model& m, const std::vector<PointCloud>& clouds, bool packed) {
  std::vector<std::size_t> idx(clouds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Tensor<float> batch = make_batch(clouds, idx, nullptr);
  Tensor<float> scores = packed ? predict_packed(m, batch) : predict(m, batch);
  std::vector<int> out(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.dim(1); ++j)
      if (scores.at(i, j) > scores.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double accuracy(Model& m, const std::vector<PointCloud>& clouds, bool packed) {
  if (clouds.empty()) return 0.0;
  std::vector<int> pred = predict_labels(m, clouds, packed);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clouds.size(); ++i)
    if (pred[i] == clouds[i].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(clouds.size());
}

namespace {

json tensor_to_json(const Tensor<float>& t) {
  return json{{"shape", t.shape()}, {"data", std::vector<float>(t.flat().begin(), t.flat().end())}};
}

Tensor<float> tensor_from_json(const json& j) {
  return Tensor<float>(j.at("shape").get<std::vector<std::size_t>>(),
                       j.at("data").get<std::vector<float>>());
}

json gmm_to_json(const GmmChannelState& s) {
  std::vector<double> resp;
  resp.reserve(s.resp.size() * 2);
  for (const auto& r : s.resp) {
    resp.push_back(r[0]);
    resp.push_back(r[1]);
  }
  return json{{"mu", s.mu},       {"var", s.var},
              {"beta", s.beta},   {"resp", std::move(resp)},
              {"eff", s.eff_count}, {"refresh_epoch", s.refresh_epoch}};
}

GmmChannelState gmm_from_json(const json& j) {
  GmmChannelState s;
  s.mu = j.at("mu").get<std::array<double, 2>>();
  s.var = j.at("var").get<std::array<double, 2>>();
  s.beta = j.at("beta").get<std::array<double, 2>>();
  auto resp = j.at("resp").get<std::vector<double>>();
  s.resp.resize(resp.size() / 2);
  for (std::size_t i = 0; i < s.resp.size(); ++i) s.resp[i] = {resp[2 * i], resp[2 * i + 1]};
  s.eff_count = j.at("eff").get<std::array<double, 2>>();
  s.refresh_epoch = j.at("refresh_epoch").get<int>();
  return s;
}

constexpr int kCheckpointVersion = 1;

} // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  json j;
  j["magic"] = "POEMCKPT";
  j["version"] = kCheckpointVersion;
  j["seed"] = m.build_seed;
  j["spec"] = {{"point_widths", m.spec.point_widths},
               {"classifier_widths", m.spec.classifier_widths},
               {"num_classes", m.spec.num_classes},
               {"points", m.spec.points},
               {"binarize", m.spec.binarize},
               {"ste_clip", m.spec.ste_clip}};
  json stages = json::array();
  for (const auto& st : m.stages) {
    json s;
    s["binarized"] = st.binarized;
    s["w"] = tensor_to_json(st.layer.weights);
    s["alpha"] = tensor_to_json(st.layer.alpha);
    s["gamma"] = tensor_to_json(st.layer.bn.gamma);
    s["beta"] = tensor_to_json(st.layer.bn.beta);
    s["running_mean"] = tensor_to_json(st.layer.bn.running_mean);
    s["running_var"] = tensor_to_json(st.layer.bn.running_var);
    s["bn_eps"] = st.layer.bn.epsilon;
    s["bn_momentum"] = st.layer.bn.momentum;
    s["prelu_slope"] = st.layer.prelu.slope;
    s["ste_clip"] = st.layer.ste_clip;
    json gmm = json::array();
    for (const auto& ch : st.layer.gmm) gmm.push_back(gmm_to_json(ch));
    s["gmm"] = std::move(gmm);
    stages.push_back(std::move(s));
  }
  j["stages"] = std::move(stages);
  j["final_w"] = tensor_to_json(m.final_w);
  j["final_b"] = tensor_to_json(m.final_b);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> cbor = json::to_cbor(j);
  os.write(reinterpret_cast<const char*>(cbor.data()), static_cast<std::streamsize>(cbor.size()));
  if (!os) throw std::runtime_error("save_checkpoint: write failure on " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error("load_checkpoint: not a POEM checkpoint (" + std::string(e.what()) +
                             ")");
  }
  if (j.value("magic", "") != std::string("POEMCKPT"))
    throw std::runtime_error("load_checkpoint: bad magic");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");

  Model m;
  const json& sp = j.at("spec");
  m.spec.point_widths = sp.at("point_widths").get<std::vector<std::size_t>>();
  m.spec.classifier_widths = sp.at("classifier_widths").get<std::vector<std::size_t>>();
  m.spec.num_classes = sp.at("num_classes").get<std::size_t>();
  m.spec.points = sp.at("points").get<std::size_t>();
  m.spec.binarize = sp.at("binarize").get<std::vector<bool>>();
  m.spec.ste_clip = sp.at("ste_clip").get<float>();
  m.spec.validate();
  m.build_seed = j.at("seed").get<std::uint64_t>();

  for (const auto& s : j.at("stages")) {
    Stage st;
    st.binarized = s.at("binarized").get<bool>();
    st.layer.weights = tensor_from_json(s.at("w"));
    st.layer.alpha = tensor_from_json(s.at("alpha"));
    st.layer.bn = BatchNormState<float>(st.layer.weights.dim(0));
    st.layer.bn.gamma = tensor_from_json(s.at("gamma"));
    st.layer.bn.beta = tensor_from_json(s.at("beta"));
    st.layer.bn.running_mean = tensor_from_json(s.at("running_mean"));
    st.layer.bn.running_var = tensor_from_json(s.at("running_var"));
    st.layer.bn.epsilon = s.at("bn_eps").get<float>();
    st.layer.bn.momentum = s.at("bn_momentum").get<float>();
    st.layer.prelu.slope = s.at("prelu_slope").get<float>();
    st.layer.ste_clip = s.at("ste_clip").get<float>();
    for (const auto& g : s.at("gmm")) st.layer.gmm.push_back(gmm_from_json(g));
    if (st.binarized) refresh_binary_cache(st.layer);
    m.stages.push_back(std::move(st));
  }
  m.final_w = tensor_from_json(j.at("final_w"));
  m.final_b = tensor_from_json(j.at("final_b"));
  return m;
}

} // namespace poem
