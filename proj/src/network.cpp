#include "tsq/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace tsq {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, const char* what,
                         std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError(std::string("unknown ") + what + " key: " +
                        item.key());
    }
  }
}

}  // namespace

void NetworkConfig::validate() const {
  if (k < 1) throw ConfigError("K must be at least 1");
  if (in_channels < 1) throw ConfigError("in_channels must be at least 1");
  if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
  if (beta < 0) throw ConfigError("beta must be non-negative");
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  if (!(leaky_slope > 0) || leaky_slope >= 1) {
    throw ConfigError("leaky_slope must lie in (0, 1)");
  }
  if (!(ridge_eps > 0)) throw ConfigError("ridge_eps must be positive");
  if (temporal_merge != "concat_channels") {
    throw ConfigError("unsupported temporal_merge: " + temporal_merge);
  }
  for (const auto& b : conv_blocks) {
    if (b.out_channels < 1) throw ConfigError("conv out_channels must be >= 1");
    if (b.kernel < 1 || b.kernel % 2 == 0) {
      throw ConfigError("conv kernel must be odd");
    }
    if (b.stride < 1) throw ConfigError("conv stride must be >= 1");
  }
  for (std::size_t i = 0; i < ts_placements.size(); ++i) {
    const auto& p = ts_placements[i];
    if (p.block > conv_blocks.size()) {
      throw ConfigError("placement block index " + std::to_string(p.block) +
                        " exceeds conv block count " +
                        std::to_string(conv_blocks.size()));
    }
    if (p.d < 1) throw ConfigError("placement D must be >= 1");
    if (p.kind == TsPlacement::Kind::kMean && p.d != 1) {
      throw ConfigError("mean placement must have D = 1");
    }
    if (i > 0) {
      if (p.block < ts_placements[i - 1].block) {
        throw ConfigError("placements must be ordered by block index");
      }
      if (p.d >= ts_placements[i - 1].d) {
        if (!allow_non_pyramidal) {
          throw ConfigError(
              "D must strictly decrease across placements (set "
              "allow_non_pyramidal to override)");
        }
        std::cerr << "warning: non-pyramidal placement stack (D "
                  << ts_placements[i - 1].d << " -> " << p.d << ")\n";
      }
    }
  }
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  NetworkConfig cfg;
  cfg.conv_blocks.clear();
  try {
    reject_unknown_keys(obj, "config",
                        {"k", "in_channels", "num_classes", "beta", "lambda",
                         "leaky_slope", "ridge_eps", "conv_blocks",
                         "ts_placements", "allow_non_pyramidal",
                         "temporal_merge"});
    cfg.k = obj.value("k", cfg.k);
    cfg.in_channels = obj.value("in_channels", cfg.in_channels);
    cfg.num_classes = obj.value("num_classes", cfg.num_classes);
    cfg.beta = obj.value("beta", cfg.beta);
    cfg.lambda = obj.value("lambda", cfg.lambda);
    cfg.leaky_slope = obj.value("leaky_slope", cfg.leaky_slope);
    cfg.ridge_eps = obj.value("ridge_eps", cfg.ridge_eps);
    cfg.allow_non_pyramidal =
        obj.value("allow_non_pyramidal", cfg.allow_non_pyramidal);
    cfg.temporal_merge = obj.value("temporal_merge", cfg.temporal_merge);
    for (const auto& b : obj.value("conv_blocks", json::array())) {
      reject_unknown_keys(b, "conv block",
                          {"out_channels", "kernel", "stride"});
      ConvBlockSpec spec;
      spec.out_channels = b.value("out_channels", spec.out_channels);
      spec.kernel = b.value("kernel", spec.kernel);
      spec.stride = b.value("stride", spec.stride);
      cfg.conv_blocks.push_back(spec);
    }
    for (const auto& p : obj.value("ts_placements", json::array())) {
      reject_unknown_keys(p, "placement", {"block", "d", "kind"});
      TsPlacement place;
      place.block = p.value("block", place.block);
      place.d = p.value("d", place.d);
      const std::string kind = p.value("kind", std::string("ts"));
      if (kind == "ts") {
        place.kind = TsPlacement::Kind::kSqueeze;
      } else if (kind == "mean") {
        place.kind = TsPlacement::Kind::kMean;
      } else {
        throw ConfigError("unknown placement kind: " + kind);
      }
      cfg.ts_placements.push_back(place);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

NetworkConfig NetworkConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::string NetworkConfig::to_json() const {
  json obj;
  obj["k"] = k;
  obj["in_channels"] = in_channels;
  obj["num_classes"] = num_classes;
  obj["beta"] = beta;
  obj["lambda"] = lambda;
  obj["leaky_slope"] = leaky_slope;
  obj["ridge_eps"] = ridge_eps;
  obj["conv_blocks"] = json::array();
  for (const auto& b : conv_blocks) {
    obj["conv_blocks"].push_back({{"out_channels", b.out_channels},
                                  {"kernel", b.kernel},
                                  {"stride", b.stride}});
  }
  obj["ts_placements"] = json::array();
  for (const auto& p : ts_placements) {
    obj["ts_placements"].push_back(
        {{"block", p.block},
         {"d", p.d},
         {"kind", p.kind == TsPlacement::Kind::kSqueeze ? "ts" : "mean"}});
  }
  obj["allow_non_pyramidal"] = allow_non_pyramidal;
  obj["temporal_merge"] = temporal_merge;
  return obj.dump(2);
}

// ---------------------------------------------------------------------------
// Conv kernels (frame-wise, zero padding of kernel/2, shared weights)
// ---------------------------------------------------------------------------

namespace {

std::size_t conv_out_extent(std::size_t n, std::size_t kernel,
                            std::size_t stride) {
  const std::size_t pad = kernel / 2;
  return (n + 2 * pad - kernel) / stride + 1;
}

// in: H x W x Cin one frame; out: Ho x Wo x Cout pre-activation.
template <class T>
void conv2d_frame(const T* in, std::size_t h, std::size_t w, std::size_t cin,
                  const Tensor<T>& weight, const Tensor<T>& bias,
                  std::size_t stride, T* out, std::size_t ho, std::size_t wo) {
  const std::size_t cout = weight.dim(0), kh = weight.dim(2),
                    kw = weight.dim(3);
  const std::size_t pad = kh / 2;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* out_px = out + (oy * wo + ox) * cout;
      for (std::size_t oc = 0; oc < cout; ++oc) out_px[oc] = bias[oc];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy =
            static_cast<std::ptrdiff_t>(oy * stride + ky) -
            static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * stride + kx) -
              static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* in_px = in + (static_cast<std::size_t>(iy) * w +
                                 static_cast<std::size_t>(ix)) *
                                    cin;
          for (std::size_t oc = 0; oc < cout; ++oc) {
            T acc = T(0);
            for (std::size_t ic = 0; ic < cin; ++ic) {
              acc += weight(oc, ic, ky, kx) * in_px[ic];
            }
            out_px[oc] += acc;
          }
        }
      }
    }
  }
}

// Accumulates weight/bias/input gradients for one frame. grad_out must
// already include the activation derivative.
template <class T>
void conv2d_frame_backward(const T* in, std::size_t h, std::size_t w,
                           std::size_t cin, const Tensor<T>& weight,
                           std::size_t stride, const T* grad_out,
                           std::size_t ho, std::size_t wo, Tensor<T>& grad_w,
                           Tensor<T>& grad_b, T* grad_in) {
  const std::size_t cout = weight.dim(0), kh = weight.dim(2),
                    kw = weight.dim(3);
  const std::size_t pad = kh / 2;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const T* go_px = grad_out + (oy * wo + ox) * cout;
      for (std::size_t oc = 0; oc < cout; ++oc) grad_b[oc] += go_px[oc];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy =
            static_cast<std::ptrdiff_t>(oy * stride + ky) -
            static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * stride + kx) -
              static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t base = (static_cast<std::size_t>(iy) * w +
                                    static_cast<std::size_t>(ix)) *
                                   cin;
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const T go = go_px[oc];
            if (go == T(0)) continue;
            for (std::size_t ic = 0; ic < cin; ++ic) {
              grad_w(oc, ic, ky, kx) += go * in[base + ic];
              grad_in[base + ic] += go * weight(oc, ic, ky, kx);
            }
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <class T>
Network<T>::Network(NetworkConfig config, std::mt19937_64& rng)
    : config_(std::move(config)) {
  config_.validate();
  build_stages();
  params_ = init_params(rng);
}

template <class T>
Network<T>::Network(NetworkConfig config, ParamSet<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  build_stages();
  check_params();
}

template <class T>
void Network<T>::build_stages() {
  stages_.clear();
  std::size_t pi = 0;
  for (std::size_t b = 0; b <= config_.conv_blocks.size(); ++b) {
    while (pi < config_.ts_placements.size() &&
           config_.ts_placements[pi].block == b) {
      StageInfo s;
      s.kind = config_.ts_placements[pi].kind == TsPlacement::Kind::kSqueeze
                   ? StageKind::kSqueeze
                   : StageKind::kMeanPool;
      s.ts_index = pi;  // reindexed below for squeeze stages only
      stages_.push_back(s);
      ++pi;
    }
    if (b < config_.conv_blocks.size()) {
      StageInfo s;
      s.kind = StageKind::kConv;
      s.conv_index = b;
      stages_.push_back(s);
    }
  }

  // Remaining frames enter the 2D head right after the last pooling site
  // (or immediately, if there is none).
  std::size_t merge_pos = 0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (stages_[i].kind == StageKind::kSqueeze ||
        stages_[i].kind == StageKind::kMeanPool) {
      merge_pos = i + 1;
    }
  }
  StageInfo merge;
  merge.kind = StageKind::kMerge;
  stages_.insert(stages_.begin() + static_cast<std::ptrdiff_t>(merge_pos),
                 merge);

  // Temporal/channel bookkeeping down the stack.
  std::size_t t = config_.k, c = config_.in_channels, ts_count = 0;
  for (auto& s : stages_) {
    s.t_in = t;
    s.c_in = c;
    switch (s.kind) {
      case StageKind::kSqueeze: {
        const auto& p = config_.ts_placements[s.ts_index];
        if (t < p.d) {
          throw ConfigError("placement D=" + std::to_string(p.d) +
                            " exceeds temporal length " + std::to_string(t) +
                            " at block " + std::to_string(p.block));
        }
        s.ts_index = ts_count++;
        t = p.d;
        break;
      }
      case StageKind::kMeanPool:
        t = 1;
        break;
      case StageKind::kMerge:
        frames_at_merge_ = t;
        c *= t;
        t = 1;
        break;
      case StageKind::kConv:
        c = config_.conv_blocks[s.conv_index].out_channels;
        break;
    }
    s.t_out = t;
    s.c_out = c;
  }
  head_channels_ = c;
}

template <class T>
ParamSet<T> Network<T>::init_params(std::mt19937_64& rng) const {
  ParamSet<T> params;
  for (const auto& s : stages_) {
    if (s.kind == StageKind::kConv) {
      const auto& spec = config_.conv_blocks[s.conv_index];
      const double fan_in =
          static_cast<double>(s.c_in * spec.kernel * spec.kernel);
      const double bound = 1.0 / std::sqrt(fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor<T> w({spec.out_channels, s.c_in, spec.kernel, spec.kernel});
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<T>(dist(rng));
      }
      Tensor<T> b({spec.out_channels});
      for (std::size_t i = 0; i < b.size(); ++i) {
        b[i] = static_cast<T>(dist(rng));
      }
      const std::string prefix = "conv" + std::to_string(s.conv_index);
      params.insert(prefix + ".weight", std::move(w));
      params.insert(prefix + ".bias", std::move(b));
    } else if (s.kind == StageKind::kSqueeze) {
      auto layer = ts_init_params<T>(s.t_in, s.t_out, rng,
                                     static_cast<T>(config_.leaky_slope),
                                     static_cast<T>(config_.ridge_eps));
      const std::string prefix = "ts" + std::to_string(s.ts_index);
      params.insert(prefix + ".w1", std::move(layer.w1));
      params.insert(prefix + ".w2", std::move(layer.w2));
    }
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(head_channels_));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> fw({config_.num_classes, head_channels_});
  for (std::size_t i = 0; i < fw.size(); ++i) {
    fw[i] = static_cast<T>(dist(rng));
  }
  Tensor<T> fb({config_.num_classes});
  for (std::size_t i = 0; i < fb.size(); ++i) {
    fb[i] = static_cast<T>(dist(rng));
  }
  params.insert("fc.weight", std::move(fw));
  params.insert("fc.bias", std::move(fb));
  return params;
}

template <class T>
void Network<T>::check_params() const {
  std::size_t expected = 2;  // fc.weight, fc.bias
  auto expect_shape = [&](const std::string& name,
                          std::vector<std::size_t> shape) {
    const Tensor<T>& t = params_.at(name);
    if (t.shape() != shape) {
      throw ConfigError("parameter " + name + " has the wrong shape");
    }
  };
  for (const auto& s : stages_) {
    if (s.kind == StageKind::kConv) {
      const auto& spec = config_.conv_blocks[s.conv_index];
      const std::string prefix = "conv" + std::to_string(s.conv_index);
      expect_shape(prefix + ".weight",
                   {spec.out_channels, s.c_in, spec.kernel, spec.kernel});
      expect_shape(prefix + ".bias", {spec.out_channels});
      expected += 2;
    } else if (s.kind == StageKind::kSqueeze) {
      const std::string prefix = "ts" + std::to_string(s.ts_index);
      expect_shape(prefix + ".w1", {s.t_in, s.t_in});
      expect_shape(prefix + ".w2", {s.t_in * s.t_out, s.t_in});
      expected += 2;
    }
  }
  expect_shape("fc.weight", {config_.num_classes, head_channels_});
  expect_shape("fc.bias", {config_.num_classes});
  if (params_.count() != expected) {
    throw ConfigError("parameter set has extra entries");
  }
}

namespace {

template <class T>
TSLayerParams<T> make_layer_params(const NetworkConfig& config,
                                   const ParamSet<T>& params,
                                   std::size_t ts_index, std::size_t k_in,
                                   std::size_t d) {
  TSLayerParams<T> layer;
  layer.k = k_in;
  layer.d = d;
  layer.leaky_slope = static_cast<T>(config.leaky_slope);
  layer.ridge_eps = static_cast<T>(config.ridge_eps);
  const std::string prefix = "ts" + std::to_string(ts_index);
  layer.w1 = params.at(prefix + ".w1");
  layer.w2 = params.at(prefix + ".w2");
  return layer;
}

}  // namespace

template <class T>
Tensor<T> Network<T>::run_clip(const ClipTensor<T>& clip,
                               ClipTrace<T>* trace) const {
  if (clip.k() != config_.k) {
    throw ShapeError("clip has " + std::to_string(clip.k()) +
                     " frames but the network expects " +
                     std::to_string(config_.k));
  }
  if (clip.c() != config_.in_channels) {
    throw ShapeError("clip has " + std::to_string(clip.c()) +
                     " channels but the network expects " +
                     std::to_string(config_.in_channels));
  }
  std::size_t num_ts = 0;
  for (const auto& s : stages_) {
    if (s.kind == StageKind::kSqueeze) ++num_ts;
  }
  if (trace) {
    trace->stage_inputs.clear();
    trace->conv_preacts.assign(stages_.size(), Tensor<T>());
    trace->ts_caches.assign(num_ts, TsForwardCache<T>());
  }

  Tensor<T> cur = clip.frames;
  for (std::size_t si = 0; si < stages_.size(); ++si) {
    const StageInfo& s = stages_[si];
    if (trace) trace->stage_inputs.push_back(cur);
    const std::size_t t = cur.dim(0), h = cur.dim(1), w = cur.dim(2),
                      c = cur.dim(3);
    switch (s.kind) {
      case StageKind::kConv: {
        const auto& spec = config_.conv_blocks[s.conv_index];
        const std::string prefix = "conv" + std::to_string(s.conv_index);
        const Tensor<T>& weight = params_.at(prefix + ".weight");
        const Tensor<T>& bias = params_.at(prefix + ".bias");
        const std::size_t ho = conv_out_extent(h, spec.kernel, spec.stride);
        const std::size_t wo = conv_out_extent(w, spec.kernel, spec.stride);
        Tensor<T> preact({t, ho, wo, spec.out_channels});
        for (std::size_t f = 0; f < t; ++f) {
          conv2d_frame(cur.data() + f * h * w * c, h, w, c, weight, bias,
                       spec.stride, preact.data() + f * ho * wo * spec.out_channels,
                       ho, wo);
        }
        cur = preact;
        for (std::size_t i = 0; i < cur.size(); ++i) {
          if (cur[i] < T(0)) cur[i] = T(0);
        }
        if (trace) trace->conv_preacts[si] = std::move(preact);
        break;
      }
      case StageKind::kSqueeze: {
        TSLayerParams<T> layer =
            make_layer_params(config_, params_, s.ts_index, s.t_in, s.t_out);
        TsForwardCache<T>* cache =
            trace ? &trace->ts_caches[s.ts_index] : nullptr;
        SqueezedClip<T> squeezed = ts_forward(ClipTensor<T>(cur), layer, cache);
        cur = std::move(squeezed.y);
        break;
      }
      case StageKind::kMeanPool: {
        cur = reduce_mean(cur, {0}).reshape({1, h, w, c});
        break;
      }
      case StageKind::kMerge: {
        Tensor<T> merged({1, h, w, t * c});
        for (std::size_t f = 0; f < t; ++f) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              for (std::size_t ch = 0; ch < c; ++ch) {
                merged(0, y, x, f * c + ch) = cur(f, y, x, ch);
              }
            }
          }
        }
        cur = std::move(merged);
        break;
      }
    }
  }
  if (trace) trace->stage_inputs.push_back(cur);  // head input

  // Global average pool, then the linear classifier.
  const std::size_t h = cur.dim(1), w = cur.dim(2), c = cur.dim(3);
  Tensor<T> features({c});
  const T inv = T(1) / static_cast<T>(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        features[ch] += cur(0, y, x, ch) * inv;
      }
    }
  }
  const Tensor<T>& fw = params_.at("fc.weight");
  const Tensor<T>& fb = params_.at("fc.bias");
  Tensor<T> logits({config_.num_classes});
  for (std::size_t j = 0; j < config_.num_classes; ++j) {
    T acc = fb[j];
    for (std::size_t ch = 0; ch < c; ++ch) acc += fw(j, ch) * features[ch];
    logits[j] = acc;
  }
  if (trace) trace->features = std::move(features);
  return logits;
}

namespace {

// Stable softmax plus the log-sum-exp that cross-entropy needs.
template <class T>
Tensor<T> softmax_of(const Tensor<T>& logits, T* lse_out) {
  T m = logits[0];
  for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  T sum = T(0);
  Tensor<T> probs(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - m);
    sum += probs[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] /= sum;
  if (lse_out) *lse_out = m + std::log(sum);
  return probs;
}

}  // namespace

template <class T>
typename Network<T>::Output Network<T>::forward(
    const std::vector<ClipTensor<T>>& batch, const std::vector<int>& labels) {
  if (batch.empty()) throw ShapeError("empty batch");
  if (batch.size() != labels.size()) {
    throw ShapeError("batch has " + std::to_string(batch.size()) +
                     " clips but " + std::to_string(labels.size()) +
                     " labels");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= config_.num_classes) {
      throw DataError("label " + std::to_string(label) + " out of range");
    }
  }

  const std::size_t b = batch.size();
  traces.assign(b, ClipTrace<T>());

  Output out;
  out.scores = Tensor<T>({b, config_.num_classes});
  T classif = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    Tensor<T> logits = run_clip(batch[i], &traces[i]);
    T lse = T(0);
    Tensor<T> probs = softmax_of(logits, &lse);
    classif += lse - logits[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < config_.num_classes; ++j) {
      out.scores(i, j) = probs[j];
    }
    traces[i].probs = std::move(probs);
    traces[i].label = labels[i];
  }

  LossBreakdown<T>& loss = out.loss;
  loss.classif = classif / static_cast<T>(b);
  std::size_t num_ts = traces[0].ts_caches.size();
  loss.proj_terms.assign(num_ts, T(0));
  for (std::size_t m = 0; m < num_ts; ++m) {
    T sum = T(0);
    for (const auto& trace : traces) sum += trace.ts_caches[m].residual;
    loss.proj_terms[m] = sum / static_cast<T>(b);
  }
  loss.l2 = params_.sum_squares();
  loss.total = loss.classif;
  for (T term : loss.proj_terms) {
    loss.total += static_cast<T>(config_.beta) * term;
  }
  loss.total += static_cast<T>(config_.lambda) * loss.l2;
  return out;
}

template <class T>
Tensor<T> Network<T>::infer(const std::vector<ClipTensor<T>>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  Tensor<T> scores({batch.size(), config_.num_classes});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor<T> logits = run_clip(batch[i], nullptr);
    Tensor<T> probs = softmax_of(logits, static_cast<T*>(nullptr));
    for (std::size_t j = 0; j < config_.num_classes; ++j) {
      scores(i, j) = probs[j];
    }
  }
  return scores;
}

template <class T>
ParamSet<T> Network<T>::backward() const {
  if (traces.empty()) {
    throw StateError("backward requires a cached forward pass");
  }
  ParamSet<T> grads = ParamSet<T>::zeros_like(params_);
  const std::size_t b = traces.size();
  const T inv_b = T(1) / static_cast<T>(b);
  const T grad_residual = static_cast<T>(config_.beta) * inv_b;

  for (const ClipTrace<T>& trace : traces) {
    if (trace.stage_inputs.size() != stages_.size() + 1) {
      throw StateError("forward trace is incomplete");
    }
    // Cross-entropy: d loss / d logit = (softmax - onehot) / B.
    Tensor<T> grad_logits(trace.probs.shape());
    for (std::size_t j = 0; j < grad_logits.size(); ++j) {
      grad_logits[j] = trace.probs[j] * inv_b;
    }
    grad_logits[static_cast<std::size_t>(trace.label)] -= inv_b;

    // Linear head.
    const Tensor<T>& fw = params_.at("fc.weight");
    Tensor<T>& grad_fw = grads.at("fc.weight");
    Tensor<T>& grad_fb = grads.at("fc.bias");
    const std::size_t cf = trace.features.size();
    Tensor<T> grad_features({cf});
    for (std::size_t j = 0; j < config_.num_classes; ++j) {
      grad_fb[j] += grad_logits[j];
      for (std::size_t ch = 0; ch < cf; ++ch) {
        grad_fw(j, ch) += grad_logits[j] * trace.features[ch];
        grad_features[ch] += fw(j, ch) * grad_logits[j];
      }
    }

    // Global average pool spreads each feature gradient over its plane.
    const Tensor<T>& head = trace.stage_inputs.back();
    const std::size_t hh = head.dim(1), hw = head.dim(2), hc = head.dim(3);
    Tensor<T> cur_grad({1, hh, hw, hc});
    const T inv_hw = T(1) / static_cast<T>(hh * hw);
    for (std::size_t y = 0; y < hh; ++y) {
      for (std::size_t x = 0; x < hw; ++x) {
        for (std::size_t ch = 0; ch < hc; ++ch) {
          cur_grad(0, y, x, ch) = grad_features[ch] * inv_hw;
        }
      }
    }

    for (std::size_t si = stages_.size(); si-- > 0;) {
      const StageInfo& s = stages_[si];
      const Tensor<T>& input = trace.stage_inputs[si];
      const std::size_t t = input.dim(0), h = input.dim(1), w = input.dim(2),
                        c = input.dim(3);
      switch (s.kind) {
        case StageKind::kConv: {
          const auto& spec = config_.conv_blocks[s.conv_index];
          const std::string prefix = "conv" + std::to_string(s.conv_index);
          const Tensor<T>& weight = params_.at(prefix + ".weight");
          Tensor<T>& grad_w = grads.at(prefix + ".weight");
          Tensor<T>& grad_b = grads.at(prefix + ".bias");
          const Tensor<T>& preact = trace.conv_preacts[si];
          const std::size_t ho = preact.dim(1), wo = preact.dim(2),
                            co = preact.dim(3);
          Tensor<T> grad_pre(preact.shape());
          for (std::size_t i = 0; i < grad_pre.size(); ++i) {
            grad_pre[i] = preact[i] > T(0) ? cur_grad[i] : T(0);
          }
          Tensor<T> grad_in({t, h, w, c});
          for (std::size_t f = 0; f < t; ++f) {
            conv2d_frame_backward(input.data() + f * h * w * c, h, w, c,
                                  weight, spec.stride,
                                  grad_pre.data() + f * ho * wo * co, ho, wo,
                                  grad_w, grad_b,
                                  grad_in.data() + f * h * w * c);
          }
          cur_grad = std::move(grad_in);
          break;
        }
        case StageKind::kSqueeze: {
          TSLayerParams<T> layer =
              make_layer_params(config_, params_, s.ts_index, s.t_in, s.t_out);
          TsGrads<T> g = ts_backward(trace.ts_caches[s.ts_index], layer,
                                     cur_grad, grad_residual);
          const std::string prefix = "ts" + std::to_string(s.ts_index);
          Tensor<T>& gw1 = grads.at(prefix + ".w1");
          Tensor<T>& gw2 = grads.at(prefix + ".w2");
          for (std::size_t i = 0; i < gw1.size(); ++i) gw1[i] += g.w1[i];
          for (std::size_t i = 0; i < gw2.size(); ++i) gw2[i] += g.w2[i];
          cur_grad = std::move(g.clip);
          break;
        }
        case StageKind::kMeanPool: {
          Tensor<T> grad_in({t, h, w, c});
          const T inv_t = T(1) / static_cast<T>(t);
          const std::size_t plane = h * w * c;
          for (std::size_t f = 0; f < t; ++f) {
            for (std::size_t i = 0; i < plane; ++i) {
              grad_in[f * plane + i] = cur_grad[i] * inv_t;
            }
          }
          cur_grad = std::move(grad_in);
          break;
        }
        case StageKind::kMerge: {
          Tensor<T> grad_in({t, h, w, c});
          for (std::size_t f = 0; f < t; ++f) {
            for (std::size_t y = 0; y < h; ++y) {
              for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                  grad_in(f, y, x, ch) = cur_grad(0, y, x, f * c + ch);
                }
              }
            }
          }
          cur_grad = std::move(grad_in);
          break;
        }
      }
    }
  }

  // Weight decay applies to every parameter uniformly.
  const T two_lambda = T(2) * static_cast<T>(config_.lambda);
  if (two_lambda != T(0)) {
    for (auto& [name, g] : grads) {
      const Tensor<T>& p = params_.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += two_lambda * p[i];
    }
  }
  return grads;
}

template <class T>
Tensor<T> fuse_streams(const Tensor<T>& scores_a, const Tensor<T>& scores_b) {
  if (scores_a.rank() != 2 || !scores_a.same_shape(scores_b)) {
    throw ShapeError("score matrices must be rank-2 and identically shaped");
  }
  Tensor<T> fused(scores_a.shape());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    fused[i] = (scores_a[i] + scores_b[i]) / T(2);
  }
  return fused;
}

template <class T>
std::size_t argmax(const T* values, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

#define TSQ_NETWORK_INSTANTIATE(T)                                     \
  template class Network<T>;                                           \
  template Tensor<T> fuse_streams(const Tensor<T>&, const Tensor<T>&); \
  template std::size_t argmax(const T*, std::size_t)

TSQ_NETWORK_INSTANTIATE(float);
TSQ_NETWORK_INSTANTIATE(double);

}  // namespace tsq
