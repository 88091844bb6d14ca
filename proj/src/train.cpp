#include "tsq/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace tsq {

using nlohmann::json;

namespace {

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

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  // lr = 0 is allowed: a frozen run still evaluates the initialization.
  if (lr < 0.0 || !std::isfinite(lr)) {
    throw ConfigError("lr must be finite and non-negative");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) {
    throw ConfigError("lr_decay_factor must lie in (0, 1]");
  }
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (eval_clips_per_video < 1) {
    throw ConfigError("eval_clips_per_video must be >= 1");
  }
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig cfg;
  try {
    const json obj = json::parse(text);
    reject_unknown_keys(obj, "train config",
                        {"batch_size", "lr", "momentum", "lr_decay_factor",
                         "epochs", "beta", "lambda", "seed",
                         "eval_clips_per_video", "threads"});
    cfg.batch_size = obj.value("batch_size", cfg.batch_size);
    cfg.lr = obj.value("lr", cfg.lr);
    cfg.momentum = obj.value("momentum", cfg.momentum);
    cfg.lr_decay_factor = obj.value("lr_decay_factor", cfg.lr_decay_factor);
    cfg.epochs = obj.value("epochs", cfg.epochs);
    cfg.beta = obj.value("beta", cfg.beta);
    cfg.lambda = obj.value("lambda", cfg.lambda);
    cfg.seed = obj.value("seed", cfg.seed);
    cfg.eval_clips_per_video =
        obj.value("eval_clips_per_video", cfg.eval_clips_per_video);
    cfg.threads = obj.value("threads", cfg.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::string TrainConfig::to_json() const {
  json obj;
  obj["batch_size"] = batch_size;
  obj["lr"] = lr;
  obj["momentum"] = momentum;
  obj["lr_decay_factor"] = lr_decay_factor;
  obj["epochs"] = epochs;
  obj["beta"] = beta;
  obj["lambda"] = lambda;
  obj["seed"] = seed;
  obj["eval_clips_per_video"] = eval_clips_per_video;
  obj["threads"] = threads;
  return obj.dump(2);
}

template <class T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads,
              ParamSet<T>& velocity, T lr, T momentum) {
  for (auto& [name, p] : params) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& v = velocity.at(name);
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("update shapes disagree for parameter " + name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_val = n / 5;
  std::vector<std::size_t> train_idx(order.begin(), order.end() - n_val);
  std::vector<std::size_t> val_idx(order.end() - n_val, order.end());
  if (val_idx.empty()) val_idx = train_idx;
  return {std::move(train_idx), std::move(val_idx)};
}

namespace {

template <class T>
EvalResult<T> evaluate_views(Network<T>& net,
                             const std::vector<const VideoRecord<T>*>& videos,
                             std::size_t clips_per_video) {
  if (videos.empty()) throw ConfigError("evaluation dataset is empty");
  if (clips_per_video < 1) {
    throw ConfigError("eval_clips_per_video must be >= 1");
  }
  const std::size_t k = net.config().k;
  const std::size_t nc = net.config().num_classes;
  EvalResult<T> res;
  res.scores = Tensor<T>({videos.size(), nc});
  std::size_t correct = 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const VideoRecord<T>& v = *videos[i];
    std::vector<ClipTensor<T>> clips;
    clips.reserve(clips_per_video);
    for (std::size_t j = 0; j < clips_per_video; ++j) {
      clips.push_back(sample_clip_uniform(v, k, j, clips_per_video));
    }
    const Tensor<T> probs = net.infer(clips);
    for (std::size_t c = 0; c < nc; ++c) {
      T sum = T(0);
      for (std::size_t j = 0; j < clips_per_video; ++j) sum += probs(j, c);
      res.scores(i, c) = sum / static_cast<T>(clips_per_video);
    }
    const int pred =
        static_cast<int>(argmax(&res.scores(i, std::size_t{0}), nc));
    res.predictions.push_back(pred);
    res.labels.push_back(v.label);
    res.ids.push_back(v.id);
    if (pred == v.label) ++correct;
  }
  res.accuracy =
      static_cast<double>(correct) / static_cast<double>(videos.size());
  return res;
}

// Per-chunk forward/backward on worker copies with lambda = 0, reduced in
// chunk order; the weight-decay term is applied exactly once afterwards.
template <class T>
std::pair<LossBreakdown<T>, ParamSet<T>> batch_step_parallel(
    Network<T>& net, const std::vector<ClipTensor<T>>& batch,
    const std::vector<int>& labels, std::size_t threads) {
  const std::size_t n = batch.size();
  const std::size_t nt = std::min(threads, n);

  NetworkConfig worker_cfg = net.config();
  worker_cfg.lambda = 0.0;

  struct ChunkResult {
    std::size_t begin = 0, end = 0;
    LossBreakdown<T> loss;
    ParamSet<T> grads;
    std::exception_ptr error;
  };
  std::vector<ChunkResult> chunks(nt);
  std::vector<std::thread> workers;
  workers.reserve(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    chunks[t].begin = n * t / nt;
    chunks[t].end = n * (t + 1) / nt;
    workers.emplace_back([&, t] {
      ChunkResult& chunk = chunks[t];
      try {
        Network<T> worker(worker_cfg, net.params());
        const std::vector<ClipTensor<T>> sub(batch.begin() + chunk.begin,
                                             batch.begin() + chunk.end);
        const std::vector<int> sub_labels(labels.begin() + chunk.begin,
                                          labels.begin() + chunk.end);
        chunk.loss = worker.forward(sub, sub_labels).loss;
        chunk.grads = worker.backward();
      } catch (...) {
        chunk.error = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& chunk : chunks) {
    if (chunk.error) std::rethrow_exception(chunk.error);
  }

  LossBreakdown<T> loss;
  loss.proj_terms.assign(chunks[0].loss.proj_terms.size(), T(0));
  ParamSet<T> grads = ParamSet<T>::zeros_like(net.params());
  for (const auto& chunk : chunks) {
    const T w = static_cast<T>(chunk.end - chunk.begin) / static_cast<T>(n);
    loss.classif += w * chunk.loss.classif;
    for (std::size_t i = 0; i < loss.proj_terms.size(); ++i) {
      loss.proj_terms[i] += w * chunk.loss.proj_terms[i];
    }
    for (auto& [name, g] : grads) {
      const Tensor<T>& cg = chunk.grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += w * cg[i];
    }
  }

  const T beta = static_cast<T>(net.config().beta);
  const T lambda = static_cast<T>(net.config().lambda);
  loss.l2 = net.params().sum_squares();
  loss.total = loss.classif;
  for (const T term : loss.proj_terms) loss.total += beta * term;
  loss.total += lambda * loss.l2;
  if (lambda != T(0)) {
    for (auto& [name, g] : grads) {
      const Tensor<T>& p = net.params().at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * lambda * p[i];
    }
  }
  return {std::move(loss), std::move(grads)};
}

template <class T>
bool params_finite(const ParamSet<T>& params) {
  try {
    params.check_finite();
  } catch (const NumericalError&) {
    return false;
  }
  return true;
}

}  // namespace

template <class T>
TrainResult<T> train(const std::vector<VideoRecord<T>>& dataset,
                     const NetworkConfig& net_config, const TrainConfig& cfg,
                     std::ostream* progress) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  NetworkConfig ncfg = net_config;
  ncfg.beta = cfg.beta;
  ncfg.lambda = cfg.lambda;
  ncfg.validate();

  std::mt19937_64 rng(cfg.seed);
  auto [train_idx, val_idx] = split_indices(dataset.size(), rng);
  std::vector<const VideoRecord<T>*> train_vids, val_vids;
  for (const std::size_t i : train_idx) train_vids.push_back(&dataset[i]);
  for (const std::size_t i : val_idx) val_vids.push_back(&dataset[i]);

  Network<T> net(ncfg, rng);
  ParamSet<T> velocity = ParamSet<T>::zeros_like(net.params());

  TrainResult<T> result;
  result.net_config = ncfg;
  ParamSet<T> last_good = net.params();
  std::mt19937_64 rng_good = rng;

  double lr = cfg.lr;
  double best_val = -1.0;
  std::size_t since_best = 0;
  const std::size_t n_proj = ncfg.ts_placements.size() -
                             static_cast<std::size_t>(std::count_if(
                                 ncfg.ts_placements.begin(),
                                 ncfg.ts_placements.end(), [](const auto& p) {
                                   return p.kind == TsPlacement::Kind::kMean;
                                 }));

  std::vector<std::size_t> order(train_vids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);

    double sum_classif = 0.0, sum_l2 = 0.0, sum_total = 0.0;
    std::vector<double> sum_proj(n_proj, 0.0);
    std::size_t seen = 0;
    bool blew_up = false;

    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t stop =
          std::min(order.size(), start + cfg.batch_size);
      std::vector<ClipTensor<T>> batch;
      std::vector<int> labels;
      batch.reserve(stop - start);
      for (std::size_t j = start; j < stop; ++j) {
        const VideoRecord<T>& v = *train_vids[order[j]];
        batch.push_back(sample_clip_random(v, ncfg.k, rng));
        labels.push_back(v.label);
      }

      LossBreakdown<T> loss;
      ParamSet<T> grads;
      if (cfg.threads > 1 && batch.size() > 1) {
        auto [l, g] = batch_step_parallel(net, batch, labels, cfg.threads);
        loss = std::move(l);
        grads = std::move(g);
      } else {
        loss = net.forward(batch, labels).loss;
        grads = net.backward();
      }
      if (!std::isfinite(static_cast<double>(loss.total))) {
        blew_up = true;
        break;
      }

      const double w = static_cast<double>(batch.size());
      sum_classif += w * static_cast<double>(loss.classif);
      sum_l2 += w * static_cast<double>(loss.l2);
      sum_total += w * static_cast<double>(loss.total);
      for (std::size_t i = 0; i < n_proj; ++i) {
        sum_proj[i] += w * static_cast<double>(loss.proj_terms[i]);
      }
      seen += batch.size();

      sgd_step(net.params(), grads, velocity, static_cast<T>(lr),
               static_cast<T>(cfg.momentum));
    }

    if (blew_up || !params_finite(net.params())) {
      result.diverged = true;
      result.params = std::move(last_good);
      result.rng = rng_good;
      if (progress) {
        *progress << "epoch " << epoch
                  << ": loss diverged, keeping last finite state\n";
      }
      return result;
    }

    EpochStats st;
    st.epoch = epoch;
    st.classif = sum_classif / static_cast<double>(seen);
    st.l2 = sum_l2 / static_cast<double>(seen);
    st.total = sum_total / static_cast<double>(seen);
    st.proj_terms.resize(n_proj);
    for (std::size_t i = 0; i < n_proj; ++i) {
      st.proj_terms[i] = sum_proj[i] / static_cast<double>(seen);
    }
    st.lr = lr;
    st.val_acc =
        evaluate_views(net, val_vids, cfg.eval_clips_per_video).accuracy;
    result.history.push_back(st);

    if (progress) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "epoch %zu/%zu total %.6g classif %.6g val_acc %.4f "
                    "lr %g\n",
                    epoch + 1, cfg.epochs, st.total, st.classif, st.val_acc,
                    lr);
      *progress << line;
    }

    last_good = net.params();
    rng_good = rng;
    if (st.val_acc > best_val) {
      best_val = st.val_acc;
      since_best = 0;
    } else if (++since_best >= kPlateauPatience) {
      lr *= cfg.lr_decay_factor;
      since_best = 0;
    }
  }

  result.params = std::move(net.params());
  result.rng = rng;
  return result;
}

template <class T>
EvalResult<T> evaluate(Network<T>& net,
                       const std::vector<VideoRecord<T>>& videos,
                       std::size_t clips_per_video) {
  std::vector<const VideoRecord<T>*> views;
  views.reserve(videos.size());
  for (const auto& v : videos) views.push_back(&v);
  return evaluate_views(net, views, clips_per_video);
}

template <class T>
void write_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  json header;
  header["format"] = "tsnet-checkpoint-v1";
  header["epoch"] = ck.epoch;
  header["precision"] = sizeof(T);
  header["rng_state"] = ck.rng_state;
  header["net_config"] = json::parse(ck.net_config.to_json());
  header["train_config"] = json::parse(ck.train_config.to_json());
  std::vector<std::string> names;
  for (const auto& [name, t] : ck.params) names.push_back(name);
  header["params"] = names;

  std::vector<std::uint8_t> blob;
  for (const auto& [name, t] : ck.params) append_tsq1(blob, t);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write on checkpoint: " + path);
}

template <class T>
Checkpoint<T> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw ConfigError("not a checkpoint (missing header line): " + path);
  }

  Checkpoint<T> ck;
  std::vector<std::string> names;
  try {
    const json header = json::parse(bytes.substr(0, newline));
    if (header.at("format").get<std::string>() != "tsnet-checkpoint-v1") {
      throw ConfigError("unsupported checkpoint format in " + path);
    }
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.net_config = NetworkConfig::from_json(header.at("net_config").dump());
    ck.train_config =
        TrainConfig::from_json(header.at("train_config").dump());
    names = header.at("params").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint header in " + path + ": " +
                      e.what());
  }

  const auto* data =
      reinterpret_cast<const std::uint8_t*>(bytes.data()) + newline + 1;
  const std::size_t size = bytes.size() - newline - 1;
  std::size_t offset = 0;
  for (const auto& name : names) {
    ck.params.insert(name, parse_tsq1<T>(data, size, offset));
  }
  if (offset != size) {
    throw IoError("trailing bytes after parameters in " + path);
  }
  return ck;
}

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochStats>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics log: " + path);
  const std::size_t n_proj =
      history.empty() ? 0 : history.front().proj_terms.size();
  out << "epoch,classif";
  for (std::size_t i = 0; i < n_proj; ++i) out << ",proj_" << i;
  out << ",l2,total,val_acc,lr\n";
  char cell[64];
  for (const auto& st : history) {
    out << st.epoch;
    const auto put = [&](double v) {
      std::snprintf(cell, sizeof(cell), ",%.17g", v);
      out << cell;
    };
    put(st.classif);
    for (const double term : st.proj_terms) put(term);
    put(st.l2);
    put(st.total);
    put(st.val_acc);
    put(st.lr);
    out << "\n";
  }
  if (!out) throw IoError("short write on metrics log: " + path);
}

#define TSQ_TRAIN_INSTANTIATE(T)                                             \
  template void sgd_step(ParamSet<T>&, const ParamSet<T>&, ParamSet<T>&, T,  \
                         T);                                                 \
  template TrainResult<T> train(const std::vector<VideoRecord<T>>&,          \
                                const NetworkConfig&, const TrainConfig&,    \
                                std::ostream*);                              \
  template EvalResult<T> evaluate(Network<T>&,                               \
                                  const std::vector<VideoRecord<T>>&,        \
                                  std::size_t);                              \
  template void write_checkpoint(const std::string&, const Checkpoint<T>&);  \
  template Checkpoint<T> read_checkpoint(const std::string&)

TSQ_TRAIN_INSTANTIATE(float);
TSQ_TRAIN_INSTANTIATE(double);

}  // namespace tsq
