#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tsq/data.hpp"
#include "tsq/network.hpp"

namespace tsq {

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_decay_factor = 0.1;
  std::size_t epochs = 30;
  // These weight the composite loss and override the network config's own
  // values, so one file controls the whole objective.
  double beta = 10.0;
  double lambda = 4e-5;
  std::uint64_t seed = 0;
  std::size_t eval_clips_per_video = 20;
  std::size_t threads = 1;

  void validate() const;

  static TrainConfig from_json(const std::string& text);
  static TrainConfig from_file(const std::string& path);
  std::string to_json() const;
};

// Epochs without a validation-accuracy improvement before the learning rate
// is multiplied by lr_decay_factor.
inline constexpr std::size_t kPlateauPatience = 3;

struct EpochStats {
  std::size_t epoch = 0;
  double classif = 0.0;
  std::vector<double> proj_terms;  // one per squeeze layer
  double l2 = 0.0;
  double total = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

template <class T>
struct TrainResult {
  ParamSet<T> params;  // final, or the last finite epoch when diverged
  std::vector<EpochStats> history;
  bool diverged = false;
  NetworkConfig net_config;  // with the beta/lambda actually trained against
  std::mt19937_64 rng;       // stream state after training
};

template <class T>
struct EvalResult {
  double accuracy = 0.0;
  Tensor<T> scores;  // n_videos x num_classes, averaged over uniform clips
  std::vector<int> predictions;
  std::vector<int> labels;
  std::vector<std::string> ids;
};

// v <- momentum * v + g; p <- p - lr * v. Weight decay is not applied here;
// it enters through the loss's lambda term.
template <class T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads,
              ParamSet<T>& velocity, T lr, T momentum);

// Deterministic 80/20 train/validation split by shuffling with the given
// stream. Datasets too small to spare a validation video (< 5) keep every
// video in train and validate on the same videos.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, std::mt19937_64& rng);

// SGD with momentum over random clips, one pass over the train split per
// epoch, validation accuracy after each. Divergence (non-finite loss or
// parameters) stops early and returns the last finite epoch's parameters
// with diverged set. Deterministic given seed when threads == 1; threads > 1
// reduces per-chunk gradients in a fixed order and matches the
// single-threaded total loss within 1e-6.
template <class T>
TrainResult<T> train(const std::vector<VideoRecord<T>>& dataset,
                     const NetworkConfig& net_config, const TrainConfig& cfg,
                     std::ostream* progress = nullptr);

// Per video: eval_clips_per_video uniformly spaced clips, softmax scores
// averaged, argmax with lowest index winning ties.
template <class T>
EvalResult<T> evaluate(Network<T>& net,
                       const std::vector<VideoRecord<T>>& videos,
                       std::size_t clips_per_video);

// Checkpoint file: one-line JSON header holding both configs, the epoch
// count, the serialized RNG stream, and the parameter name order, followed
// by one TSQ1 blob per parameter in that order.
template <class T>
struct Checkpoint {
  NetworkConfig net_config;
  TrainConfig train_config;
  std::size_t epoch = 0;
  std::string rng_state;
  ParamSet<T> params;
};

template <class T>
void write_checkpoint(const std::string& path, const Checkpoint<T>& ck);

template <class T>
Checkpoint<T> read_checkpoint(const std::string& path);

// One row per epoch: epoch,classif,proj_0..,l2,total,val_acc,lr.
void write_metrics_csv(const std::string& path,
                       const std::vector<EpochStats>& history);

}  // namespace tsq
