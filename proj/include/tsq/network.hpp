#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tsq/grad.hpp"
#include "tsq/tensor.hpp"
#include "tsq/ts_layer.hpp"

namespace tsq {

struct ConvBlockSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

// One temporal pooling site: a squeeze layer (learned projection, emits a
// residual term) or a plain temporal mean (the order-blind baseline).
struct TsPlacement {
  enum class Kind { kSqueeze, kMean };
  std::size_t block = 0;  // pooling runs before this conv block
  std::size_t d = 1;
  Kind kind = Kind::kSqueeze;
};

struct NetworkConfig {
  std::size_t k = 8;
  std::size_t in_channels = 3;
  std::size_t num_classes = 2;
  double beta = 10.0;
  double lambda = 4e-5;
  double leaky_slope = 0.2;
  double ridge_eps = 1e-8;
  std::vector<ConvBlockSpec> conv_blocks;
  std::vector<TsPlacement> ts_placements;
  // D values should strictly decrease with depth; set this to accept a
  // non-pyramidal stack with a warning instead of an error.
  bool allow_non_pyramidal = false;
  // How remaining frames enter the 2D head after the last pooling site.
  std::string temporal_merge = "concat_channels";

  void validate() const;

  static NetworkConfig from_json(const std::string& text);
  static NetworkConfig from_file(const std::string& path);
  std::string to_json() const;
};

template <class T>
struct LossBreakdown {
  T classif = T(0);
  std::vector<T> proj_terms;  // one per squeeze layer, batch mean
  T l2 = T(0);
  T total = T(0);
};

// Per-clip forward records kept for the reverse pass. Public so tests can
// inspect activations directly.
template <class T>
struct ClipTrace {
  std::vector<Tensor<T>> stage_inputs;          // per stage
  std::vector<Tensor<T>> conv_preacts;          // per stage; empty if not conv
  std::vector<TsForwardCache<T>> ts_caches;     // per squeeze placement
  Tensor<T> features;                           // pooled head input
  Tensor<T> probs;                              // softmax scores
  int label = -1;
};

// The toy classifier: shared-weight 2D conv blocks applied frame-wise, with
// temporal pooling sites between them; after the last site the remaining
// frames are concatenated along channels, then global average pooling and a
// linear classifier produce the scores.
template <class T>
class Network {
 public:
  enum class StageKind { kSqueeze, kMeanPool, kConv, kMerge };

  struct StageInfo {
    StageKind kind;
    std::size_t conv_index = 0;  // into config.conv_blocks
    std::size_t ts_index = 0;    // squeeze placement order
    std::size_t t_in = 0, t_out = 0;
    std::size_t c_in = 0, c_out = 0;
  };

  struct Output {
    Tensor<T> scores;  // B x num_classes softmax probabilities
    LossBreakdown<T> loss;
  };

  // Fresh network with seeded initialization.
  Network(NetworkConfig config, std::mt19937_64& rng);
  // Network around existing parameters (checkpoint restore, fd probes).
  Network(NetworkConfig config, ParamSet<T> params);

  const NetworkConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const std::vector<StageInfo>& stages() const { return stages_; }
  std::size_t head_channels() const { return head_channels_; }
  // Temporal length handed to the merge in front of the conv head.
  std::size_t frames_at_merge() const { return frames_at_merge_; }

  // Scores plus the composite loss; caches traces for backward().
  Output forward(const std::vector<ClipTensor<T>>& batch,
                 const std::vector<int>& labels);

  // Softmax scores only, no caching.
  Tensor<T> infer(const std::vector<ClipTensor<T>>& batch);

  // Gradients of the cached forward's total loss w.r.t. every parameter.
  ParamSet<T> backward() const;

  // Kept after forward(); public for inspection in tests.
  std::vector<ClipTrace<T>> traces;

 private:
  void build_stages();
  ParamSet<T> init_params(std::mt19937_64& rng) const;
  void check_params() const;
  Tensor<T> run_clip(const ClipTensor<T>& clip, ClipTrace<T>* trace) const;

  NetworkConfig config_;
  std::vector<StageInfo> stages_;
  std::size_t head_channels_ = 0;
  std::size_t frames_at_merge_ = 0;
  ParamSet<T> params_;
};

// Elementwise mean of two per-video score matrices (same videos, same class
// count). Argmax of the result, lowest index winning ties, is the fused
// prediction.
template <class T>
Tensor<T> fuse_streams(const Tensor<T>& scores_a, const Tensor<T>& scores_b);

// Index of the largest entry; earliest index wins ties.
template <class T>
std::size_t argmax(const T* values, std::size_t n);

}  // namespace tsq
