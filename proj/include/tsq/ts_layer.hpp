#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "tsq/tensor.hpp"

namespace tsq {

// A stack of K frames, each H x W x C. Values are image intensities in [0,1]
// when the clip holds raw input, or unbounded activations when a layer sits
// mid-network.
template <class T>
struct ClipTensor {
  Tensor<T> frames;  // K x H x W x C

  ClipTensor() = default;
  explicit ClipTensor(Tensor<T> f) : frames(std::move(f)) {
    if (frames.rank() != 4) {
      throw ShapeError("clip tensor must be rank-4 (K x H x W x C)");
    }
  }

  std::size_t k() const { return frames.dim(0); }
  std::size_t h() const { return frames.dim(1); }
  std::size_t w() const { return frames.dim(2); }
  std::size_t c() const { return frames.dim(3); }
  std::size_t pixels() const { return h() * w() * c(); }
};

// Weights and shape configuration for one temporal squeeze layer.
// w1 is K x K, w2 is (K*D) x K; neither fully connected stage has a bias.
template <class T>
struct TSLayerParams {
  Tensor<T> w1;
  Tensor<T> w2;
  std::size_t k = 0;
  std::size_t d = 0;
  T leaky_slope = T(0.2);
  T ridge_eps = T(1e-8);  // base scale of the normal-equation regularizer

  void validate() const {
    if (d < 1 || d > k) throw ConfigError("require 1 <= D <= K");
    if (!(ridge_eps > T(0))) throw ConfigError("ridge_eps must be positive");
    if (w1.rank() != 2 || w1.dim(0) != k || w1.dim(1) != k) {
      throw ShapeError("w1 must be K x K");
    }
    if (w2.rank() != 2 || w2.dim(0) != k * d || w2.dim(1) != k) {
      throw ShapeError("w2 must be (K*D) x K");
    }
  }
};

// The K x D projection target. gram caches A^T A + eps*I together with its
// Cholesky factor; eps scales with trace(A^T A)/D so degenerate excitation
// outputs stay solvable without disturbing well-conditioned ones.
template <class T>
struct Hyperplane {
  Tensor<T> a;              // K x D
  Tensor<T> gram;           // D x D
  CholeskyFactor<T> chol;   // factor of gram
  T eps = T(0);             // effective ridge actually added
};

// Output of one squeeze: the D coefficient images (the layer's downstream
// output), the projection of the input onto the hyperplane, and the mean
// per-pixel projection residual.
template <class T>
struct SqueezedClip {
  Tensor<T> y;      // D x H x W x C
  Tensor<T> x_hat;  // K x H x W x C
  T residual = T(0);
};

// Everything ts_backward needs from the forward pass. Produced per
// invocation and never shared.
template <class T>
struct TsForwardCache {
  std::size_t h = 0, w = 0, c = 0;
  Tensor<T> x_bar;   // K x P flattened input
  Tensor<T> z;       // K x 1 frame descriptor
  Tensor<T> s;       // K x 1 sigmoid output
  Tensor<T> v;       // (K*D) x 1 pre-activation of the second FC stage
  Hyperplane<T> hyperplane;
  Tensor<T> y;       // D x P coefficients
  Tensor<T> x_hat;   // K x P projection
  std::vector<T> pixel_norms;  // per-pixel residual norms
  T residual = T(0);
};

template <class T>
struct TsGrads {
  Tensor<T> clip;  // K x H x W x C
  Tensor<T> w1;
  Tensor<T> w2;
};

// Frame descriptor: z_k is the mean of frame k over H, W and C.
template <class T>
Tensor<T> squeeze_frames(const ClipTensor<T>& clip);

// Two bias-free FC stages, sigmoid then leaky ReLU, reshaped row-major
// (frame index major) into the K x D hyperplane candidate.
template <class T>
Tensor<T> excitation(const Tensor<T>& z, const TSLayerParams<T>& params);

// Identity map from the excitation output plus the ridge-regularized gram
// factorization. Raises SingularError if the gram cannot be factored even
// with the ridge (NaN/overflow input).
template <class T>
Hyperplane<T> build_hyperplane(const Tensor<T>& a_prime,
                               const TSLayerParams<T>& params);

// Least-squares projection of every temporal pixel vector onto the
// hyperplane, batched over all H*W*C pixels.
template <class T>
SqueezedClip<T> project_clip(const ClipTensor<T>& clip,
                             const Hyperplane<T>& h);

// Mean over pixels of the Euclidean norm of (trajectory - projection).
template <class T>
T proj_loss(const ClipTensor<T>& clip, const SqueezedClip<T>& squeezed);

// squeeze -> excitation -> hyperplane -> projection. Fills `cache` for the
// backward pass when given.
template <class T>
SqueezedClip<T> ts_forward(const ClipTensor<T>& clip,
                           const TSLayerParams<T>& params,
                           TsForwardCache<T>* cache = nullptr);

// Reverse-mode gradients of <grad_y, y> + grad_residual * residual with
// respect to the input clip and both FC weights. `params` must be the ones
// the cache was produced with.
template <class T>
TsGrads<T> ts_backward(const TsForwardCache<T>& cache,
                       const TSLayerParams<T>& params, const Tensor<T>& grad_y,
                       T grad_residual);

// Fresh layer weights: w1 uniform in (-1/sqrt(K), 1/sqrt(K)); w2 rank-one,
// chosen so that at z = 0 the excitation reproduces the first D columns of
// the orthonormal DCT-II basis plus uniform noise of scale 1e-2. The DCT
// columns give a well-conditioned, column-independent starting hyperplane.
template <class T>
TSLayerParams<T> ts_init_params(std::size_t k, std::size_t d,
                                std::mt19937_64& rng,
                                T leaky_slope = T(0.2),
                                T ridge_eps = T(1e-8));

// Gradient-descend the projection residual alone over w1/w2 (SGD with
// momentum). Returns the residual after every step; params are updated in
// place.
template <class T>
std::vector<T> optimize_projection(const ClipTensor<T>& clip,
                                   TSLayerParams<T>& params, int steps, T lr,
                                   T momentum = T(0.9));

}  // namespace tsq
