#include "tsq/ts_layer.hpp"

#include <cmath>
#include <limits>

namespace tsq {

namespace {

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T leaky_relu(T x, T slope) {
  return x >= T(0) ? x : slope * x;
}

template <class T>
T leaky_relu_grad(T x, T slope) {
  return x >= T(0) ? T(1) : slope;
}

// Residual norms below this floor are treated as exact fits; the Euclidean
// norm has no gradient there and finite differences agree it is flat.
template <class T>
T norm_floor(T pixel_norm) {
  return T(1024) * std::numeric_limits<T>::epsilon() * (T(1) + pixel_norm);
}

// Mean residual of x_bar - x_hat (both K x P) plus the per-pixel norms.
template <class T>
T residual_of(const Tensor<T>& x_bar, const Tensor<T>& x_hat,
              std::vector<T>* norms) {
  const std::size_t k = x_bar.dim(0), p = x_bar.dim(1);
  if (norms) norms->assign(p, T(0));
  T sum = T(0);
  for (std::size_t j = 0; j < p; ++j) {
    T sq = T(0);
    for (std::size_t i = 0; i < k; ++i) {
      const T d = x_bar(i, j) - x_hat(i, j);
      sq += d * d;
    }
    const T n = std::sqrt(sq);
    if (norms) (*norms)[j] = n;
    sum += n;
  }
  return sum / static_cast<T>(p);
}

}  // namespace

template <class T>
Tensor<T> squeeze_frames(const ClipTensor<T>& clip) {
  return reduce_mean(clip.frames, {1, 2, 3});
}

template <class T>
Tensor<T> excitation(const Tensor<T>& z, const TSLayerParams<T>& params) {
  params.validate();
  if (z.size() != params.k) {
    throw ShapeError("frame descriptor length " + std::to_string(z.size()) +
                     " does not match K=" + std::to_string(params.k));
  }
  Tensor<T> u = matmul(params.w1, z.reshape({params.k, 1}));
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = sigmoid(u[i]);
  Tensor<T> v = matmul(params.w2, u);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = leaky_relu(v[i], params.leaky_slope);
  }
  return std::move(v).reshape({params.k, params.d});
}

template <class T>
Hyperplane<T> build_hyperplane(const Tensor<T>& a_prime,
                               const TSLayerParams<T>& params) {
  if (a_prime.rank() != 2 || a_prime.dim(0) != params.k ||
      a_prime.dim(1) != params.d) {
    throw ShapeError("hyperplane candidate must be K x D");
  }
  Hyperplane<T> h;
  h.a = a_prime;
  h.gram = matmul(transpose(h.a), h.a);
  T trace = T(0);
  for (std::size_t i = 0; i < params.d; ++i) trace += h.gram(i, i);
  h.eps = params.ridge_eps * (T(1) + trace / static_cast<T>(params.d));
  for (std::size_t i = 0; i < params.d; ++i) h.gram(i, i) += h.eps;
  h.chol = cholesky(h.gram);
  return h;
}

template <class T>
SqueezedClip<T> project_clip(const ClipTensor<T>& clip,
                             const Hyperplane<T>& h) {
  const std::size_t k = clip.k(), p = clip.pixels();
  if (h.a.dim(0) != k) {
    throw ShapeError("clip has K=" + std::to_string(k) +
                     " frames but hyperplane expects " +
                     std::to_string(h.a.dim(0)));
  }
  const std::size_t d = h.a.dim(1);
  Tensor<T> x_bar = clip.frames.reshape({k, p});
  Tensor<T> b = matmul(transpose(h.a), x_bar);   // D x P
  Tensor<T> y = cholesky_solve(h.chol, b);       // D x P
  Tensor<T> x_hat = matmul(h.a, y);              // K x P

  SqueezedClip<T> out;
  out.residual = residual_of(x_bar, x_hat, static_cast<std::vector<T>*>(nullptr));
  out.y = std::move(y).reshape({d, clip.h(), clip.w(), clip.c()});
  out.x_hat = std::move(x_hat).reshape({k, clip.h(), clip.w(), clip.c()});
  return out;
}

template <class T>
T proj_loss(const ClipTensor<T>& clip, const SqueezedClip<T>& squeezed) {
  if (!clip.frames.same_shape(squeezed.x_hat)) {
    throw ShapeError("projection shape does not match clip");
  }
  const std::size_t k = clip.k(), p = clip.pixels();
  return residual_of(clip.frames.reshape({k, p}),
                     squeezed.x_hat.reshape({k, p}),
                     static_cast<std::vector<T>*>(nullptr));
}

template <class T>
SqueezedClip<T> ts_forward(const ClipTensor<T>& clip,
                           const TSLayerParams<T>& params,
                           TsForwardCache<T>* cache) {
  params.validate();
  if (clip.k() != params.k) {
    throw ShapeError("clip length " + std::to_string(clip.k()) +
                     " does not match layer K=" + std::to_string(params.k));
  }
  const std::size_t k = params.k, d = params.d, p = clip.pixels();

  Tensor<T> z = squeeze_frames(clip).reshape({k, 1});
  Tensor<T> s = matmul(params.w1, z);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(s[i]);
  Tensor<T> v = matmul(params.w2, s);
  Tensor<T> a_prime({k, d});
  for (std::size_t i = 0; i < v.size(); ++i) {
    a_prime[i] = leaky_relu(v[i], params.leaky_slope);
  }

  Hyperplane<T> h = build_hyperplane(a_prime, params);

  Tensor<T> x_bar = clip.frames.reshape({k, p});
  Tensor<T> b = matmul(transpose(h.a), x_bar);
  Tensor<T> y = cholesky_solve(h.chol, b);
  Tensor<T> x_hat = matmul(h.a, y);

  std::vector<T> norms;
  const T residual = residual_of(x_bar, x_hat, &norms);

  SqueezedClip<T> out;
  out.y = y.reshape({d, clip.h(), clip.w(), clip.c()});
  out.x_hat = x_hat.reshape({k, clip.h(), clip.w(), clip.c()});
  out.residual = residual;

  if (cache) {
    cache->h = clip.h();
    cache->w = clip.w();
    cache->c = clip.c();
    cache->x_bar = std::move(x_bar);
    cache->z = std::move(z);
    cache->s = std::move(s);
    cache->v = std::move(v);
    cache->hyperplane = std::move(h);
    cache->y = std::move(y);
    cache->x_hat = std::move(x_hat);
    cache->pixel_norms = std::move(norms);
    cache->residual = residual;
  }
  return out;
}

template <class T>
TsGrads<T> ts_backward(const TsForwardCache<T>& cache,
                       const TSLayerParams<T>& params, const Tensor<T>& grad_y,
                       T grad_residual) {
  const std::size_t k = params.k, d = params.d;
  const std::size_t p = cache.x_bar.dim(1);
  if (grad_y.size() != d * p) {
    throw ShapeError("grad_y size does not match D x H x W x C");
  }
  const Tensor<T>& a = cache.hyperplane.a;

  // Residual path: d residual / d x_hat[:,j] = -(x_bar - x_hat)[:,j] / (P n_j).
  Tensor<T> grad_r({k, p});
  if (grad_residual != T(0)) {
    const T scale = grad_residual / static_cast<T>(p);
    for (std::size_t j = 0; j < p; ++j) {
      const T n = cache.pixel_norms[j];
      T pix = T(0);
      for (std::size_t i = 0; i < k; ++i) {
        const T x = cache.x_bar(i, j);
        pix += x * x;
      }
      if (n <= norm_floor(std::sqrt(pix))) continue;  // exact fit, flat
      const T f = scale / n;
      for (std::size_t i = 0; i < k; ++i) {
        grad_r(i, j) = f * (cache.x_bar(i, j) - cache.x_hat(i, j));
      }
    }
  }

  Tensor<T> grad_x_bar = grad_r;  // contribution of x_bar inside the residual

  // x_hat = A y receives -grad_r.
  Tensor<T> grad_x_hat({k, p});
  for (std::size_t i = 0; i < k * p; ++i) grad_x_hat[i] = -grad_r[i];

  // Total cotangent on y: downstream grad plus the projection path.
  Tensor<T> gy = grad_y.reshape({d, p});
  {
    Tensor<T> from_x_hat = matmul(transpose(a), grad_x_hat);
    for (std::size_t i = 0; i < d * p; ++i) gy[i] += from_x_hat[i];
  }

  // y = G^{-1} B with B = A^T x_bar and G = A^T A + eps(A) I.
  Tensor<T> s_mat = cholesky_solve(cache.hyperplane.chol, gy);  // D x P
  Tensor<T> y_t = transpose(cache.y);                           // P x D
  Tensor<T> grad_gram = matmul(s_mat, y_t);                     // D x D
  for (std::size_t i = 0; i < d * d; ++i) grad_gram[i] = -grad_gram[i];

  Tensor<T> grad_a = matmul(grad_x_hat, y_t);  // x_hat = A y
  {
    Tensor<T> from_b = matmul(cache.x_bar, transpose(s_mat));  // B = A^T x_bar
    for (std::size_t i = 0; i < k * d; ++i) grad_a[i] += from_b[i];

    Tensor<T> sym = grad_gram;  // A (M + M^T) for the A^T A part of G
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) sym(i, j) += grad_gram(j, i);
    Tensor<T> from_gram = matmul(a, sym);

    // eps = ridge_eps (1 + tr(A^T A)/D) contributes through the identity term.
    T tr = T(0);
    for (std::size_t i = 0; i < d; ++i) tr += grad_gram(i, i);
    const T eps_coef = T(2) * params.ridge_eps / static_cast<T>(d) * tr;
    for (std::size_t i = 0; i < k * d; ++i) {
      grad_a[i] += from_gram[i] + eps_coef * a[i];
    }
  }

  {
    Tensor<T> from_b_x = matmul(a, s_mat);  // x_bar inside B
    for (std::size_t i = 0; i < k * p; ++i) grad_x_bar[i] += from_b_x[i];
  }

  // Back through leaky ReLU, the second FC, sigmoid, the first FC.
  Tensor<T> grad_v({k * d, 1});
  for (std::size_t i = 0; i < k * d; ++i) {
    grad_v[i] = grad_a[i] * leaky_relu_grad(cache.v[i], params.leaky_slope);
  }
  Tensor<T> grad_w2 = matmul(grad_v, transpose(cache.s));
  Tensor<T> grad_s = matmul(transpose(params.w2), grad_v);
  for (std::size_t i = 0; i < k; ++i) {
    grad_s[i] *= cache.s[i] * (T(1) - cache.s[i]);
  }
  Tensor<T> grad_w1 = matmul(grad_s, transpose(cache.z));
  Tensor<T> grad_z = matmul(transpose(params.w1), grad_s);

  // z_k is the mean of frame k over all pixels.
  const T inv_p = T(1) / static_cast<T>(p);
  for (std::size_t i = 0; i < k; ++i) {
    const T g = grad_z[i] * inv_p;
    for (std::size_t j = 0; j < p; ++j) grad_x_bar(i, j) += g;
  }

  TsGrads<T> grads;
  grads.clip = std::move(grad_x_bar).reshape({k, cache.h, cache.w, cache.c});
  grads.w1 = std::move(grad_w1);
  grads.w2 = std::move(grad_w2);
  return grads;
}

template <class T>
TSLayerParams<T> ts_init_params(std::size_t k, std::size_t d,
                                std::mt19937_64& rng, T leaky_slope,
                                T ridge_eps) {
  if (d < 1 || d > k) throw ConfigError("require 1 <= D <= K");
  TSLayerParams<T> params;
  params.k = k;
  params.d = d;
  params.leaky_slope = leaky_slope;
  params.ridge_eps = ridge_eps;

  const T bound = T(1) / std::sqrt(static_cast<T>(k));
  std::uniform_real_distribution<double> w1_dist(-bound, bound);
  params.w1 = Tensor<T>({k, k});
  for (std::size_t i = 0; i < k * k; ++i) {
    params.w1[i] = static_cast<T>(w1_dist(rng));
  }

  // Target hyperplane at z = 0: first D columns of the orthonormal DCT-II
  // basis, plus noise so no column is exactly in a degenerate position.
  std::uniform_real_distribution<double> noise(-1e-2, 1e-2);
  Tensor<T> target({k, d});
  const double kk = static_cast<double>(k);
  for (std::size_t row = 0; row < k; ++row) {
    for (std::size_t col = 0; col < d; ++col) {
      const double scale =
          col == 0 ? std::sqrt(1.0 / kk) : std::sqrt(2.0 / kk);
      const double basis =
          scale * std::cos(M_PI * (2.0 * row + 1.0) * col / (2.0 * kk));
      target(row, col) = static_cast<T>(basis + noise(rng));
    }
  }

  // At z = 0 the sigmoid stage outputs 0.5 everywhere, so w2 only needs the
  // right row sums: w2 = (2/K) lrelu^{-1}(target) 1^T.
  params.w2 = Tensor<T>({k * d, k});
  const T row_scale = T(2) / static_cast<T>(k);
  for (std::size_t i = 0; i < k * d; ++i) {
    const T t = target[i];
    const T pre = t >= T(0) ? t : t / leaky_slope;
    for (std::size_t j = 0; j < k; ++j) params.w2(i, j) = row_scale * pre;
  }
  return params;
}

template <class T>
std::vector<T> optimize_projection(const ClipTensor<T>& clip,
                                   TSLayerParams<T>& params, int steps, T lr,
                                   T momentum) {
  if (steps < 0) throw ConfigError("negative step count");
  std::vector<T> history;
  history.reserve(static_cast<std::size_t>(steps) + 1);
  Tensor<T> vel_w1(params.w1.shape());
  Tensor<T> vel_w2(params.w2.shape());
  Tensor<T> zero_gy({params.d, clip.h(), clip.w(), clip.c()});
  for (int step = 0; step < steps; ++step) {
    TsForwardCache<T> cache;
    ts_forward(clip, params, &cache);
    history.push_back(cache.residual);
    TsGrads<T> g = ts_backward(cache, params, zero_gy, T(1));
    for (std::size_t i = 0; i < params.w1.size(); ++i) {
      vel_w1[i] = momentum * vel_w1[i] + g.w1[i];
      params.w1[i] -= lr * vel_w1[i];
    }
    for (std::size_t i = 0; i < params.w2.size(); ++i) {
      vel_w2[i] = momentum * vel_w2[i] + g.w2[i];
      params.w2[i] -= lr * vel_w2[i];
    }
  }
  history.push_back(ts_forward(clip, params).residual);
  return history;
}

#define TSQ_INSTANTIATE(T)                                                     \
  template Tensor<T> squeeze_frames(const ClipTensor<T>&);                     \
  template Tensor<T> excitation(const Tensor<T>&, const TSLayerParams<T>&);    \
  template Hyperplane<T> build_hyperplane(const Tensor<T>&,                    \
                                          const TSLayerParams<T>&);           \
  template SqueezedClip<T> project_clip(const ClipTensor<T>&,                  \
                                        const Hyperplane<T>&);                \
  template T proj_loss(const ClipTensor<T>&, const SqueezedClip<T>&);          \
  template SqueezedClip<T> ts_forward(const ClipTensor<T>&,                    \
                                      const TSLayerParams<T>&,               \
                                      TsForwardCache<T>*);                    \
  template TsGrads<T> ts_backward(const TsForwardCache<T>&,                    \
                                  const TSLayerParams<T>&, const Tensor<T>&,  \
                                  T);                                         \
  template TSLayerParams<T> ts_init_params(std::size_t, std::size_t,          \
                                           std::mt19937_64&, T, T);           \
  template std::vector<T> optimize_projection(const ClipTensor<T>&,           \
                                              TSLayerParams<T>&, int, T, T);

TSQ_INSTANTIATE(float)
TSQ_INSTANTIATE(double)

#undef TSQ_INSTANTIATE

}  // namespace tsq
