#include "tsq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace tsq {

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions disagree: " + std::to_string(k) +
                     " vs " + std::to_string(b.dim(0)));
  }
  Tensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  // ikj order keeps the inner loop contiguous on both b and c.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = pa[i * k + kk];
      const T* brow = pb + kk * n;
      T* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
CholeskyFactor<T> cholesky(const Tensor<T>& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError("cholesky expects a square rank-2 tensor");
  }
  const std::size_t d = m.dim(0);
  CholeskyFactor<T> f{Tensor<T>({d, d})};
  Tensor<T>& l = f.l;
  for (std::size_t j = 0; j < d; ++j) {
    T pivot = m(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > T(0)) || !std::isfinite(static_cast<double>(pivot))) {
      throw SingularError(
          "matrix is not positive definite at pivot " + std::to_string(j), j);
    }
    l(j, j) = std::sqrt(pivot);
    for (std::size_t i = j + 1; i < d; ++i) {
      T s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return f;
}

template <class T>
Tensor<T> cholesky_solve(const CholeskyFactor<T>& f, const Tensor<T>& rhs) {
  if (rhs.rank() != 2) throw ShapeError("cholesky_solve expects rank-2 rhs");
  const std::size_t d = f.dim();
  if (rhs.dim(0) != d) {
    throw ShapeError("cholesky_solve rhs rows " + std::to_string(rhs.dim(0)) +
                     " do not match factor dim " + std::to_string(d));
  }
  const std::size_t n = rhs.dim(1);
  const Tensor<T>& l = f.l;
  Tensor<T> s = rhs;
  // Forward substitution L w = rhs, column-batched.
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const T lik = l(i, k);
      for (std::size_t c = 0; c < n; ++c) s(i, c) -= lik * s(k, c);
    }
    const T inv = T(1) / l(i, i);
    for (std::size_t c = 0; c < n; ++c) s(i, c) *= inv;
  }
  // Back substitution L^T s = w.
  for (std::size_t ii = d; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < d; ++k) {
      const T lki = l(k, ii);
      for (std::size_t c = 0; c < n; ++c) s(ii, c) -= lki * s(k, c);
    }
    const T inv = T(1) / l(ii, ii);
    for (std::size_t c = 0; c < n; ++c) s(ii, c) *= inv;
  }
  return s;
}

template <class T>
Tensor<T> solve_spd(const Tensor<T>& m, const Tensor<T>& rhs) {
  return cholesky_solve(cholesky(m), rhs);
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  const std::size_t r = t.rank();
  std::vector<bool> drop(r, false);
  for (std::size_t a : axes) {
    if (a >= r) throw ShapeError("reduce_mean axis out of range");
    if (drop[a]) throw ShapeError("reduce_mean repeated axis");
    drop[a] = true;
  }
  std::vector<std::size_t> out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < r; ++i) {
    if (drop[i]) {
      count *= t.dim(i);
    } else {
      out_shape.push_back(t.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);  // scalar as a length-1 vector

  Tensor<T> out(out_shape);
  // Walk the input once, projecting each multi-index onto the kept axes.
  std::vector<std::size_t> idx(r, 0);
  const std::size_t total = t.size();
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t i = 0; i < r; ++i) {
      if (!drop[i]) out_flat = out_flat * t.dim(i) + idx[i];
    }
    out[out_flat] += t[flat];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < t.dim(i)) break;
      idx[i] = 0;
    }
  }
  const T inv = T(1) / static_cast<T>(count);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// TSQ1 serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'S', 'Q', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

template <class T>
void append_tsq1(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) {
    put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  }
  out.push_back(static_cast<std::uint8_t>(sizeof(T)));
  const std::size_t bytes = t.size() * sizeof(T);
  const std::size_t at = out.size();
  out.resize(at + bytes);
  std::memcpy(out.data() + at, t.data(), bytes);  // little-endian host
}

template <class T>
Tensor<T> parse_tsq1(const std::uint8_t* data, std::size_t size,
                     std::size_t& offset) {
  auto need = [&](std::size_t n) {
    if (offset + n > size) throw IoError("truncated TSQ1 payload");
  };
  need(8);
  if (std::memcmp(data + offset, kMagic, 4) != 0) {
    throw IoError("bad TSQ1 magic");
  }
  const std::uint32_t rank = get_u32(data + offset + 4);
  offset += 8;
  if (rank > 8) throw IoError("unreasonable TSQ1 rank");
  std::vector<std::size_t> shape(rank);
  need(4 * rank + 1);
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(data + offset);
    offset += 4;
    if (shape[i] == 0) throw IoError("zero TSQ1 dimension");
    total *= shape[i];
  }
  const std::uint8_t tag = data[offset++];
  if (tag != 4 && tag != 8) throw IoError("bad TSQ1 precision tag");
  need(total * tag);
  Tensor<T> t(shape);
  if (tag == sizeof(T)) {
    std::memcpy(t.data(), data + offset, total * tag);
  } else if (tag == 4) {
    const float* src = reinterpret_cast<const float*>(data + offset);
    for (std::size_t i = 0; i < total; ++i) t[i] = static_cast<T>(src[i]);
  } else {
    const double* src = reinterpret_cast<const double*>(data + offset);
    for (std::size_t i = 0; i < total; ++i) t[i] = static_cast<T>(src[i]);
  }
  offset += total * tag;
  return t;
}

template <class T>
void write_tsq1(const std::string& path, const Tensor<T>& t) {
  std::vector<std::uint8_t> buf;
  append_tsq1(buf, t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}

template <class T>
Tensor<T> read_tsq1(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  std::size_t offset = 0;
  Tensor<T> t = parse_tsq1<T>(buf.data(), buf.size(), offset);
  if (offset != buf.size()) throw IoError("trailing bytes in " + path);
  return t;
}

#define TSQ_INSTANTIATE(T)                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> transpose(const Tensor<T>&);                           \
  template CholeskyFactor<T> cholesky(const Tensor<T>&);                    \
  template Tensor<T> cholesky_solve(const CholeskyFactor<T>&,               \
                                    const Tensor<T>&);                      \
  template Tensor<T> solve_spd(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> reduce_mean(const Tensor<T>&,                          \
                                 const std::vector<std::size_t>&);          \
  template void append_tsq1(std::vector<std::uint8_t>&, const Tensor<T>&);  \
  template Tensor<T> parse_tsq1(const std::uint8_t*, std::size_t,           \
                                std::size_t&);                              \
  template void write_tsq1(const std::string&, const Tensor<T>&);           \
  template Tensor<T> read_tsq1(const std::string&);

TSQ_INSTANTIATE(float)
TSQ_INSTANTIATE(double)

#undef TSQ_INSTANTIATE

}  // namespace tsq
