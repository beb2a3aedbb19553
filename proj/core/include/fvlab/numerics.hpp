// Dense row-major kernels with pinned accumulation order.
//
// Every reduction here runs over its inner index in ascending order, one
// serial chain per output element. That makes results bit-identical across
// runs and thread counts (threads only ever split work across output
// elements, never across a single sum). Keep it that way.
//
// Kernels are templated on the scalar type: float is the production type,
// double exists for the finite-difference oracles in the test suite.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace fvlab {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};
struct CapacityError : std::runtime_error {
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

template <class T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;  // row-major, data.size() == rows*cols

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}
  Mat(int r, int c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c) {
      throw ShapeError("Mat: data length " + std::to_string(data.size()) +
                       " != " + std::to_string(r) + "x" + std::to_string(c));
    }
  }

  T* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  const T& at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return data.size(); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Mat& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

using Matrix = Mat<float>;
using MatrixD = Mat<double>;

inline std::string shape_str(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// C (M x N) = A (M x K) * B (K x N), or += when accumulate.
//
// Register-tiled (MR x NR) with the contraction index p innermost per tile:
// every C[i][j] is one serial chain accumulated over p ascending, starting
// from C's prior value when accumulating. Tiling only regroups independent
// chains, so results match the textbook i,p,j loop bit for bit and do not
// depend on tile shape or thread placement.
namespace gemm_detail {

inline constexpr int kNR = 32;

template <class T, int MR>
void tile(const T* a, const T* b, T* c, int k, int n, size_t ib, size_t jb,
          bool accumulate) {
  T acc[MR][kNR];
  for (int i = 0; i < MR; ++i) {
    const T* crow = c + (ib + i) * n + jb;
    for (int j = 0; j < kNR; ++j) acc[i][j] = accumulate ? crow[j] : T(0);
  }
  for (int p = 0; p < k; ++p) {
    const T* brow = b + static_cast<size_t>(p) * n + jb;
    for (int i = 0; i < MR; ++i) {
      const T av = a[(ib + i) * k + p];
      for (int j = 0; j < kNR; ++j) acc[i][j] += av * brow[j];
    }
  }
  for (int i = 0; i < MR; ++i) {
    T* crow = c + (ib + i) * n + jb;
    for (int j = 0; j < kNR; ++j) crow[j] = acc[i][j];
  }
}

// ragged right edge: one row at a time, same per-element order
template <class T>
void edge(const T* a, const T* b, T* c, int k, int n, size_t ib, int mr, size_t jb,
          int nr, bool accumulate) {
  T acc[kNR];
  for (int i = 0; i < mr; ++i) {
    T* crow = c + (ib + i) * n + jb;
    for (int j = 0; j < nr; ++j) acc[j] = accumulate ? crow[j] : T(0);
    const T* arow = a + (ib + i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n + jb;
      for (int j = 0; j < nr; ++j) acc[j] += av * brow[j];
    }
    for (int j = 0; j < nr; ++j) crow[j] = acc[j];
  }
}

}  // namespace gemm_detail

template <class T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  using namespace gemm_detail;
  constexpr int MR = 4;
  for (int jb = 0; jb + kNR <= n; jb += kNR) {
    int ib = 0;
    for (; ib + MR <= m; ib += MR) {
      tile<T, MR>(a, b, c, k, n, ib, jb, accumulate);
    }
    if (m - ib > 0) edge(a, b, c, k, n, ib, m - ib, jb, kNR, accumulate);
  }
  const int jb = (n / kNR) * kNR;
  if (n - jb > 0) edge(a, b, c, k, n, 0, m, jb, n - jb, accumulate);
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + shape_str(a.rows, a.cols) + " x " +
                     shape_str(b.rows, b.cols));
  }
  Mat<T> c(a.rows, b.cols);
  gemm(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols, false);
  return c;
}

template <class T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) {
      t.at(j, i) = a.at(i, j);
    }
  }
  return t;
}

// Max-subtracted softmax, in place. Sum runs over ascending index.
template <class T>
void softmax_inplace(T* x, int n) {
  if (n <= 0) throw DomainError("softmax: empty input");
  T mx = x[0];
  for (int i = 1; i < n; ++i) {
    if (x[i] > mx) mx = x[i];
  }
  T sum = T(0);
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const T inv = T(1) / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

template <class T>
std::vector<T> softmax(std::vector<T> logits) {
  softmax_inplace(logits.data(), static_cast<int>(logits.size()));
  return logits;
}

// out = gain * (x - mean) / sqrt(var + eps) + bias, population variance.
template <class T>
void layernorm_into(const T* x, const T* gain, const T* bias, int n, T eps, T* out) {
  T mean = T(0);
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= T(n);
  T var = T(0);
  for (int i = 0; i < n; ++i) {
    const T d = x[i] - mean;
    var += d * d;
  }
  var /= T(n);
  const T inv = T(1) / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) {
    out[i] = gain[i] * ((x[i] - mean) * inv) + bias[i];
  }
}

template <class T>
std::vector<T> layernorm(const std::vector<T>& x, const std::vector<T>& gain,
                         const std::vector<T>& bias, T eps) {
  if (x.size() != gain.size() || x.size() != bias.size()) {
    throw ShapeError("layernorm: lengths " + std::to_string(x.size()) + "/" +
                     std::to_string(gain.size()) + "/" + std::to_string(bias.size()));
  }
  if (!(eps > T(0))) throw DomainError("layernorm: epsilon must be > 0");
  std::vector<T> out(x.size());
  layernorm_into(x.data(), gain.data(), bias.data(), static_cast<int>(x.size()), eps,
                 out.data());
  return out;
}

namespace fast {

// branch-light exp2-based expf, ~1e-7 relative error; vectorizes where
// libm's tanhf would serialize the loop
inline float expf(float x) {
  constexpr float kLog2e = 1.442695040888963f;
  constexpr float kLo = -87.0f, kHi = 88.0f;
  x = x < kLo ? kLo : (x > kHi ? kHi : x);
  float t = x * kLog2e;
  float fi = t >= 0.0f ? static_cast<float>(static_cast<int>(t + 0.5f))
                       : static_cast<float>(static_cast<int>(t - 0.5f));
  const int e = static_cast<int>(fi);
  const float f = t - fi;  // in [-0.5, 0.5]
  // 2^f by degree-5 minimax on [-0.5, 0.5]
  float p = 1.8775767e-3f;
  p = p * f + 8.9893397e-3f;
  p = p * f + 5.5826318e-2f;
  p = p * f + 2.4015361e-1f;
  p = p * f + 6.9315308e-1f;
  p = p * f + 9.9999994e-1f;
  union {
    uint32_t u;
    float f32;
  } bits;
  bits.u = static_cast<uint32_t>(e + 127) << 23;
  return p * bits.f32;
}

inline float tanhf(float x) {
  const float xc = x > 9.0f ? 9.0f : (x < -9.0f ? -9.0f : x);
  const float e = expf(2.0f * xc);
  return (e - 1.0f) / (e + 1.0f);
}

}  // namespace fast

template <class T>
T tanh_kernel(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return fast::tanhf(x);
  } else {
    return std::tanh(x);
  }
}

// GPT-2 style tanh GELU.
template <class T>
T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + tanh_kernel(u));
}

template <class T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = tanh_kernel(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

// loss = -sum(target * log softmax(logits)); grad = softmax(logits) - target.
template <class T>
std::pair<T, std::vector<T>> cross_entropy_grad(const std::vector<T>& target,
                                                const std::vector<T>& logits) {
  if (target.size() != logits.size()) {
    throw ShapeError("cross_entropy_grad: lengths " + std::to_string(target.size()) +
                     "/" + std::to_string(logits.size()));
  }
  T mass = T(0);
  for (T t : target) {
    if (t < T(0)) throw DomainError("cross_entropy_grad: negative target mass");
    mass += t;
  }
  if (std::abs(mass - T(1)) > T(1e-6)) {
    throw DomainError("cross_entropy_grad: target mass " + std::to_string(double(mass)));
  }
  const int n = static_cast<int>(logits.size());
  // log-softmax via max subtraction; loss summed in ascending index order
  T mx = logits[0];
  for (int i = 1; i < n; ++i) {
    if (logits[i] > mx) mx = logits[i];
  }
  T sum = T(0);
  for (int i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
  const T logz = std::log(sum) + mx;
  T loss = T(0);
  std::vector<T> grad(logits.size());
  for (int i = 0; i < n; ++i) {
    loss -= target[i] * (logits[i] - logz);
    grad[i] = std::exp(logits[i] - logz) - target[i];
  }
  return {loss, std::move(grad)};
}

// xoshiro256** seeded through splitmix64. The raw 64-bit stream is pure
// integer arithmetic, so identical seeds give identical streams everywhere.
struct Rng {
  uint64_t s[4];

  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s) {
      // splitmix64 step
      x += 0x9E3779B97F4A7C15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      w = z ^ (z >> 31);
    }
    has_spare_ = false;
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t next_u64() {
    const uint64_t result = rotl(s[1] * 5, 7) * 9;
    const uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Unbiased integer in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw DomainError("Rng::below(0)");
    const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int below_int(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

  // Uniform in [0, 1) with 53 random bits.
  double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller with cached spare.
  double gaussian(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = real01();
    while (u1 <= 0.0) u1 = real01();
    const double u2 = real01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <class V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fvlab
