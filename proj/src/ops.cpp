#include "nodedrop/ops.hpp"

#include <algorithm>
#include <span>

namespace nodedrop {

namespace {

constexpr std::size_t kKernel = 3;
constexpr std::size_t kTaps = kKernel * kKernel;

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank)
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_str(shape));
}

// col[k][p] for one sample, k = (ci, kh, kw), p = (h, w). Out-of-bounds taps are 0.
template <typename T>
void im2col(const T* img, std::size_t cin, std::size_t h, std::size_t w, T* col) {
  const std::size_t plane = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* src = img + ci * plane;
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kw = 0; kw < kKernel; ++kw) {
        T* dst = col + ((ci * kTaps) + kh * kKernel + kw) * plane;
        const std::size_t x0 = kw == 0 ? 1 : 0;
        const std::size_t x1 = kw == 2 ? w - 1 : w;
        for (std::size_t y = 0; y < h; ++y) {
          T* drow = dst + y * w;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + kh) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          drow[0] = T(0);
          drow[w - 1] = T(0);
          for (std::size_t x = x0; x < x1; ++x) drow[x] = srow[x + kw - 1];
        }
      }
    }
  }
}

template <typename T>
struct Simd {
  typedef T vec __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 64 / sizeof(T);
  static vec load(const T* p) {
    vec v;
    __builtin_memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, vec v) { __builtin_memcpy(p, &v, sizeof v); }
  static vec splat(T x) { return vec{} + x; }
};

// c[i][p] = sum over r in rows (in list order) of A(i, r) * b[r][p], where
// A(i, r) = a[i * a_i + r * a_r]. Every element starts from +0 and adds its
// terms one at a time, so the result does not depend on the blocking.
template <typename T>
void gemm_rows(std::size_t m, std::size_t n, std::span<const std::size_t> rows, const T* a,
               std::size_t a_i, std::size_t a_r, const T* b, std::size_t ldb, T* c,
               std::size_t ldc) {
  using S = Simd<T>;
  using V = typename S::vec;
  constexpr std::size_t L = S::lanes;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* ai = a + i * a_i;
    std::size_t p = 0;
    for (; p + 2 * L <= n; p += 2 * L) {
      V c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t r : rows) {
        const T* br = b + r * ldb + p;
        const V b0 = S::load(br), b1 = S::load(br + L);
        const T* ar = ai + r * a_r;
        const V x0 = S::splat(ar[0]), x1 = S::splat(ar[a_i]), x2 = S::splat(ar[2 * a_i]),
                x3 = S::splat(ar[3 * a_i]);
        c00 += x0 * b0; c01 += x0 * b1;
        c10 += x1 * b0; c11 += x1 * b1;
        c20 += x2 * b0; c21 += x2 * b1;
        c30 += x3 * b0; c31 += x3 * b1;
      }
      T* ci = c + i * ldc + p;
      S::store(ci, c00); S::store(ci + L, c01);
      S::store(ci + ldc, c10); S::store(ci + ldc + L, c11);
      S::store(ci + 2 * ldc, c20); S::store(ci + 2 * ldc + L, c21);
      S::store(ci + 3 * ldc, c30); S::store(ci + 3 * ldc + L, c31);
    }
    for (; p < n; ++p) {
      T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
      for (std::size_t r : rows) {
        const T bv = b[r * ldb + p];
        const T* ar = ai + r * a_r;
        s0 += ar[0] * bv;
        s1 += ar[a_i] * bv;
        s2 += ar[2 * a_i] * bv;
        s3 += ar[3 * a_i] * bv;
      }
      c[i * ldc + p] = s0;
      c[(i + 1) * ldc + p] = s1;
      c[(i + 2) * ldc + p] = s2;
      c[(i + 3) * ldc + p] = s3;
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + i * a_i;
    std::size_t p = 0;
    for (; p + L <= n; p += L) {
      V acc{};
      for (std::size_t r : rows) acc += S::splat(ai[r * a_r]) * S::load(b + r * ldb + p);
      S::store(c + i * ldc + p, acc);
    }
    for (; p < n; ++p) {
      T acc = T(0);
      for (std::size_t r : rows) acc += ai[r * a_r] * b[r * ldb + p];
      c[i * ldc + p] = acc;
    }
  }
}

// g[i][j] += sum over p of x[i][p] * y[j][p] for the listed rows i of x, all
// rows j of y. Sums use per-lane partials, reduced in a fixed order.
template <typename T>
void gemm_nt_acc(std::span<const std::size_t> xrows, std::size_t ny, std::size_t n, const T* x,
                 const T* y, T* g, std::size_t ldg) {
  using S = Simd<T>;
  using V = typename S::vec;
  constexpr std::size_t L = S::lanes;
  const std::size_t nv = n - n % L;
  auto reduce = [](V v) {
    T s = T(0);
    for (std::size_t l = 0; l < L; ++l) s += v[l];
    return s;
  };
  for (std::size_t xi : xrows) {
    const T* xr = x + xi * n;
    std::size_t j = 0;
    for (; j + 4 <= ny; j += 4) {
      const T* y0 = y + j * n;
      V a0{}, a1{}, a2{}, a3{};
      for (std::size_t p = 0; p < nv; p += L) {
        const V xv = S::load(xr + p);
        a0 += xv * S::load(y0 + p);
        a1 += xv * S::load(y0 + n + p);
        a2 += xv * S::load(y0 + 2 * n + p);
        a3 += xv * S::load(y0 + 3 * n + p);
      }
      T s[4] = {reduce(a0), reduce(a1), reduce(a2), reduce(a3)};
      for (std::size_t p = nv; p < n; ++p)
        for (std::size_t q = 0; q < 4; ++q) s[q] += xr[p] * y0[q * n + p];
      for (std::size_t q = 0; q < 4; ++q) g[xi * ldg + j + q] += s[q];
    }
    for (; j < ny; ++j) {
      const T* yj = y + j * n;
      V a{};
      for (std::size_t p = 0; p < nv; p += L) a += S::load(xr + p) * S::load(yj + p);
      T s = reduce(a);
      for (std::size_t p = nv; p < n; ++p) s += xr[p] * yj[p];
      g[xi * ldg + j] += s;
    }
  }
}

// Adds col[k][p] back into the image positions it was gathered from.
template <typename T>
void col2im(const T* col, std::size_t cin, std::size_t h, std::size_t w, T* img) {
  const std::size_t plane = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    T* dst = img + ci * plane;
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const T* src = col + ((ci * kTaps) + kh * kKernel + kx) * plane;
        const std::size_t x0 = kx == 0 ? 1 : 0;
        const std::size_t x1 = kx == 2 ? w - 1 : w;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + kh) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          const T* srow = src + y * w;
          for (std::size_t x = x0; x < x1; ++x) drow[x + kx - 1] += srow[x];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner dims disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  // i-k-j: each c[i,j] still sums k = 0..K-1 in order; the j loop vectorizes.
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = pc + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = pa[i * k + kk];
      const T* bk = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Conv2dCache<T>* cache) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernels.shape(), 4, "conv2d kernels");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernels.dim(0);
  if (kernels.dim(2) != kKernel || kernels.dim(3) != kKernel)
    throw DimensionError("conv2d kernels must be 3x3, got " + shape_str(kernels.shape()));
  if (kernels.dim(1) != cin)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         ", kernels " + shape_str(kernels.shape()));
  if (bias.size() != cout)
    throw DimensionError("conv2d bias length " + std::to_string(bias.size()) + " != " +
                         std::to_string(cout));

  const std::size_t plane = h * w;
  const std::size_t taps = cin * kTaps;
  Tensor<T> out({n, cout, h, w});
  std::vector<T> col(taps * plane);
  const T* kw = kernels.data();

  std::vector<std::size_t> all_taps(taps);
  for (std::size_t k = 0; k < taps; ++k) all_taps[k] = k;
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.data() + s * cin * plane, cin, h, w, col.data());
    T* os = out.data() + s * cout * plane;
    gemm_rows<T>(cout, plane, all_taps, kw, taps, 1, col.data(), plane, os, plane);
    for (std::size_t co = 0; co < cout; ++co) {
      T* o = os + co * plane;
      const T bv = bias[co];
      for (std::size_t p = 0; p < plane; ++p) o[p] += bv;
    }
  }

  if (cache) {
    cache->input = input;
    cache->kernels = kernels;
    cache->out_shape = out.shape();
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_grads(const Conv2dCache<T>& cache, const Tensor<T>& grad_out,
                            bool want_input_grad) {
  if (cache.input.empty() || cache.kernels.empty())
    throw ContractError("conv2d_grads called with an empty cache");
  if (grad_out.shape() != cache.out_shape)
    throw ContractError("conv2d_grads: grad_out " + shape_str(grad_out.shape()) +
                        " does not match cached output " + shape_str(cache.out_shape));
  const Tensor<T>& input = cache.input;
  const Tensor<T>& kernels = cache.kernels;
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernels.dim(0);
  const std::size_t plane = h * w;
  const std::size_t taps = cin * kTaps;

  Conv2dGrads<T> g;
  g.kernels = Tensor<T>(kernels.shape());
  g.bias = Tensor<T>({cout});
  if (want_input_grad) g.input = Tensor<T>(input.shape());

  std::vector<T> col(taps * plane);
  std::vector<T> gcol(want_input_grad ? taps * plane : 0);
  std::vector<std::size_t> active;
  const T* kw = kernels.data();

  for (std::size_t s = 0; s < n; ++s) {
    const T* go = grad_out.data() + s * cout * plane;
    // Output channels whose gradient is all zero contribute nothing and are
    // skipped below.
    active.clear();
    for (std::size_t co = 0; co < cout; ++co) {
      const T* gc = go + co * plane;
      T acc = g.bias[co];
      bool any = false;
      for (std::size_t p = 0; p < plane; ++p) {
        acc += gc[p];
        any = any || gc[p] != T(0);
      }
      g.bias[co] = acc;
      if (any) active.push_back(co);
    }
    if (active.empty()) continue;

    im2col(input.data() + s * cin * plane, cin, h, w, col.data());
    gemm_nt_acc<T>(active, taps, plane, go, col.data(), g.kernels.data(), taps);

    if (!want_input_grad) continue;
    // gcol[k][p] = sum over active co of W[co][k] * grad_out[co][p].
    gemm_rows<T>(taps, plane, active, kw, 1, taps, go, plane, gcol.data(), plane);
    col2im(gcol.data(), cin, h, w, g.input.data() + s * cin * plane);
  }
  return g;
}

template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "maxpool2d input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("maxpool2d needs even spatial dims, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  MaxPoolResult<T> r;
  r.output = Tensor<T>({n, c, oh, ow});
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* src = input.data() + nc * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const T* tl = src + (2 * y) * w + 2 * x;
        const T cand[4] = {tl[0], tl[1], tl[w], tl[w + 1]};
        std::uint8_t best = 0;
        for (std::uint8_t i = 1; i < 4; ++i)
          if (cand[i] > cand[best]) best = i;
        r.output[o] = cand[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_grad(const Shape& input_shape, const std::vector<std::uint8_t>& argmax,
                         const Tensor<T>& grad_out) {
  require_rank(input_shape, 4, "maxpool2d_grad");
  if (grad_out.size() != argmax.size() || grad_out.size() * 4 != shape_size(input_shape))
    throw ContractError("maxpool2d_grad: grad_out " + shape_str(grad_out.shape()) +
                        " does not match pooled input " + shape_str(input_shape));
  const std::size_t h = input_shape[2], w = input_shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> gi(input_shape);
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < input_shape[0] * input_shape[1]; ++nc) {
    T* dst = gi.data() + nc * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const std::uint8_t a = argmax[o];
        dst[(2 * y + a / 2) * w + 2 * x + a % 2] += grad_out[o];
      }
    }
  }
  return gi;
}

#define NODEDROP_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dCache<T>*);                                                \
  template Conv2dGrads<T> conv2d_grads(const Conv2dCache<T>&, const Tensor<T>&, bool);       \
  template MaxPoolResult<T> maxpool2d(const Tensor<T>&);                                     \
  template Tensor<T> maxpool2d_grad(const Shape&, const std::vector<std::uint8_t>&,          \
                                    const Tensor<T>&);

NODEDROP_INSTANTIATE_OPS(float)
NODEDROP_INSTANTIATE_OPS(double)

}  // namespace nodedrop
