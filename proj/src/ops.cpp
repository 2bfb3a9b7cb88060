#include "se2/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace se2 {

namespace detail {

template <class T>
void conv_block_forward(const T* in, int W, int Cin, const T* kernel, int n,
                        std::ptrdiff_t krow, std::ptrdiff_t kcol, T* out, int Ho, int Wo,
                        int Cout) {
  for (int y = 0; y < Ho; ++y) {
    for (int i = 0; i < n; ++i) {
      const T* in_row = in + static_cast<std::ptrdiff_t>(y + i) * W * Cin;
      const T* k_row = kernel + i * krow;
      for (int x = 0; x < Wo; ++x) {
        T* o = out + (static_cast<std::ptrdiff_t>(y) * Wo + x) * Cout;
        const T* in_px = in_row + static_cast<std::ptrdiff_t>(x) * Cin;
        for (int j = 0; j < n; ++j) {
          const T* in_q = in_px + static_cast<std::ptrdiff_t>(j) * Cin;
          const T* kq = k_row + j * kcol;
          for (int ci = 0; ci < Cin; ++ci) {
            const T a = in_q[ci];
            const T* kc = kq + static_cast<std::ptrdiff_t>(ci) * Cout;
            for (int co = 0; co < Cout; ++co) o[co] += a * kc[co];
          }
        }
      }
    }
  }
}

template <class T>
void conv_block_backward_input(T* grad_in, int W, int Cin, const T* kernel, int n,
                               std::ptrdiff_t krow, std::ptrdiff_t kcol, const T* grad_out,
                               int Ho, int Wo, int Cout) {
  for (int y = 0; y < Ho; ++y) {
    for (int i = 0; i < n; ++i) {
      T* gin_row = grad_in + static_cast<std::ptrdiff_t>(y + i) * W * Cin;
      const T* k_row = kernel + i * krow;
      for (int x = 0; x < Wo; ++x) {
        const T* go = grad_out + (static_cast<std::ptrdiff_t>(y) * Wo + x) * Cout;
        T* gin_px = gin_row + static_cast<std::ptrdiff_t>(x) * Cin;
        for (int j = 0; j < n; ++j) {
          T* gin_q = gin_px + static_cast<std::ptrdiff_t>(j) * Cin;
          const T* kq = k_row + j * kcol;
          for (int ci = 0; ci < Cin; ++ci) {
            const T* kc = kq + static_cast<std::ptrdiff_t>(ci) * Cout;
            T acc = T(0);
            for (int co = 0; co < Cout; ++co) acc += go[co] * kc[co];
            gin_q[ci] += acc;
          }
        }
      }
    }
  }
}

template <class T>
void conv_block_backward_kernel(const T* in, int W, int Cin, T* grad_kernel, int n,
                                std::ptrdiff_t krow, std::ptrdiff_t kcol, const T* grad_out,
                                int Ho, int Wo, int Cout) {
  for (int y = 0; y < Ho; ++y) {
    for (int i = 0; i < n; ++i) {
      const T* in_row = in + static_cast<std::ptrdiff_t>(y + i) * W * Cin;
      T* gk_row = grad_kernel + i * krow;
      for (int x = 0; x < Wo; ++x) {
        const T* go = grad_out + (static_cast<std::ptrdiff_t>(y) * Wo + x) * Cout;
        const T* in_px = in_row + static_cast<std::ptrdiff_t>(x) * Cin;
        for (int j = 0; j < n; ++j) {
          const T* in_q = in_px + static_cast<std::ptrdiff_t>(j) * Cin;
          T* gkq = gk_row + j * kcol;
          for (int ci = 0; ci < Cin; ++ci) {
            const T a = in_q[ci];
            T* gkc = gkq + static_cast<std::ptrdiff_t>(ci) * Cout;
            for (int co = 0; co < Cout; ++co) gkc[co] += a * go[co];
          }
        }
      }
    }
  }
}

template void conv_block_forward<float>(const float*, int, int, const float*, int,
                                        std::ptrdiff_t, std::ptrdiff_t, float*, int, int, int);
template void conv_block_forward<double>(const double*, int, int, const double*, int,
                                         std::ptrdiff_t, std::ptrdiff_t, double*, int, int, int);
template void conv_block_backward_input<float>(float*, int, int, const float*, int,
                                               std::ptrdiff_t, std::ptrdiff_t, const float*, int,
                                               int, int);
template void conv_block_backward_input<double>(double*, int, int, const double*, int,
                                                std::ptrdiff_t, std::ptrdiff_t, const double*,
                                                int, int, int);
template void conv_block_backward_kernel<float>(const float*, int, int, float*, int,
                                                std::ptrdiff_t, std::ptrdiff_t, const float*,
                                                int, int, int);
template void conv_block_backward_kernel<double>(const double*, int, int, double*, int,
                                                 std::ptrdiff_t, std::ptrdiff_t, const double*,
                                                 int, int, int);

}  // namespace detail

namespace {

template <class T>
void require_conv_shapes(const TensorT<T>& input, const TensorT<T>& kernels) {
  if (input.rank() != 4)
    throw ConfigError("conv2d_valid: input must be rank 4 [B,H,W,Cin], got " + input.shape_str());
  if (kernels.rank() != 4)
    throw ConfigError("conv2d_valid: kernels must be rank 4 [n,n,Cin,Cout], got " +
                      kernels.shape_str());
  if (kernels.dim(0) != kernels.dim(1))
    throw ConfigError("conv2d_valid: kernel spatial axes differ: " + kernels.shape_str());
  const int n = kernels.dim(0);
  if (n > input.dim(1))
    throw ConfigError("conv2d_valid: kernel size " + std::to_string(n) +
                      " exceeds input height " + std::to_string(input.dim(1)));
  if (n > input.dim(2))
    throw ConfigError("conv2d_valid: kernel size " + std::to_string(n) + " exceeds input width " +
                      std::to_string(input.dim(2)));
  if (kernels.dim(2) != input.dim(3))
    throw ConfigError("conv2d_valid: channel axis mismatch, input Cin=" +
                      std::to_string(input.dim(3)) + " vs kernel Cin=" +
                      std::to_string(kernels.dim(2)));
}

}  // namespace

template <class T>
TensorT<T> conv2d_valid(const TensorT<T>& input, const TensorT<T>& kernels) {
  require_conv_shapes(input, kernels);
  const int B = input.dim(0), H = input.dim(1), W = input.dim(2), Cin = input.dim(3);
  const int n = kernels.dim(0), Cout = kernels.dim(3);
  const int Ho = H - n + 1, Wo = W - n + 1;
  TensorT<T> out({B, Ho, Wo, Cout});
  const std::ptrdiff_t krow = static_cast<std::ptrdiff_t>(n) * Cin * Cout;
  const std::ptrdiff_t kcol = static_cast<std::ptrdiff_t>(Cin) * Cout;
  for (int b = 0; b < B; ++b) {
    detail::conv_block_forward(input.data() + input.offset(b), W, Cin, kernels.data(), n, krow,
                               kcol, out.data() + out.offset(b), Ho, Wo, Cout);
  }
  return out;
}

template <class T>
void conv2d_valid_backward(const TensorT<T>& input, const TensorT<T>& kernels,
                           const TensorT<T>& grad_out, TensorT<T>* grad_input,
                           TensorT<T>* grad_kernels) {
  require_conv_shapes(input, kernels);
  const int B = input.dim(0), W = input.dim(2), Cin = input.dim(3);
  const int n = kernels.dim(0), Cout = kernels.dim(3);
  const int Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  const std::ptrdiff_t krow = static_cast<std::ptrdiff_t>(n) * Cin * Cout;
  const std::ptrdiff_t kcol = static_cast<std::ptrdiff_t>(Cin) * Cout;
  for (int b = 0; b < B; ++b) {
    const T* go = grad_out.data() + grad_out.offset(b);
    if (grad_input)
      detail::conv_block_backward_input(grad_input->data() + grad_input->offset(b), W, Cin,
                                        kernels.data(), n, krow, kcol, go, Ho, Wo, Cout);
    if (grad_kernels)
      detail::conv_block_backward_kernel(input.data() + input.offset(b), W, Cin,
                                         grad_kernels->data(), n, krow, kcol, go, Ho, Wo, Cout);
  }
}

template <class T>
MaxPoolResult<T> maxpool2d(const TensorT<T>& input, int k) {
  if (k < 1) throw ConfigError("maxpool2d: window size must be >= 1, got " + std::to_string(k));
  if (input.rank() < 3)
    throw ConfigError("maxpool2d: input must have trailing [H,W,C] axes, got " +
                      input.shape_str());
  const int r = input.rank();
  const int H = input.dim(r - 3), W = input.dim(r - 2), C = input.dim(r - 1);
  std::size_t lead = 1;
  for (int a = 0; a < r - 3; ++a) lead *= static_cast<std::size_t>(input.dim(a));
  const int Ho = H / k, Wo = W / k;
  if (Ho < 1 || Wo < 1)
    throw ConfigError("maxpool2d: window " + std::to_string(k) + " larger than spatial extent " +
                      std::to_string(H) + "x" + std::to_string(W));

  std::vector<int> out_shape = input.shape();
  out_shape[static_cast<std::size_t>(r - 3)] = Ho;
  out_shape[static_cast<std::size_t>(r - 2)] = Wo;
  MaxPoolResult<T> res{TensorT<T>(out_shape), {}};
  res.argmax.assign(res.output.size(), 0);

  const std::size_t in_block = static_cast<std::size_t>(H) * W * C;
  const std::size_t out_block = static_cast<std::size_t>(Ho) * Wo * C;
  for (std::size_t m = 0; m < lead; ++m) {
    const T* in = input.data() + m * in_block;
    T* out = res.output.data() + m * out_block;
    std::int32_t* am = res.argmax.data() + m * out_block;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        for (int c = 0; c < C; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_idx = 0;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
              const std::int32_t idx =
                  ((y * k + dy) * W + (x * k + dx)) * C + c;
              const T v = in[idx];
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          }
          out[(y * Wo + x) * C + c] = best;
          am[(y * Wo + x) * C + c] = best_idx;
        }
      }
    }
  }
  return res;
}

template <class T>
void maxpool2d_backward(const MaxPoolResult<T>& pooled, const TensorT<T>& grad_out,
                        TensorT<T>* grad_input) {
  const int r = grad_input->rank();
  const int H = grad_input->dim(r - 3), W = grad_input->dim(r - 2), C = grad_input->dim(r - 1);
  const int Ho = grad_out.dim(r - 3), Wo = grad_out.dim(r - 2);
  std::size_t lead = 1;
  for (int a = 0; a < r - 3; ++a) lead *= static_cast<std::size_t>(grad_input->dim(a));
  const std::size_t in_block = static_cast<std::size_t>(H) * W * C;
  const std::size_t out_block = static_cast<std::size_t>(Ho) * Wo * C;
  for (std::size_t m = 0; m < lead; ++m) {
    T* gin = grad_input->data() + m * in_block;
    const T* go = grad_out.data() + m * out_block;
    const std::int32_t* am = pooled.argmax.data() + m * out_block;
    for (std::size_t i = 0; i < out_block; ++i) gin[am[i]] += go[i];
  }
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <class T>
void relu_backward(const TensorT<T>& x, const TensorT<T>& grad_out, TensorT<T>* grad_x) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > T(0)) (*grad_x)[i] += grad_out[i];
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  return y;
}

template <class T>
void sigmoid_backward(const TensorT<T>& y, const TensorT<T>& grad_out, TensorT<T>* grad_x) {
  for (std::size_t i = 0; i < y.size(); ++i) (*grad_x)[i] += grad_out[i] * y[i] * (T(1) - y[i]);
}

namespace {

// Iterates a tensor as [outer, K, inner] around `axis`.
struct AxisSplit {
  std::size_t outer, inner;
  int extent;
};

template <class T>
AxisSplit split_axis(const TensorT<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ConfigError("softmax: axis out of range for " + x.shape_str());
  AxisSplit s{1, 1, x.dim(axis)};
  for (int a = 0; a < axis; ++a) s.outer *= static_cast<std::size_t>(x.dim(a));
  for (int a = axis + 1; a < x.rank(); ++a) s.inner *= static_cast<std::size_t>(x.dim(a));
  return s;
}

}  // namespace

template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const AxisSplit s = split_axis(x, axis);
  TensorT<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(s.extent) * s.inner + in;
      T mx = x[base];
      for (int k = 1; k < s.extent; ++k)
        mx = std::max(mx, x[base + static_cast<std::size_t>(k) * s.inner]);
      T sum = T(0);
      for (int k = 0; k < s.extent; ++k) {
        const T e = std::exp(x[base + static_cast<std::size_t>(k) * s.inner] - mx);
        y[base + static_cast<std::size_t>(k) * s.inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int k = 0; k < s.extent; ++k) y[base + static_cast<std::size_t>(k) * s.inner] *= inv;
    }
  }
  return y;
}

template <class T>
void softmax_backward(const TensorT<T>& y, const TensorT<T>& grad_out, int axis,
                      TensorT<T>* grad_x) {
  const AxisSplit s = split_axis(y, axis);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(s.extent) * s.inner + in;
      T dot = T(0);
      for (int k = 0; k < s.extent; ++k) {
        const std::size_t idx = base + static_cast<std::size_t>(k) * s.inner;
        dot += grad_out[idx] * y[idx];
      }
      for (int k = 0; k < s.extent; ++k) {
        const std::size_t idx = base + static_cast<std::size_t>(k) * s.inner;
        (*grad_x)[idx] += y[idx] * (grad_out[idx] - dot);
      }
    }
  }
}

#define SE2_INSTANTIATE_OPS(T)                                                               \
  template TensorT<T> conv2d_valid<T>(const TensorT<T>&, const TensorT<T>&);                 \
  template void conv2d_valid_backward<T>(const TensorT<T>&, const TensorT<T>&,              \
                                         const TensorT<T>&, TensorT<T>*, TensorT<T>*);      \
  template MaxPoolResult<T> maxpool2d<T>(const TensorT<T>&, int);                            \
  template void maxpool2d_backward<T>(const MaxPoolResult<T>&, const TensorT<T>&,            \
                                      TensorT<T>*);                                         \
  template TensorT<T> relu<T>(const TensorT<T>&);                                            \
  template void relu_backward<T>(const TensorT<T>&, const TensorT<T>&, TensorT<T>*);         \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                         \
  template void sigmoid_backward<T>(const TensorT<T>&, const TensorT<T>&, TensorT<T>*);      \
  template TensorT<T> softmax<T>(const TensorT<T>&, int);                                    \
  template void softmax_backward<T>(const TensorT<T>&, const TensorT<T>&, int, TensorT<T>*);

SE2_INSTANTIATE_OPS(float)
SE2_INSTANTIATE_OPS(double)

#undef SE2_INSTANTIATE_OPS

}  // namespace se2
