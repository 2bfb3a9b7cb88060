#include "se2/layers.hpp"

#include <cmath>

namespace se2 {

namespace {

template <class T>
void require_rank(const TensorT<T>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw ConfigError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                      t.shape_str());
}

}  // namespace

template <class T>
TensorT<T> lifting_forward(const TensorT<T>& image, const KernelBase<T>& k) {
  require_rank(image, 4, "lifting_forward input");
  if (k.kind != KernelKind::lifting) throw ConfigError("lifting_forward: kernel kind is not lifting");
  if (image.dim(3) != k.in_channels)
    throw ConfigError("lifting_forward: channel axis mismatch, input C=" +
                      std::to_string(image.dim(3)) + " vs kernel Cin=" +
                      std::to_string(k.in_channels));
  const int B = image.dim(0), H = image.dim(1), W = image.dim(2), Cin = image.dim(3);
  const int n = k.n, N = k.num_orientations, Cout = k.out_channels;
  if (n > H || n > W)
    throw ConfigError("lifting_forward: input " + image.shape_str() + " smaller than kernel " +
                      std::to_string(n));
  const int Ho = H - n + 1, Wo = W - n + 1;
  TensorT<T> out({B, N, Ho, Wo, Cout});
  const std::ptrdiff_t krow = static_cast<std::ptrdiff_t>(n) * Cin * Cout;
  const std::ptrdiff_t kcol = static_cast<std::ptrdiff_t>(Cin) * Cout;
  const std::size_t bank_slice = static_cast<std::size_t>(n) * n * Cin * Cout;
  for (int b = 0; b < B; ++b) {
    const T* in = image.data() + image.offset(b);
    for (int r = 0; r < N; ++r) {
      detail::conv_block_forward(in, W, Cin, k.bank.data() + static_cast<std::size_t>(r) * bank_slice,
                                 n, krow, kcol, out.data() + out.offset(b, r), Ho, Wo, Cout);
    }
  }
  return out;
}

template <class T>
void lifting_backward(const TensorT<T>& image, KernelBase<T>& k, const TensorT<T>& grad_out,
                      TensorT<T>* grad_image) {
  const int B = image.dim(0), W = image.dim(2), Cin = image.dim(3);
  const int n = k.n, N = k.num_orientations, Cout = k.out_channels;
  const int Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  const std::ptrdiff_t krow = static_cast<std::ptrdiff_t>(n) * Cin * Cout;
  const std::ptrdiff_t kcol = static_cast<std::ptrdiff_t>(Cin) * Cout;
  const std::size_t bank_slice = static_cast<std::size_t>(n) * n * Cin * Cout;
  TensorT<T> grad_bank(k.bank.shape());
  for (int b = 0; b < B; ++b) {
    for (int r = 0; r < N; ++r) {
      const T* go = grad_out.data() + grad_out.offset(b, r);
      if (grad_image)
        detail::conv_block_backward_input(grad_image->data() + grad_image->offset(b), W, Cin,
                                          k.bank.data() + static_cast<std::size_t>(r) * bank_slice,
                                          n, krow, kcol, go, Ho, Wo, Cout);
      detail::conv_block_backward_kernel(image.data() + image.offset(b), W, Cin,
                                         grad_bank.data() + static_cast<std::size_t>(r) * bank_slice,
                                         n, krow, kcol, go, Ho, Wo, Cout);
    }
  }
  k.backprop_bank_to_base(grad_bank);
}

namespace {

// The group correlation is evaluated as one im2col per sample followed by
// a small GEMM per output rotation: the patch matrix is independent of the
// rotation index, so a single gather feeds all N shift-twisted kernels,
// and the bank slice [n,n,N,Cin,Cout] is already the row-major right-hand
// operand [n*n*N*Cin x Cout].
template <class T>
void group_im2col(const TensorT<T>& input, int b, int n, TensorT<T>* cols) {
  const int N = input.dim(1), H = input.dim(2), W = input.dim(3), Cin = input.dim(4);
  const int Ho = H - n + 1, Wo = W - n + 1;
  T* dst = cols->data();
  for (int y = 0; y < Ho; ++y)
    for (int x = 0; x < Wo; ++x)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int m = 0; m < N; ++m) {
            const T* src = input.data() + input.offset(b, m, y + i, x + j);
            for (int ci = 0; ci < Cin; ++ci) *dst++ = src[ci];
          }
}

template <class T>
void group_col2im_accum(const TensorT<T>& cols, int b, int n, TensorT<T>* grad_input) {
  const int N = grad_input->dim(1), H = grad_input->dim(2), W = grad_input->dim(3),
            Cin = grad_input->dim(4);
  const int Ho = H - n + 1, Wo = W - n + 1;
  const T* src = cols.data();
  for (int y = 0; y < Ho; ++y)
    for (int x = 0; x < Wo; ++x)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int m = 0; m < N; ++m) {
            T* dst = grad_input->data() + grad_input->offset(b, m, y + i, x + j);
            for (int ci = 0; ci < Cin; ++ci) dst[ci] += *src++;
          }
}

// out[P x Cout] += cols[P x K] . bank[K x Cout], rows blocked by four so a
// bank row is loaded once per block.
template <class T>
void gemm_cols_bank(const T* cols, int P, int K, const T* bank, int Cout, T* out) {
  constexpr int MR = 4;
  int p0 = 0;
  for (; p0 + MR <= P; p0 += MR) {
    const T* c0 = cols + static_cast<std::size_t>(p0) * K;
    const T* c1 = c0 + K;
    const T* c2 = c1 + K;
    const T* c3 = c2 + K;
    T* o0 = out + static_cast<std::size_t>(p0) * Cout;
    T* o1 = o0 + Cout;
    T* o2 = o1 + Cout;
    T* o3 = o2 + Cout;
    for (int k = 0; k < K; ++k) {
      const T* brow = bank + static_cast<std::size_t>(k) * Cout;
      const T a0 = c0[k], a1 = c1[k], a2 = c2[k], a3 = c3[k];
      for (int co = 0; co < Cout; ++co) {
        const T bv = brow[co];
        o0[co] += a0 * bv;
        o1[co] += a1 * bv;
        o2[co] += a2 * bv;
        o3[co] += a3 * bv;
      }
    }
  }
  for (; p0 < P; ++p0) {
    const T* c = cols + static_cast<std::size_t>(p0) * K;
    T* o = out + static_cast<std::size_t>(p0) * Cout;
    for (int k = 0; k < K; ++k) {
      const T* brow = bank + static_cast<std::size_t>(k) * Cout;
      const T a = c[k];
      for (int co = 0; co < Cout; ++co) o[co] += a * brow[co];
    }
  }
}

// grad_cols[P x K] += grad_out[P x Cout] . bank^T
template <class T>
void gemm_gout_bankT(const T* gout, int P, int Cout, const T* bank, int K, T* grad_cols) {
  for (int p = 0; p < P; ++p) {
    const T* g = gout + static_cast<std::size_t>(p) * Cout;
    T* gc = grad_cols + static_cast<std::size_t>(p) * K;
    for (int k = 0; k < K; ++k) {
      const T* brow = bank + static_cast<std::size_t>(k) * Cout;
      T acc = T(0);
      for (int co = 0; co < Cout; ++co) acc += g[co] * brow[co];
      gc[k] += acc;
    }
  }
}

// grad_bank[K x Cout] += cols^T . grad_out[P x Cout]
template <class T>
void gemm_colsT_gout(const T* cols, int P, int K, const T* gout, int Cout, T* grad_bank) {
  for (int p = 0; p < P; ++p) {
    const T* c = cols + static_cast<std::size_t>(p) * K;
    const T* g = gout + static_cast<std::size_t>(p) * Cout;
    for (int k = 0; k < K; ++k) {
      const T a = c[k];
      if (a == T(0)) continue;
      T* gb = grad_bank + static_cast<std::size_t>(k) * Cout;
      for (int co = 0; co < Cout; ++co) gb[co] += a * g[co];
    }
  }
}

}  // namespace

template <class T>
TensorT<T> group_conv_forward(const TensorT<T>& input, const KernelBase<T>& k) {
  require_rank(input, 5, "group_conv_forward input");
  if (k.kind != KernelKind::group)
    throw ConfigError("group_conv_forward: kernel kind is not group");
  if (input.dim(1) != k.num_orientations)
    throw ConfigError("group_conv_forward: orientation axis mismatch, input N=" +
                      std::to_string(input.dim(1)) + " vs kernel N=" +
                      std::to_string(k.num_orientations));
  if (input.dim(4) != k.in_channels)
    throw ConfigError("group_conv_forward: channel axis mismatch, input C=" +
                      std::to_string(input.dim(4)) + " vs kernel Cin=" +
                      std::to_string(k.in_channels));
  const int B = input.dim(0), N = input.dim(1), H = input.dim(2), W = input.dim(3),
            Cin = input.dim(4);
  const int n = k.n, Cout = k.out_channels;
  if (n > H || n > W)
    throw ConfigError("group_conv_forward: input " + input.shape_str() + " smaller than kernel " +
                      std::to_string(n));
  const int Ho = H - n + 1, Wo = W - n + 1;
  const int P = Ho * Wo;
  const int K = n * n * N * Cin;
  TensorT<T> out({B, N, Ho, Wo, Cout});
  TensorT<T> cols({P, K});
  const std::size_t bank_slice = static_cast<std::size_t>(K) * Cout;
  for (int b = 0; b < B; ++b) {
    group_im2col(input, b, n, &cols);
    for (int r = 0; r < N; ++r)
      gemm_cols_bank(cols.data(), P, K, k.bank.data() + static_cast<std::size_t>(r) * bank_slice,
                     Cout, out.data() + out.offset(b, r));
  }
  return out;
}

template <class T>
void group_conv_backward(const TensorT<T>& input, KernelBase<T>& k, const TensorT<T>& grad_out,
                         TensorT<T>* grad_input) {
  const int B = input.dim(0), N = input.dim(1), H = input.dim(2), W = input.dim(3),
            Cin = input.dim(4);
  const int n = k.n, Cout = k.out_channels;
  const int Ho = H - n + 1, Wo = W - n + 1;
  const int P = Ho * Wo;
  const int K = n * n * N * Cin;
  const std::size_t bank_slice = static_cast<std::size_t>(K) * Cout;
  TensorT<T> grad_bank(k.bank.shape());
  TensorT<T> cols({P, K});
  TensorT<T> grad_cols({P, K});
  for (int b = 0; b < B; ++b) {
    group_im2col(input, b, n, &cols);
    if (grad_input) grad_cols.fill(T(0));
    for (int r = 0; r < N; ++r) {
      const T* go = grad_out.data() + grad_out.offset(b, r);
      const T* bank_r = k.bank.data() + static_cast<std::size_t>(r) * bank_slice;
      gemm_colsT_gout(cols.data(), P, K, go, Cout,
                      grad_bank.data() + static_cast<std::size_t>(r) * bank_slice);
      if (grad_input) gemm_gout_bankT(go, P, Cout, bank_r, K, grad_cols.data());
    }
    if (grad_input) group_col2im_accum(grad_cols, b, n, grad_input);
  }
  k.backprop_bank_to_base(grad_bank);
}

template <class T>
ProjectionResult<T> projection(const TensorT<T>& input, Projection mode) {
  require_rank(input, 5, "projection input");
  const int B = input.dim(0), N = input.dim(1), H = input.dim(2), W = input.dim(3),
            C = input.dim(4);
  ProjectionResult<T> res{TensorT<T>({B, H, W, C}), {}};
  const std::size_t plane = static_cast<std::size_t>(H) * W * C;
  if (mode == Projection::mean) {
    // Double accumulation keeps the mean invariant under cyclic shifts of
    // the orientation axis down to the final rounding.
    std::vector<double> acc(plane);
    for (int b = 0; b < B; ++b) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int r = 0; r < N; ++r) {
        const T* in = input.data() + input.offset(b, r);
        for (std::size_t i = 0; i < plane; ++i) acc[i] += static_cast<double>(in[i]);
      }
      T* o = res.output.data() + res.output.offset(b);
      for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<T>(acc[i] / N);
    }
  } else {
    res.argmax.assign(res.output.size(), 0);
    for (int b = 0; b < B; ++b) {
      T* o = res.output.data() + res.output.offset(b);
      std::int32_t* am = res.argmax.data() + static_cast<std::size_t>(b) * plane;
      const T* first = input.data() + input.offset(b, 0);
      for (std::size_t i = 0; i < plane; ++i) o[i] = first[i];
      for (int r = 1; r < N; ++r) {
        const T* in = input.data() + input.offset(b, r);
        for (std::size_t i = 0; i < plane; ++i) {
          if (in[i] > o[i]) {
            o[i] = in[i];
            am[i] = r;
          }
        }
      }
    }
  }
  return res;
}

template <class T>
void projection_backward(const ProjectionResult<T>& proj, int num_orientations,
                         const TensorT<T>& grad_out, TensorT<T>* grad_input) {
  const int B = grad_out.dim(0);
  const std::size_t plane = grad_out.size() / static_cast<std::size_t>(B);
  if (proj.argmax.empty()) {
    const T scale = T(1) / static_cast<T>(num_orientations);
    for (int b = 0; b < B; ++b) {
      const T* go = grad_out.data() + grad_out.offset(b);
      for (int r = 0; r < num_orientations; ++r) {
        T* gi = grad_input->data() + grad_input->offset(b, r);
        for (std::size_t i = 0; i < plane; ++i) gi[i] += go[i] * scale;
      }
    }
  } else {
    for (int b = 0; b < B; ++b) {
      const T* go = grad_out.data() + grad_out.offset(b);
      const std::int32_t* am = proj.argmax.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        T* gi = grad_input->data() + grad_input->offset(b, am[i]);
        gi[i] += go[i];
      }
    }
  }
}

template <class T>
BatchNorm<T>::BatchNorm(int channels)
    : gamma({channels}), beta({channels}), running_mean({channels}), running_var({channels}) {
  gamma.value.fill(T(1));
  running_var.fill(T(1));
}

template <class T>
TensorT<T> BatchNorm<T>::forward(const TensorT<T>& x, bool training) {
  const int C = x.dim(-1);
  if (C != static_cast<int>(gamma.value.size()))
    throw ConfigError("batchnorm: channel axis " + std::to_string(C) + " does not match state " +
                      std::to_string(gamma.value.size()));
  const std::size_t rows = x.size() / static_cast<std::size_t>(C);
  if (training && x.dim(0) < 2)
    throw ConfigError("batchnorm: training mode needs batch size >= 2, got " +
                      std::to_string(x.dim(0)));

  TensorT<T> out(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(C), T(0));
  std::vector<T> var(static_cast<std::size_t>(C), T(0));
  if (training) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* px = x.data() + r * static_cast<std::size_t>(C);
      for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] += px[c];
    }
    const T inv_rows = T(1) / static_cast<T>(rows);
    for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] *= inv_rows;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* px = x.data() + r * static_cast<std::size_t>(C);
      for (int c = 0; c < C; ++c) {
        const T d = px[c] - mean[static_cast<std::size_t>(c)];
        var[static_cast<std::size_t>(c)] += d * d;
      }
    }
    for (int c = 0; c < C; ++c) var[static_cast<std::size_t>(c)] *= inv_rows;
    for (int c = 0; c < C; ++c) {
      running_mean[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * running_mean[static_cast<std::size_t>(c)] +
          momentum * mean[static_cast<std::size_t>(c)];
      running_var[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * running_var[static_cast<std::size_t>(c)] +
          momentum * var[static_cast<std::size_t>(c)];
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
      var[static_cast<std::size_t>(c)] = running_var[static_cast<std::size_t>(c)];
    }
  }

  inv_std.assign(static_cast<std::size_t>(C), T(0));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] =
        T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  xhat = TensorT<T>(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.data() + r * static_cast<std::size_t>(C);
    T* ph = xhat.data() + r * static_cast<std::size_t>(C);
    T* po = out.data() + r * static_cast<std::size_t>(C);
    for (int c = 0; c < C; ++c) {
      const std::size_t sc = static_cast<std::size_t>(c);
      ph[c] = (px[c] - mean[sc]) * inv_std[sc];
      po[c] = gamma.value[sc] * ph[c] + beta.value[sc];
    }
  }
  return out;
}

template <class T>
TensorT<T> BatchNorm<T>::backward(const TensorT<T>& grad_out) {
  const int C = grad_out.dim(-1);
  const std::size_t rows = grad_out.size() / static_cast<std::size_t>(C);
  std::vector<T> sum_dy(static_cast<std::size_t>(C), T(0));
  std::vector<T> sum_dy_xhat(static_cast<std::size_t>(C), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* gy = grad_out.data() + r * static_cast<std::size_t>(C);
    const T* ph = xhat.data() + r * static_cast<std::size_t>(C);
    for (int c = 0; c < C; ++c) {
      sum_dy[static_cast<std::size_t>(c)] += gy[c];
      sum_dy_xhat[static_cast<std::size_t>(c)] += gy[c] * ph[c];
    }
  }
  for (int c = 0; c < C; ++c) {
    gamma.grad[static_cast<std::size_t>(c)] += sum_dy_xhat[static_cast<std::size_t>(c)];
    beta.grad[static_cast<std::size_t>(c)] += sum_dy[static_cast<std::size_t>(c)];
  }
  TensorT<T> grad_x(grad_out.shape());
  const T inv_rows = T(1) / static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* gy = grad_out.data() + r * static_cast<std::size_t>(C);
    const T* ph = xhat.data() + r * static_cast<std::size_t>(C);
    T* gx = grad_x.data() + r * static_cast<std::size_t>(C);
    for (int c = 0; c < C; ++c) {
      const std::size_t sc = static_cast<std::size_t>(c);
      gx[c] = gamma.value[sc] * inv_std[sc] *
              (gy[c] - inv_rows * sum_dy[sc] - ph[c] * inv_rows * sum_dy_xhat[sc]);
    }
  }
  return grad_x;
}

template <class T>
UpsampleConcatResult<T> upsample_concat(const TensorT<T>& input, const TensorT<T>& skip) {
  require_rank(input, 5, "upsample_concat input");
  require_rank(skip, 5, "upsample_concat skip");
  if (input.dim(0) != skip.dim(0) || input.dim(1) != skip.dim(1))
    throw ConfigError("upsample_concat: batch/orientation axes differ: " + input.shape_str() +
                      " vs " + skip.shape_str());
  const int B = input.dim(0), N = input.dim(1), H = input.dim(2), W = input.dim(3),
            Cf = input.dim(4);
  const int Hs = skip.dim(2), Ws = skip.dim(3), Cs = skip.dim(4);
  const int Hu = 2 * H, Wu = 2 * W;
  if (Hs < Hu || Ws < Wu)
    throw ConfigError("upsample_concat: skip extent " + skip.shape_str() +
                      " smaller than upsampled extent " + std::to_string(Hu) + "x" +
                      std::to_string(Wu));
  if ((Hs - Hu) % 2 != 0 || (Ws - Wu) % 2 != 0)
    throw ConfigError("upsample_concat: parity mismatch prevents an exact center crop (" +
                      std::to_string(Hs) + "->" + std::to_string(Hu) + ", " + std::to_string(Ws) +
                      "->" + std::to_string(Wu) + ")");
  UpsampleConcatResult<T> res;
  res.crop_i = (Hs - Hu) / 2;
  res.crop_j = (Ws - Wu) / 2;
  res.output = TensorT<T>({B, N, Hu, Wu, Cf + Cs});
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < N; ++r)
      for (int y = 0; y < Hu; ++y)
        for (int x = 0; x < Wu; ++x) {
          T* o = res.output.data() + res.output.offset(b, r, y, x);
          const T* fi = input.data() + input.offset(b, r, y / 2, x / 2);
          for (int c = 0; c < Cf; ++c) o[c] = fi[c];
          const T* sk = skip.data() + skip.offset(b, r, res.crop_i + y, res.crop_j + x);
          for (int c = 0; c < Cs; ++c) o[Cf + c] = sk[c];
        }
  return res;
}

template <class T>
void upsample_concat_backward(const UpsampleConcatResult<T>& res, const TensorT<T>& grad_out,
                              TensorT<T>* grad_input, TensorT<T>* grad_skip) {
  const int B = grad_out.dim(0), N = grad_out.dim(1), Hu = grad_out.dim(2), Wu = grad_out.dim(3);
  const int Cf = grad_input->dim(4);
  const int Cs = grad_skip->dim(4);
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < N; ++r)
      for (int y = 0; y < Hu; ++y)
        for (int x = 0; x < Wu; ++x) {
          const T* go = grad_out.data() + grad_out.offset(b, r, y, x);
          T* gi = grad_input->data() + grad_input->offset(b, r, y / 2, x / 2);
          for (int c = 0; c < Cf; ++c) gi[c] += go[c];
          T* gs = grad_skip->data() + grad_skip->offset(b, r, res.crop_i + y, res.crop_j + x);
          for (int c = 0; c < Cs; ++c) gs[c] += go[Cf + c];
        }
}

template <class T>
FcHead<T>::FcHead(int in_channels, int out_channels, HeadActivation act, bool affine_head)
    : weights({in_channels, out_channels}),
      bias({out_channels}),
      gamma({out_channels}),
      beta({out_channels}),
      affine(affine_head),
      activation(act) {
  gamma.value.fill(T(1));
}

template <class T>
int FcHead<T>::param_count() const {
  const int w = static_cast<int>(weights.value.size());
  return affine ? w + 2 * static_cast<int>(gamma.value.size())
                : w + static_cast<int>(bias.value.size());
}

template <class T>
TensorT<T> FcHead<T>::forward(const TensorT<T>& x) {
  require_rank(x, 4, "fc_head input");
  const int Cin = weights.value.dim(0), Cout = weights.value.dim(1);
  if (x.dim(3) != Cin)
    throw ConfigError("fc_head: channel axis mismatch, input C=" + std::to_string(x.dim(3)) +
                      " vs head Cin=" + std::to_string(Cin));
  const std::size_t px = x.size() / static_cast<std::size_t>(Cin);
  // pre_act keeps the raw projection x.W; the affine/bias shift is applied
  // into a separate tensor so backward can reuse the raw values.
  pre_act = TensorT<T>({x.dim(0), x.dim(1), x.dim(2), Cout});
  TensorT<T> z(pre_act.shape());
  for (std::size_t p = 0; p < px; ++p) {
    const T* xi = x.data() + p * static_cast<std::size_t>(Cin);
    T* raw = pre_act.data() + p * static_cast<std::size_t>(Cout);
    T* zo = z.data() + p * static_cast<std::size_t>(Cout);
    for (int ci = 0; ci < Cin; ++ci) {
      const T a = xi[ci];
      const T* w = weights.value.data() + static_cast<std::size_t>(ci) * Cout;
      for (int co = 0; co < Cout; ++co) raw[co] += a * w[co];
    }
    for (int co = 0; co < Cout; ++co) {
      const std::size_t sco = static_cast<std::size_t>(co);
      zo[co] = affine ? gamma.value[sco] * raw[co] + beta.value[sco] : raw[co] + bias.value[sco];
    }
  }
  in_cache = x;
  out_cache = activation == HeadActivation::sigmoid ? sigmoid(z) : softmax(z, 3);
  return out_cache;
}

template <class T>
TensorT<T> FcHead<T>::backward(const TensorT<T>& grad_pred) {
  const int Cin = weights.value.dim(0), Cout = weights.value.dim(1);
  TensorT<T> grad_z(pre_act.shape());
  if (activation == HeadActivation::sigmoid)
    sigmoid_backward(out_cache, grad_pred, &grad_z);
  else
    softmax_backward(out_cache, grad_pred, 3, &grad_z);

  const std::size_t px = in_cache.size() / static_cast<std::size_t>(Cin);
  TensorT<T> grad_x(in_cache.shape());
  for (std::size_t p = 0; p < px; ++p) {
    const T* xi = in_cache.data() + p * static_cast<std::size_t>(Cin);
    const T* gz = grad_z.data() + p * static_cast<std::size_t>(Cout);
    T* gx = grad_x.data() + p * static_cast<std::size_t>(Cin);
    const T* raw = pre_act.data() + p * static_cast<std::size_t>(Cout);
    for (int co = 0; co < Cout; ++co) {
      const std::size_t sco = static_cast<std::size_t>(co);
      T g = gz[co];
      if (affine) {
        gamma.grad[sco] += g * raw[co];
        beta.grad[sco] += g;
        g *= gamma.value[sco];
      } else {
        bias.grad[sco] += g;
      }
      for (int ci = 0; ci < Cin; ++ci) {
        weights.grad[static_cast<std::size_t>(ci) * Cout + sco] += g * xi[ci];
        gx[ci] += g * weights.value[static_cast<std::size_t>(ci) * Cout + sco];
      }
    }
  }
  return grad_x;
}

#define SE2_INSTANTIATE_LAYERS(T)                                                            \
  template TensorT<T> lifting_forward<T>(const TensorT<T>&, const KernelBase<T>&);           \
  template void lifting_backward<T>(const TensorT<T>&, KernelBase<T>&, const TensorT<T>&,    \
                                    TensorT<T>*);                                            \
  template TensorT<T> group_conv_forward<T>(const TensorT<T>&, const KernelBase<T>&);        \
  template void group_conv_backward<T>(const TensorT<T>&, KernelBase<T>&, const TensorT<T>&, \
                                       TensorT<T>*);                                         \
  template ProjectionResult<T> projection<T>(const TensorT<T>&, Projection);                 \
  template void projection_backward<T>(const ProjectionResult<T>&, int, const TensorT<T>&,   \
                                       TensorT<T>*);                                         \
  template struct BatchNorm<T>;                                                              \
  template UpsampleConcatResult<T> upsample_concat<T>(const TensorT<T>&, const TensorT<T>&); \
  template void upsample_concat_backward<T>(const UpsampleConcatResult<T>&,                  \
                                            const TensorT<T>&, TensorT<T>*, TensorT<T>*);    \
  template struct FcHead<T>;

SE2_INSTANTIATE_LAYERS(float)
SE2_INSTANTIATE_LAYERS(double)

#undef SE2_INSTANTIATE_LAYERS

}  // namespace se2
