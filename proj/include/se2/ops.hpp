#pragma once

#include <cstdint>
#include <vector>

#include "se2/tensor.hpp"

namespace se2 {

/// Valid (no-padding) cross-correlation.
///   input  [B, H, W, Cin]
///   kernels[n, n, Cin, Cout]
///   output [B, H-n+1, W-n+1, Cout]
/// out[b,y,x,co] = sum_{i,j,ci} kernels(i,j,ci,co) * input(b,y+i,x+j,ci)
template <class T>
TensorT<T> conv2d_valid(const TensorT<T>& input, const TensorT<T>& kernels);

/// Accumulates gradients w.r.t. input and/or kernels into the supplied
/// tensors (either may be null). Shapes must already match.
template <class T>
void conv2d_valid_backward(const TensorT<T>& input, const TensorT<T>& kernels,
                           const TensorT<T>& grad_out, TensorT<T>* grad_input,
                           TensorT<T>* grad_kernels);

template <class T>
struct MaxPoolResult {
  TensorT<T> output;
  std::vector<std::int32_t> argmax;  // flat input index per output element
};

/// Non-overlapping k x k max pooling over the trailing [H, W, C] axes;
/// leading axes pass through. H or W not divisible by k is trimmed from
/// the end. Ties go to the first index in scan order.
template <class T>
MaxPoolResult<T> maxpool2d(const TensorT<T>& input, int k);

template <class T>
void maxpool2d_backward(const MaxPoolResult<T>& pooled, const TensorT<T>& grad_out,
                        TensorT<T>* grad_input);

template <class T>
TensorT<T> relu(const TensorT<T>& x);
template <class T>
void relu_backward(const TensorT<T>& x, const TensorT<T>& grad_out, TensorT<T>* grad_x);

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x);
/// Backward in terms of the forward output y = sigmoid(x).
template <class T>
void sigmoid_backward(const TensorT<T>& y, const TensorT<T>& grad_out, TensorT<T>* grad_x);

template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis);
template <class T>
void softmax_backward(const TensorT<T>& y, const TensorT<T>& grad_out, int axis,
                      TensorT<T>* grad_x);

namespace detail {

/// Core block used by all convolution layers. Accumulates into `out`.
/// in: [H, W, Cin] contiguous; kernel element (i,j,ci,co) lives at
/// kernel[i*krow + j*kcol + ci*Cout + co] which allows slicing rotated
/// banks without copying.
template <class T>
void conv_block_forward(const T* in, int W, int Cin, const T* kernel, int n,
                        std::ptrdiff_t krow, std::ptrdiff_t kcol, T* out, int Ho, int Wo,
                        int Cout);

template <class T>
void conv_block_backward_input(T* grad_in, int W, int Cin, const T* kernel, int n,
                               std::ptrdiff_t krow, std::ptrdiff_t kcol, const T* grad_out,
                               int Ho, int Wo, int Cout);

template <class T>
void conv_block_backward_kernel(const T* in, int W, int Cin, T* grad_kernel, int n,
                                std::ptrdiff_t krow, std::ptrdiff_t kcol, const T* grad_out,
                                int Ho, int Wo, int Cout);

}  // namespace detail

}  // namespace se2
