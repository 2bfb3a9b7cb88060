#pragma once

#include "se2/ops.hpp"
#include "se2/rotation.hpp"
#include "se2/tensor.hpp"

namespace se2 {

/// Feature map on positions x orientations, data laid out [B,N,H,W,C].
/// N=1 degenerates to a plain 2D feature map.
template <class T>
struct SE2ImageT {
  TensorT<T> data;
  int num_orientations = 1;
  int layer_id = -1;  // producing layer, for audit provenance
};

using SE2Image = SE2ImageT<float>;

/// Correlation of a 2D image with the N rotated copies of a 2D kernel
/// bank; lifts [B,H,W,Cin] to [B,N,H-n+1,W-n+1,Cout]. The bank must come
/// from derive() on a lifting KernelBase.
template <class T>
TensorT<T> lifting_forward(const TensorT<T>& image, const KernelBase<T>& k);

/// Accumulates grad_image (optional) and the bank gradient; the bank
/// gradient is pushed through the rotation transpose into k.base.grad.
template <class T>
void lifting_backward(const TensorT<T>& image, KernelBase<T>& k, const TensorT<T>& grad_out,
                      TensorT<T>* grad_image);

/// Group correlation of an SE(2,N) image [B,N,H,W,Cin] with shift-twisted
/// kernels; output [B,N,H-n+1,W-n+1,Cout].
template <class T>
TensorT<T> group_conv_forward(const TensorT<T>& input, const KernelBase<T>& k);

template <class T>
void group_conv_backward(const TensorT<T>& input, KernelBase<T>& k, const TensorT<T>& grad_out,
                         TensorT<T>* grad_input);

enum class Projection { max, mean };

template <class T>
struct ProjectionResult {
  TensorT<T> output;                 // [B,H,W,C]
  std::vector<std::int32_t> argmax;  // orientation index per output element (max mode)
};

/// Reduces the orientation axis of [B,N,H,W,C] to [B,H,W,C].
template <class T>
ProjectionResult<T> projection(const TensorT<T>& input, Projection mode);

template <class T>
void projection_backward(const ProjectionResult<T>& proj, int num_orientations,
                         const TensorT<T>& grad_out, TensorT<T>* grad_input);

/// Batch normalization with per-channel statistics reduced over every
/// axis except the channel axis (batch, orientation, height, width), so
/// SE(2,N) activations normalize identically across orientations.
template <class T>
struct BatchNorm {
  GradPairT<T> gamma, beta;          // [C]
  TensorT<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  // backward cache
  TensorT<T> xhat;
  std::vector<T> inv_std;

  explicit BatchNorm(int channels = 1);

  TensorT<T> forward(const TensorT<T>& x, bool training);
  /// Accumulates gamma/beta grads; returns grad w.r.t. x (training mode).
  TensorT<T> backward(const TensorT<T>& grad_out);
};

/// Max pooling applied independently per orientation slice (leading axes
/// of the tensor pass through maxpool2d untouched).
template <class T>
MaxPoolResult<T> se2_maxpool_spatial(const TensorT<T>& input, int k) {
  return maxpool2d(input, k);
}

template <class T>
struct UpsampleConcatResult {
  TensorT<T> output;  // [B,N,2H,2W,Cf+Cs]
  int crop_i = 0, crop_j = 0;
};

/// Nearest-neighbor 2x spatial upsampling of `input`, center-crop of
/// `skip` to the upsampled extent, concatenation along the channel axis
/// (input channels first).
template <class T>
UpsampleConcatResult<T> upsample_concat(const TensorT<T>& input, const TensorT<T>& skip);

/// grad_input/grad_skip are pre-shaped accumulators.
template <class T>
void upsample_concat_backward(const UpsampleConcatResult<T>& res, const TensorT<T>& grad_out,
                              TensorT<T>* grad_input, TensorT<T>* grad_skip);

enum class HeadActivation { sigmoid, softmax };

/// 1x1 convolution head: weights [Cin, Cout], optional bias [Cout],
/// optional per-class affine (gamma, beta) in place of the bias, followed
/// by sigmoid or softmax. Densely applicable to any spatial extent.
template <class T>
struct FcHead {
  GradPairT<T> weights;  // [Cin, Cout]
  GradPairT<T> bias;     // [Cout]; unused when affine is set
  GradPairT<T> gamma, beta;
  bool affine = false;
  HeadActivation activation = HeadActivation::sigmoid;

  // backward cache
  TensorT<T> in_cache, pre_act, out_cache;

  FcHead() = default;
  FcHead(int in_channels, int out_channels, HeadActivation act, bool affine_head);

  int param_count() const;
  TensorT<T> forward(const TensorT<T>& x);  // x: [B,H,W,Cin]
  TensorT<T> backward(const TensorT<T>& grad_pred);
};

}  // namespace se2
