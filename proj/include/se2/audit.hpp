#pragma once

#include <functional>
#include <vector>

#include "se2/model.hpp"
#include "se2/tensor.hpp"

namespace se2 {

/// Bilinear rotation of a square [H,W,C] image about its center; exact
/// permutation at multiples of pi/2, reflection padding for out-of-frame
/// samples.
template <class T>
TensorT<T> rotate_input(const TensorT<T>& image, double theta);

/// Cyclic shift by `shift` along the orientation axis combined with the
/// spatial rotation of every slice: the representation of a rotation on
/// SE(2,N) activations [B,N,H,W,C].
template <class T>
TensorT<T> shift_twist(const TensorT<T>& se2_activation, int shift, double theta);

/// Model predictions on the input rotated through `steps` angles
/// 2*pi*k/steps. Scalar heads report the mean prediction over the output
/// map; multi-class heads report the mean probability of `stat_class`.
template <class T>
std::vector<double> polar_response(ModelT<T>& model, const TensorT<T>& image, int steps = 16,
                                   int stat_class = -1);

struct EquivarianceError {
  double max_abs = 0.0;
  double mean_abs = 0.0;
};

/// Compares prefix(rotate(f)) against shift_twist(prefix(f)) on a centered
/// crop with `crop` pixels dropped per side. theta must be 2*pi*j/N, and
/// pooling layers may only be included when theta is a multiple of pi/2.
template <class T>
EquivarianceError equivariance_error(ModelT<T>& model, const TensorT<T>& image, int theta_index,
                                     int layer_prefix, int crop, bool include_pool = false);

template <class T>
struct AlignedStats {
  TensorT<T> mean_map;  // [H,W,C] of the dense prediction
  TensorT<T> std_map;
  double mean_std = 0.0;
  double max_std = 0.0;
};

/// Rotates the input through `steps` angles, predicts densely, rotates each
/// prediction back, and accumulates per-pixel mean/std maps.
template <class T>
AlignedStats<T> aligned_prediction_stats(ModelT<T>& model, const TensorT<T>& image, int steps);

/// Population variance of a response vector.
double response_variance(const std::vector<double>& response);

}  // namespace se2
