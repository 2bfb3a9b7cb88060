#pragma once

#include <memory>
#include <vector>

#include "se2/tensor.hpp"

namespace se2 {

/// Disk-shaped kernel support: active(i,j) iff the pixel center lies within
/// `radius` of the grid center. For n=5, radius=2.5 this keeps 21 positions.
class CircularMask {
 public:
  CircularMask(int n, double radius);

  int n() const { return n_; }
  double radius() const { return radius_; }
  bool active(int i, int j) const { return active_[static_cast<std::size_t>(i * n_ + j)] != 0; }
  bool active_flat(int t) const { return active_[static_cast<std::size_t>(t)] != 0; }
  int active_count() const { return active_count_; }

 private:
  int n_;
  double radius_;
  std::vector<unsigned char> active_;
  int active_count_ = 0;
};

/// Sparse resampling operator carrying a kernel to its rotated copy.
/// Each active target pixel stores up to 4 (source pixel, bilinear weight)
/// pairs; contributions from masked-out source neighbors are dropped
/// without renormalization. Exact identity at theta=0 and an exact
/// permutation at multiples of pi/2.
struct RotationOperator {
  struct Entry {
    int source;     // flat source pixel index
    double weight;  // bilinear weight
  };
  struct Row {
    int target;  // flat target pixel index
    std::vector<Entry> entries;
    double weight_sum = 0.0;  // 1 when no neighbor was dropped
    bool complete = false;    // all four bilinear neighbors were in the mask
  };

  int n = 0;
  double theta = 0.0;
  std::vector<Row> rows;  // one row per active target pixel
};

/// Builds the bilinear rotation operator for an n x n grid (n odd) at angle
/// `theta`. The source position for target p is R_{-theta} (p - c) + c with
/// c the grid center, pixel pairs treated as plain 2-vectors.
RotationOperator build_rotation_operator(int n, double theta, const CircularMask& mask);

/// Rotation operators for all N angles theta_i = 2*pi*i/N, cached per
/// (n, N, radius); immutable and freely shareable between layers.
using RotationSet = std::vector<RotationOperator>;
std::shared_ptr<const RotationSet> rotation_set(int n, int num_orientations, double radius);

enum class KernelKind { lifting, group };

/// Trainable base weights of one layer plus the derived rotated kernel
/// bank. Base shape is [n,n,Cin,Cout] (lifting) or [n,n,N,Cin,Cout]
/// (group); the bank prepends a rotation axis of extent N. Only base
/// weights train; the bank is regenerated after every update.
template <class T>
struct KernelBase {
  KernelKind kind = KernelKind::lifting;
  int n = 0;
  int num_orientations = 1;
  int in_channels = 0;
  int out_channels = 0;
  CircularMask mask{1, 0.5};
  std::shared_ptr<const RotationSet> rotations;
  GradPairT<T> base;
  TensorT<T> bank;

  static KernelBase make(KernelKind kind, int n, int num_orientations, int in_channels,
                         int out_channels, double mask_radius);

  /// Trainable weights: active positions x (N if group) x Cin x Cout.
  int param_count() const;

  /// Zeroes base values (and grads) at masked-out positions.
  void apply_mask();

  /// Regenerates the rotated bank from the base weights.
  void derive();

  /// Accumulates d(loss)/d(base) into base.grad given d(loss)/d(bank);
  /// exact transpose of derive().
  void backprop_bank_to_base(const TensorT<T>& grad_bank);
};

/// Bank of spatially rotated 2D kernels, one slice per orientation.
template <class T>
TensorT<T> derive_bank_lifting(const KernelBase<T>& k);

/// Bank of shift-twisted 3D kernels: slice j applies the spatial rotation
/// by theta_j and shifts the orientation axis of the base by j.
template <class T>
TensorT<T> derive_bank_group(const KernelBase<T>& k);

}  // namespace se2
