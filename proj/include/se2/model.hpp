#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "se2/layers.hpp"
#include "se2/rotation.hpp"
#include "se2/tensor.hpp"

namespace se2 {

/// One conv block row: lifting or group correlation followed by BN + ReLU,
/// optionally preceded by 2x upsample + skip concat and followed by max
/// pooling.
struct BlockSpec {
  KernelKind type = KernelKind::group;
  int out_channels = 0;
  int kernel = 5;       // 5x5 masked or 1x1
  int pool = 1;         // spatial max pool after the block, 1 = none
  int concat_from = 0;  // 1-based index of the skip source block, 0 = none
};

struct HeadSpec {
  int classes = 1;
  HeadActivation activation = HeadActivation::sigmoid;
};

struct ModelConfig {
  std::string task = "custom";
  int num_orientations = 1;
  int input_size = 0;  // reference square input extent
  int input_channels = 0;
  int kernel_size = 5;
  double mask_radius = 2.5;
  std::vector<BlockSpec> blocks;
  std::optional<Projection> projection;
  HeadSpec head;
  /// Strict table match for the 3-class head: per-class affine (2 params
  /// per class) instead of a plain bias.
  bool table_affine_head = false;
};

/// Preset configurations: task in {mitosis, nuclei, tumor, synth-cls},
/// N in {1, 4, 8, 16}.
ModelConfig preset_config(const std::string& task, int num_orientations,
                          bool table_affine_head = false);

template <class T>
struct ConvBlock {
  BlockSpec spec;
  KernelBase<T> kernels;
  BatchNorm<T> bn;

  // forward stash for backward and skip taps
  UpsampleConcatResult<T> uc;
  TensorT<T> pre_bn;
  TensorT<T> bn_out;
  TensorT<T> act;  // post-ReLU, pre-pool (skip source)
  MaxPoolResult<T> pooled;

  const TensorT<T>& output() const { return spec.pool > 1 ? pooled.output : act; }
};

template <class T>
class ModelT {
 public:
  ModelConfig config;
  std::vector<ConvBlock<T>> blocks;
  FcHead<T> head;

  static ModelT build(const ModelConfig& config, std::uint64_t seed);

  /// Inference/training forward: input [B,H,W,Cin] -> predictions
  /// [B,Ho,Wo,classes]. Training mode updates BN running statistics.
  TensorT<T> forward(const TensorT<T>& input, bool training = false);

  /// Backward from d(loss)/d(predictions); accumulates parameter grads and
  /// returns d(loss)/d(input). Requires a preceding training-mode forward.
  TensorT<T> backward(const TensorT<T>& grad_pred);

  /// Activation after `num_blocks` blocks; pooling layers can be skipped
  /// so off-grid angles stay comparable.
  SE2ImageT<T> forward_prefix(const TensorT<T>& input, int num_blocks, bool include_pool);

  struct ParamRef {
    GradPairT<T>* p;
    bool decay;
    std::string name;
  };
  std::vector<ParamRef> params();

  struct LayerCount {
    std::string name;
    long long count;
  };
  std::vector<LayerCount> param_breakdown() const;
  long long param_total() const;

  /// Side length of the input patch influencing one output pixel.
  int receptive_field() const;

  /// Smallest square input the model accepts (>= 1x1 output map).
  int min_input_extent() const;

  void zero_grads();
  /// Refreshes every rotated kernel bank from the base weights and
  /// re-zeroes masked positions; call after each optimizer step.
  void refresh_banks();

  /// Checkpoint: directory with a key=value manifest plus one SE2T file
  /// per parameter/state block.
  void save(const std::filesystem::path& dir) const;
  static ModelT load(const std::filesystem::path& dir);

 private:
  TensorT<T> input_stash_;
  ProjectionResult<T> proj_;
};

using Model = ModelT<float>;
using ModelD = ModelT<double>;

/// Parses/serializes the manifest `blocks=` entry (type:out:kernel:pool:concat).
std::string encode_blocks(const std::vector<BlockSpec>& blocks);
std::vector<BlockSpec> decode_blocks(const std::string& text);

}  // namespace se2
