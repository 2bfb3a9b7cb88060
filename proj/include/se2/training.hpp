#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "se2/model.hpp"
#include "se2/rng.hpp"
#include "se2/tensor.hpp"

namespace se2 {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double lr_decay_factor = 0.5;  // per epoch
  double weight_decay = 5e-4;    // decoupled
  int batch_size = 64;
  int epochs = 10;
  int patience = 5;  // early stop on validation loss
  std::uint64_t seed = 0;
};

/// Momentum buffers, one per parameter block, in params() order.
template <class T>
struct SgdState {
  std::vector<TensorT<T>> velocity;
};

/// v <- mu v + g; w <- w - lr v - lr lambda w. The decoupled decay term
/// multiplies the weight directly and skips BN gammas/betas and biases
/// (blocks whose ParamRef has decay == false).
template <class T>
void sgd_step(std::vector<typename ModelT<T>::ParamRef>& params, SgdState<T>& state,
              double lr, double momentum, double weight_decay);

/// Mean binary cross-entropy over a [B,...,1] sigmoid prediction map;
/// labels in {0,1} per batch entry. Fills grad (same shape as pred).
template <class T>
double bce_loss(const TensorT<T>& pred, const std::vector<int>& labels, TensorT<T>* grad);

/// Class-weighted cross-entropy over a [B,H,W,K] softmax map against an
/// integer mask [B,H,W]; mean over batch and pixels.
template <class T>
double weighted_ce3_loss(const TensorT<T>& pred, const std::vector<int>& mask,
                         const std::vector<double>& class_weights, TensorT<T>* grad);

/// Augmentation draws, separated from the RNG so tests can force them.
struct AugmentDraws {
  bool transpose = false;
  int rot90 = 0;  // quarter turns
  std::vector<double> brightness;  // per-channel shift on [0,1] scale
};

AugmentDraws draw_augment(Rng& rng, int channels, double brightness_range = 0.1);

/// Applies transposition, 90-degree-wise rotation and per-channel
/// brightness shift (clipped to [0,1]) to a [H,W,C] patch; the integer
/// mask (H*W, optional) is co-transformed.
template <class T>
void augment_patch(TensorT<T>* patch, std::vector<int>* mask, const AugmentDraws& draws);

struct SampleRef {
  std::string relpath;
  int label = -1;           // classification
  std::string maskpath;     // segmentation
  int group = 0;
};

struct Dataset {
  std::filesystem::path dir;
  std::vector<SampleRef> samples;
  bool segmentation = false;

  Tensor load_patch(std::size_t index) const;
  std::vector<int> load_mask(std::size_t index) const;  // H*W class ids
};

/// Reads `dir`/manifest.csv (columns relpath,label|maskpath,group).
Dataset load_dataset(const std::filesystem::path& dir);

struct SynthSpec {
  std::uint64_t seed = 0;
  int n_per_class = 100;
  int size = 32;
  bool segmentation = false;  // 3-class object/background/boundary variant
};

/// Writes a deterministic synthetic dataset: class A = bright disk with a
/// one-sided tail at a random orientation, class B = symmetric disk of
/// matched total intensity; Gaussian noise sigma 0.05. The segmentation
/// variant scatters disks and emits object/background/boundary masks.
void synth_dataset(const SynthSpec& spec, const std::filesystem::path& dir);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

/// SGD training loop with per-epoch lr decay, class-balanced batches,
/// augmentation, early stopping, and best-validation checkpointing into
/// `out_dir`/checkpoint. History is written to `out_dir`/history.csv.
template <class T>
TrainResult train(ModelT<T>& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const std::filesystem::path& out_dir);

/// Classification accuracy (threshold 0.5) or segmentation pixel accuracy
/// on the central crop matching the model's output map.
template <class T>
double evaluate_accuracy(ModelT<T>& model, const Dataset& data, int batch_size = 64);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochStats>& history);

}  // namespace se2
