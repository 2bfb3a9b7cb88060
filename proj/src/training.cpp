#include "se2/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "se2/group.hpp"
#include "se2/tensor_io.hpp"

namespace se2 {

template <class T>
void sgd_step(std::vector<typename ModelT<T>::ParamRef>& params, SgdState<T>& state, double lr,
              double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (auto& ref : params) state.velocity.emplace_back(ref.p->value.shape());
  }
  if (state.velocity.size() != params.size())
    throw ConfigError("sgd_step: velocity state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].p;
    auto& v = state.velocity[i];
    const T mu = static_cast<T>(momentum);
    const T step = static_cast<T>(lr);
    const T decay = params[i].decay ? static_cast<T>(lr * weight_decay) : T(0);
    for (std::size_t q = 0; q < p.value.size(); ++q) {
      const T g = p.grad[q];
      if (!std::isfinite(static_cast<double>(g)))
        throw DiagnosticError("sgd_step: non-finite gradient in " + params[i].name);
      v[q] = mu * v[q] + g;
      p.value[q] -= step * v[q] + decay * p.value[q];
    }
  }
}

template <class T>
double bce_loss(const TensorT<T>& pred, const std::vector<int>& labels, TensorT<T>* grad) {
  const int B = pred.dim(0);
  if (static_cast<std::size_t>(B) != labels.size())
    throw DataError("bce_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                    std::to_string(B));
  if (pred.size() != static_cast<std::size_t>(B))
    throw ConfigError("bce_loss: prediction must be one scalar per sample, got " +
                      pred.shape_str());
  double loss = 0;
  const double eps = 1e-7;
  for (int b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y != 0 && y != 1) throw DataError("bce_loss: label " + std::to_string(y) + " outside {0,1}");
    const double p = std::clamp(static_cast<double>(pred[static_cast<std::size_t>(b)]), eps,
                                1.0 - eps);
    loss += y == 1 ? -std::log(p) : -std::log(1.0 - p);
    if (grad)
      (*grad)[static_cast<std::size_t>(b)] =
          static_cast<T>((y == 1 ? -1.0 / p : 1.0 / (1.0 - p)) / B);
  }
  return loss / B;
}

template <class T>
double weighted_ce3_loss(const TensorT<T>& pred, const std::vector<int>& mask,
                         const std::vector<double>& class_weights, TensorT<T>* grad) {
  const int K = pred.dim(-1);
  const std::size_t px = pred.size() / static_cast<std::size_t>(K);
  if (mask.size() != px)
    throw DataError("weighted_ce3_loss: mask has " + std::to_string(mask.size()) +
                    " pixels, prediction map has " + std::to_string(px));
  if (static_cast<int>(class_weights.size()) != K)
    throw ConfigError("weighted_ce3_loss: need one weight per class");
  double loss = 0;
  const double eps = 1e-7;
  for (std::size_t i = 0; i < px; ++i) {
    const int c = mask[i];
    if (c < 0 || c >= K)
      throw DataError("weighted_ce3_loss: class " + std::to_string(c) + " outside [0," +
                      std::to_string(K) + ")");
    const double w = class_weights[static_cast<std::size_t>(c)];
    const double p =
        std::clamp(static_cast<double>(pred[i * static_cast<std::size_t>(K) +
                                            static_cast<std::size_t>(c)]),
                   eps, 1.0 - eps);
    loss += -w * std::log(p);
    if (grad)
      (*grad)[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(c)] =
          static_cast<T>(-w / p / static_cast<double>(px));
  }
  return loss / static_cast<double>(px);
}

AugmentDraws draw_augment(Rng& rng, int channels, double brightness_range) {
  AugmentDraws d;
  d.transpose = rng.coin();
  d.rot90 = rng.uniform_int(0, 3);
  d.brightness.resize(static_cast<std::size_t>(channels));
  for (auto& b : d.brightness) b = rng.uniform(-brightness_range, brightness_range);
  return d;
}

namespace {

template <class T>
void transpose_patch(TensorT<T>* patch, std::vector<int>* mask) {
  const int H = patch->dim(0), W = patch->dim(1), C = patch->dim(2);
  TensorT<T> out({W, H, C});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < C; ++c) out(j, i, c) = (*patch)(i, j, c);
  *patch = std::move(out);
  if (mask) {
    std::vector<int> m(mask->size());
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        m[static_cast<std::size_t>(j * H + i)] = (*mask)[static_cast<std::size_t>(i * W + j)];
    *mask = std::move(m);
  }
}

template <class T>
void rot90_patch(TensorT<T>* patch, std::vector<int>* mask) {
  const int H = patch->dim(0), W = patch->dim(1), C = patch->dim(2);
  TensorT<T> out(patch->shape());
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < C; ++c) out(i, j, c) = (*patch)(j, H - 1 - i, c);
  *patch = std::move(out);
  if (mask) {
    std::vector<int> m(mask->size());
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        m[static_cast<std::size_t>(i * W + j)] =
            (*mask)[static_cast<std::size_t>(j * W + (H - 1 - i))];
    *mask = std::move(m);
  }
}

}  // namespace

template <class T>
void augment_patch(TensorT<T>* patch, std::vector<int>* mask, const AugmentDraws& draws) {
  if (patch->dim(0) != patch->dim(1))
    throw ConfigError("augment_patch: patch must be square, got " + patch->shape_str());
  if (draws.transpose) transpose_patch(patch, mask);
  for (int k = 0; k < draws.rot90; ++k) rot90_patch(patch, mask);
  const int C = patch->dim(2);
  if (static_cast<int>(draws.brightness.size()) != C)
    throw ConfigError("augment_patch: brightness draws do not match channel count");
  for (std::size_t i = 0; i < patch->size(); i += static_cast<std::size_t>(C))
    for (int c = 0; c < C; ++c) {
      double v = static_cast<double>((*patch)[i + static_cast<std::size_t>(c)]) +
                 draws.brightness[static_cast<std::size_t>(c)];
      (*patch)[i + static_cast<std::size_t>(c)] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
}

Tensor Dataset::load_patch(std::size_t index) const {
  return read_se2t(dir / samples[index].relpath);
}

std::vector<int> Dataset::load_mask(std::size_t index) const {
  Tensor m = read_se2t(dir / samples[index].maskpath);
  std::vector<int> out(m.size() / static_cast<std::size_t>(m.dim(-1)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(std::lround(m[i]));
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.csv";
  std::ifstream is(manifest);
  if (!is) throw DataError("cannot open manifest: " + manifest.string());
  Dataset ds;
  ds.dir = dir;
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty manifest: " + manifest.string());
  ds.segmentation = line.find("maskpath") != std::string::npos;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SampleRef s;
    std::string second, group;
    std::getline(ls, s.relpath, ',');
    std::getline(ls, second, ',');
    std::getline(ls, group, ',');
    if (ds.segmentation)
      s.maskpath = second;
    else
      s.label = std::stoi(second);
    s.group = std::stoi(group);
    if (!std::filesystem::exists(dir / s.relpath))
      throw DataError("manifest entry missing on disk: " + (dir / s.relpath).string());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

// Soft-edged disk plus an optional oriented tail lobe; the building block
// of both synthetic tasks.
void render_disk(Tensor* img, double cy, double cx, double radius, double amp) {
  const int H = img->dim(0), W = img->dim(1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
      const double v = amp / (1.0 + std::exp((d - radius) / 0.7));
      float& px = (*img)(y, x, 0);
      px = std::max(px, static_cast<float>(v));
    }
}

void write_sample(const std::filesystem::path& dir, const std::string& rel, const Tensor& t) {
  write_se2t(dir / rel, t);
}

}  // namespace

void synth_dataset(const SynthSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
  if (!manifest) throw DataError("cannot write manifest: " + (dir / "manifest.csv").string());

  if (!spec.segmentation) {
    manifest << "relpath,label,group\n";
    const int S = spec.size;
    const double scale = S / 32.0;
    for (int label = 0; label < 2; ++label) {
      for (int idx = 0; idx < spec.n_per_class; ++idx) {
        Rng rng = Rng::keyed(spec.seed, static_cast<std::uint64_t>(label),
                             static_cast<std::uint64_t>(idx));
        const double cy = (S - 1) / 2.0, cx = (S - 1) / 2.0;
        const double radius = rng.uniform(4.5, 6.5) * scale;
        const double amp = rng.uniform(0.45, 0.9);
        const double phi = rng.uniform(0.0, kTwoPi);
        // A short, faint lobe hugging the rim: a kernel-scale oriented cue.
        const double d0 = radius + rng.uniform(0.6, 1.6) * scale;
        const double sig_par = rng.uniform(1.7, 2.4) * scale;
        const double sig_perp = rng.uniform(0.8, 1.1) * scale;
        const double tail_amp = amp * rng.uniform(0.28, 0.40);

        Tensor disk({S, S, 1});
        render_disk(&disk, cy, cx, radius, amp);
        Tensor tail({S, S, 1});
        const double uy = std::cos(phi), ux = std::sin(phi);
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x) {
            const double ry = y - cy, rx = x - cx;
            const double t = ry * uy + rx * ux;
            const double s = -ry * ux + rx * uy;
            tail(y, x, 0) = static_cast<float>(
                tail_amp * std::exp(-(t - d0) * (t - d0) / (2 * sig_par * sig_par)) *
                std::exp(-s * s / (2 * sig_perp * sig_perp)));
          }
        double mass_disk = 0, mass_tail = 0;
        for (std::size_t i = 0; i < disk.size(); ++i) {
          mass_disk += disk[i];
          mass_tail += tail[i];
        }

        Tensor img({S, S, 1});
        if (label == 1) {
          for (std::size_t i = 0; i < img.size(); ++i) img[i] = disk[i] + tail[i];
        } else {
          // Symmetric disk with the total intensity the tail would add.
          const float boost = static_cast<float>(1.0 + mass_tail / mass_disk);
          for (std::size_t i = 0; i < img.size(); ++i) img[i] = disk[i] * boost;
        }
        for (std::size_t i = 0; i < img.size(); ++i) {
          const double v = img[i] + 0.05 * rng.normal();
          img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        char rel[64];
        std::snprintf(rel, sizeof(rel), "c%d_%05d.se2t", label, idx);
        write_sample(dir, rel, img);
        manifest << rel << "," << label << "," << label << "\n";
      }
    }
  } else {
    manifest << "relpath,maskpath,group\n";
    const int S = spec.size;
    for (int idx = 0; idx < 2 * spec.n_per_class; ++idx) {
      Rng rng = Rng::keyed(spec.seed, 7, static_cast<std::uint64_t>(idx));
      const int blobs = rng.uniform_int(4, 8);
      std::vector<double> cys, cxs, rads;
      Tensor intensity({S, S, 1});
      for (int b = 0; b < blobs; ++b) {
        const double cy = rng.uniform(8.0, S - 9.0);
        const double cx = rng.uniform(8.0, S - 9.0);
        const double r = rng.uniform(3.5, 6.0);
        const double amp = rng.uniform(0.5, 0.9);
        cys.push_back(cy);
        cxs.push_back(cx);
        rads.push_back(r);
        render_disk(&intensity, cy, cx, r, amp);
      }
      Tensor img({S, S, 3});
      const double tint[3] = {1.0, rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.8)};
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          for (int c = 0; c < 3; ++c) {
            const double v = intensity(y, x, 0) * tint[c] + 0.05 * rng.normal();
            img(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      Tensor mask({S, S, 1});
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double closest = 1e9;
          for (int b = 0; b < blobs; ++b) {
            const double d = std::sqrt((y - cys[static_cast<std::size_t>(b)]) *
                                           (y - cys[static_cast<std::size_t>(b)]) +
                                       (x - cxs[static_cast<std::size_t>(b)]) *
                                           (x - cxs[static_cast<std::size_t>(b)])) -
                             rads[static_cast<std::size_t>(b)];
            closest = std::min(closest, d);
          }
          mask(y, x, 0) = closest <= -1.0 ? 1.f : (std::abs(closest) <= 1.0 ? 2.f : 0.f);
        }
      char rel[64], mrel[64];
      std::snprintf(rel, sizeof(rel), "s%05d.se2t", idx);
      std::snprintf(mrel, sizeof(mrel), "s%05d_mask.se2t", idx);
      write_sample(dir, rel, img);
      write_sample(dir, mrel, mask);
      manifest << rel << "," << mrel << "," << (idx % 4) << "\n";
    }
  }
}

namespace {

// Central crop of a full-resolution integer mask to the model's output map.
std::vector<int> crop_mask(const std::vector<int>& mask, int full, int out) {
  const int off = (full - out) / 2;
  std::vector<int> crop(static_cast<std::size_t>(out) * out);
  for (int y = 0; y < out; ++y)
    for (int x = 0; x < out; ++x)
      crop[static_cast<std::size_t>(y * out + x)] =
          mask[static_cast<std::size_t>((y + off) * full + (x + off))];
  return crop;
}

// Deterministic epoch plan with batches balanced across classes (labels)
// or groups (segmentation): shuffle each bucket, then interleave.
std::vector<std::vector<std::size_t>> plan_batches(const Dataset& data, int batch_size,
                                                   std::uint64_t seed, int epoch) {
  std::vector<int> keys;
  for (const auto& s : data.samples) keys.push_back(data.segmentation ? s.group : s.label);
  std::vector<int> distinct = keys;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  std::vector<std::vector<std::size_t>> buckets(distinct.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto b = static_cast<std::size_t>(
        std::lower_bound(distinct.begin(), distinct.end(), keys[i]) - distinct.begin());
    buckets[b].push_back(i);
  }
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    Rng rng = Rng::keyed(seed, 0x5u, static_cast<std::uint64_t>(epoch), b);
    for (std::size_t i = buckets[b].size(); i > 1; --i)
      std::swap(buckets[b][i - 1], buckets[b][rng.uniform_int(0, static_cast<int>(i) - 1)]);
  }
  // Round-robin across buckets fills each batch evenly.
  std::vector<std::size_t> order;
  std::size_t longest = 0;
  for (const auto& b : buckets) longest = std::max(longest, b.size());
  for (std::size_t i = 0; i < longest; ++i)
    for (const auto& b : buckets)
      if (i < b.size()) order.push_back(b[i]);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + static_cast<std::size_t>(batch_size) <= order.size();
       start += static_cast<std::size_t>(batch_size))
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start) + batch_size);
  if (batches.empty() && !order.empty()) batches.push_back(order);  // tiny datasets
  return batches;
}

std::vector<double> seg_class_weights(const Dataset& data, const std::vector<std::vector<int>>& masks,
                                      int classes) {
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (const auto& m : masks)
    for (int c : m) counts[static_cast<std::size_t>(c)] += 1.0;
  double total = 0;
  for (double c : counts) total += c;
  std::vector<double> weights(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    const double freq = std::max(counts[static_cast<std::size_t>(c)], 1.0) / total;
    weights[static_cast<std::size_t>(c)] = 1.0 / (static_cast<double>(classes) * freq);
  }
  (void)data;
  return weights;
}

template <class T>
TensorT<T> assemble_batch(const std::vector<Tensor>& patches,
                          const std::vector<std::size_t>& idx) {
  const Tensor& first = patches[idx[0]];
  TensorT<T> batch({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& p = patches[idx[b]];
    for (std::size_t i = 0; i < p.size(); ++i)
      batch[b * p.size() + i] = static_cast<T>(p[i]);
  }
  return batch;
}

template <class T>
double evaluate_from_memory(ModelT<T>& model, const Dataset& set,
                            const std::vector<Tensor>& patches,
                            const std::vector<std::vector<int>>& masks) {
  double correct = 0, total = 0;
  const int batch_size = 64;
  for (std::size_t start = 0; start < patches.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(patches.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    TensorT<T> batch = assemble_batch<T>(patches, idx);
    TensorT<T> pred = model.forward(batch, false);
    if (!set.segmentation) {
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const int want = set.samples[idx[b]].label;
        correct += (pred[b] >= T(0.5) ? 1 : 0) == want ? 1 : 0;
        total += 1;
      }
    } else {
      const int out = pred.dim(1), classes = pred.dim(3);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto mask = crop_mask(masks[idx[b]], patches[idx[b]].dim(0), out);
        for (int y = 0; y < out; ++y)
          for (int x = 0; x < out; ++x) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
              if (pred(static_cast<int>(b), y, x, c) > pred(static_cast<int>(b), y, x, best))
                best = c;
            correct += best == mask[static_cast<std::size_t>(y * out + x)] ? 1 : 0;
            total += 1;
          }
      }
    }
  }
  return total > 0 ? correct / total : 0.0;
}

}  // namespace

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write history: " + path.string());
  os << "epoch,train_loss,val_loss,val_metric,lr\n";
  char line[160];
  for (const auto& e : history) {
    std::snprintf(line, sizeof(line), "%d,%.6g,%.6g,%.6g,%.6g\n", e.epoch, e.train_loss,
                  e.val_loss, e.val_metric, e.lr);
    os << line;
  }
}

template <class T>
double evaluate_accuracy(ModelT<T>& model, const Dataset& data, int batch_size) {
  if (data.samples.empty()) throw DataError("evaluate_accuracy: empty dataset");
  double correct = 0, total = 0;
  for (std::size_t start = 0; start < data.samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(data.samples.size(),
                                      start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    std::vector<Tensor> patches;
    patches.reserve(idx.size());
    for (std::size_t i : idx) patches.push_back(data.load_patch(i));
    std::vector<std::size_t> local(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) local[i] = i;
    TensorT<T> batch = assemble_batch<T>(patches, local);
    TensorT<T> pred = model.forward(batch, false);
    if (!data.segmentation) {
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const int want = data.samples[idx[b]].label;
        const int got = pred[b] >= T(0.5) ? 1 : 0;
        correct += got == want ? 1 : 0;
        total += 1;
      }
    } else {
      const int out = pred.dim(1), classes = pred.dim(3);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto mask = crop_mask(data.load_mask(idx[b]), patches[b].dim(0), out);
        for (int y = 0; y < out; ++y)
          for (int x = 0; x < out; ++x) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
              if (pred(static_cast<int>(b), y, x, c) > pred(static_cast<int>(b), y, x, best))
                best = c;
            correct += best == mask[static_cast<std::size_t>(y * out + x)] ? 1 : 0;
            total += 1;
          }
      }
    }
  }
  return correct / total;
}

template <class T>
TrainResult train(ModelT<T>& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const std::filesystem::path& out_dir) {
  if (train_set.segmentation != val_set.segmentation)
    throw ConfigError("train: train/val task kinds differ");
  std::filesystem::create_directories(out_dir);

  // Patches are small; keep the whole split in memory.
  std::vector<Tensor> train_patches, val_patches;
  std::vector<std::vector<int>> train_masks, val_masks;
  for (std::size_t i = 0; i < train_set.samples.size(); ++i) {
    train_patches.push_back(train_set.load_patch(i));
    if (train_set.segmentation) train_masks.push_back(train_set.load_mask(i));
  }
  for (std::size_t i = 0; i < val_set.samples.size(); ++i) {
    val_patches.push_back(val_set.load_patch(i));
    if (val_set.segmentation) val_masks.push_back(val_set.load_mask(i));
  }

  std::vector<double> class_weights;
  if (train_set.segmentation)
    class_weights = seg_class_weights(train_set, train_masks, model.config.head.classes);

  auto params = model.params();
  SgdState<T> state;
  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  const int full_extent = train_patches.empty() ? 0 : train_patches[0].dim(0);

  auto batch_loss = [&](const std::vector<Tensor>& patches,
                        const std::vector<std::vector<int>>& masks, const Dataset& set,
                        const std::vector<std::size_t>& idx, const std::vector<Tensor>* aug,
                        const std::vector<std::vector<int>>* aug_masks, bool training,
                        TensorT<T>* grad_out) -> double {
    std::vector<std::size_t> local(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) local[i] = i;
    TensorT<T> batch = aug ? assemble_batch<T>(*aug, local)
                           : [&] {
                               std::vector<Tensor> sel;
                               sel.reserve(idx.size());
                               for (std::size_t i : idx) sel.push_back(patches[i]);
                               return assemble_batch<T>(sel, local);
                             }();
    TensorT<T> pred = model.forward(batch, training);
    if (grad_out) *grad_out = TensorT<T>(pred.shape());
    if (!set.segmentation) {
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(set.samples[i].label);
      return bce_loss(pred, labels, grad_out);
    }
    const int out = pred.dim(1);
    std::vector<int> joined;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& m = aug_masks ? (*aug_masks)[b] : masks[idx[b]];
      const auto cropped = crop_mask(m, full_extent, out);
      joined.insert(joined.end(), cropped.begin(), cropped.end());
    }
    return weighted_ce3_loss(pred, joined, class_weights, grad_out);
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr * std::pow(config.lr_decay_factor, epoch);
    auto batches = plan_batches(train_set, config.batch_size, config.seed, epoch);
    double train_loss = 0;
    std::size_t batch_count = 0;
    for (const auto& idx : batches) {
      // Per-sample augmentation streams keyed on (seed, epoch, index).
      std::vector<Tensor> aug;
      std::vector<std::vector<int>> aug_masks;
      aug.reserve(idx.size());
      for (std::size_t i : idx) {
        Tensor patch = train_patches[i];
        std::vector<int> mask;
        if (train_set.segmentation) mask = train_masks[i];
        Rng rng = Rng::keyed(config.seed, 0xA06u, static_cast<std::uint64_t>(epoch), i);
        const AugmentDraws draws = draw_augment(rng, patch.dim(2));
        augment_patch(&patch, train_set.segmentation ? &mask : nullptr, draws);
        aug.push_back(std::move(patch));
        if (train_set.segmentation) aug_masks.push_back(std::move(mask));
      }
      TensorT<T> grad;
      const double loss =
          batch_loss(train_patches, train_masks, train_set, idx, &aug,
                     train_set.segmentation ? &aug_masks : nullptr, true, &grad);
      if (!std::isfinite(loss))
        throw DiagnosticError("train: loss diverged at epoch " + std::to_string(epoch + 1) +
                              "; last good checkpoint kept at " +
                              (out_dir / "checkpoint").string());
      model.zero_grads();
      model.backward(grad);
      sgd_step<T>(params, state, lr, config.momentum, config.weight_decay);
      model.refresh_banks();
      train_loss += loss;
      ++batch_count;
    }
    train_loss /= static_cast<double>(std::max<std::size_t>(batch_count, 1));

    // Validation pass, inference mode, no augmentation.
    double val_loss = 0;
    std::size_t val_batches = 0;
    auto vplan = plan_batches(val_set, config.batch_size, config.seed, -1);
    for (const auto& idx : vplan) {
      val_loss += batch_loss(val_patches, val_masks, val_set, idx, nullptr, nullptr, false,
                             nullptr);
      ++val_batches;
    }
    val_loss /= static_cast<double>(std::max<std::size_t>(val_batches, 1));
    const double val_metric = evaluate_from_memory(model, val_set, val_patches, val_masks);

    result.history.push_back({epoch + 1, train_loss, val_loss, val_metric, lr});
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch + 1;
      since_best = 0;
      model.save(out_dir / "checkpoint");
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  write_history_csv(out_dir / "history.csv", result.history);
  return result;
}

#define SE2_INSTANTIATE_TRAINING(T)                                                           \
  template void sgd_step<T>(std::vector<typename ModelT<T>::ParamRef>&, SgdState<T>&, double, \
                            double, double);                                                  \
  template double bce_loss<T>(const TensorT<T>&, const std::vector<int>&, TensorT<T>*);       \
  template double weighted_ce3_loss<T>(const TensorT<T>&, const std::vector<int>&,            \
                                       const std::vector<double>&, TensorT<T>*);              \
  template void augment_patch<T>(TensorT<T>*, std::vector<int>*, const AugmentDraws&);        \
  template TrainResult train<T>(ModelT<T>&, const Dataset&, const Dataset&,                   \
                                const TrainConfig&, const std::filesystem::path&);            \
  template double evaluate_accuracy<T>(ModelT<T>&, const Dataset&, int);

SE2_INSTANTIATE_TRAINING(float)
SE2_INSTANTIATE_TRAINING(double)

#undef SE2_INSTANTIATE_TRAINING

}  // namespace se2
