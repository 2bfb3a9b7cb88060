#include "se2/rotation.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "se2/group.hpp"

namespace se2 {

CircularMask::CircularMask(int n, double radius) : n_(n), radius_(radius) {
  if (n < 1) throw ConfigError("mask size must be >= 1, got " + std::to_string(n));
  active_.assign(static_cast<std::size_t>(n) * n, 0);
  const double c = (n - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double di = i - c, dj = j - c;
      if (di * di + dj * dj <= radius * radius + 1e-12) {
        active_[static_cast<std::size_t>(i * n + j)] = 1;
        ++active_count_;
      }
    }
  }
}

namespace {

// Snaps values that are quarter-turn-exact up to floating point noise so
// those angles produce pure permutations.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

inline int mod(int a, int n) {
  const int r = a % n;
  return r < 0 ? r + n : r;
}

}  // namespace

RotationOperator build_rotation_operator(int n, double theta, const CircularMask& mask) {
  if (n % 2 == 0)
    throw ConfigError("rotation operator needs an odd kernel size, got " + std::to_string(n));
  if (mask.n() != n) throw ConfigError("mask size does not match kernel size");

  RotationOperator op;
  op.n = n;
  op.theta = wrap_angle(theta);
  const double c = (n - 1) / 2.0;
  const double ct = std::cos(op.theta), st = std::sin(op.theta);

  for (int ti = 0; ti < n; ++ti) {
    for (int tj = 0; tj < n; ++tj) {
      if (!mask.active(ti, tj)) continue;
      RotationOperator::Row row;
      row.target = ti * n + tj;
      // Source position under the inverse rotation about the center.
      const double di = ti - c, dj = tj - c;
      const double si = snap(ct * di + st * dj + c);
      const double sj = snap(-st * di + ct * dj + c);
      const int i0 = static_cast<int>(std::floor(si));
      const int j0 = static_cast<int>(std::floor(sj));
      const double fi = si - i0, fj = sj - j0;
      const double w[4] = {(1 - fi) * (1 - fj), (1 - fi) * fj, fi * (1 - fj), fi * fj};
      const int ni[4] = {i0, i0, i0 + 1, i0 + 1};
      const int nj[4] = {j0, j0 + 1, j0, j0 + 1};
      row.complete = true;
      for (int q = 0; q < 4; ++q) {
        if (w[q] == 0.0) continue;
        const bool in_grid = ni[q] >= 0 && ni[q] < n && nj[q] >= 0 && nj[q] < n;
        if (!in_grid || !mask.active(ni[q], nj[q])) {
          row.complete = false;  // dropped, not renormalized
          continue;
        }
        row.entries.push_back({ni[q] * n + nj[q], w[q]});
        row.weight_sum += w[q];
      }
      op.rows.push_back(std::move(row));
    }
  }
  return op;
}

std::shared_ptr<const RotationSet> rotation_set(int n, int num_orientations, double radius) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, long long>, std::shared_ptr<const RotationSet>> cache;
  const auto key = std::make_tuple(n, num_orientations, static_cast<long long>(radius * 1024));
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  CircularMask mask(n, radius);
  auto set = std::make_shared<RotationSet>();
  set->reserve(static_cast<std::size_t>(num_orientations));
  for (int i = 0; i < num_orientations; ++i)
    set->push_back(build_rotation_operator(n, kTwoPi * i / num_orientations, mask));
  cache[key] = set;
  return set;
}

template <class T>
KernelBase<T> KernelBase<T>::make(KernelKind kind, int n, int num_orientations, int in_channels,
                                  int out_channels, double mask_radius) {
  KernelBase<T> k;
  k.kind = kind;
  k.n = n;
  k.num_orientations = num_orientations;
  k.in_channels = in_channels;
  k.out_channels = out_channels;
  k.mask = CircularMask(n, mask_radius);
  k.rotations = rotation_set(n, num_orientations, mask_radius);
  if (kind == KernelKind::lifting) {
    k.base = GradPairT<T>({n, n, in_channels, out_channels});
    k.bank = TensorT<T>({num_orientations, n, n, in_channels, out_channels});
  } else {
    k.base = GradPairT<T>({n, n, num_orientations, in_channels, out_channels});
    k.bank = TensorT<T>({num_orientations, n, n, num_orientations, in_channels, out_channels});
  }
  return k;
}

template <class T>
int KernelBase<T>::param_count() const {
  const int orient = kind == KernelKind::group ? num_orientations : 1;
  return mask.active_count() * orient * in_channels * out_channels;
}

template <class T>
void KernelBase<T>::apply_mask() {
  const std::size_t block = base.value.size() / static_cast<std::size_t>(n * n);
  for (int t = 0; t < n * n; ++t) {
    if (mask.active_flat(t)) continue;
    T* v = base.value.data() + static_cast<std::size_t>(t) * block;
    T* g = base.grad.data() + static_cast<std::size_t>(t) * block;
    for (std::size_t m = 0; m < block; ++m) {
      v[m] = T(0);
      g[m] = T(0);
    }
  }
}

template <class T>
void KernelBase<T>::derive() {
  bank.fill(T(0));
  const int N = num_orientations;
  const std::size_t chan = static_cast<std::size_t>(in_channels) * out_channels;
  const std::size_t block = kind == KernelKind::group ? chan * static_cast<std::size_t>(N) : chan;
  const std::size_t bank_slice = static_cast<std::size_t>(n) * n * block;
  for (int r = 0; r < N; ++r) {
    const RotationOperator& rot = (*rotations)[static_cast<std::size_t>(r)];
    T* out_slice = bank.data() + static_cast<std::size_t>(r) * bank_slice;
    for (const auto& row : rot.rows) {
      T* out = out_slice + static_cast<std::size_t>(row.target) * block;
      for (const auto& e : row.entries) {
        const T w = static_cast<T>(e.weight);
        const T* src = base.value.data() + static_cast<std::size_t>(e.source) * block;
        if (kind == KernelKind::lifting) {
          for (std::size_t m = 0; m < chan; ++m) out[m] += w * src[m];
        } else {
          // Shift-twist: bank orientation slice m reads base slice (m - r) mod N.
          for (int m = 0; m < N; ++m) {
            const T* src_m = src + static_cast<std::size_t>(mod(m - r, N)) * chan;
            T* out_m = out + static_cast<std::size_t>(m) * chan;
            for (std::size_t q = 0; q < chan; ++q) out_m[q] += w * src_m[q];
          }
        }
      }
    }
  }
}

template <class T>
void KernelBase<T>::backprop_bank_to_base(const TensorT<T>& grad_bank) {
  if (!grad_bank.same_shape(bank))
    throw ConfigError("grad_bank shape " + grad_bank.shape_str() + " does not match bank " +
                      bank.shape_str());
  const int N = num_orientations;
  const std::size_t chan = static_cast<std::size_t>(in_channels) * out_channels;
  const std::size_t block = kind == KernelKind::group ? chan * static_cast<std::size_t>(N) : chan;
  const std::size_t bank_slice = static_cast<std::size_t>(n) * n * block;
  for (int r = 0; r < N; ++r) {
    const RotationOperator& rot = (*rotations)[static_cast<std::size_t>(r)];
    const T* g_slice = grad_bank.data() + static_cast<std::size_t>(r) * bank_slice;
    for (const auto& row : rot.rows) {
      const T* g = g_slice + static_cast<std::size_t>(row.target) * block;
      for (const auto& e : row.entries) {
        const T w = static_cast<T>(e.weight);
        T* gb = base.grad.data() + static_cast<std::size_t>(e.source) * block;
        if (kind == KernelKind::lifting) {
          for (std::size_t m = 0; m < chan; ++m) gb[m] += w * g[m];
        } else {
          for (int m = 0; m < N; ++m) {
            T* gb_m = gb + static_cast<std::size_t>(mod(m - r, N)) * chan;
            const T* g_m = g + static_cast<std::size_t>(m) * chan;
            for (std::size_t q = 0; q < chan; ++q) gb_m[q] += w * g_m[q];
          }
        }
      }
    }
  }
}

template <class T>
TensorT<T> derive_bank_lifting(const KernelBase<T>& k) {
  if (k.kind != KernelKind::lifting)
    throw ConfigError("derive_bank_lifting: kernel kind is not lifting");
  KernelBase<T> tmp = k;
  tmp.derive();
  return tmp.bank;
}

template <class T>
TensorT<T> derive_bank_group(const KernelBase<T>& k) {
  if (k.kind != KernelKind::group) throw ConfigError("derive_bank_group: kernel kind is not group");
  KernelBase<T> tmp = k;
  tmp.derive();
  return tmp.bank;
}

template struct KernelBase<float>;
template struct KernelBase<double>;
template TensorT<float> derive_bank_lifting<float>(const KernelBase<float>&);
template TensorT<double> derive_bank_lifting<double>(const KernelBase<double>&);
template TensorT<float> derive_bank_group<float>(const KernelBase<float>&);
template TensorT<double> derive_bank_group<double>(const KernelBase<double>&);

}  // namespace se2
