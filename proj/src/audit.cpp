#include "se2/audit.hpp"

#include <cmath>

#include "se2/group.hpp"

namespace se2 {

namespace {

// reflect-101 indexing: ..., 2, 1, 0, 1, 2, ..., H-2, H-1, H-2, ...
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace

template <class T>
TensorT<T> rotate_input(const TensorT<T>& image, double theta) {
  if (image.rank() != 3)
    throw ConfigError("rotate_input: image must be [H,W,C], got " + image.shape_str());
  const int H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (H != W)
    throw ConfigError("rotate_input: image must be square, got " + std::to_string(H) + "x" +
                      std::to_string(W));
  TensorT<T> out(image.shape());
  const double c = (H - 1) / 2.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const double di = i - c, dj = j - c;
      const double si = snap(ct * di + st * dj + c);
      const double sj = snap(-st * di + ct * dj + c);
      const int i0 = static_cast<int>(std::floor(si));
      const int j0 = static_cast<int>(std::floor(sj));
      const double fi = si - i0, fj = sj - j0;
      const int ia = reflect(i0, H), ib = reflect(i0 + 1, H);
      const int ja = reflect(j0, W), jb = reflect(j0 + 1, W);
      const double w00 = (1 - fi) * (1 - fj), w01 = (1 - fi) * fj;
      const double w10 = fi * (1 - fj), w11 = fi * fj;
      const T* p00 = image.data() + image.offset(ia, ja);
      const T* p01 = image.data() + image.offset(ia, jb);
      const T* p10 = image.data() + image.offset(ib, ja);
      const T* p11 = image.data() + image.offset(ib, jb);
      T* o = out.data() + out.offset(i, j);
      for (int ch = 0; ch < C; ++ch)
        o[ch] = static_cast<T>(w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch]);
    }
  }
  return out;
}

template <class T>
TensorT<T> shift_twist(const TensorT<T>& act, int shift, double theta) {
  if (act.rank() != 5)
    throw ConfigError("shift_twist: activation must be [B,N,H,W,C], got " + act.shape_str());
  const int B = act.dim(0), N = act.dim(1), H = act.dim(2), W = act.dim(3), C = act.dim(4);
  if (H != W) throw ConfigError("shift_twist: spatial extent must be square");
  TensorT<T> out(act.shape());
  const std::size_t plane = static_cast<std::size_t>(H) * W * C;
  for (int b = 0; b < B; ++b) {
    for (int r = 0; r < N; ++r) {
      // slice (r - shift) mod N rotated by theta lands in slice r
      const int src = ((r - shift) % N + N) % N;
      TensorT<T> slice({H, W, C});
      std::copy(act.data() + act.offset(b, src), act.data() + act.offset(b, src) + plane,
                slice.data());
      TensorT<T> rotated = rotate_input(slice, theta);
      std::copy(rotated.data(), rotated.data() + plane, out.data() + out.offset(b, r));
    }
  }
  return out;
}

template <class T>
std::vector<double> polar_response(ModelT<T>& model, const TensorT<T>& image, int steps,
                                   int stat_class) {
  if (steps < 1) throw ConfigError("polar_response: steps must be >= 1");
  std::vector<double> response;
  response.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    TensorT<T> rot = rotate_input(image, kTwoPi * k / steps);
    TensorT<T> batch({1, rot.dim(0), rot.dim(1), rot.dim(2)});
    std::copy(rot.data(), rot.data() + rot.size(), batch.data());
    TensorT<T> pred = model.forward(batch, false);
    const int classes = pred.dim(3);
    const int cls = stat_class >= 0 ? stat_class : (classes > 1 ? classes - 1 : 0);
    if (cls >= classes) throw ConfigError("polar_response: stat class out of range");
    double acc = 0.0;
    const std::size_t px = pred.size() / static_cast<std::size_t>(classes);
    for (std::size_t p = 0; p < px; ++p)
      acc += static_cast<double>(pred[p * static_cast<std::size_t>(classes) +
                                      static_cast<std::size_t>(cls)]);
    response.push_back(acc / static_cast<double>(px));
  }
  return response;
}

template <class T>
EquivarianceError equivariance_error(ModelT<T>& model, const TensorT<T>& image, int theta_index,
                                     int layer_prefix, int crop, bool include_pool) {
  const int N = model.config.num_orientations;
  if (theta_index < 0 || theta_index >= N)
    throw ConfigError("equivariance_error: theta index " + std::to_string(theta_index) +
                      " not on the orientation grid of N=" + std::to_string(N));
  const double theta = kTwoPi * theta_index / N;
  const bool on_quarter_grid = theta_index == 0 || (N % 4 == 0 && theta_index % (N / 4) == 0);
  if (include_pool && !on_quarter_grid)
    throw ConfigError("equivariance_error: pooling layers are only comparable at multiples of "
                      "pi/2");

  TensorT<T> batch({1, image.dim(0), image.dim(1), image.dim(2)});
  std::copy(image.data(), image.data() + image.size(), batch.data());
  TensorT<T> out_plain = model.forward_prefix(batch, layer_prefix, include_pool).data;

  TensorT<T> rot = rotate_input(image, theta);
  TensorT<T> batch_rot({1, rot.dim(0), rot.dim(1), rot.dim(2)});
  std::copy(rot.data(), rot.data() + rot.size(), batch_rot.data());
  TensorT<T> out_rot = model.forward_prefix(batch_rot, layer_prefix, include_pool).data;

  TensorT<T> expected = shift_twist(out_plain, theta_index, theta);

  const int H = out_rot.dim(2), W = out_rot.dim(3), C = out_rot.dim(4);
  if (2 * crop >= H || 2 * crop >= W)
    throw ConfigError("equivariance_error: crop leaves no pixels");
  EquivarianceError err;
  std::size_t count = 0;
  for (int r = 0; r < N; ++r)
    for (int y = crop; y < H - crop; ++y)
      for (int x = crop; x < W - crop; ++x)
        for (int ch = 0; ch < C; ++ch) {
          const double d = std::abs(static_cast<double>(out_rot(0, r, y, x, ch)) -
                                    static_cast<double>(expected(0, r, y, x, ch)));
          err.max_abs = std::max(err.max_abs, d);
          err.mean_abs += d;
          ++count;
        }
  err.mean_abs /= static_cast<double>(count);
  return err;
}

template <class T>
AlignedStats<T> aligned_prediction_stats(ModelT<T>& model, const TensorT<T>& image, int steps) {
  if (steps < 1) throw ConfigError("aligned_prediction_stats: steps must be >= 1");
  AlignedStats<T> stats;
  std::vector<double> sum, sum_sq;
  std::vector<int> map_shape;
  for (int k = 0; k < steps; ++k) {
    const double theta = kTwoPi * k / steps;
    TensorT<T> rot = rotate_input(image, theta);
    TensorT<T> batch({1, rot.dim(0), rot.dim(1), rot.dim(2)});
    std::copy(rot.data(), rot.data() + rot.size(), batch.data());
    TensorT<T> pred = model.forward(batch, false);
    TensorT<T> map({pred.dim(1), pred.dim(2), pred.dim(3)});
    std::copy(pred.data(), pred.data() + pred.size(), map.data());
    TensorT<T> aligned = k == 0 ? std::move(map) : rotate_input(map, -theta);
    if (k == 0) {
      map_shape = aligned.shape();
      sum.assign(aligned.size(), 0.0);
      sum_sq.assign(aligned.size(), 0.0);
    }
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      const double v = static_cast<double>(aligned[i]);
      sum[i] += v;
      sum_sq[i] += v * v;
    }
  }
  stats.mean_map = TensorT<T>(map_shape);
  stats.std_map = TensorT<T>(map_shape);
  const double inv = 1.0 / steps;
  double total = 0.0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double m = sum[i] * inv;
    const double var = std::max(0.0, sum_sq[i] * inv - m * m);
    stats.mean_map[i] = static_cast<T>(m);
    const double sd = std::sqrt(var);
    stats.std_map[i] = static_cast<T>(sd);
    total += sd;
    stats.max_std = std::max(stats.max_std, sd);
  }
  stats.mean_std = total / static_cast<double>(sum.size());
  return stats;
}

double response_variance(const std::vector<double>& response) {
  if (response.empty()) return 0.0;
  double mean = 0.0;
  for (double v : response) mean += v;
  mean /= static_cast<double>(response.size());
  double var = 0.0;
  for (double v : response) var += (v - mean) * (v - mean);
  return var / static_cast<double>(response.size());
}

#define SE2_INSTANTIATE_AUDIT(T)                                                              \
  template TensorT<T> rotate_input<T>(const TensorT<T>&, double);                             \
  template TensorT<T> shift_twist<T>(const TensorT<T>&, int, double);                         \
  template std::vector<double> polar_response<T>(ModelT<T>&, const TensorT<T>&, int, int);    \
  template EquivarianceError equivariance_error<T>(ModelT<T>&, const TensorT<T>&, int, int,   \
                                                   int, bool);                                \
  template AlignedStats<T> aligned_prediction_stats<T>(ModelT<T>&, const TensorT<T>&, int);

SE2_INSTANTIATE_AUDIT(float)
SE2_INSTANTIATE_AUDIT(double)

#undef SE2_INSTANTIATE_AUDIT

}  // namespace se2
