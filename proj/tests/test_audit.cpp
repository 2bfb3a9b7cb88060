#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "se2/audit.hpp"
#include "se2/model.hpp"
#include "se2/rng.hpp"

using namespace se2;

namespace {

constexpr double kPi = 3.14159265358979323846;

template <class T>
TensorT<T> random_image(int size, int channels, Rng& rng) {
  TensorT<T> t({size, size, channels});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(0, 1));
  return t;
}

template <class T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  REQUIRE(a.same_shape(b));
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

TEST_CASE("rotate_input identity and quarter-turn exactness") {
  Rng rng(1);
  auto img = random_image<float>(15, 2, rng);
  CHECK(max_abs_diff(rotate_input(img, 0.0), img) == 0.0);

  // Four quarter turns restore the image exactly.
  auto r = img;
  for (int k = 0; k < 4; ++k) r = rotate_input(r, kPi / 2);
  CHECK(max_abs_diff(r, img) == 0.0);

  // Quarter turn is intensity preserving.
  auto q = rotate_input(img, kPi / 2);
  double sum_q = 0, sum_i = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    sum_q += q[i];
    sum_i += img[i];
  }
  CHECK(sum_q == doctest::Approx(sum_i).epsilon(1e-6));

  // Even-sized grids rotate exactly too.
  auto even = random_image<float>(16, 1, rng);
  auto e = even;
  for (int k = 0; k < 4; ++k) e = rotate_input(e, kPi / 2);
  CHECK(max_abs_diff(e, even) == 0.0);

  TensorT<float> rect({4, 6, 1});
  CHECK_THROWS_AS(rotate_input(rect, 0.3), ConfigError);
}

TEST_CASE("rotate_input round trip blur stays under the frozen bound") {
  Rng rng(2);
  auto img = random_image<float>(24, 1, rng);
  auto back = rotate_input(rotate_input(img, kPi / 4), -kPi / 4);
  double mean_abs = 0;
  for (std::size_t i = 0; i < img.size(); ++i) mean_abs += std::abs(back[i] - img[i]);
  mean_abs /= static_cast<double>(img.size());
  // Measured 0.1712 for uniform white-noise images on this protocol;
  // frozen with margin (white noise maximizes interpolation blur).
  CHECK(mean_abs <= 0.20);
}

TEST_CASE("polar response of a constant image is constant") {
  auto m = Model::build(preset_config("synth-cls", 4), 3);
  TensorT<float> img = TensorT<float>::full({32, 32, 1}, 0.4f);
  auto resp = polar_response(m, img, 16);
  REQUIRE(resp.size() == 16);
  for (double v : resp) CHECK(v == doctest::Approx(resp[0]).epsilon(1e-6));
  CHECK(response_variance(resp) <= 1e-10);
}

TEST_CASE("polar response of an N=4 model has a quarter-turn period") {
  Rng rng(3);
  auto m = Model::build(preset_config("synth-cls", 4), 5);
  auto img = random_image<float>(32, 1, rng);
  auto resp = polar_response(m, img, 16);
  for (int k = 0; k < 16; ++k)
    CHECK(std::abs(resp[static_cast<std::size_t>(k)] -
                   resp[static_cast<std::size_t>((k + 4) % 16)]) <= 1e-5);
}

TEST_CASE("equivariance error vanishes at theta zero") {
  Rng rng(4);
  auto m = Model::build(preset_config("synth-cls", 8), 7);
  auto img = random_image<float>(32, 1, rng);
  auto err = equivariance_error(m, img, 0, 2, 0);
  CHECK(err.max_abs == 0.0);
  CHECK(err.mean_abs == 0.0);
}

TEST_CASE("lifting prefix is exactly equivariant at pi/2 for N=4") {
  Rng rng(5);
  auto m = Model::build(preset_config("mitosis", 4), 9);
  auto img = random_image<float>(68, 3, rng);
  auto err = equivariance_error(m, img, 1, 1, 0);  // theta index 1 = pi/2
  CHECK(err.max_abs <= 1e-5);
}

TEST_CASE("fine-angle prefix error stays under the frozen bound for N=8") {
  Rng rng(6);
  auto m = Model::build(preset_config("mitosis", 8), 11);
  auto img = random_image<float>(40, 3, rng);
  auto err = equivariance_error(m, img, 1, 2, 6);  // pi/4, lifting+groupconv, crop 6
  CHECK(err.max_abs > 0.0);
  // Measured mean_abs 0.092 on this protocol (He-init, white-noise input);
  // frozen with margin.
  CHECK(err.mean_abs <= 0.15);
}

TEST_CASE("theta off the orientation grid is rejected") {
  Rng rng(7);
  auto m = Model::build(preset_config("synth-cls", 4), 1);
  auto img = random_image<float>(32, 1, rng);
  CHECK_THROWS_AS(equivariance_error(m, img, 4, 1, 0), ConfigError);
  CHECK_THROWS_AS(equivariance_error(m, img, -1, 1, 0), ConfigError);
}

TEST_CASE("aligned prediction stats") {
  auto m = Model::build(preset_config("nuclei", 4, true), 13);
  Rng rng(8);
  auto img = random_image<float>(60, 3, rng);

  SUBCASE("steps=1 reproduces the raw prediction exactly with zero std") {
    auto stats = aligned_prediction_stats(m, img, 1);
    TensorT<float> batch({1, 60, 60, 3});
    std::copy(img.data(), img.data() + img.size(), batch.data());
    auto pred = m.forward(batch, false);
    TensorT<float> map({pred.dim(1), pred.dim(2), pred.dim(3)});
    std::copy(pred.data(), pred.data() + pred.size(), map.data());
    CHECK(max_abs_diff(stats.mean_map, map) == 0.0);
    CHECK(stats.max_std == 0.0);
  }

  SUBCASE("90-degree-only steps on an N=4 model give a near-zero std map") {
    auto stats = aligned_prediction_stats(m, img, 4);
    CHECK(stats.max_std <= 1e-5);
  }
}
