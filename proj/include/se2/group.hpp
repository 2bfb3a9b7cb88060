#pragma once

#include <array>
#include <cmath>

namespace se2 {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Angle normalized into [0, 2*pi).
inline double wrap_angle(double theta) {
  double t = std::fmod(theta, kTwoPi);
  if (t < 0) t += kTwoPi;
  return t;
}

/// Element (x, theta) of the planar roto-translation group.
/// Product: (x, th) . (x', th') = (R_th x' + x, th + th').
struct GroupElement {
  std::array<double, 2> x{0.0, 0.0};
  double theta = 0.0;

  static GroupElement identity() { return {}; }
};

inline std::array<double, 2> rotate2(double theta, const std::array<double, 2>& v) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * v[0] - s * v[1], s * v[0] + c * v[1]};
}

inline GroupElement group_product(const GroupElement& g, const GroupElement& h) {
  const auto rx = rotate2(g.theta, h.x);
  return {{g.x[0] + rx[0], g.x[1] + rx[1]}, wrap_angle(g.theta + h.theta)};
}

/// g^{-1} = (-R_theta^{-1} x, -theta).
inline GroupElement group_inverse(const GroupElement& g) {
  const auto rx = rotate2(-g.theta, g.x);
  return {{-rx[0], -rx[1]}, wrap_angle(-g.theta)};
}

/// Action on the space of positions and orientations:
/// g . (x', th') = (R_theta x' + x, theta + th').
inline GroupElement group_action(const GroupElement& g, const GroupElement& point) {
  return group_product(g, point);
}

}  // namespace se2
