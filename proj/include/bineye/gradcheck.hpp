#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bineye/model.hpp"

namespace bineye {

struct GradCheckConfig {
  HyperParams hyper = small_hyper();
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded sample per group.
  std::size_t max_coords_per_group = 0;
  /// Pushes the true class logit this far above the rest. Large values give
  /// a near-zero loss and near-zero gradients.
  double label_margin = 0.0;

  /// S=8, V=16, f=2, g=8, two filters per kernel length.
  static HyperParams small_hyper();
};

struct GroupError {
  std::string group;
  double max_relative_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  double loss = 0.0;
  std::vector<GroupError> groups;
};

/// Relative error floor: differences between gradients smaller than this are
/// measured in absolute terms.
inline constexpr double kGradCheckFloor = 1e-6;

double relative_error(double analytic, double numeric);

/// Compares analytic gradients against central differences in double precision.
GradCheckResult grad_check(const GradCheckConfig& config);

}  // namespace bineye
