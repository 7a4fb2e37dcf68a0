#include "bineye/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bineye {

HyperParams GradCheckConfig::small_hyper() {
  HyperParams h;
  h.sequence_length = 8;
  h.instruction_bytes = 4;
  h.vocabulary = 16;
  h.byte_dim = 2;
  h.position_dim = 8;
  h.kernel_lengths = {2, 3, 4, 5};
  h.num_filters = 2;
  return h;
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult grad_check(const GradCheckConfig& config) {
  auto params = init_params<double>(config.hyper, config.seed);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  // Non-zero biases so their gradients are exercised away from the init point.
  for (auto& b : params.weights.conv_bias) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-0.1, 0.1);
  }
  for (Eigen::Index i = 0; i < params.weights.hidden_bias.size(); ++i) {
    params.weights.hidden_bias(i) = rng.uniform(-0.1, 0.1);
  }
  std::vector<std::uint8_t> input(static_cast<std::size_t>(config.hyper.input_bytes()));
  for (auto& b : input) b = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(config.hyper.vocabulary)));
  const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.hyper.num_classes)));
  for (Eigen::Index i = 0; i < params.weights.dense_bias.size(); ++i) {
    params.weights.dense_bias(i) = rng.uniform(-0.1, 0.1) + (i == label ? config.label_margin : 0.0);
  }

  const auto trace = forward<double>(input, params);
  const auto analytic = backward(trace, input, params, label);

  GradCheckResult result;
  result.loss = nn::cross_entropy(trace.probs, label);
  zip_arrays(
      params.hyper,
      [&](const std::string& name, auto& param, const auto& grad) {
        GroupError group{name};
        std::vector<Eigen::Index> coords(static_cast<std::size_t>(param.size()));
        std::iota(coords.begin(), coords.end(), Eigen::Index{0});
        if (config.max_coords_per_group > 0 && coords.size() > config.max_coords_per_group) {
          rng.shuffle(coords);
          coords.resize(config.max_coords_per_group);
          std::sort(coords.begin(), coords.end());
        }
        for (const Eigen::Index c : coords) {
          double& value = param.data()[c];
          const double saved = value;
          value = saved + config.epsilon;
          const double up = loss<double>(input, params, label);
          value = saved - config.epsilon;
          const double down = loss<double>(input, params, label);
          value = saved;
          const double numeric = (up - down) / (2.0 * config.epsilon);
          const double a = grad.data()[c];
          group.max_relative_error = std::max(group.max_relative_error, relative_error(a, numeric));
          group.max_abs_analytic = std::max(group.max_abs_analytic, std::abs(a));
          group.max_abs_numeric = std::max(group.max_abs_numeric, std::abs(numeric));
          ++group.coordinates;
        }
        result.max_relative_error = std::max(result.max_relative_error, group.max_relative_error);
        result.groups.push_back(std::move(group));
      },
      params.weights, analytic);
  return result;
}

}  // namespace bineye
