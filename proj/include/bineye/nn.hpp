#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include "bineye/error.hpp"

namespace bineye::nn {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using VectorD = Vector<double>;

/// Valid (unpadded) convolution of a full-width kernel down the rows of
/// `input`: out[i] = sum over the k x W window starting at row i, plus bias.
template <class InputDerived, class KernelDerived>
Vector<typename InputDerived::Scalar> conv_valid(const Eigen::MatrixBase<InputDerived>& input,
                                                 const Eigen::MatrixBase<KernelDerived>& kernel,
                                                 typename InputDerived::Scalar bias) {
  using Scalar = typename InputDerived::Scalar;
  const Eigen::Index rows = input.rows();
  const Eigen::Index k = kernel.rows();
  if (kernel.cols() != input.cols() || k < 1 || k > rows) {
    throw Error(ErrorKind::ShapeMismatch, "conv_valid: kernel " + std::to_string(k) + "x" +
                                              std::to_string(kernel.cols()) + " does not fit input " +
                                              std::to_string(rows) + "x" + std::to_string(input.cols()));
  }
  Vector<Scalar> out(rows - k + 1);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out[i] = input.middleRows(i, k).cwiseProduct(kernel).sum() + bias;
  }
  return out;
}

template <class Derived>
auto relu(const Eigen::MatrixBase<Derived>& v) {
  return v.cwiseMax(typename Derived::Scalar(0));
}

template <class Scalar>
struct PoolResult {
  Scalar value{};
  Eigen::Index index = 0;
};

/// Maximum and the smallest index that attains it.
template <class Derived>
PoolResult<typename Derived::Scalar> global_max_pool(const Eigen::MatrixBase<Derived>& v) {
  if (v.size() == 0) throw Error(ErrorKind::EmptyInput, "global_max_pool on an empty vector");
  PoolResult<typename Derived::Scalar> best{v(0), 0};
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > best.value) best = {v(i), i};
  }
  return best;
}

template <class XDerived, class WDerived, class BDerived>
Vector<typename XDerived::Scalar> dense(const Eigen::MatrixBase<XDerived>& x, const Eigen::MatrixBase<WDerived>& weight,
                                        const Eigen::MatrixBase<BDerived>& bias) {
  if (weight.cols() != x.size() || weight.rows() != bias.size()) {
    throw Error(ErrorKind::ShapeMismatch, "dense: weight " + std::to_string(weight.rows()) + "x" +
                                              std::to_string(weight.cols()) + ", input " + std::to_string(x.size()) +
                                              ", bias " + std::to_string(bias.size()));
  }
  return weight * x + bias;
}

/// Numerically stable softmax (max subtracted before exponentiation).
template <class Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar peak = logits.maxCoeff();
  Vector<Scalar> e = (logits.array() - peak).exp().matrix();
  return e / e.sum();
}

inline constexpr double kProbabilityFloor = 1e-12;

template <class Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& probs, Eigen::Index label) {
  using Scalar = typename Derived::Scalar;
  if (label < 0 || label >= probs.size()) {
    throw Error(ErrorKind::BadLabel, "label " + std::to_string(label) + " outside " + std::to_string(probs.size()) +
                                         " classes");
  }
  return -std::log(std::max(probs(label), Scalar(kProbabilityFloor)));
}

/// d(loss)/d(logits) for softmax followed by cross entropy.
template <class Derived>
Vector<typename Derived::Scalar> softmax_cross_entropy_grad(const Eigen::MatrixBase<Derived>& probs,
                                                            Eigen::Index label) {
  Vector<typename Derived::Scalar> g = probs;
  g(label) -= 1;
  return g;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates for one (flattened) parameter array.
template <class Scalar>
struct AdamMoments {
  Vector<Scalar> m;
  Vector<Scalar> v;
};

/// One Adam update with bias correction; `step` counts from 1.
template <class Scalar>
void adam_update(Eigen::Ref<Vector<Scalar>> param, const Eigen::Ref<const Vector<Scalar>>& grad,
                 AdamMoments<Scalar>& moments, long step, const AdamConfig& config) {
  if (grad.size() != param.size()) {
    throw Error(ErrorKind::ShapeMismatch, "adam: gradient shape differs from parameter shape");
  }
  if (moments.m.size() == 0 && param.size() != 0) {
    moments.m = Vector<Scalar>::Zero(param.size());
    moments.v = Vector<Scalar>::Zero(param.size());
  }
  if (moments.m.size() != param.size()) {
    throw Error(ErrorKind::ShapeMismatch, "adam: optimizer state shape differs from parameter shape");
  }
  const auto b1 = static_cast<Scalar>(config.beta1);
  const auto b2 = static_cast<Scalar>(config.beta2);
  moments.m = b1 * moments.m + (1 - b1) * grad;
  moments.v = b2 * moments.v + (1 - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const auto step_size = static_cast<Scalar>(config.learning_rate / c1);
  const auto eps = static_cast<Scalar>(config.epsilon);
  const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
  param.array() -= step_size * moments.m.array() / ((moments.v.array() * inv_c2).sqrt() + eps);
}

}  // namespace bineye::nn
