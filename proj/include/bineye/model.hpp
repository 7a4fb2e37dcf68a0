#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bineye/elf.hpp"
#include "bineye/error.hpp"
#include "bineye/nn.hpp"
#include "bineye/random.hpp"

namespace bineye {

/// Shape of the network. Each instruction of `instruction_bytes` bytes is
/// embedded as the concatenation of its byte embeddings, so the per-row width
/// `position_dim` must equal instruction_bytes * byte_dim.
struct HyperParams {
  int sequence_length = 1024;     // instructions per block
  int instruction_bytes = 4;
  int vocabulary = 256;           // distinct byte values
  int byte_dim = 4;               // width of one byte embedding
  int position_dim = 16;          // row width after embedding
  std::vector<int> kernel_lengths = {2, 3, 4, 5};
  int num_filters = 128;          // per kernel length
  int num_classes = 4;
  int hidden_units = 0;           // 0: a single dense layer; > 0 adds a ReLU hidden layer

  /// Throws BadInput describing the first violated invariant.
  void validate() const;

  int input_bytes() const { return sequence_length * instruction_bytes; }
  int pooled_size() const { return num_filters * static_cast<int>(kernel_lengths.size()); }
  int max_kernel_length() const;

  bool operator==(const HyperParams&) const = default;
};

std::int64_t param_count(const HyperParams& hyper);

/// g x S matrix; column n-1 is the fixed embedding of instruction position n.
template <class Scalar = double>
nn::Matrix<Scalar> position_embedding_matrix(int sequence_length, int dim) {
  nn::Matrix<Scalar> table(dim, sequence_length);
  const double s1 = sequence_length + 1.0;
  const double g1 = dim + 1.0;
  for (int n = 1; n <= sequence_length; ++n) {
    for (int k = 0; k < dim; ++k) {
      table(k, n - 1) = static_cast<Scalar>((1.0 - n / s1) - (k / g1) * (1.0 - 2.0 * n / s1));
    }
  }
  return table;
}

/// Every trainable array of the model. Also used for gradients and optimizer
/// moments, which share the exact shapes.
template <class Scalar>
struct Trainables {
  nn::Matrix<Scalar> embedding;              // vocabulary x byte_dim
  std::vector<nn::Matrix<Scalar>> kernels;   // per kernel length: num_filters x (k * position_dim)
  std::vector<nn::Vector<Scalar>> conv_bias; // per kernel length: num_filters
  nn::Matrix<Scalar> hidden_weight;          // hidden_units x pooled (empty without hidden layer)
  nn::Vector<Scalar> hidden_bias;
  nn::Matrix<Scalar> dense_weight;           // classes x (hidden_units or pooled)
  nn::Vector<Scalar> dense_bias;

  static Trainables zeros(const HyperParams& hyper);

  template <class Other>
  Trainables<Other> cast() const {
    Trainables<Other> out;
    out.embedding = embedding.template cast<Other>();
    for (const auto& k : kernels) out.kernels.push_back(k.template cast<Other>());
    for (const auto& b : conv_bias) out.conv_bias.push_back(b.template cast<Other>());
    out.hidden_weight = hidden_weight.template cast<Other>();
    out.hidden_bias = hidden_bias.template cast<Other>();
    out.dense_weight = dense_weight.template cast<Other>();
    out.dense_bias = dense_bias.template cast<Other>();
    return out;
  }

  bool operator==(const Trainables& other) const {
    bool equal = embedding == other.embedding && kernels.size() == other.kernels.size() &&
                 conv_bias.size() == other.conv_bias.size() && hidden_weight == other.hidden_weight &&
                 hidden_bias == other.hidden_bias && dense_weight == other.dense_weight &&
                 dense_bias == other.dense_bias;
    for (std::size_t i = 0; equal && i < kernels.size(); ++i) equal = kernels[i] == other.kernels[i];
    for (std::size_t i = 0; equal && i < conv_bias.size(); ++i) equal = conv_bias[i] == other.conv_bias[i];
    return equal;
  }
};

/// Calls fn(group_name, a_i, b_i, ...) for each parameter array, walking the
/// sets in lockstep in checkpoint order.
template <class Fn, class First, class... Rest>
void zip_arrays(const HyperParams& hyper, Fn&& fn, First& first, Rest&... rest) {
  fn(std::string("embedding"), first.embedding, rest.embedding...);
  for (std::size_t i = 0; i < first.kernels.size(); ++i) {
    fn("conv_kernel_k" + std::to_string(hyper.kernel_lengths[i]), first.kernels[i], rest.kernels[i]...);
  }
  for (std::size_t i = 0; i < first.conv_bias.size(); ++i) {
    fn("conv_bias_k" + std::to_string(hyper.kernel_lengths[i]), first.conv_bias[i], rest.conv_bias[i]...);
  }
  if (hyper.hidden_units > 0) {
    fn(std::string("hidden_weight"), first.hidden_weight, rest.hidden_weight...);
    fn(std::string("hidden_bias"), first.hidden_bias, rest.hidden_bias...);
  }
  fn(std::string("dense_weight"), first.dense_weight, rest.dense_weight...);
  fn(std::string("dense_bias"), first.dense_bias, rest.dense_bias...);
}

template <class Scalar>
Trainables<Scalar> Trainables<Scalar>::zeros(const HyperParams& hyper) {
  Trainables t;
  const int width = hyper.position_dim;
  t.embedding = nn::Matrix<Scalar>::Zero(hyper.vocabulary, hyper.byte_dim);
  for (int k : hyper.kernel_lengths) {
    t.kernels.push_back(nn::Matrix<Scalar>::Zero(hyper.num_filters, k * width));
    t.conv_bias.push_back(nn::Vector<Scalar>::Zero(hyper.num_filters));
  }
  int head_in = hyper.pooled_size();
  if (hyper.hidden_units > 0) {
    t.hidden_weight = nn::Matrix<Scalar>::Zero(hyper.hidden_units, head_in);
    t.hidden_bias = nn::Vector<Scalar>::Zero(hyper.hidden_units);
    head_in = hyper.hidden_units;
  }
  t.dense_weight = nn::Matrix<Scalar>::Zero(hyper.num_classes, head_in);
  t.dense_bias = nn::Vector<Scalar>::Zero(hyper.num_classes);
  return t;
}

template <class Scalar>
struct ModelParams {
  HyperParams hyper;
  Trainables<Scalar> weights;
  nn::Matrix<Scalar> position;  // constant, never trained or stored

  template <class Other>
  ModelParams<Other> cast() const {
    return {hyper, weights.template cast<Other>(), position.template cast<Other>()};
  }
};

template <class Scalar>
using GradientSet = Trainables<Scalar>;

template <class Scalar>
ModelParams<Scalar> make_params(const HyperParams& hyper, Trainables<Scalar> weights) {
  hyper.validate();
  return {hyper, std::move(weights), position_embedding_matrix<Scalar>(hyper.sequence_length, hyper.position_dim)};
}

/// Byte embedding U(-0.05, 0.05); conv and dense weights Glorot-uniform; zero biases.
template <class Scalar>
ModelParams<Scalar> init_params(const HyperParams& hyper, std::uint64_t seed) {
  hyper.validate();
  Rng rng(seed);
  auto weights = Trainables<Scalar>::zeros(hyper);
  auto fill = [&rng](auto& m, double limit) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
  };
  auto glorot = [](double fan_in, double fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); };
  fill(weights.embedding, 0.05);
  for (std::size_t i = 0; i < weights.kernels.size(); ++i) {
    // receptive field k x g with one input channel
    const double receptive = static_cast<double>(weights.kernels[i].cols());
    fill(weights.kernels[i], glorot(receptive, receptive * hyper.num_filters));
  }
  if (hyper.hidden_units > 0) fill(weights.hidden_weight, glorot(hyper.pooled_size(), hyper.hidden_units));
  fill(weights.dense_weight, glorot(static_cast<double>(weights.dense_weight.cols()), hyper.num_classes));
  return make_params(hyper, std::move(weights));
}

/// One pooled convolution channel.
template <class Scalar>
struct PooledActivation {
  Scalar score{};
  Eigen::Index position = 0;
};

/// Intermediates of a forward pass, enough to run the backward pass and to
/// explain the prediction.
template <class Scalar>
struct ForwardTrace {
  nn::Matrix<Scalar> embedded;                          // sequence_length x position_dim
  std::vector<std::vector<PooledActivation<Scalar>>> pooled;  // [kernel][filter]
  nn::Vector<Scalar> features;                          // concatenated pooled scores
  nn::Vector<Scalar> hidden;                            // post-ReLU, empty without hidden layer
  nn::Vector<Scalar> logits;
  nn::Vector<Scalar> probs;
};

namespace detail {

template <class Scalar>
void check_input(std::span<const std::uint8_t> bytes, const HyperParams& hyper) {
  if (static_cast<int>(bytes.size()) != hyper.input_bytes()) {
    throw Error(ErrorKind::ShapeMismatch, "model expects " + std::to_string(hyper.input_bytes()) + " input bytes, got " +
                                              std::to_string(bytes.size()));
  }
  if (hyper.vocabulary < 256) {
    for (auto b : bytes) {
      if (b >= hyper.vocabulary) throw Error(ErrorKind::BadInput, "byte value outside the model vocabulary");
    }
  }
}

/// (S-k+1) x (k*g) view whose row i is the flattened window of rows [i, i+k).
template <class Scalar>
auto windows(const nn::Matrix<Scalar>& embedded, int k) {
  using Map = Eigen::Map<const nn::Matrix<Scalar>, 0, Eigen::OuterStride<>>;
  const auto g = embedded.cols();
  return Map(embedded.data(), embedded.rows() - k + 1, k * g, Eigen::OuterStride<>(g));
}

}  // namespace detail

/// Per-instruction rows: the concatenated byte embeddings plus the position column.
template <class Scalar>
nn::Matrix<Scalar> embed(std::span<const std::uint8_t> bytes, const ModelParams<Scalar>& params) {
  const auto& hyper = params.hyper;
  detail::check_input<Scalar>(bytes, hyper);
  const int f = hyper.byte_dim;
  nn::Matrix<Scalar> out = params.position.transpose();
  for (int row = 0; row < hyper.sequence_length; ++row) {
    for (int slot = 0; slot < hyper.instruction_bytes; ++slot) {
      const auto byte = bytes[static_cast<std::size_t>(row * hyper.instruction_bytes + slot)];
      out.row(row).segment(slot * f, f) += params.weights.embedding.row(byte);
    }
  }
  return out;
}

/// embed -> per kernel length: valid convolution, ReLU, global max pool ->
/// concatenation -> [hidden ReLU layer] -> dense -> softmax.
template <class Scalar>
ForwardTrace<Scalar> forward(std::span<const std::uint8_t> bytes, const ModelParams<Scalar>& params) {
  const auto& hyper = params.hyper;
  const auto& w = params.weights;
  ForwardTrace<Scalar> trace;
  trace.embedded = embed(bytes, params);
  trace.features.resize(hyper.pooled_size());
  trace.pooled.resize(hyper.kernel_lengths.size());

  Eigen::Index feature = 0;
  for (std::size_t ki = 0; ki < hyper.kernel_lengths.size(); ++ki) {
    const int k = hyper.kernel_lengths[ki];
    const nn::Matrix<Scalar> response = detail::windows(trace.embedded, k) * w.kernels[ki].transpose();
    auto& pooled = trace.pooled[ki];
    pooled.resize(hyper.num_filters);
    for (int j = 0; j < hyper.num_filters; ++j) {
      // relu then max-pool: a non-positive maximum leaves an all-zero channel,
      // whose smallest maximizing index is 0.
      const auto best = nn::global_max_pool(response.col(j));
      const Scalar value = best.value + w.conv_bias[ki](j);
      pooled[j] = value > 0 ? PooledActivation<Scalar>{value, best.index} : PooledActivation<Scalar>{Scalar(0), 0};
      trace.features(feature++) = pooled[j].score;
    }
  }

  if (hyper.hidden_units > 0) {
    trace.hidden = nn::relu(nn::dense(trace.features, w.hidden_weight, w.hidden_bias));
    trace.logits = nn::dense(trace.hidden, w.dense_weight, w.dense_bias);
  } else {
    trace.logits = nn::dense(trace.features, w.dense_weight, w.dense_bias);
  }
  trace.probs = nn::softmax(trace.logits);
  return trace;
}

template <class Scalar>
ForwardTrace<Scalar> forward(const InstructionBlock& block, const ModelParams<Scalar>& params) {
  return forward(block.view(), params);
}

template <class Scalar>
Scalar loss(std::span<const std::uint8_t> bytes, const ModelParams<Scalar>& params, int label) {
  return nn::cross_entropy(forward(bytes, params).probs, label);
}

/// Adds d(loss)/d(weights) * scale into `grads`. The position table has no
/// gradient; max pooling routes each channel's gradient to its argmax window.
template <class Scalar>
void accumulate_gradients(const ForwardTrace<Scalar>& trace, std::span<const std::uint8_t> bytes,
                          const ModelParams<Scalar>& params, int label, Scalar scale, GradientSet<Scalar>& grads) {
  const auto& hyper = params.hyper;
  const auto& w = params.weights;
  if (label < 0 || label >= hyper.num_classes) {
    throw Error(ErrorKind::BadLabel, "label " + std::to_string(label) + " outside the model's classes");
  }
  const nn::Vector<Scalar> d_logits = scale * nn::softmax_cross_entropy_grad(trace.probs, label);

  nn::Vector<Scalar> d_features;
  if (hyper.hidden_units > 0) {
    grads.dense_weight.noalias() += d_logits * trace.hidden.transpose();
    grads.dense_bias += d_logits;
    nn::Vector<Scalar> d_hidden = w.dense_weight.transpose() * d_logits;
    d_hidden = (trace.hidden.array() > 0).select(d_hidden, Scalar(0));
    grads.hidden_weight.noalias() += d_hidden * trace.features.transpose();
    grads.hidden_bias += d_hidden;
    d_features = w.hidden_weight.transpose() * d_hidden;
  } else {
    grads.dense_weight.noalias() += d_logits * trace.features.transpose();
    grads.dense_bias += d_logits;
    d_features = w.dense_weight.transpose() * d_logits;
  }

  const int g = hyper.position_dim;
  nn::Matrix<Scalar> d_embedded = nn::Matrix<Scalar>::Zero(hyper.sequence_length, g);
  Eigen::Index feature = 0;
  for (std::size_t ki = 0; ki < hyper.kernel_lengths.size(); ++ki) {
    const int k = hyper.kernel_lengths[ki];
    const auto win = detail::windows(trace.embedded, k);
    for (int j = 0; j < hyper.num_filters; ++j, ++feature) {
      const auto& act = trace.pooled[ki][j];
      if (!(act.score > 0)) continue;
      const Scalar d = d_features(feature);
      grads.kernels[ki].row(j) += d * win.row(act.position);
      grads.conv_bias[ki](j) += d;
      Eigen::Map<nn::Vector<Scalar>>(d_embedded.data() + act.position * g, k * g) +=
          d * w.kernels[ki].row(j).transpose();
    }
  }

  const int f = hyper.byte_dim;
  for (int row = 0; row < hyper.sequence_length; ++row) {
    if (d_embedded.row(row).isZero(0)) continue;
    for (int slot = 0; slot < hyper.instruction_bytes; ++slot) {
      const auto byte = bytes[static_cast<std::size_t>(row * hyper.instruction_bytes + slot)];
      grads.embedding.row(byte) += d_embedded.row(row).segment(slot * f, f);
    }
  }
}

template <class Scalar>
GradientSet<Scalar> backward(const ForwardTrace<Scalar>& trace, std::span<const std::uint8_t> bytes,
                             const ModelParams<Scalar>& params, int label) {
  auto grads = GradientSet<Scalar>::zeros(params.hyper);
  accumulate_gradients(trace, bytes, params, label, Scalar(1), grads);
  return grads;
}

template <class Scalar>
struct AdamState {
  std::vector<nn::AdamMoments<Scalar>> moments;
  long step = 0;
};

/// Adam over every trainable array. The position table is not touched.
template <class Scalar>
void adam_step(ModelParams<Scalar>& params, GradientSet<Scalar>& grads, AdamState<Scalar>& state,
               const nn::AdamConfig& config) {
  ++state.step;
  std::size_t index = 0;
  zip_arrays(
      params.hyper,
      [&](const std::string& name, auto& param, auto& grad) {
        if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
          throw Error(ErrorKind::ShapeMismatch, "adam: gradient for " + name + " has the wrong shape");
        }
        if (state.moments.size() <= index) state.moments.resize(index + 1);
        Eigen::Map<nn::Vector<Scalar>> flat(param.data(), param.size());
        Eigen::Map<const nn::Vector<Scalar>> flat_grad(grad.data(), grad.size());
        nn::adam_update<Scalar>(flat, flat_grad, state.moments[index], state.step, config);
        ++index;
      },
      params.weights, grads);
}

/// Serialized model layout:
///   "BEYE" | u32 version | u32 header length | JSON hyperparameters |
///   f32 arrays (embedding, kernels by ascending length, conv biases,
///   [hidden weight, hidden bias], dense weight, dense bias), all little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<float>& params);
ModelParams<float> deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

std::string hyper_to_json(const HyperParams& hyper);
HyperParams hyper_from_json(std::string_view text);

}  // namespace bineye
