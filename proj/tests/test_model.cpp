#include <doctest.h>

#include <cmath>
#include <cstring>

#include "bineye/model.hpp"
#include "support/elf_builder.hpp"

using namespace bineye;
using namespace bineye::testing;

namespace {

HyperParams tiny_hyper(int hidden = 0) {
  HyperParams h;
  h.sequence_length = 16;
  h.byte_dim = 2;
  h.position_dim = 8;
  h.kernel_lengths = {2, 3};
  h.num_filters = 3;
  h.hidden_units = hidden;
  return h;
}

std::vector<std::uint8_t> random_bytes(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> bytes(n);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.next());
  return bytes;
}

/// The model written out with the primitives, one step at a time.
nn::VectorD naive_forward(const std::vector<std::uint8_t>& bytes, const ModelParams<double>& p) {
  const auto& h = p.hyper;
  nn::MatrixD x(h.sequence_length, h.position_dim);
  for (int n = 0; n < h.sequence_length; ++n) {
    for (int slot = 0; slot < h.instruction_bytes; ++slot) {
      const auto byte = bytes[static_cast<std::size_t>(n * h.instruction_bytes + slot)];
      for (int d = 0; d < h.byte_dim; ++d) x(n, slot * h.byte_dim + d) = p.weights.embedding(byte, d);
    }
    for (int k = 0; k < h.position_dim; ++k) {
      x(n, k) += (1.0 - (n + 1.0) / (h.sequence_length + 1.0)) -
                 (k / (h.position_dim + 1.0)) * (1.0 - 2.0 * (n + 1.0) / (h.sequence_length + 1.0));
    }
  }
  nn::VectorD features(h.pooled_size());
  Eigen::Index at = 0;
  for (std::size_t ki = 0; ki < h.kernel_lengths.size(); ++ki) {
    const int k = h.kernel_lengths[ki];
    for (int j = 0; j < h.num_filters; ++j) {
      nn::MatrixD kernel(k, h.position_dim);
      for (int r = 0; r < k; ++r) {
        for (int c = 0; c < h.position_dim; ++c) kernel(r, c) = p.weights.kernels[ki](j, r * h.position_dim + c);
      }
      const nn::VectorD response = nn::relu(nn::conv_valid(x, kernel, p.weights.conv_bias[ki](j)));
      features(at++) = nn::global_max_pool(response).value;
    }
  }
  if (h.hidden_units > 0) {
    const nn::VectorD hidden = nn::relu(nn::dense(features, p.weights.hidden_weight, p.weights.hidden_bias));
    return nn::softmax(nn::dense(hidden, p.weights.dense_weight, p.weights.dense_bias));
  }
  return nn::softmax(nn::dense(features, p.weights.dense_weight, p.weights.dense_bias));
}

ErrorKind checkpoint_error(std::span<const std::uint8_t> bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("position embedding values") {
  const auto one = position_embedding_matrix(1, 1);
  CHECK(one(0, 0) == 0.5);
  const auto wide = position_embedding_matrix(1, 16);
  for (int k = 0; k < 16; ++k) CHECK(wide(k, 0) == doctest::Approx(0.5));

  const auto table = position_embedding_matrix(1024, 16);
  REQUIRE(table.rows() == 16);
  REQUIRE(table.cols() == 1024);
  CHECK(table(0, 0) == doctest::Approx(0.9990244).epsilon(1e-6));
  CHECK(table(0, 1023) == doctest::Approx(0.0009756).epsilon(1e-3));
  CHECK(table(0, 0) == doctest::Approx(1.0 - 1.0 / 1025.0).epsilon(1e-12));
  // k = 16: (1 - n/1025) - (16/17)(1 - 2n/1025)
  CHECK(table(15, 99) == doctest::Approx((1.0 - 100.0 / 1025.0) - (15.0 / 17.0) * (1.0 - 200.0 / 1025.0)));
}

TEST_CASE("position embedding is antisymmetric about the middle position") {
  for (int s : {1, 2, 7, 64, 1024}) {
    const auto table = position_embedding_matrix(s, 16);
    for (int n = 0; n < s; ++n) {
      for (int k = 0; k < 16; ++k) CHECK(table(k, n) + table(k, s - 1 - n) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("param_count") {
  CHECK(param_count(HyperParams{}) == 32260);
  HyperParams no_filters;
  no_filters.num_filters = 0;
  CHECK(param_count(no_filters) == 256 * 4 + 4);
  HyperParams hidden;
  hidden.hidden_units = 10;
  CHECK(param_count(hidden) == 32260 - (512 * 4 + 4) + (512 * 10 + 10) + (10 * 4 + 4));

  for (auto h : {HyperParams{}, tiny_hyper(), tiny_hyper(5)}) {
    std::int64_t counted = 0;
    auto zeros = Trainables<float>::zeros(h);
    zip_arrays(h, [&](const std::string&, auto& a) { counted += a.size(); }, zeros);
    CHECK(counted == param_count(h));
  }
}

TEST_CASE("hyperparameter validation") {
  auto bad = [](auto mutate) {
    HyperParams h;
    mutate(h);
    try {
      h.validate();
    } catch (const Error& e) {
      return e.kind() == ErrorKind::BadInput;
    }
    return false;
  };
  CHECK(bad([](HyperParams& h) { h.position_dim = 12; }));
  CHECK(bad([](HyperParams& h) { h.kernel_lengths = {3, 2}; }));
  CHECK(bad([](HyperParams& h) { h.kernel_lengths = {}; }));
  CHECK(bad([](HyperParams& h) { h.num_classes = 3; }));
  CHECK(bad([](HyperParams& h) { h.vocabulary = 300; }));
  CHECK(bad([](HyperParams& h) { h.kernel_lengths = {2, 2000}; }));
  CHECK_NOTHROW(HyperParams{}.validate());
  CHECK(hyper_from_json(hyper_to_json(tiny_hyper(5))) == tiny_hyper(5));
}

TEST_CASE("embed shape and rows") {
  const auto params = init_params<double>(HyperParams{}, 1);
  const std::vector<std::uint8_t> zeros(4096, 0);
  const auto x = embed<double>(zeros, params);
  REQUIRE(x.rows() == 1024);
  REQUIRE(x.cols() == 16);
  for (int n : {0, 500, 1023}) {
    for (int slot = 0; slot < 4; ++slot) {
      for (int d = 0; d < 4; ++d) {
        CHECK(x(n, slot * 4 + d) == doctest::Approx(params.weights.embedding(0, d) + params.position(slot * 4 + d, n)));
      }
    }
  }

  // changing one instruction changes only its own row
  auto edited = zeros;
  edited[4 * 37 + 2] = 0x9A;
  const auto y = embed<double>(edited, params);
  for (Eigen::Index n = 0; n < 1024; ++n) {
    if (n == 37) {
      CHECK_FALSE(x.row(n).isApprox(y.row(n)));
    } else {
      CHECK(x.row(n) == y.row(n));
    }
  }

  CHECK_THROWS_AS(embed<double>(std::vector<std::uint8_t>(100, 0), params), Error);
}

TEST_CASE("forward agrees with a naive composition of the primitives") {
  Rng rng(4);
  for (int hidden : {0, 5}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto params = init_params<double>(tiny_hyper(hidden), seed);
      for (auto& b : params.weights.conv_bias) {
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-0.1, 0.1);
      }
      const auto bytes = random_bytes(rng, 64);
      const auto trace = forward<double>(bytes, params);
      const auto expected = naive_forward(bytes, params);
      for (Eigen::Index c = 0; c < 4; ++c) CHECK(trace.probs(c) == doctest::Approx(expected(c)).epsilon(1e-12));
      CHECK(trace.features.size() == params.hyper.pooled_size());
      CHECK(trace.pooled.size() == 2);
      CHECK(trace.probs.sum() == doctest::Approx(1.0));
      CHECK(trace.hidden.size() == hidden);
    }
  }
}

TEST_CASE("float forward on a full block tracks the double forward") {
  const auto params = init_params<float>(HyperParams{}, 9);
  Rng rng(5);
  const auto bytes = random_bytes(rng, 4096);
  const auto f = forward<float>(bytes, params);
  const auto d = forward<double>(bytes, params.cast<double>());
  for (Eigen::Index c = 0; c < 4; ++c) CHECK(f.probs(c) == doctest::Approx(d.probs(c)).epsilon(1e-4));
}

TEST_CASE("a network with zero conv weights outputs softmax of the dense bias") {
  const auto h = HyperParams{};
  auto weights = Trainables<double>::zeros(h);
  weights.dense_bias << 1.0, 0.0, -1.0, 0.5;
  Rng rng(6);
  for (Eigen::Index i = 0; i < weights.embedding.size(); ++i) weights.embedding.data()[i] = rng.uniform(-1, 1);
  const auto params = make_params(h, weights);
  const auto trace = forward<double>(random_bytes(rng, 4096), params);
  const auto expected = nn::softmax(weights.dense_bias);
  for (Eigen::Index c = 0; c < 4; ++c) CHECK(trace.probs(c) == doctest::Approx(expected(c)).epsilon(1e-12));
  for (const auto& per_kernel : trace.pooled) {
    for (const auto& act : per_kernel) {
      CHECK(act.score == 0.0);
      CHECK(act.position == 0);
    }
  }
}

TEST_CASE("untrained default model is near uniform") {
  const auto params = init_params<float>(HyperParams{}, 1);
  Rng rng(7);
  const auto trace = forward<float>(random_bytes(rng, 4096), params);
  for (Eigen::Index c = 0; c < 4; ++c) CHECK(trace.probs(c) == doctest::Approx(0.25).epsilon(0.5));
}

TEST_CASE("init_params is deterministic in the seed") {
  const auto a = init_params<float>(HyperParams{}, 42);
  const auto b = init_params<float>(HyperParams{}, 42);
  const auto c = init_params<float>(HyperParams{}, 43);
  CHECK(a.weights == b.weights);
  CHECK_FALSE(a.weights == c.weights);
  CHECK(a.weights.embedding.cwiseAbs().maxCoeff() <= 0.05f);
  const double limit = std::sqrt(6.0 / (2 * 16 + 2 * 16 * 128));
  CHECK(a.weights.kernels[0].cwiseAbs().maxCoeff() <= limit);
  CHECK(a.weights.conv_bias[0].isZero(0));
  CHECK(a.weights.dense_bias.isZero(0));
}

TEST_CASE("training steps leave the position table untouched") {
  auto params = init_params<double>(tiny_hyper(), 3);
  const auto position = params.position;
  AdamState<double> state;
  Rng rng(8);
  for (int step = 0; step < 20; ++step) {
    const auto bytes = random_bytes(rng, 64);
    const auto trace = forward<double>(bytes, params);
    auto grads = backward(trace, bytes, params, static_cast<int>(rng.below(4)));
    adam_step(params, grads, state, {});
  }
  CHECK(params.position == position);
  CHECK_FALSE(params.weights == init_params<double>(tiny_hyper(), 3).weights);
}

TEST_CASE("loss decreases when training on one sample") {
  auto params = init_params<double>(tiny_hyper(), 11);
  Rng rng(9);
  const auto bytes = random_bytes(rng, 64);
  const double before = loss<double>(bytes, params, 2);
  AdamState<double> state;
  nn::AdamConfig config;
  config.learning_rate = 1e-2;
  for (int step = 0; step < 50; ++step) {
    auto grads = backward(forward<double>(bytes, params), bytes, params, 2);
    adam_step(params, grads, state, config);
  }
  CHECK(loss<double>(bytes, params, 2) < before);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  for (auto h : {HyperParams{}, tiny_hyper(7)}) {
    const auto params = init_params<float>(h, 5);
    save_checkpoint(params, dir / "m.bin");
    const auto loaded = load_checkpoint(dir / "m.bin");
    CHECK(loaded.hyper == params.hyper);
    CHECK(loaded.weights == params.weights);
    CHECK(loaded.position == params.position);
    save_checkpoint(loaded, dir / "m2.bin");
    CHECK(read_file(dir / "m.bin") == read_file(dir / "m2.bin"));
  }
  const auto bytes = serialize_checkpoint(init_params<float>(HyperParams{}, 5));
  CHECK(std::memcmp(bytes.data(), "BEYE", 4) == 0);
  CHECK(bytes.size() > 32260 * 4);
}

TEST_CASE("checkpoint errors") {
  const auto good = serialize_checkpoint(init_params<float>(tiny_hyper(), 5));

  auto truncated = good;
  truncated.resize(good.size() - 3);
  CHECK(checkpoint_error(truncated) == ErrorKind::CorruptPayload);
  CHECK(checkpoint_error(std::span(good).first(10)) == ErrorKind::CorruptPayload);

  auto magic = good;
  magic[0] = 'X';
  CHECK(checkpoint_error(magic) == ErrorKind::BadMagic);

  auto version = good;
  version[4] = 2;
  CHECK(checkpoint_error(version) == ErrorKind::VersionMismatch);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(checkpoint_error(trailing) == ErrorKind::CorruptPayload);

  auto nan = good;
  const float q = std::nanf("");
  std::memcpy(nan.data() + nan.size() - 4, &q, 4);
  CHECK(checkpoint_error(nan) == ErrorKind::CorruptPayload);

  auto header = good;
  header[12] = '[';
  CHECK(checkpoint_error(header) == ErrorKind::CorruptPayload);

  TempDir dir;
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), Error);
}
