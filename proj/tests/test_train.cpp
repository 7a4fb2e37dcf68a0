#include <doctest.h>

#include <cmath>
#include <sstream>

#include "bineye/train.hpp"
#include "support/elf_builder.hpp"

using namespace bineye;
using namespace bineye::testing;

namespace {

BlockVerdict verdict(OptLevel predicted, double p, std::size_t offset = 0) {
  BlockVerdict b;
  b.base_offset = offset;
  b.predicted = predicted;
  b.probs.fill((1.0 - p) / 3.0);
  b.probs[index_of(predicted)] = p;
  return b;
}

constexpr std::array<std::uint32_t, 4> kStamps = {0xE92D4800, 0xE3530000, 0x0A000005, 0xE51B3038};

/// Random words with the class word stamped on every `period`-th slot.
std::vector<LabeledBlock> stamped_blocks(std::size_t per_class, std::uint64_t seed, std::size_t period = 2) {
  Rng rng(seed);
  std::vector<LabeledBlock> out;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (auto level : kAllLevels) {
      LabeledBlock lb;
      lb.label = level;
      for (std::size_t w = 0; w < kBlockWords; ++w) {
        const auto word = w % period == 0 ? kStamps[index_of(level)] : static_cast<std::uint32_t>(rng.next());
        for (int b = 0; b < 4; ++b) lb.block.bytes[w * 4 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(word >> (8 * b));
      }
      out.push_back(std::move(lb));
    }
  }
  return out;
}

HyperParams narrow_hyper() {
  HyperParams h;
  h.num_filters = 8;
  return h;
}

Prediction prediction(OptLevel truth, OptLevel predicted) {
  Prediction p;
  p.truth = truth;
  p.predicted = predicted;
  p.scores[index_of(predicted)] = 1.0;
  return p;
}

}  // namespace

TEST_CASE("vote examples") {
  const auto majority = vote({verdict(OptLevel::O0, 0.7), verdict(OptLevel::O0, 0.8), verdict(OptLevel::O2O3, 0.99)});
  CHECK(majority.final_class == OptLevel::O0);
  CHECK(majority.confidence == doctest::Approx(0.75));

  const auto single = vote({verdict(OptLevel::Os, 0.4)});
  CHECK(single.final_class == OptLevel::Os);
  CHECK(single.confidence == doctest::Approx(0.4));

  const auto tie = vote({verdict(OptLevel::O0, 0.9), verdict(OptLevel::O2O3, 0.6)});
  CHECK(tie.final_class == OptLevel::O0);
  CHECK(tie.confidence == doctest::Approx(0.9));

  // probability outranks class order
  const auto reversed = vote({verdict(OptLevel::O0, 0.6), verdict(OptLevel::O2O3, 0.9)});
  CHECK(reversed.final_class == OptLevel::O2O3);

  // equal probabilities fall back to class order
  const auto order = vote({verdict(OptLevel::Os, 0.5), verdict(OptLevel::O1, 0.5)});
  CHECK(order.final_class == OptLevel::O1);

  const auto scores = tie.class_scores();
  CHECK(scores[index_of(OptLevel::O0)] == doctest::Approx(0.9));
  CHECK(scores[index_of(OptLevel::O2O3)] == doctest::Approx(0.6));
  CHECK(scores[index_of(OptLevel::O1)] == 0.0);

  CHECK_THROWS_AS(vote({}), Error);
}

TEST_CASE("vote is invariant to block order") {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<BlockVerdict> blocks;
    const auto n = 1 + rng.below(9);
    for (std::uint64_t i = 0; i < n; ++i) {
      // coarse probabilities make exact ties common
      blocks.push_back(verdict(kAllLevels[rng.below(4)], 0.25 + 0.25 * static_cast<double>(rng.below(4)), 4096 * i));
    }
    const auto reference = vote(blocks);
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto& b : blocks) ++counts[index_of(b.predicted)];
    CHECK(counts[index_of(reference.final_class)] == *std::max_element(counts.begin(), counts.end()));
    for (int p = 0; p < 5; ++p) {
      rng.shuffle(blocks);
      const auto permuted = vote(blocks);
      CHECK(permuted.final_class == reference.final_class);
      CHECK(permuted.confidence == reference.confidence);
      CHECK(permuted.class_scores() == reference.class_scores());
    }
  }
}

TEST_CASE("compute_metrics") {
  SUBCASE("perfect predictions") {
    std::vector<Prediction> preds;
    for (auto level : kAllLevels) {
      for (int i = 0; i < 3; ++i) preds.push_back(prediction(level, level));
    }
    const auto m = compute_metrics(preds);
    CHECK(m.samples == 12);
    CHECK(m.accuracy == 1.0);
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      CHECK(m.precision[t] == 1.0);
      CHECK(m.auc[t] == doctest::Approx(1.0));
      for (std::size_t p = 0; p < kNumClasses; ++p) CHECK(m.confusion[t][p] == (t == p ? 3u : 0u));
    }
  }
  SUBCASE("constant predictor on a balanced split") {
    std::vector<Prediction> preds;
    for (auto level : kAllLevels) {
      for (int i = 0; i < 5; ++i) preds.push_back(prediction(level, OptLevel::O1));
    }
    const auto m = compute_metrics(preds);
    CHECK(m.accuracy == doctest::Approx(0.25));
    CHECK(m.precision[index_of(OptLevel::O1)] == doctest::Approx(0.25));
    CHECK_FALSE(m.precision[index_of(OptLevel::O0)].has_value());
    CHECK_FALSE(m.precision[index_of(OptLevel::Os)].has_value());
    CHECK(metrics_json(m).find("null") != std::string::npos);
  }
  SUBCASE("confusion matrix agrees with accuracy") {
    Rng rng(4);
    std::vector<Prediction> preds;
    for (int i = 0; i < 500; ++i) preds.push_back(prediction(kAllLevels[rng.below(4)], kAllLevels[rng.below(4)]));
    const auto m = compute_metrics(preds);
    std::size_t total = 0, trace = 0;
    std::array<std::size_t, kNumClasses> truth_counts{};
    for (const auto& p : preds) ++truth_counts[index_of(p.truth)];
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      std::size_t row = 0;
      for (std::size_t p = 0; p < kNumClasses; ++p) row += m.confusion[t][p];
      CHECK(row == truth_counts[t]);
      total += row;
      trace += m.confusion[t][t];
    }
    CHECK(total == 500);
    CHECK(m.accuracy == doctest::Approx(static_cast<double>(trace) / 500.0).epsilon(1e-9));
  }
  CHECK(compute_metrics({}).samples == 0);
}

TEST_CASE("roc_curve corners, ordering and monotonicity") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + rng.below(40);
    std::vector<double> scores;
    std::vector<bool> positive;
    for (std::uint64_t i = 0; i < n; ++i) {
      scores.push_back(static_cast<double>(rng.below(10)) / 10.0);
      positive.push_back(rng.below(2) == 0);
    }
    const auto curve = roc_curve(scores, positive);
    REQUIRE(curve.size() >= 2);
    CHECK(curve.front().tpr == 1.0);
    CHECK(curve.front().fpr == 1.0);
    CHECK(curve.back().tpr == 0.0);
    CHECK(curve.back().fpr == 0.0);
    CHECK(curve.front().threshold <= *std::min_element(scores.begin(), scores.end()));
    CHECK(curve.back().threshold > *std::max_element(scores.begin(), scores.end()));
    for (std::size_t i = 1; i < curve.size(); ++i) {
      CHECK(curve[i].threshold > curve[i - 1].threshold);
      CHECK(curve[i].tpr <= curve[i - 1].tpr);
      CHECK(curve[i].fpr <= curve[i - 1].fpr);
    }
    const double area = auc(curve);
    CHECK(area >= 0.0);
    CHECK(area <= 1.0);
  }

  const std::vector<double> s = {0.9, 0.8, 0.2, 0.1};
  CHECK(auc(roc_curve(s, {true, true, false, false})) == doctest::Approx(1.0));
  CHECK(auc(roc_curve(s, {false, false, true, true})) == doctest::Approx(0.0));
  const std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
  CHECK(auc(roc_curve(flat, {true, false, true, false})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(roc_curve(s, {true}), Error);
}

TEST_CASE("fresh model starts near the uniform loss") {
  const auto blocks = stamped_blocks(5, 1);
  TrainConfig config;
  config.epochs = 1;
  config.seed = 3;
  const auto result = train_blocks(blocks, {}, HyperParams{}, config);
  REQUIRE(result.history.size() == 2);
  CHECK(result.history[0].epoch == 0);
  CHECK(result.history[0].train_loss == doctest::Approx(std::log(4.0)).epsilon(0.05));
  CHECK_FALSE(result.history[0].heldout_accuracy.has_value());
}

TEST_CASE("training separates stamped classes and is deterministic") {
  const auto train_set = stamped_blocks(6, 2);
  const auto heldout = stamped_blocks(2, 3);
  TrainConfig config;
  config.epochs = 30;
  config.batch_size = 8;
  config.seed = 5;
  config.adam.learning_rate = 1e-2;
  const auto a = train_blocks(train_set, heldout, narrow_hyper(), config);
  CHECK(a.history.size() == 31);
  CHECK(a.history.back().train_accuracy == 1.0);
  CHECK(a.history[a.best_epoch].heldout_accuracy == 1.0);
  CHECK(a.train_blocks == 24);
  CHECK(a.heldout_blocks == 8);
  REQUIRE(a.history.back().heldout_accuracy.has_value());

  config.threads = 3;
  const auto b = train_blocks(train_set, heldout, narrow_hyper(), config);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].train_loss == b.history[i].train_loss);
  CHECK(a.best.weights == b.best.weights);

  for (const auto& lb : heldout) {
    CHECK(argmax_class(predict_block(a.best, lb.block)) == lb.label);
  }

  config.threads = 1;
  config.stop_at_train_accuracy = 1.0;
  const auto early = train_blocks(train_set, heldout, narrow_hyper(), config);
  CHECK(early.history.size() < a.history.size());
  CHECK(early.history.back().train_accuracy == 1.0);

  std::ostringstream csv;
  write_history_csv(a.history, csv);
  CHECK(csv.str().rfind("epoch,loss,heldout_accuracy,train_accuracy\n0,", 0) == 0);
}

TEST_CASE("training errors") {
  auto blocks = stamped_blocks(2, 1);
  std::erase_if(blocks, [](const LabeledBlock& b) { return b.label == OptLevel::O1; });
  try {
    train_blocks(blocks, {}, narrow_hyper(), TrainConfig{});
    FAIL("expected EmptyClass");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyClass);
  }
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("file-level evaluation on ELF fixtures") {
  TempDir dir;
  const auto params = init_params<float>(narrow_hyper(), 1);
  CorpusManifest manifest;
  Rng rng(2);
  for (auto level : kAllLevels) {
    for (int i = 0; i < 2; ++i) {
      std::vector<std::uint32_t> words(1024 * 2 + 100);
      for (auto& w : words) w = static_cast<std::uint32_t>(rng.next());
      const auto path = dir / (std::string(to_string(level)) + std::to_string(i) + ".o");
      write_bytes(path, text_object(words));
      add_sample(manifest, path, level == OptLevel::O2O3 ? "-O2" : "-" + std::string(to_string(level)));
    }
  }
  for (auto& r : manifest.records) r.split = Split::Test;

  const auto verdict = classify_file(params, manifest.records[0].path);
  CHECK(verdict.blocks.size() == 2);
  CHECK(classify_file(params, manifest.records[0].path, 256).blocks.size() == 3);

  const auto files = evaluate_files(params, manifest, Split::Test);
  CHECK(files.metrics.samples == 8);
  CHECK(files.verdicts.size() == 8);
  const auto curves = roc(params, manifest, Split::Test);
  for (const auto& c : curves) {
    CHECK(c.front().tpr == 1.0);
    CHECK(c.back().fpr == 0.0);
  }
  std::ostringstream csv;
  write_roc_csv(curves, csv);
  CHECK(csv.str().rfind("class,threshold,tpr,fpr\n", 0) == 0);

  const auto blocks = evaluate(params, manifest, Split::Test);
  CHECK(blocks.samples == 8);
  CHECK(evaluate(params, manifest, Split::Test).accuracy == blocks.accuracy);
  CHECK(evaluate(params, manifest, Split::Test, BlockPolicy::AllBlocks).samples == 16);

  try {
    evaluate(params, manifest, Split::Train);
    FAIL("expected EmptySplit");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptySplit);
  }

  write_bytes(dir / "small.o", text_object(std::vector<std::uint32_t>(10, 0xE1A00000)));
  try {
    classify_file(params, dir / "small.o");
    FAIL("expected NoCode");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NoCode);
  }
}
