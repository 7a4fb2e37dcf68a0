#include "bineye/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "bineye/parallel.hpp"
#include "bineye/random.hpp"

namespace bineye {

namespace {

struct PassSummary {
  double loss = 0.0;
  double accuracy = 0.0;
};

PassSummary evaluate_pass(const ModelParams<float>& params, std::span<const LabeledBlock> blocks, std::size_t threads) {
  std::vector<double> losses(blocks.size());
  std::vector<char> correct(blocks.size());
  parallel_for(blocks.size(), threads, [&](std::size_t i) {
    const auto trace = forward(blocks[i].block, params);
    const int label = static_cast<int>(index_of(blocks[i].label));
    losses[i] = nn::cross_entropy(trace.probs, label);
    Eigen::Index predicted = 0;
    trace.probs.maxCoeff(&predicted);
    correct[i] = predicted == label;
  });
  PassSummary s;
  if (blocks.empty()) return s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    s.loss += losses[i];
    s.accuracy += correct[i];
  }
  s.loss /= static_cast<double>(blocks.size());
  s.accuracy /= static_cast<double>(blocks.size());
  return s;
}

void require_every_class(std::span<const LabeledBlock> blocks) {
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& b : blocks) ++counts[index_of(b.label)];
  for (auto level : kAllLevels) {
    if (counts[index_of(level)] == 0) {
      throw Error(ErrorKind::EmptyClass, "no training blocks for label " + std::string(to_string(level)));
    }
  }
}

double mean_sorted(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

nlohmann::json roc_json(const RocCurve& curve) {
  auto points = nlohmann::json::array();
  for (const auto& p : curve) points.push_back({{"threshold", p.threshold}, {"tpr", p.tpr}, {"fpr", p.fpr}});
  return points;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::BadInput, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::BadInput, "batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw Error(ErrorKind::BadInput, "learning rate must be positive");
}

TrainResult train_blocks(std::span<const LabeledBlock> train, std::span<const LabeledBlock> heldout,
                         const HyperParams& hyper, const TrainConfig& config) {
  config.validate();
  hyper.validate();
  if (hyper.input_bytes() != static_cast<int>(kBlockBytes)) {
    throw Error(ErrorKind::ShapeMismatch, "training on instruction blocks needs sequence_length * instruction_bytes == " +
                                              std::to_string(kBlockBytes));
  }
  require_every_class(train);

  TrainResult result;
  result.train_blocks = train.size();
  result.heldout_blocks = heldout.size();

  auto params = init_params<float>(hyper, config.seed);
  AdamState<float> optimizer;
  Rng order_rng(config.seed ^ 0x5851f42d4c957f2dULL);

  auto record_epoch = [&](int epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    const auto pass = evaluate_pass(params, train, config.threads);
    rec.train_loss = pass.loss;
    rec.train_accuracy = pass.accuracy;
    if (!heldout.empty()) rec.heldout_accuracy = evaluate_pass(params, heldout, config.threads).accuracy;
    result.history.push_back(rec);
    return rec;
  };
  auto selection_score = [](const EpochRecord& rec) { return rec.heldout_accuracy.value_or(rec.train_accuracy); };

  EpochRecord best_record = record_epoch(0);
  result.best = params;
  result.best_epoch = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  std::vector<GradientSet<float>> slots(std::min(batch_size, train.size()), GradientSet<float>::zeros(hyper));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t count = std::min(batch_size, order.size() - start);
      const float scale = 1.0f / static_cast<float>(count);
      parallel_for(count, config.threads, [&](std::size_t i) {
        auto& slot = slots[i];
        zip_arrays(hyper, [](const std::string&, auto& a) { a.setZero(); }, slot);
        const auto& sample = train[order[start + i]];
        const auto trace = forward(sample.block, params);
        accumulate_gradients(trace, sample.block.view(), params, static_cast<int>(index_of(sample.label)), scale,
                             slot);
      });
      // Fixed-order reduction keeps results independent of the thread count.
      auto& total = slots[0];
      for (std::size_t i = 1; i < count; ++i) {
        zip_arrays(hyper, [](const std::string&, auto& a, const auto& b) { a += b; }, total, slots[i]);
      }
      adam_step(params, total, optimizer, config.adam);
    }

    const EpochRecord rec = record_epoch(epoch);
    const double score = selection_score(rec);
    const double best_score = selection_score(best_record);
    if (score > best_score || (score == best_score && rec.train_loss < best_record.train_loss)) {
      best_record = rec;
      result.best = params;
      result.best_epoch = epoch;
    }
    if (config.stop_at_train_accuracy && rec.train_accuracy >= *config.stop_at_train_accuracy) break;
  }
  return result;
}

std::vector<LabeledBlock> collect_blocks(std::span<const SampleRecord* const> records, BlockPolicy policy,
                                         std::size_t min_fill, bool all_exec, std::size_t* skipped) {
  std::vector<LabeledBlock> out;
  for (const auto* record : records) {
    std::vector<InstructionBlock> blocks;
    try {
      blocks = file_blocks(record->path, min_fill, all_exec);
    } catch (const Error&) {
      if (skipped) ++*skipped;
      continue;
    }
    if (blocks.empty()) {
      if (skipped) ++*skipped;
      continue;
    }
    if (policy == BlockPolicy::FirstBlock) blocks.resize(1);
    for (auto& b : blocks) out.push_back({b, record->label, record->path});
  }
  return out;
}

TrainResult train(const CorpusManifest& manifest, const HyperParams& hyper, const TrainConfig& config) {
  std::size_t skipped = 0;
  const auto train_records = records_in(manifest, Split::Train);
  const auto test_records = records_in(manifest, Split::Test);
  const auto train_set = collect_blocks(train_records, config.blocks_per_file, config.min_fill, config.all_exec, &skipped);
  const auto heldout = collect_blocks(test_records, config.blocks_per_file, config.min_fill, config.all_exec, &skipped);
  auto result = train_blocks(train_set, heldout, hyper, config);
  result.skipped_files = skipped;
  return result;
}

RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw Error(ErrorKind::ShapeMismatch, "roc: scores and labels differ in length");
  std::vector<double> thresholds(scores.begin(), scores.end());
  double lowest = 0.0;
  double highest = 1.0;
  for (double s : scores) {
    lowest = std::min(lowest, s);
    highest = std::max(highest, s);
  }
  thresholds.push_back(lowest);
  thresholds.push_back(std::nextafter(highest, std::numeric_limits<double>::infinity()));
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const auto positives = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t negatives = positive.size() - positives;
  RocCurve curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (positive[i] ? tp : fp)++;
    }
    // An empty class counts as fully accepted only at the accept-all threshold.
    const double accept_all = t <= lowest ? 1.0 : 0.0;
    curve.push_back({t, positives ? static_cast<double>(tp) / static_cast<double>(positives) : accept_all,
                     negatives ? static_cast<double>(fp) / static_cast<double>(negatives) : accept_all});
  }
  return curve;
}

double auc(const RocCurve& curve) {
  std::vector<std::pair<double, double>> points;
  for (const auto& p : curve) points.emplace_back(p.fpr, p.tpr);
  std::sort(points.begin(), points.end());
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].first - points[i - 1].first) * (points[i].second + points[i - 1].second) / 2.0;
  }
  return area;
}

Metrics compute_metrics(std::span<const Prediction> predictions) {
  Metrics m;
  m.samples = predictions.size();
  for (const auto& p : predictions) ++m.confusion[index_of(p.truth)][index_of(p.predicted)];
  std::size_t diagonal = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    diagonal += m.confusion[c][c];
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < kNumClasses; ++t) predicted += m.confusion[t][c];
    if (predicted > 0) m.precision[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(predicted);
  }
  m.accuracy = m.samples ? static_cast<double>(diagonal) / static_cast<double>(m.samples) : 0.0;

  std::vector<double> scores(predictions.size());
  std::vector<bool> positive(predictions.size());
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      scores[i] = predictions[i].scores[c];
      positive[i] = index_of(predictions[i].truth) == c;
    }
    m.roc[c] = roc_curve(scores, positive);
    m.auc[c] = auc(m.roc[c]);
  }
  return m;
}

std::array<double, kNumClasses> predict_block(const ModelParams<float>& params, const InstructionBlock& block) {
  const auto trace = forward(block, params);
  std::array<double, kNumClasses> probs{};
  for (std::size_t c = 0; c < kNumClasses; ++c) probs[c] = trace.probs(static_cast<Eigen::Index>(c));
  return probs;
}

OptLevel argmax_class(const std::array<double, kNumClasses>& probs) {
  return static_cast<OptLevel>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Metrics evaluate(const ModelParams<float>& params, const CorpusManifest& manifest, Split split, BlockPolicy policy,
                 std::size_t min_fill, std::size_t threads) {
  const auto records = records_in(manifest, split);
  const auto blocks = collect_blocks(records, policy, min_fill, false);
  if (blocks.empty()) throw Error(ErrorKind::EmptySplit, "no blocks in split " + std::string(to_string(split)));
  std::vector<Prediction> predictions(blocks.size());
  parallel_for(blocks.size(), threads, [&](std::size_t i) {
    const auto probs = predict_block(params, blocks[i].block);
    predictions[i] = {blocks[i].label, argmax_class(probs), probs};
  });
  return compute_metrics(predictions);
}

std::array<double, kNumClasses> FileVerdict::class_scores() const {
  std::array<double, kNumClasses> scores{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<double> support;
    for (const auto& b : blocks) {
      if (index_of(b.predicted) == c) support.push_back(b.probs[c]);
    }
    scores[c] = mean_sorted(std::move(support));
  }
  return scores;
}

FileVerdict vote(std::vector<BlockVerdict> blocks, std::string path) {
  if (blocks.empty()) throw Error(ErrorKind::NoCode, "no blocks to vote on");
  FileVerdict verdict;
  verdict.path = std::move(path);
  verdict.blocks = std::move(blocks);

  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& b : verdict.blocks) ++counts[index_of(b.predicted)];
  const auto means = verdict.class_scores();
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    if (counts[c] > counts[best] || (counts[c] == counts[best] && means[c] > means[best])) best = c;
  }
  verdict.final_class = static_cast<OptLevel>(best);
  verdict.confidence = means[best];
  return verdict;
}

FileVerdict classify_blocks(const ModelParams<float>& params, std::span<const InstructionBlock> blocks,
                            std::string path) {
  std::vector<BlockVerdict> verdicts;
  verdicts.reserve(blocks.size());
  for (const auto& block : blocks) {
    const auto probs = predict_block(params, block);
    verdicts.push_back({block.base_offset, argmax_class(probs), probs});
  }
  return vote(std::move(verdicts), std::move(path));
}

FileVerdict classify_file(const ModelParams<float>& params, const std::filesystem::path& path, std::size_t min_fill,
                          bool all_exec) {
  const auto blocks = file_blocks(path, min_fill, all_exec);
  if (blocks.empty()) {
    throw Error(ErrorKind::NoCode, path.string() + " has less than " + std::to_string(min_fill) + " bytes of code");
  }
  return classify_blocks(params, blocks, path.string());
}

FileEvaluation evaluate_files(const ModelParams<float>& params, const CorpusManifest& manifest, Split split,
                              std::size_t min_fill, std::size_t threads) {
  const auto records = records_in(manifest, split);
  std::vector<std::optional<FileVerdict>> slots(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    try {
      slots[i] = classify_file(params, records[i]->path, min_fill);
    } catch (const Error&) {
    }
  });
  FileEvaluation eval;
  std::vector<Prediction> predictions;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!slots[i]) {
      ++eval.skipped_files;
      continue;
    }
    predictions.push_back({records[i]->label, slots[i]->final_class, slots[i]->class_scores()});
    eval.truths.push_back(records[i]->label);
    eval.verdicts.push_back(std::move(*slots[i]));
  }
  if (predictions.empty()) throw Error(ErrorKind::EmptySplit, "no classifiable files in split " + std::string(to_string(split)));
  eval.metrics = compute_metrics(predictions);
  return eval;
}

std::array<RocCurve, kNumClasses> roc(const ModelParams<float>& params, const CorpusManifest& manifest, Split split,
                                      std::size_t min_fill, std::size_t threads) {
  return evaluate_files(params, manifest, split, min_fill, threads).metrics.roc;
}

std::string metrics_json(const Metrics& metrics, bool include_roc) {
  nlohmann::json j;
  j["samples"] = metrics.samples;
  j["accuracy"] = metrics.accuracy;
  nlohmann::json precision = nlohmann::json::object();
  nlohmann::json confusion = nlohmann::json::array();
  nlohmann::json areas = nlohmann::json::object();
  for (auto level : kAllLevels) {
    const auto c = index_of(level);
    const std::string name(to_string(level));
    precision[name] = metrics.precision[c] ? nlohmann::json(*metrics.precision[c]) : nlohmann::json(nullptr);
    confusion.push_back(metrics.confusion[c]);
    areas[name] = metrics.auc[c];
  }
  j["precision"] = precision;
  j["confusion"] = confusion;
  j["auc"] = areas;
  j["classes"] = {"O0", "O1", "O2O3", "Os"};
  if (include_roc) {
    nlohmann::json curves = nlohmann::json::object();
    for (auto level : kAllLevels) curves[std::string(to_string(level))] = roc_json(metrics.roc[index_of(level)]);
    j["roc"] = curves;
  }
  return j.dump(2);
}

std::string verdict_json(const FileVerdict& verdict) {
  nlohmann::json j;
  j["path"] = verdict.path;
  j["final_class"] = to_string(verdict.final_class);
  j["confidence"] = verdict.confidence;
  auto blocks = nlohmann::json::array();
  for (const auto& b : verdict.blocks) {
    blocks.push_back({{"base_offset", b.base_offset}, {"predicted", to_string(b.predicted)}, {"probs", b.probs}});
  }
  j["blocks"] = blocks;
  return j.dump(2);
}

void write_history_csv(std::span<const EpochRecord> history, std::ostream& out) {
  out << "epoch,loss,heldout_accuracy,train_accuracy\n";
  out << std::setprecision(9);
  for (const auto& rec : history) {
    out << rec.epoch << ',' << rec.train_loss << ',';
    if (rec.heldout_accuracy) out << *rec.heldout_accuracy;
    out << ',' << rec.train_accuracy << '\n';
  }
}

void write_roc_csv(const std::array<RocCurve, kNumClasses>& curves, std::ostream& out) {
  out << "class,threshold,tpr,fpr\n";
  out << std::setprecision(17);
  for (auto level : kAllLevels) {
    for (const auto& p : curves[index_of(level)]) {
      out << to_string(level) << ',' << p.threshold << ',' << p.tpr << ',' << p.fpr << '\n';
    }
  }
}

}  // namespace bineye
