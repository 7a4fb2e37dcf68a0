#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bineye/corpus.hpp"
#include "bineye/elf.hpp"
#include "bineye/model.hpp"

namespace bineye {

enum class BlockPolicy { FirstBlock, AllBlocks };

struct LabeledBlock {
  InstructionBlock block;
  OptLevel label = OptLevel::O0;
  std::string source;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  nn::AdamConfig adam;
  std::uint64_t seed = 0;
  BlockPolicy blocks_per_file = BlockPolicy::FirstBlock;
  std::size_t min_fill = kDefaultMinFill;
  bool all_exec = false;
  std::size_t threads = 1;
  /// Stop once a clean pass over the training blocks reaches this accuracy.
  std::optional<double> stop_at_train_accuracy;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> heldout_accuracy;
};

struct TrainResult {
  ModelParams<float> best;
  int best_epoch = 0;
  std::vector<EpochRecord> history;
  std::size_t skipped_files = 0;
  std::size_t train_blocks = 0;
  std::size_t heldout_blocks = 0;
};

/// Minibatch cross-entropy training with Adam. The retained model is the one
/// with the best held-out accuracy, or the best training accuracy when no
/// held-out blocks are given. Throws EmptyClass if a label has no training block.
TrainResult train_blocks(std::span<const LabeledBlock> train, std::span<const LabeledBlock> heldout,
                         const HyperParams& hyper, const TrainConfig& config);

/// Trains on the manifest's train split and tracks accuracy on its test split.
/// Files that fail extraction are skipped and counted.
TrainResult train(const CorpusManifest& manifest, const HyperParams& hyper, const TrainConfig& config);

std::vector<LabeledBlock> collect_blocks(std::span<const SampleRecord* const> records, BlockPolicy policy,
                                         std::size_t min_fill, bool all_exec, std::size_t* skipped = nullptr);

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

using RocCurve = std::vector<RocPoint>;

/// One-vs-rest curve: a sample is called positive when its score >= threshold.
/// Thresholds are 0, every observed score, and one value above 1.
RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& positive);
double auc(const RocCurve& curve);

struct Metrics {
  std::size_t samples = 0;
  double accuracy = 0.0;
  /// TP / (TP + FP); empty when the class was never predicted.
  std::array<std::optional<double>, kNumClasses> precision{};
  /// confusion[truth][predicted]
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
  std::array<RocCurve, kNumClasses> roc{};
  std::array<double, kNumClasses> auc{};
};

struct Prediction {
  OptLevel truth = OptLevel::O0;
  OptLevel predicted = OptLevel::O0;
  std::array<double, kNumClasses> scores{};  // per-class score used for ROC
};

Metrics compute_metrics(std::span<const Prediction> predictions);

std::array<double, kNumClasses> predict_block(const ModelParams<float>& params, const InstructionBlock& block);
OptLevel argmax_class(const std::array<double, kNumClasses>& probs);

/// Block-level metrics over a split. Throws EmptySplit.
Metrics evaluate(const ModelParams<float>& params, const CorpusManifest& manifest, Split split,
                 BlockPolicy policy = BlockPolicy::FirstBlock, std::size_t min_fill = kDefaultMinFill,
                 std::size_t threads = 1);

struct BlockVerdict {
  std::size_t base_offset = 0;
  OptLevel predicted = OptLevel::O0;
  std::array<double, kNumClasses> probs{};
};

struct FileVerdict {
  std::string path;
  std::vector<BlockVerdict> blocks;
  OptLevel final_class = OptLevel::O0;
  /// Mean probability of final_class over the blocks that predicted it.
  double confidence = 0.0;

  /// Mean probability of each class over the blocks that predicted it; 0 when
  /// no block predicted the class. Equals `confidence` for final_class.
  std::array<double, kNumClasses> class_scores() const;
};

/// Mode of the block predictions. Ties go to the higher mean probability of
/// the tied class, then to the order O0 < O1 < O2O3 < Os. Independent of
/// block order.
FileVerdict vote(std::vector<BlockVerdict> blocks, std::string path = {});

FileVerdict classify_blocks(const ModelParams<float>& params, std::span<const InstructionBlock> blocks,
                            std::string path = {});

/// Throws NoCode when the file yields no block, and the ELF errors.
FileVerdict classify_file(const ModelParams<float>& params, const std::filesystem::path& path,
                          std::size_t min_fill = kDefaultMinFill, bool all_exec = false);

struct FileEvaluation {
  Metrics metrics;
  std::vector<FileVerdict> verdicts;
  std::vector<OptLevel> truths;
  std::size_t skipped_files = 0;
};

/// File-level metrics via mode voting; ROC uses FileVerdict::class_scores.
FileEvaluation evaluate_files(const ModelParams<float>& params, const CorpusManifest& manifest, Split split,
                              std::size_t min_fill = kDefaultMinFill, std::size_t threads = 1);

/// Per-class one-vs-rest ROC over the files of a split. Throws EmptySplit.
std::array<RocCurve, kNumClasses> roc(const ModelParams<float>& params, const CorpusManifest& manifest, Split split,
                                      std::size_t min_fill = kDefaultMinFill, std::size_t threads = 1);

std::string metrics_json(const Metrics& metrics, bool include_roc = false);
std::string verdict_json(const FileVerdict& verdict);
void write_history_csv(std::span<const EpochRecord> history, std::ostream& out);
void write_roc_csv(const std::array<RocCurve, kNumClasses>& curves, std::ostream& out);

}  // namespace bineye
