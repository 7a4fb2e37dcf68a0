// bineye: optimization-level recognition for ARM object files.

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bineye/corpus.hpp"
#include "bineye/elf.hpp"
#include "bineye/error.hpp"
#include "bineye/explain.hpp"
#include "bineye/gradcheck.hpp"
#include "bineye/model.hpp"
#include "bineye/train.hpp"

namespace fs = std::filesystem;
using namespace bineye;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string format;  // empty: the command's default

  bool text() const { return format == "text"; }
};

struct ModelShape {
  int filters = HyperParams{}.num_filters;
  std::vector<int> kernels = HyperParams{}.kernel_lengths;
  int byte_dim = HyperParams{}.byte_dim;
  int hidden = 0;

  HyperParams hyper() const {
    HyperParams h;
    h.num_filters = filters;
    h.kernel_lengths = kernels;
    h.byte_dim = byte_dim;
    h.position_dim = h.instruction_bytes * byte_dim;
    h.hidden_units = hidden;
    return h;
  }
};

void add_shape_options(CLI::App* cmd, ModelShape& shape) {
  cmd->add_option("--filters", shape.filters, "Filters per kernel length")->capture_default_str();
  cmd->add_option("--kernels", shape.kernels, "Kernel lengths, ascending")->delimiter(',')->capture_default_str();
  cmd->add_option("--byte-dim", shape.byte_dim, "Byte embedding width")->capture_default_str();
  cmd->add_option("--hidden", shape.hidden, "Hidden dense units (0 = single dense layer)")->capture_default_str();
}

Split split_from(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw Error(ErrorKind::BadInput, "unknown split '" + name + "'");
  return *s;
}

void print_stats(const CorpusStats& s, bool text) {
  if (text) {
    std::cout << "class   files      bytes\n";
    for (auto level : kAllLevels) {
      std::cout << std::left << std::setw(6) << to_string(level) << std::right << std::setw(7)
                << s.files[index_of(level)] << std::setw(11) << s.bytes[index_of(level)] << '\n';
    }
    std::cout << "total " << std::setw(7) << s.total_files << std::setw(11) << s.total_bytes << '\n';
    return;
  }
  nlohmann::json j;
  for (auto level : kAllLevels) {
    j["files"][std::string(to_string(level))] = s.files[index_of(level)];
    j["bytes"][std::string(to_string(level))] = s.bytes[index_of(level)];
  }
  j["total_files"] = s.total_files;
  j["total_bytes"] = s.total_bytes;
  std::cout << j.dump(2) << '\n';
}

std::string file_type_name(ElfFileType t) {
  switch (t) {
    case ElfFileType::Relocatable: return "relocatable";
    case ElfFileType::Executable: return "executable";
    case ElfFileType::Shared: return "shared";
    case ElfFileType::Core: return "core";
    default: return "none";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compiler optimization level recognition for ARM ELF object files"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "text", "csv"}));

  // extract
  auto* extract = app.add_subcommand("extract", "Show the code image and block split of an object file");
  std::string extract_path;
  bool extract_all_exec = false;
  std::size_t extract_min_fill = kDefaultMinFill;
  extract->add_option("file", extract_path, "ELF object file")->required();
  extract->add_flag("--all-exec", extract_all_exec, "Concatenate every executable section instead of .text");
  extract->add_option("--min-fill", extract_min_fill, "Minimum real bytes to keep a final partial block")
      ->capture_default_str();

  // corpus
  auto* corpus = app.add_subcommand("corpus", "Build and maintain a labelled manifest");
  corpus->require_subcommand(1);
  std::string manifest_path;
  auto* corpus_add = corpus->add_subcommand("add", "Append object files compiled with one optimization flag");
  std::string add_flag;
  std::vector<std::string> add_files;
  bool add_all_exec = false;
  corpus_add->add_option("--manifest", manifest_path, "Manifest (JSONL); created if missing")->required();
  corpus_add->add_option("--flag", add_flag, "Compile flag, e.g. --flag=-O2")->required();
  corpus_add->add_flag("--all-exec", add_all_exec, "Hash every executable section instead of .text");
  corpus_add->add_option("files", add_files, "Object files")->required();
  auto* corpus_dedup = corpus->add_subcommand("dedup", "Remove conflicting and duplicate code hashes");
  corpus_dedup->add_option("--manifest", manifest_path, "Manifest (JSONL)")->required();
  auto* corpus_split = corpus->add_subcommand("split", "Stratified train/test assignment");
  double test_fraction = 0.2;
  corpus_split->add_option("--manifest", manifest_path, "Manifest (JSONL)")->required();
  corpus_split->add_option("--test-fraction", test_fraction, "Fraction of each class held out")->capture_default_str();
  auto* corpus_stats = corpus->add_subcommand("stats", "Per-class file and byte counts");
  corpus_stats->add_option("--manifest", manifest_path, "Manifest (JSONL)")->required();
  auto* corpus_recipe = corpus->add_subcommand("recipe", "Print the shell recipe for rebuilding a tree at one flag");
  std::string recipe_flag;
  corpus_recipe->add_option("--flag", recipe_flag, "Target flag, e.g. --flag=-Os")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a split manifest");
  ModelShape shape;
  TrainConfig tc;
  std::string model_out, history_path;
  bool all_blocks = false;
  train_cmd->add_option("--manifest", manifest_path, "Split manifest (JSONL)")->required();
  train_cmd->add_option("--out", model_out, "Checkpoint to write")->required();
  train_cmd->add_option("--epochs", tc.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tc.adam.learning_rate)->capture_default_str();
  train_cmd->add_option("--beta1", tc.adam.beta1)->capture_default_str();
  train_cmd->add_option("--beta2", tc.adam.beta2)->capture_default_str();
  train_cmd->add_option("--adam-eps", tc.adam.epsilon)->capture_default_str();
  train_cmd->add_option("--min-fill", tc.min_fill)->capture_default_str();
  train_cmd->add_flag("--all-blocks", all_blocks, "Train on every block of each file, not only the first");
  train_cmd->add_option("--history", history_path, "Write per-epoch CSV history here");
  add_shape_options(train_cmd, shape);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Precision, accuracy and confusion matrix on a split");
  std::string model_path, split_name = "test", level = "block";
  std::size_t eval_min_fill = kDefaultMinFill;
  eval_cmd->add_option("--model", model_path, "Checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest_path, "Split manifest (JSONL)")->required();
  eval_cmd->add_option("--split", split_name)->check(CLI::IsMember({"train", "test", "unassigned"}))->capture_default_str();
  eval_cmd->add_option("--level", level, "block: first block per file; file: mode vote over all blocks")
      ->check(CLI::IsMember({"block", "file"}))
      ->capture_default_str();
  eval_cmd->add_option("--min-fill", eval_min_fill)->capture_default_str();

  // classify
  auto* classify_cmd = app.add_subcommand("classify", "Classify one object file by block-wise mode voting");
  std::string target_path;
  std::size_t min_fill = kDefaultMinFill;
  bool classify_all_exec = false;
  classify_cmd->add_option("file", target_path)->required();
  classify_cmd->add_option("--model", model_path, "Checkpoint")->required();
  classify_cmd->add_option("--min-fill", min_fill)->capture_default_str();
  classify_cmd->add_flag("--all-exec", classify_all_exec);

  // roc
  auto* roc_cmd = app.add_subcommand("roc", "Per-class one-vs-rest ROC over the files of a split");
  std::size_t roc_min_fill = kDefaultMinFill;
  roc_cmd->add_option("--model", model_path, "Checkpoint")->required();
  roc_cmd->add_option("--manifest", manifest_path, "Split manifest (JSONL)")->required();
  roc_cmd->add_option("--split", split_name)->check(CLI::IsMember({"train", "test", "unassigned"}))->capture_default_str();
  roc_cmd->add_option("--min-fill", roc_min_fill)->capture_default_str();

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Map strong activations back to code addresses and patterns");
  double threshold = 0.0;
  std::size_t top = 10;
  std::size_t explain_min_fill = kDefaultMinFill;
  explain_cmd->add_option("file", target_path)->required();
  explain_cmd->add_option("--model", model_path, "Checkpoint")->required();
  explain_cmd->add_option("--threshold", threshold, "Report pooled scores above this")->capture_default_str();
  explain_cmd->add_option("--top", top, "Sites to print")->capture_default_str();
  explain_cmd->add_option("--min-fill", explain_min_fill)->capture_default_str();

  // compare
  auto* compare_cmd = app.add_subcommand("compare", "Compare pattern frequencies of two builds of the same source");
  std::string path_a, path_b;
  compare_cmd->add_option("file_a", path_a)->required();
  compare_cmd->add_option("file_b", path_b)->required();
  compare_cmd->add_option("--model", model_path, "Checkpoint")->required();
  compare_cmd->add_option("--threshold", threshold)->capture_default_str();
  compare_cmd->add_option("--top", top)->capture_default_str();
  compare_cmd->add_option("--min-fill", explain_min_fill)->capture_default_str();

  // gradcheck
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Check analytic gradients against central differences");
  double eps = 1e-5;
  int configs = 1;
  gradcheck_cmd->add_option("--eps", eps)->capture_default_str();
  gradcheck_cmd->add_option("--configs", configs, "Random configurations, seeds seed..seed+N-1")->capture_default_str();

  // params
  auto* params_cmd = app.add_subcommand("params", "Trainable parameter count for a model shape");
  ModelShape params_shape;
  add_shape_options(params_cmd, params_shape);

  for (auto* sub : {extract, corpus, train_cmd, eval_cmd, classify_cmd, roc_cmd, explain_cmd, compare_cmd,
                    gradcheck_cmd, params_cmd}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*extract) {
      const auto info = load_object(extract_path);
      const auto image = extract_code(info, extract_all_exec);
      const auto blocks = split_blocks(image, extract_min_fill);
      nlohmann::json j;
      j["path"] = info.path;
      j["machine"] = info.machine;
      j["file_type"] = file_type_name(info.file_type);
      j["not_relocatable"] = info.not_relocatable;
      auto sections = nlohmann::json::array();
      for (const auto& s : info.sections) {
        if (s.name.empty()) continue;
        sections.push_back({{"name", s.name}, {"flags", s.flags}, {"offset", s.offset}, {"size", s.size},
                            {"address", s.address}});
      }
      j["sections"] = sections;
      j["code_len"] = image.bytes.size();
      j["truncated_bytes"] = image.truncated;
      j["code_sha256"] = sha256_hex(image.bytes);
      auto block_list = nlohmann::json::array();
      for (const auto& b : blocks) block_list.push_back({{"base_offset", b.base_offset}, {"pad_len", b.pad_len}});
      j["blocks"] = block_list;
      if (info.not_relocatable) std::cerr << "warning: " << info.path << " is not a relocatable object\n";
      if (g.text()) {
        std::cout << info.path << ": " << image.bytes.size() << " code bytes (" << image.truncated << " truncated), "
                  << blocks.size() << " blocks\n";
      } else {
        std::cout << j.dump(2) << '\n';
      }
      return 0;
    }

    if (*corpus) {
      if (*corpus_recipe) {
        std::cout << flag_substitution_recipe(recipe_flag);
        return 0;
      }
      if (*corpus_add) {
        CorpusManifest manifest = fs::exists(manifest_path) ? load_manifest(manifest_path) : CorpusManifest{};
        std::size_t failed = 0;
        for (const auto& file : add_files) {
          try {
            add_sample(manifest, file, add_flag, add_all_exec);
          } catch (const Error& e) {
            if (e.kind() == ErrorKind::UnknownFlag) throw;
            std::cerr << "skip " << file << ": " << e.what() << '\n';
            ++failed;
          }
        }
        std::sort(manifest.records.begin(), manifest.records.end(),
                  [](const SampleRecord& a, const SampleRecord& b) { return a.path < b.path; });
        save_manifest(manifest, manifest_path);
        std::cout << nlohmann::json{{"added", add_files.size() - failed}, {"skipped", failed},
                                    {"records", manifest.records.size()}}
                         .dump()
                  << '\n';
        return failed == add_files.size() ? kExitDomain : 0;
      }
      auto manifest = load_manifest(manifest_path);
      if (*corpus_dedup) {
        const auto report = dedup(manifest);
        save_manifest(manifest, manifest_path);
        std::cout << nlohmann::json{{"conflicting_hashes", report.conflicting_hashes},
                                    {"conflicting_records_removed", report.conflicting_records},
                                    {"duplicate_records_removed", report.duplicate_records},
                                    {"records", manifest.records.size()}}
                         .dump()
                  << '\n';
        return 0;
      }
      if (*corpus_split) {
        split(manifest, test_fraction, g.seed);
        save_manifest(manifest, manifest_path);
        std::cout << nlohmann::json{{"train", records_in(manifest, Split::Train).size()},
                                    {"test", records_in(manifest, Split::Test).size()}}
                         .dump()
                  << '\n';
        return 0;
      }
      if (*corpus_stats) {
        print_stats(stats(manifest), g.text());
        return 0;
      }
    }

    if (*train_cmd) {
      tc.seed = g.seed;
      tc.threads = g.threads;
      tc.blocks_per_file = all_blocks ? BlockPolicy::AllBlocks : BlockPolicy::FirstBlock;
      const auto manifest = load_manifest(manifest_path);
      const auto result = train(manifest, shape.hyper(), tc);
      save_checkpoint(result.best, model_out);
      if (!history_path.empty()) {
        std::ofstream out(history_path);
        if (!out) throw Error(ErrorKind::Io, "cannot write " + history_path);
        write_history_csv(result.history, out);
      }
      if (result.skipped_files) std::cerr << "skipped " << result.skipped_files << " files\n";
      if (g.text()) {
        write_history_csv(result.history, std::cout);
      } else {
        const auto& best = result.history[static_cast<std::size_t>(result.best_epoch)];
        nlohmann::json j = {{"checkpoint", model_out},
                            {"best_epoch", result.best_epoch},
                            {"train_blocks", result.train_blocks},
                            {"heldout_blocks", result.heldout_blocks},
                            {"skipped_files", result.skipped_files},
                            {"train_accuracy", best.train_accuracy},
                            {"train_loss", best.train_loss},
                            {"param_count", param_count(result.best.hyper)}};
        j["heldout_accuracy"] = best.heldout_accuracy ? nlohmann::json(*best.heldout_accuracy) : nlohmann::json();
        std::cout << j.dump(2) << '\n';
      }
      return 0;
    }

    if (*eval_cmd) {
      const auto params = load_checkpoint(model_path);
      const auto manifest = load_manifest(manifest_path);
      const Split split_id = split_from(split_name);
      const Metrics m = level == "file" ? evaluate_files(params, manifest, split_id, eval_min_fill, g.threads).metrics
                                        : evaluate(params, manifest, split_id, BlockPolicy::FirstBlock, eval_min_fill,
                                                   g.threads);
      if (g.text()) {
        std::cout << "accuracy " << m.accuracy << " over " << m.samples << " " << level << "s\n";
        for (auto l : kAllLevels) {
          const auto& p = m.precision[index_of(l)];
          std::cout << "precision " << to_string(l) << ' ' << (p ? std::to_string(*p) : std::string("undefined"))
                    << '\n';
        }
      } else {
        std::cout << metrics_json(m) << '\n';
      }
      return 0;
    }

    if (*classify_cmd) {
      const auto params = load_checkpoint(model_path);
      const auto verdict = classify_file(params, target_path, min_fill, classify_all_exec);
      if (g.text()) {
        std::cout << verdict.path << ": " << to_string(verdict.final_class) << " (confidence " << verdict.confidence
                  << ", " << verdict.blocks.size() << " blocks)\n";
      } else {
        std::cout << verdict_json(verdict) << '\n';
      }
      return 0;
    }

    if (*roc_cmd) {
      const auto params = load_checkpoint(model_path);
      const auto manifest = load_manifest(manifest_path);
      const auto eval = evaluate_files(params, manifest, split_from(split_name), roc_min_fill, g.threads);
      if (g.format == "json") {
        std::cout << metrics_json(eval.metrics, true) << '\n';
      } else {
        write_roc_csv(eval.metrics.roc, std::cout);
      }
      return 0;
    }

    if (*explain_cmd) {
      const auto params = load_checkpoint(model_path);
      const auto analysis = analyze_file(params, target_path, threshold, explain_min_fill);
      if (g.text()) {
        std::cout << analysis.path << ": " << to_string(analysis.verdict.final_class) << '\n';
        const std::size_t n = std::min(top, analysis.sites.size());
        std::cout << sites_text(std::span<const ScoredSite>(analysis.sites.data(), n));
      } else {
        std::cout << analysis_json(analysis, top) << '\n';
      }
      return 0;
    }

    if (*compare_cmd) {
      const auto params = load_checkpoint(model_path);
      const auto report = compare_files(params, path_a, path_b, threshold, explain_min_fill, top);
      std::cout << (g.text() ? diff_text(report) : diff_json(report) + "\n");
      return 0;
    }

    if (*gradcheck_cmd) {
      if (configs < 1) throw Error(ErrorKind::BadInput, "--configs must be >= 1");
      double worst = 0.0;
      nlohmann::json runs = nlohmann::json::array();
      for (int i = 0; i < configs; ++i) {
        GradCheckConfig cfg;
        cfg.seed = g.seed + static_cast<std::uint64_t>(i);
        cfg.epsilon = eps;
        const auto result = grad_check(cfg);
        worst = std::max(worst, result.max_relative_error);
        nlohmann::json groups = nlohmann::json::object();
        for (const auto& grp : result.groups) groups[grp.group] = grp.max_relative_error;
        runs.push_back({{"seed", cfg.seed}, {"max_relative_error", result.max_relative_error}, {"groups", groups}});
      }
      if (g.text()) {
        std::cout << "max_relative_error " << worst << '\n';
      } else {
        std::cout << nlohmann::json{{"max_relative_error", worst}, {"tolerance", 1e-4}, {"runs", runs}}.dump(2) << '\n';
      }
      return worst < 1e-4 ? 0 : kExitDomain;
    }

    if (*params_cmd) {
      const auto hyper = params_shape.hyper();
      const auto count = param_count(hyper);
      if (g.text()) {
        std::cout << count << '\n';
      } else {
        std::cout << nlohmann::json{{"param_count", count}, {"hyper", nlohmann::json::parse(hyper_to_json(hyper))}}
                         .dump(2)
                  << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  }
  return kExitUsage;
}
