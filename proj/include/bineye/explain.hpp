#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bineye/elf.hpp"
#include "bineye/model.hpp"
#include "bineye/train.hpp"

namespace bineye {

/// One pooled convolution channel that fired above the report threshold,
/// mapped back to the code it looked at.
struct ScoredSite {
  int kernel_length = 0;
  int filter_index = 0;
  double score = 0.0;
  std::size_t position = 0;  // instruction index inside the block
  std::size_t address = 0;   // byte offset inside the code image
  std::vector<std::uint32_t> window;
};

enum class PatternKind : std::uint8_t {
  FunctionHeaderO0,    // STMFD SP! saving R11
  FunctionHeaderOpt,   // STMFD SP! saving callee-saved R4-R10 without R11
  CmpBeqIdiom,         // CMP [CMPEQ] BEQ
  CmpBneIdiom,         // CMP [CMPEQ] BNE
  FramePointerAccess,  // LDR/STR with base R11
};

inline constexpr std::array<PatternKind, 5> kAllPatternKinds = {
    PatternKind::FunctionHeaderO0, PatternKind::FunctionHeaderOpt, PatternKind::CmpBeqIdiom,
    PatternKind::CmpBneIdiom, PatternKind::FramePointerAccess};

std::string_view to_string(PatternKind kind);

struct PatternTag {
  PatternKind kind = PatternKind::FunctionHeaderO0;
  std::vector<std::uint32_t> evidence;
  std::string detail;  // decoded register list or instruction sequence
};

namespace arm {

enum Condition : std::uint32_t { EQ = 0x0, NE = 0x1, AL = 0xe };

constexpr std::uint32_t condition(std::uint32_t word) { return word >> 28; }

/// Data-processing CMP (opcode 1010, S set), immediate or register operand.
constexpr bool is_cmp(std::uint32_t word, std::uint32_t cond) {
  if (condition(word) != cond || (word & 0x0DF00000u) != 0x01500000u) return false;
  const bool immediate = (word & 0x02000000u) != 0;
  // I=0 with bits 7 and 4 set is the multiply / extra load-store space.
  return immediate || (word & 0x90u) != 0x90u;
}

/// B (not BL) with the given condition.
constexpr bool is_branch(std::uint32_t word, std::uint32_t cond) {
  return condition(word) == cond && (word & 0x0F000000u) == 0x0A000000u;
}

/// STMDB SP!, {...} with condition AL, the prologue push.
constexpr bool is_push(std::uint32_t word) { return (word & 0xFFFF0000u) == 0xE92D0000u; }

}  // namespace arm

struct PushDecoding {
  std::uint16_t registers = 0;  // bit i set: Ri saved
  std::optional<PatternKind> kind;
};

std::string register_list(std::uint16_t registers);

/// Recognizes an unconditional STMFD SP! and classifies it as an -O0 style
/// (R11 saved) or optimized (R4-R10 saved, no R11) function header.
std::optional<PushDecoding> decode_push(std::uint32_t word);

/// First CMP [CMPEQ] BEQ/BNE run of consecutive words in the window.
std::optional<PatternTag> detect_branch_idiom(std::span<const std::uint32_t> window);

/// Single-register LDR/STR, immediate offset, base register R11.
bool detect_frame_access(std::uint32_t word);

/// Every detector applied to one window: one tag per classified push and per
/// frame-pointer access, plus the first branch idiom.
std::vector<PatternTag> tag_window(std::span<const std::uint32_t> window);

/// Sites whose pooled score exceeds `threshold`, highest score first. Windows
/// hold the longest kernel's worth of words read forward from the argmax.
std::vector<ScoredSite> activation_report(const ModelParams<float>& params, const InstructionBlock& block,
                                          double threshold = 0.0);

using TagCounts = std::array<std::size_t, kAllPatternKinds.size()>;

struct FileAnalysis {
  std::string path;
  FileVerdict verdict;
  std::vector<ScoredSite> sites;  // all blocks, highest score first
  std::vector<std::vector<PatternTag>> site_tags;  // parallel to sites
  TagCounts tag_counts{};
};

struct TagDifference {
  PatternKind kind;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  long long delta() const { return static_cast<long long>(count_a) - static_cast<long long>(count_b); }
};

struct DiffReport {
  FileAnalysis a;
  FileAnalysis b;
  std::vector<TagDifference> differences;  // kinds seen in either file
  std::size_t top_sites = 10;
};

/// Blocks -> forward pass -> sites above threshold -> pattern tags for one file.
FileAnalysis analyze_file(const ModelParams<float>& params, const std::filesystem::path& path, double threshold = 0.0,
                          std::size_t min_fill = kDefaultMinFill);

DiffReport compare_analyses(FileAnalysis a, FileAnalysis b, std::size_t top_sites = 10);

DiffReport compare_files(const ModelParams<float>& params, const std::filesystem::path& path_a,
                         const std::filesystem::path& path_b, double threshold = 0.0,
                         std::size_t min_fill = kDefaultMinFill, std::size_t top_sites = 10);

std::string sites_json(std::span<const ScoredSite> sites);
std::string analysis_json(const FileAnalysis& analysis, std::size_t top_sites);
std::string diff_json(const DiffReport& report);

/// "(0x484, 6.33)" style lines, one per site.
std::string sites_text(std::span<const ScoredSite> sites);
std::string diff_text(const DiffReport& report);

}  // namespace bineye
