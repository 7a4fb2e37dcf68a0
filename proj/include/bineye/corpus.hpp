#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bineye {

enum class OptLevel : std::uint8_t { O0 = 0, O1 = 1, O2O3 = 2, Os = 3 };

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<OptLevel, kNumClasses> kAllLevels = {OptLevel::O0, OptLevel::O1, OptLevel::O2O3,
                                                                  OptLevel::Os};

std::string_view to_string(OptLevel level);
std::optional<OptLevel> parse_level(std::string_view name);
/// Maps a compiler flag (-O0, -O1, -O2, -O3, -Os) to its class. Throws UnknownFlag.
OptLevel level_from_flag(std::string_view flag);
inline std::size_t index_of(OptLevel level) { return static_cast<std::size_t>(level); }

enum class Split : std::uint8_t { Unassigned, Train, Test };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view name);

struct SampleRecord {
  std::string path;
  OptLevel label = OptLevel::O0;
  std::string code_hash;  // hex SHA-256 of the extracted code bytes
  std::size_t code_len = 0;
  Split split = Split::Unassigned;

  bool operator==(const SampleRecord&) const = default;
};

struct CorpusManifest {
  static constexpr int kFormatVersion = 1;

  int version = kFormatVersion;
  std::vector<SampleRecord> records;
  std::map<std::string, std::string> provenance;

  bool operator==(const CorpusManifest&) const = default;
};

struct DedupReport {
  std::size_t conflicting_records = 0;  // removed because their hash carried two labels
  std::size_t conflicting_hashes = 0;
  std::size_t duplicate_records = 0;  // collapsed same-label copies
};

struct CorpusStats {
  std::array<std::size_t, kNumClasses> files{};
  std::array<std::size_t, kNumClasses> bytes{};
  std::size_t total_files = 0;
  std::size_t total_bytes = 0;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Extracts the code of `path`, hashes it and appends a labelled record.
/// Replaces an existing record for the same path.
void add_sample(CorpusManifest& manifest, const std::filesystem::path& path, std::string_view raw_flag,
                bool all_exec = false);

/// Drops every record whose code hash appears under more than one label, then
/// collapses same-label copies to the first record in path order.
DedupReport dedup(CorpusManifest& manifest);

/// Stratified per-label split. Throws BadInput for a fraction outside (0,1)
/// and EmptyClass when any label has no records.
void split(CorpusManifest& manifest, double test_fraction, std::uint64_t seed);

CorpusStats stats(const CorpusManifest& manifest);

std::vector<const SampleRecord*> records_in(const CorpusManifest& manifest, Split split);

void write_manifest(const CorpusManifest& manifest, std::ostream& out);
CorpusManifest read_manifest(std::istream& in);
void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);
CorpusManifest load_manifest(const std::filesystem::path& path);

/// Shell recipe for rewriting optimization flags in a source tree before a
/// cross build. Documentation only; nothing here invokes a compiler.
std::string flag_substitution_recipe(std::string_view target_flag);

}  // namespace bineye
