#include "bineye/corpus.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "bineye/elf.hpp"
#include "bineye/error.hpp"
#include "bineye/random.hpp"

namespace bineye {

namespace {

constexpr std::string_view kManifestFormat = "bineye-manifest";

bool path_less(const SampleRecord& a, const SampleRecord& b) { return a.path < b.path; }

}  // namespace

std::string_view to_string(OptLevel level) {
  switch (level) {
    case OptLevel::O0: return "O0";
    case OptLevel::O1: return "O1";
    case OptLevel::O2O3: return "O2O3";
    case OptLevel::Os: return "Os";
  }
  return "?";
}

std::optional<OptLevel> parse_level(std::string_view name) {
  for (auto level : kAllLevels) {
    if (to_string(level) == name) return level;
  }
  return std::nullopt;
}

OptLevel level_from_flag(std::string_view flag) {
  if (flag == "-O0") return OptLevel::O0;
  if (flag == "-O1") return OptLevel::O1;
  if (flag == "-O2" || flag == "-O3") return OptLevel::O2O3;
  if (flag == "-Os") return OptLevel::Os;
  throw Error(ErrorKind::UnknownFlag, "unsupported optimization flag '" + std::string(flag) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Unassigned: return "unassigned";
    case Split::Train: return "train";
    case Split::Test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view name) {
  for (auto s : {Split::Unassigned, Split::Train, Split::Test}) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &length) != 1) {
    throw Error(ErrorKind::Io, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

void add_sample(CorpusManifest& manifest, const std::filesystem::path& path, std::string_view raw_flag, bool all_exec) {
  const OptLevel label = level_from_flag(raw_flag);
  const CodeImage image = extract_code(load_object(path), all_exec);

  SampleRecord record;
  record.path = path.string();
  record.label = label;
  record.code_hash = sha256_hex(image.bytes);
  record.code_len = image.bytes.size();

  auto existing = std::find_if(manifest.records.begin(), manifest.records.end(),
                               [&](const SampleRecord& r) { return r.path == record.path; });
  if (existing != manifest.records.end()) {
    *existing = std::move(record);
  } else {
    manifest.records.push_back(std::move(record));
  }
}

DedupReport dedup(CorpusManifest& manifest) {
  DedupReport report;
  std::unordered_map<std::string, std::set<OptLevel>> labels_by_hash;
  for (const auto& r : manifest.records) labels_by_hash[r.code_hash].insert(r.label);

  std::vector<SampleRecord> sorted = manifest.records;
  std::stable_sort(sorted.begin(), sorted.end(), path_less);

  std::unordered_set<std::string> seen;
  std::vector<SampleRecord> kept;
  for (auto& r : sorted) {
    if (labels_by_hash[r.code_hash].size() > 1) {
      ++report.conflicting_records;
      continue;
    }
    if (!seen.insert(r.code_hash).second) {
      ++report.duplicate_records;
      continue;
    }
    kept.push_back(std::move(r));
  }
  for (const auto& [hash, labels] : labels_by_hash) {
    if (labels.size() > 1) ++report.conflicting_hashes;
  }

  // Preserve the caller's record order for what survives.
  std::unordered_set<std::string> kept_paths;
  for (const auto& r : kept) kept_paths.insert(r.path);
  std::erase_if(manifest.records, [&](const SampleRecord& r) { return !kept_paths.erase(r.path); });
  return report;
}

void split(CorpusManifest& manifest, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::BadInput, "test fraction must lie in (0, 1)");
  }
  std::array<std::vector<std::size_t>, kNumClasses> by_label;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    by_label[index_of(manifest.records[i].label)].push_back(i);
  }
  for (auto level : kAllLevels) {
    if (by_label[index_of(level)].empty()) {
      throw Error(ErrorKind::EmptyClass, "label " + std::string(to_string(level)) + " has no records");
    }
  }

  Rng rng(seed);
  for (auto& indices : by_label) {
    // Path order first so the assignment does not depend on insertion order.
    std::sort(indices.begin(), indices.end(), [&](std::size_t a, std::size_t b) {
      return manifest.records[a].path < manifest.records[b].path;
    });
    rng.shuffle(indices);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(indices.size())));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      manifest.records[indices[i]].split = i < n_test ? Split::Test : Split::Train;
    }
  }
  std::ostringstream note;
  note << "stratified test_fraction=" << test_fraction << " seed=" << seed;
  manifest.provenance["split"] = note.str();
}

CorpusStats stats(const CorpusManifest& manifest) {
  CorpusStats s;
  for (const auto& r : manifest.records) {
    ++s.files[index_of(r.label)];
    s.bytes[index_of(r.label)] += r.code_len;
    ++s.total_files;
    s.total_bytes += r.code_len;
  }
  return s;
}

std::vector<const SampleRecord*> records_in(const CorpusManifest& manifest, Split split) {
  std::vector<const SampleRecord*> out;
  for (const auto& r : manifest.records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

void write_manifest(const CorpusManifest& manifest, std::ostream& out) {
  nlohmann::json header = {{"format", kManifestFormat}, {"version", manifest.version}};
  header["provenance"] = manifest.provenance;
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    nlohmann::json line = {{"path", r.path},
                           {"label", to_string(r.label)},
                           {"code_hash", r.code_hash},
                           {"code_len", r.code_len},
                           {"split", to_string(r.split)}};
    out << line.dump() << '\n';
  }
}

CorpusManifest read_manifest(std::istream& in) {
  CorpusManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::CorruptPayload, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != kManifestFormat) {
          throw Error(ErrorKind::BadMagic, "manifest header missing format tag");
        }
        manifest.version = j.at("version").get<int>();
        if (manifest.version != CorpusManifest::kFormatVersion) {
          throw Error(ErrorKind::VersionMismatch, "manifest version " + std::to_string(manifest.version));
        }
        if (j.contains("provenance")) {
          manifest.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
        }
        have_header = true;
        continue;
      }
      SampleRecord r;
      r.path = j.at("path").get<std::string>();
      const auto label = parse_level(j.at("label").get<std::string>());
      const auto split = parse_split(j.value("split", "unassigned"));
      if (!label || !split) throw Error(ErrorKind::CorruptPayload, "bad label or split");
      r.label = *label;
      r.split = *split;
      r.code_hash = j.at("code_hash").get<std::string>();
      r.code_len = j.at("code_len").get<std::size_t>();
      manifest.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::CorruptPayload, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw Error(ErrorKind::BadMagic, "empty manifest");
  return manifest;
}

void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_manifest(manifest, out);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_manifest(in);
}

std::string flag_substitution_recipe(std::string_view target_flag) {
  const OptLevel level = level_from_flag(target_flag);
  std::ostringstream out;
  out << "# Rebuild every package of a buildroot tree at " << target_flag << " (class "
      << to_string(level) << ").\n"
      << "# 1. make menuconfig   # pick the ARM (arm-linux-gnueabi) toolchain\n"
      << "# 2. make source       # fetch package sources into dl/ and output/build/\n"
      << "# 3. rewrite optimization flags in the unpacked sources:\n"
      << "grep -rlE -- '-O(0|1|2|3|s)\\b' output/build | xargs -r sed -i -E 's/-O(0|1|2|3|s)\\b/"
      << target_flag << "/g'\n"
      << "# 4. make              # from the buildroot root\n"
      << "# 5. collect objects:\n"
      << "find output/build -name '*.o' -print\n"
      << "# Then run `bineye corpus add` with --flag " << target_flag
      << " for each object and `bineye corpus dedup` on the result.\n";
  return out.str();
}

}  // namespace bineye
