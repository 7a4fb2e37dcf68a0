#include "bineye/explain.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace bineye {

namespace {

constexpr std::uint16_t kR11 = 1u << 11;
constexpr std::uint16_t kCalleeSaved = 0x07F0;  // R4-R10

std::string hex_word(std::uint32_t word) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", word);
  return buf;
}

std::string hex_address(std::size_t address) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%zx", address);
  return buf;
}

nlohmann::json site_json(const ScoredSite& s) {
  auto words = nlohmann::json::array();
  for (auto w : s.window) words.push_back(hex_word(w));
  return {{"kernel_length", s.kernel_length}, {"filter_index", s.filter_index}, {"score", s.score},
          {"position", s.position},           {"address", s.address},           {"window", words}};
}

nlohmann::json tag_json(const PatternTag& t) {
  auto words = nlohmann::json::array();
  for (auto w : t.evidence) words.push_back(hex_word(w));
  return {{"kind", to_string(t.kind)}, {"evidence", words}, {"detail", t.detail}};
}

nlohmann::json counts_json(const TagCounts& counts) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kAllPatternKinds.size(); ++i) j[std::string(to_string(kAllPatternKinds[i]))] = counts[i];
  return j;
}

nlohmann::json analysis_object(const FileAnalysis& analysis, std::size_t top_sites) {
  nlohmann::json j;
  j["path"] = analysis.path;
  j["final_class"] = to_string(analysis.verdict.final_class);
  j["confidence"] = analysis.verdict.confidence;
  j["site_count"] = analysis.sites.size();
  auto top = nlohmann::json::array();
  for (std::size_t i = 0; i < std::min(top_sites, analysis.sites.size()); ++i) {
    auto site = site_json(analysis.sites[i]);
    auto tags = nlohmann::json::array();
    for (const auto& t : analysis.site_tags[i]) tags.push_back(tag_json(t));
    site["tags"] = tags;
    top.push_back(site);
  }
  j["top_sites"] = top;
  j["tag_counts"] = counts_json(analysis.tag_counts);
  return j;
}

}  // namespace

std::string_view to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::FunctionHeaderO0: return "FunctionHeaderO0";
    case PatternKind::FunctionHeaderOpt: return "FunctionHeaderOpt";
    case PatternKind::CmpBeqIdiom: return "CmpBeqIdiom";
    case PatternKind::CmpBneIdiom: return "CmpBneIdiom";
    case PatternKind::FramePointerAccess: return "FramePointerAccess";
  }
  return "?";
}

std::string register_list(std::uint16_t registers) {
  static constexpr const char* kNames[16] = {"R0", "R1", "R2",  "R3",  "R4",  "R5", "R6", "R7",
                                             "R8", "R9", "R10", "R11", "R12", "SP", "LR", "PC"};
  std::string out = "{";
  for (int r = 0; r < 16; ++r) {
    if (!(registers & (1u << r))) continue;
    if (out.size() > 1) out += ",";
    out += kNames[r];
  }
  return out + "}";
}

std::optional<PushDecoding> decode_push(std::uint32_t word) {
  if (!arm::is_push(word)) return std::nullopt;
  PushDecoding d;
  d.registers = static_cast<std::uint16_t>(word & 0xFFFFu);
  if (d.registers & kR11) {
    d.kind = PatternKind::FunctionHeaderO0;
  } else if (d.registers & kCalleeSaved) {
    d.kind = PatternKind::FunctionHeaderOpt;
  }
  return d;
}

std::optional<PatternTag> detect_branch_idiom(std::span<const std::uint32_t> window) {
  for (std::size_t i = 0; i < window.size(); ++i) {
    if (!arm::is_cmp(window[i], arm::AL)) continue;
    std::size_t j = i + 1;
    std::string detail = "CMP";
    if (j < window.size() && arm::is_cmp(window[j], arm::EQ)) {
      ++j;
      detail += ";CMPEQ";
    }
    if (j >= window.size()) continue;
    std::optional<PatternKind> kind;
    if (arm::is_branch(window[j], arm::EQ)) {
      kind = PatternKind::CmpBeqIdiom;
      detail += ";BEQ";
    } else if (arm::is_branch(window[j], arm::NE)) {
      kind = PatternKind::CmpBneIdiom;
      detail += ";BNE";
    }
    if (!kind) continue;
    return PatternTag{*kind, {window.begin() + static_cast<std::ptrdiff_t>(i), window.begin() + static_cast<std::ptrdiff_t>(j + 1)},
                      detail};
  }
  return std::nullopt;
}

bool detect_frame_access(std::uint32_t word) {
  if (arm::condition(word) == 0xF) return false;
  const bool single_transfer_immediate = (word & 0x0E000000u) == 0x04000000u;
  return single_transfer_immediate && ((word >> 16) & 0xFu) == 11;
}

std::vector<PatternTag> tag_window(std::span<const std::uint32_t> window) {
  std::vector<PatternTag> tags;
  for (auto word : window) {
    if (auto push = decode_push(word); push && push->kind) {
      tags.push_back({*push->kind, {word}, "STMFD SP!," + register_list(push->registers)});
    }
  }
  if (auto idiom = detect_branch_idiom(window)) tags.push_back(std::move(*idiom));
  for (auto word : window) {
    if (detect_frame_access(word)) {
      const bool load = (word >> 20) & 1u;
      tags.push_back({PatternKind::FramePointerAccess, {word},
                      std::string(load ? "LDR" : "STR") + " R" + std::to_string((word >> 12) & 0xFu) + ",[R11]"});
    }
  }
  return tags;
}

std::vector<ScoredSite> activation_report(const ModelParams<float>& params, const InstructionBlock& block,
                                          double threshold) {
  const auto& hyper = params.hyper;
  const auto trace = forward(block, params);
  const auto window_len = static_cast<std::size_t>(hyper.max_kernel_length());
  std::vector<ScoredSite> sites;
  for (std::size_t ki = 0; ki < trace.pooled.size(); ++ki) {
    for (std::size_t j = 0; j < trace.pooled[ki].size(); ++j) {
      const auto& act = trace.pooled[ki][j];
      if (!(static_cast<double>(act.score) > threshold)) continue;
      ScoredSite s;
      s.kernel_length = hyper.kernel_lengths[ki];
      s.filter_index = static_cast<int>(j);
      s.score = act.score;
      s.position = static_cast<std::size_t>(act.position);
      s.address = block.base_offset + 4 * s.position;
      const std::size_t end = std::min(kBlockWords, s.position + window_len);
      for (std::size_t p = s.position; p < end; ++p) s.window.push_back(block.word(p));
      sites.push_back(std::move(s));
    }
  }
  std::stable_sort(sites.begin(), sites.end(), [](const ScoredSite& a, const ScoredSite& b) { return a.score > b.score; });
  return sites;
}

FileAnalysis analyze_file(const ModelParams<float>& params, const std::filesystem::path& path, double threshold,
                          std::size_t min_fill) {
  const auto blocks = file_blocks(path, min_fill);
  if (blocks.empty()) throw Error(ErrorKind::NoCode, path.string() + " yields no instruction block");
  FileAnalysis analysis;
  analysis.path = path.string();
  analysis.verdict = classify_blocks(params, blocks, path.string());
  for (const auto& block : blocks) {
    auto sites = activation_report(params, block, threshold);
    analysis.sites.insert(analysis.sites.end(), std::make_move_iterator(sites.begin()),
                          std::make_move_iterator(sites.end()));
  }
  std::stable_sort(analysis.sites.begin(), analysis.sites.end(),
                   [](const ScoredSite& a, const ScoredSite& b) { return a.score > b.score; });
  for (const auto& site : analysis.sites) {
    auto tags = tag_window(site.window);
    for (const auto& t : tags) ++analysis.tag_counts[static_cast<std::size_t>(t.kind)];
    analysis.site_tags.push_back(std::move(tags));
  }
  return analysis;
}

DiffReport compare_analyses(FileAnalysis a, FileAnalysis b, std::size_t top_sites) {
  DiffReport report;
  report.top_sites = top_sites;
  for (std::size_t i = 0; i < kAllPatternKinds.size(); ++i) {
    if (a.tag_counts[i] == 0 && b.tag_counts[i] == 0) continue;
    report.differences.push_back({kAllPatternKinds[i], a.tag_counts[i], b.tag_counts[i]});
  }
  report.a = std::move(a);
  report.b = std::move(b);
  return report;
}

DiffReport compare_files(const ModelParams<float>& params, const std::filesystem::path& path_a,
                         const std::filesystem::path& path_b, double threshold, std::size_t min_fill,
                         std::size_t top_sites) {
  return compare_analyses(analyze_file(params, path_a, threshold, min_fill),
                          analyze_file(params, path_b, threshold, min_fill), top_sites);
}

std::string sites_json(std::span<const ScoredSite> sites) {
  auto j = nlohmann::json::array();
  for (const auto& s : sites) {
    auto entry = site_json(s);
    auto tags = nlohmann::json::array();
    for (const auto& t : tag_window(s.window)) tags.push_back(tag_json(t));
    entry["tags"] = tags;
    j.push_back(entry);
  }
  return j.dump(2);
}

std::string analysis_json(const FileAnalysis& analysis, std::size_t top_sites) {
  return analysis_object(analysis, top_sites).dump(2);
}

std::string diff_json(const DiffReport& report) {
  nlohmann::json j;
  j["a"] = analysis_object(report.a, report.top_sites);
  j["b"] = analysis_object(report.b, report.top_sites);
  auto diffs = nlohmann::json::array();
  for (const auto& d : report.differences) {
    diffs.push_back({{"kind", to_string(d.kind)}, {"count_a", d.count_a}, {"count_b", d.count_b}, {"delta", d.delta()}});
  }
  j["differences"] = diffs;
  return j.dump(2);
}

std::string sites_text(std::span<const ScoredSite> sites) {
  std::ostringstream out;
  for (const auto& s : sites) {
    char score[32];
    std::snprintf(score, sizeof score, "%.2f", s.score);
    out << '(' << hex_address(s.address) << ", " << score << ")  k=" << s.kernel_length << " filter=" << s.filter_index
        << " ";
    for (auto w : s.window) out << ' ' << hex_word(w);
    for (const auto& t : tag_window(s.window)) out << "  [" << to_string(t.kind) << ' ' << t.detail << ']';
    out << '\n';
  }
  return out.str();
}

std::string diff_text(const DiffReport& report) {
  std::ostringstream out;
  for (const auto* f : {&report.a, &report.b}) {
    out << f->path << ": " << to_string(f->verdict.final_class) << " (confidence " << f->verdict.confidence << "), "
        << f->sites.size() << " sites\n";
    const std::size_t n = std::min(report.top_sites, f->sites.size());
    out << sites_text(std::span<const ScoredSite>(f->sites.data(), n));
  }
  out << "pattern                 A      B      A-B\n";
  for (const auto& d : report.differences) {
    char line[96];
    std::snprintf(line, sizeof line, "%-20s %6zu %6zu %8lld\n", std::string(to_string(d.kind)).c_str(), d.count_a,
                  d.count_b, d.delta());
    out << line;
  }
  return out.str();
}

}  // namespace bineye
