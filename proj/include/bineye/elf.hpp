#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bineye {

inline constexpr std::size_t kBlockWords = 1024;
inline constexpr std::size_t kBlockBytes = kBlockWords * 4;
inline constexpr std::size_t kDefaultMinFill = 1024;

inline constexpr std::uint16_t kMachineArm = 40;
inline constexpr std::uint32_t kSectionExecInstr = 0x4;

enum class ElfFileType : std::uint16_t {
  None = 0,
  Relocatable = 1,
  Executable = 2,
  Shared = 3,
  Core = 4,
};

struct SectionInfo {
  std::string name;
  std::uint32_t type = 0;
  std::uint32_t flags = 0;
  std::uint32_t offset = 0;
  std::uint32_t size = 0;
  std::uint32_t address = 0;

  bool executable() const { return (flags & kSectionExecInstr) != 0; }
};

/// Header and section metadata of an ELF32 little-endian ARM file.
///
/// Holds a copy of the file bytes so that code extraction can run after the
/// original buffer is gone.
struct ObjectFileInfo {
  std::string path;
  int elf_class = 0;      // 32 or 64
  bool little_endian = true;
  std::uint16_t machine = 0;
  ElfFileType file_type = ElfFileType::None;
  /// Set when the file is not ET_REL. Such files are still accepted.
  bool not_relocatable = false;
  std::vector<SectionInfo> sections;
  std::vector<std::uint8_t> bytes;
};

struct CodeImage {
  std::vector<std::uint8_t> bytes;
  std::string source;
  std::size_t origin_offset = 0;
  /// Bytes dropped so that bytes.size() is a multiple of 4.
  std::size_t truncated = 0;
};

/// 1024 A32 instruction words as they appear in the code image.
struct InstructionBlock {
  std::array<std::uint8_t, kBlockBytes> bytes{};
  std::size_t base_offset = 0;
  std::size_t pad_len = 0;

  std::uint32_t word(std::size_t index) const {
    const std::size_t i = index * 4;
    return static_cast<std::uint32_t>(bytes[i]) | (static_cast<std::uint32_t>(bytes[i + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[i + 2]) << 16) | (static_cast<std::uint32_t>(bytes[i + 3]) << 24);
  }
  std::span<const std::uint8_t> view() const { return bytes; }
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Parses an ELF header and section table. Throws Error with kind NotElf,
/// UnsupportedArch or Truncated; never reads out of bounds.
ObjectFileInfo parse_object(std::span<const std::uint8_t> bytes, std::string path = {});

ObjectFileInfo load_object(const std::filesystem::path& path);

/// ".text" by default; with `all_exec` every SHF_EXECINSTR section in file order.
CodeImage extract_code(const ObjectFileInfo& info, bool all_exec = false);

/// Non-overlapping 4096-byte windows. A short final window is zero-padded when
/// it holds at least `min_fill` real bytes and dropped otherwise.
std::vector<InstructionBlock> split_blocks(const CodeImage& image, std::size_t min_fill = kDefaultMinFill);

/// Convenience: load, extract and split in one go.
std::vector<InstructionBlock> file_blocks(const std::filesystem::path& path, std::size_t min_fill = kDefaultMinFill,
                                          bool all_exec = false);

}  // namespace bineye
