#include "bineye/elf.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bineye/error.hpp"

namespace bineye {

namespace {

constexpr std::size_t kElf32HeaderSize = 52;
constexpr std::size_t kElf32SectionHeaderSize = 40;
constexpr std::uint32_t kSectionNoBits = 8;
constexpr std::uint16_t kSectionIndexExtended = 0xffff;

std::uint16_t read_u16(std::span<const std::uint8_t> bytes, std::size_t at) {
  return static_cast<std::uint16_t>(bytes[at] | (bytes[at + 1] << 8));
}

std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  return static_cast<std::uint32_t>(bytes[at]) | (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
         (static_cast<std::uint32_t>(bytes[at + 2]) << 16) | (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
}

bool fits(std::uint64_t offset, std::uint64_t size, std::size_t total) {
  return offset <= total && size <= total - offset;
}

SectionInfo read_section_header(std::span<const std::uint8_t> bytes, std::size_t at, std::uint32_t& name_offset) {
  SectionInfo s;
  name_offset = read_u32(bytes, at);
  s.type = read_u32(bytes, at + 4);
  s.flags = read_u32(bytes, at + 8);
  s.address = read_u32(bytes, at + 12);
  s.offset = read_u32(bytes, at + 16);
  s.size = read_u32(bytes, at + 20);
  return s;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed for " + path.string());
  return bytes;
}

ObjectFileInfo parse_object(std::span<const std::uint8_t> bytes, std::string path) {
  static constexpr std::uint8_t kMagic[4] = {0x7f, 'E', 'L', 'F'};
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw Error(ErrorKind::NotElf, "bad magic in " + (path.empty() ? std::string("<buffer>") : path));
  }
  if (bytes.size() < 16) throw Error(ErrorKind::Truncated, "ELF identification truncated");

  ObjectFileInfo info;
  info.path = std::move(path);
  info.elf_class = bytes[4] == 1 ? 32 : bytes[4] == 2 ? 64 : 0;
  info.little_endian = bytes[5] == 1;
  if (info.elf_class != 32) throw Error(ErrorKind::UnsupportedArch, "only ELF32 is supported");
  if (!info.little_endian) throw Error(ErrorKind::UnsupportedArch, "only little-endian ELF is supported");
  if (bytes.size() < kElf32HeaderSize) throw Error(ErrorKind::Truncated, "ELF header truncated");

  info.file_type = static_cast<ElfFileType>(read_u16(bytes, 16));
  info.machine = read_u16(bytes, 18);
  if (info.machine != kMachineArm) {
    throw Error(ErrorKind::UnsupportedArch, "machine " + std::to_string(info.machine) + " is not ARM (40)");
  }
  info.not_relocatable = info.file_type != ElfFileType::Relocatable;

  const std::uint32_t shoff = read_u32(bytes, 32);
  const std::uint16_t shentsize = read_u16(bytes, 46);
  std::uint32_t shnum = read_u16(bytes, 48);
  std::uint32_t shstrndx = read_u16(bytes, 50);

  if (shoff == 0) {
    info.bytes.assign(bytes.begin(), bytes.end());
    return info;
  }
  if (shentsize < kElf32SectionHeaderSize) throw Error(ErrorKind::Truncated, "section header entry too small");
  if (!fits(shoff, kElf32SectionHeaderSize, bytes.size())) throw Error(ErrorKind::Truncated, "section table outside file");

  // Extended numbering keeps the real counts in section 0.
  if (shnum == 0) shnum = read_u32(bytes, shoff + 20);
  if (shstrndx == kSectionIndexExtended) shstrndx = read_u32(bytes, shoff + 24);

  if (!fits(shoff, static_cast<std::uint64_t>(shnum) * shentsize, bytes.size())) {
    throw Error(ErrorKind::Truncated, "section table outside file");
  }

  std::vector<std::uint32_t> name_offsets(shnum);
  info.sections.reserve(shnum);
  for (std::uint32_t i = 0; i < shnum; ++i) {
    SectionInfo s = read_section_header(bytes, shoff + static_cast<std::size_t>(i) * shentsize, name_offsets[i]);
    if (s.type != kSectionNoBits && !fits(s.offset, s.size, bytes.size())) {
      throw Error(ErrorKind::Truncated, "section " + std::to_string(i) + " lies outside the file");
    }
    info.sections.push_back(std::move(s));
  }

  if (shstrndx != 0 && shstrndx < shnum) {
    const SectionInfo& strtab = info.sections[shstrndx];
    if (strtab.type != kSectionNoBits) {
      const auto table = bytes.subspan(strtab.offset, strtab.size);
      for (std::uint32_t i = 0; i < shnum; ++i) {
        const std::uint32_t at = name_offsets[i];
        if (at >= table.size()) throw Error(ErrorKind::Truncated, "section name outside string table");
        const auto rest = table.subspan(at);
        const auto end = std::find(rest.begin(), rest.end(), std::uint8_t{0});
        if (end == rest.end()) throw Error(ErrorKind::Truncated, "unterminated section name");
        info.sections[i].name.assign(rest.begin(), end);
      }
    }
  }

  info.bytes.assign(bytes.begin(), bytes.end());
  return info;
}

ObjectFileInfo load_object(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_object(bytes, path.string());
}

CodeImage extract_code(const ObjectFileInfo& info, bool all_exec) {
  CodeImage image;
  image.source = info.path;
  bool found = false;
  for (const auto& s : info.sections) {
    const bool wanted = all_exec ? s.executable() : s.name == ".text";
    if (!wanted || s.type == kSectionNoBits) continue;
    found = true;
    image.bytes.insert(image.bytes.end(), info.bytes.begin() + s.offset, info.bytes.begin() + s.offset + s.size);
    if (!all_exec) break;
  }
  image.truncated = image.bytes.size() % 4;
  image.bytes.resize(image.bytes.size() - image.truncated);
  if (!found || image.bytes.empty()) {
    throw Error(ErrorKind::NoCode, "no " + std::string(all_exec ? "executable section" : ".text section") +
                                       " with content in " + (info.path.empty() ? "<buffer>" : info.path));
  }
  return image;
}

std::vector<InstructionBlock> split_blocks(const CodeImage& image, std::size_t min_fill) {
  std::vector<InstructionBlock> blocks;
  const std::size_t total = image.bytes.size();
  for (std::size_t start = 0; start < total; start += kBlockBytes) {
    const std::size_t real = std::min(kBlockBytes, total - start);
    if (real < kBlockBytes && real < min_fill) break;
    InstructionBlock block;
    std::memcpy(block.bytes.data(), image.bytes.data() + start, real);
    block.base_offset = start;
    block.pad_len = kBlockBytes - real;
    blocks.push_back(block);
  }
  return blocks;
}

std::vector<InstructionBlock> file_blocks(const std::filesystem::path& path, std::size_t min_fill, bool all_exec) {
  return split_blocks(extract_code(load_object(path), all_exec), min_fill);
}

}  // namespace bineye
