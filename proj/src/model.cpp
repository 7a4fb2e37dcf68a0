#include "bineye/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace bineye {

namespace {

constexpr char kMagic[4] = {'B', 'E', 'Y', 'E'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint32_t>(in[at]) | (static_cast<std::uint32_t>(in[at + 1]) << 8) |
         (static_cast<std::uint32_t>(in[at + 2]) << 16) | (static_cast<std::uint32_t>(in[at + 3]) << 24);
}

}  // namespace

void HyperParams::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::BadInput, "invalid hyperparameters: " + what); };
  if (sequence_length < 1) fail("sequence_length must be >= 1");
  if (instruction_bytes < 1) fail("instruction_bytes must be >= 1");
  if (vocabulary < 1 || vocabulary > 256) fail("vocabulary must lie in [1, 256]");
  if (byte_dim < 1) fail("byte_dim must be >= 1");
  if (position_dim != instruction_bytes * byte_dim) fail("position_dim must equal instruction_bytes * byte_dim");
  if (kernel_lengths.empty()) fail("at least one kernel length is required");
  for (std::size_t i = 0; i < kernel_lengths.size(); ++i) {
    if (kernel_lengths[i] < 1 || kernel_lengths[i] > sequence_length) fail("kernel length outside [1, S]");
    if (i > 0 && kernel_lengths[i] <= kernel_lengths[i - 1]) fail("kernel lengths must be strictly ascending");
  }
  if (num_filters < 0) fail("num_filters must be >= 0");
  if (num_classes != 4) fail("num_classes must be 4");
  if (hidden_units < 0) fail("hidden_units must be >= 0");
}

int HyperParams::max_kernel_length() const {
  return kernel_lengths.empty() ? 0 : *std::max_element(kernel_lengths.begin(), kernel_lengths.end());
}

std::int64_t param_count(const HyperParams& hyper) {
  hyper.validate();
  std::int64_t total = static_cast<std::int64_t>(hyper.vocabulary) * hyper.byte_dim;
  for (int k : hyper.kernel_lengths) {
    total += static_cast<std::int64_t>(k) * hyper.position_dim * hyper.num_filters + hyper.num_filters;
  }
  std::int64_t head_in = hyper.pooled_size();
  if (hyper.hidden_units > 0) {
    total += head_in * hyper.hidden_units + hyper.hidden_units;
    head_in = hyper.hidden_units;
  }
  total += hyper.num_classes * head_in + hyper.num_classes;
  return total;
}

std::string hyper_to_json(const HyperParams& hyper) {
  nlohmann::json j = {
      {"sequence_length", hyper.sequence_length},
      {"instruction_bytes", hyper.instruction_bytes},
      {"vocabulary", hyper.vocabulary},
      {"byte_dim", hyper.byte_dim},
      {"position_dim", hyper.position_dim},
      {"kernel_lengths", hyper.kernel_lengths},
      {"num_filters", hyper.num_filters},
      {"num_classes", hyper.num_classes},
      {"hidden_units", hyper.hidden_units},
  };
  return j.dump();
}

HyperParams hyper_from_json(std::string_view text) {
  HyperParams h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.sequence_length = j.at("sequence_length").get<int>();
    h.instruction_bytes = j.at("instruction_bytes").get<int>();
    h.vocabulary = j.at("vocabulary").get<int>();
    h.byte_dim = j.at("byte_dim").get<int>();
    h.position_dim = j.at("position_dim").get<int>();
    h.kernel_lengths = j.at("kernel_lengths").get<std::vector<int>>();
    h.num_filters = j.at("num_filters").get<int>();
    h.num_classes = j.at("num_classes").get<int>();
    h.hidden_units = j.value("hidden_units", 0);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptPayload, std::string("checkpoint header: ") + e.what());
  }
  try {
    h.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::CorruptPayload, e.what());
  }
  return h;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<float>& params) {
  params.hyper.validate();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  const std::string header = hyper_to_json(params.hyper);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());

  const auto expected = GradientSet<float>::zeros(params.hyper);
  zip_arrays(
      params.hyper,
      [&](const std::string& name, const auto& array, const auto& shape) {
        if (array.rows() != shape.rows() || array.cols() != shape.cols()) {
          throw Error(ErrorKind::ShapeMismatch, "checkpoint: " + name + " does not match the hyperparameters");
        }
        const auto* raw = reinterpret_cast<const std::uint8_t*>(array.data());
        out.insert(out.end(), raw, raw + array.size() * sizeof(float));
      },
      params.weights, expected);
  return out;
}

ModelParams<float> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorKind::BadMagic, "not a BEYE checkpoint");
  }
  if (bytes.size() < 12) throw Error(ErrorKind::CorruptPayload, "checkpoint header truncated");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointVersion));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (header_len > bytes.size() - 12) throw Error(ErrorKind::CorruptPayload, "checkpoint header truncated");
  const std::string_view header(reinterpret_cast<const char*>(bytes.data() + 12), header_len);
  const HyperParams hyper = hyper_from_json(header);

  auto weights = Trainables<float>::zeros(hyper);
  std::size_t at = 12 + header_len;
  zip_arrays(
      hyper,
      [&](const std::string& name, auto& array) {
        const std::size_t n = static_cast<std::size_t>(array.size()) * sizeof(float);
        if (bytes.size() - at < n) throw Error(ErrorKind::CorruptPayload, "checkpoint payload truncated in " + name);
        std::memcpy(array.data(), bytes.data() + at, n);
        at += n;
        if (!array.allFinite()) throw Error(ErrorKind::CorruptPayload, "non-finite values in " + name);
      },
      weights);
  if (at != bytes.size()) throw Error(ErrorKind::CorruptPayload, "trailing bytes after checkpoint payload");
  return make_params(hyper, std::move(weights));
}

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace bineye
