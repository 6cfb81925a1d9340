#pragma once

// Checkpoint container.
//
//   ASKPAINT-CHECKPOINT\n
//   format_version: 1\n
//   model_config: <single-line JSON>\n
//   train_config: <single-line JSON>\n
//   step_count: <integer>\n
//   arrays: <integer>\n
//   payload_bytes: <integer>\n
//   checksum: <FNV-1a 64 of the payload, 16 hex digits>\n
//   \n
//   payload: per array, in parameter order:
//     u32 name_length, name bytes, u32 channels, u32 height, u32 width,
//     float32[channels * height * width]
//   All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/errors.hpp"
#include "askpaint/model.hpp"

namespace askpaint {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "ASKPAINT-CHECKPOINT";

template <typename T>
struct Checkpoint {
  int format_version = kCheckpointVersion;
  ColorizerModel<T> model;
  nlohmann::json train_config = nlohmann::json::object();
  std::int64_t step_count = 0;
};

namespace detail {

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t k = 0; k < n; ++k) {
    h ^= data[k];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

class PayloadReader {
 public:
  PayloadReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint8_t bytes[sizeof(U)];
    std::memcpy(bytes, data_ + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw CorruptCheckpointError("checkpoint payload ends early");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<T>& ckpt) {
  std::vector<std::uint8_t> payload;
  for (const auto& p : ckpt.model.parameters()) {
    const Shape s = p.value.shape();
    detail::put_le<std::uint32_t>(payload, static_cast<std::uint32_t>(p.name.size()));
    payload.insert(payload.end(), p.name.begin(), p.name.end());
    detail::put_le<std::uint32_t>(payload, static_cast<std::uint32_t>(s.channels));
    detail::put_le<std::uint32_t>(payload, static_cast<std::uint32_t>(s.height));
    detail::put_le<std::uint32_t>(payload, static_cast<std::uint32_t>(s.width));
    for (T v : p.value.vec()) detail::put_le<float>(payload, static_cast<float>(v));
  }
  std::ostringstream header;
  header << kCheckpointMagic << "\n"
         << "format_version: " << ckpt.format_version << "\n"
         << "model_config: " << nlohmann::json(ckpt.model.config()).dump() << "\n"
         << "train_config: " << ckpt.train_config.dump() << "\n"
         << "step_count: " << ckpt.step_count << "\n"
         << "arrays: " << ckpt.model.parameters().size() << "\n"
         << "payload_bytes: " << payload.size() << "\n"
         << "checksum: " << std::hex << std::setw(16) << std::setfill('0')
         << detail::fnv1a64(payload.data(), payload.size()) << "\n\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

// Parses a serialized checkpoint. Nothing is returned unless every check
// passes. With `expected` set, array shapes are validated against that
// configuration instead of the embedded one.
template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                     const std::optional<ModelConfig>& expected = std::nullopt) {
  std::size_t pos = 0;
  auto line = [&]() {
    const auto it = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), '\n');
    if (it == bytes.end()) throw CorruptCheckpointError("checkpoint header ends early");
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), it);
    pos = static_cast<std::size_t>(it - bytes.begin()) + 1;
    return s;
  };
  auto field = [&](const std::string& key) {
    const std::string s = line();
    const std::string prefix = key + ": ";
    if (s.rfind(prefix, 0) != 0) throw CorruptCheckpointError("checkpoint header missing '" + key + "'");
    return s.substr(prefix.size());
  };
  auto integer = [](const std::string& s, const char* what) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw CorruptCheckpointError(std::string("bad checkpoint ") + what + " '" + s + "'");
    }
  };

  if (line() != kCheckpointMagic) throw CorruptCheckpointError("not a checkpoint file (bad magic)");
  const auto version = integer(field("format_version"), "format_version");
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format_version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  Checkpoint<T> ck;
  ModelConfig config;
  try {
    nlohmann::json::parse(field("model_config")).get_to(config);
    ck.train_config = nlohmann::json::parse(field("train_config"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const ValidationError& e) {
    throw CorruptCheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.step_count = integer(field("step_count"), "step_count");
  const auto n_arrays = integer(field("arrays"), "arrays");
  const auto payload_bytes = integer(field("payload_bytes"), "payload_bytes");
  const std::string checksum = field("checksum");
  if (line() != "") throw CorruptCheckpointError("checkpoint header not terminated");
  if (payload_bytes < 0 || bytes.size() - pos != static_cast<std::size_t>(payload_bytes))
    throw CorruptCheckpointError("checkpoint payload is " + std::to_string(bytes.size() - pos) + " bytes, header says " +
                                 std::to_string(payload_bytes));
  std::ostringstream sum;
  sum << std::hex << std::setw(16) << std::setfill('0') << detail::fnv1a64(bytes.data() + pos, bytes.size() - pos);
  if (sum.str() != checksum) throw CorruptCheckpointError("checkpoint checksum mismatch");

  const ModelConfig target = expected.value_or(config);
  try {
    validate(target);
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("checkpoint model_config invalid: ") + e.what());
  }
  const auto layout = parameter_layout(target);
  detail::PayloadReader reader(bytes.data() + pos, bytes.size() - pos);
  std::vector<typename ColorizerModel<T>::Parameter> params;
  for (long long a = 0; a < n_arrays; ++a) {
    const auto name_len = reader.get<std::uint32_t>();
    std::string name = reader.get_string(name_len);
    Shape s;
    s.channels = static_cast<int>(reader.get<std::uint32_t>());
    s.height = static_cast<int>(reader.get<std::uint32_t>());
    s.width = static_cast<int>(reader.get<std::uint32_t>());
    if (static_cast<std::size_t>(a) >= layout.size())
      throw CheckpointShapeError(name, "checkpoint has unexpected extra array '" + name + "'");
    if (layout[a].name != name)
      throw CheckpointShapeError(name, "checkpoint array '" + name + "' where '" + layout[a].name + "' was expected");
    if (layout[a].shape != s)
      throw CheckpointShapeError(name, "checkpoint array '" + name + "' has shape " + s.str() + ", model expects " +
                                           layout[a].shape.str());
    Tensor<T> t(s);
    for (auto& v : t.vec()) {
      const float f = reader.get<float>();
      if (!std::isfinite(f)) throw CorruptCheckpointError("checkpoint array '" + name + "' has non-finite values");
      v = static_cast<T>(f);
    }
    params.push_back({std::move(name), std::move(t)});
  }
  if (!reader.done()) throw CorruptCheckpointError("trailing bytes after checkpoint arrays");
  if (params.size() != layout.size())
    throw CheckpointShapeError(layout[params.size()].name,
                               "checkpoint lacks array '" + layout[params.size()].name + "'");
  ck.model = ColorizerModel<T>(target);
  for (std::size_t k = 0; k < params.size(); ++k) ck.model.parameters()[k].value = std::move(params[k].value);
  return ck;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void save_checkpoint(const ColorizerModel<T>& model, const std::filesystem::path& path) {
  save_checkpoint(Checkpoint<T>{kCheckpointVersion, model, nlohmann::json::object(), 0}, path);
}

template <typename T = float>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes, expected);
}

}  // namespace askpaint
