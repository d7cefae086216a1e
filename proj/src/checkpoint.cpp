#include "coarl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "coarl/error.hpp"

namespace coarl {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'A', 'R', 'L'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t pos) {
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  return v;
}

[[noreturn]] void corrupt(const std::string& why) {
  throw Error("corrupt_checkpoint", "checkpoint is corrupt: " + why);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json index = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index[name] = {{"offset", offset}, {"shape", t.shape()}};
    offset += t.numel() * sizeof(double);
  }
  nlohmann::json header = {
      {"kind", ckpt.kind}, {"config", ckpt.config}, {"meta", ckpt.meta}, {"tensors", index}};
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(16 + header_text.size() + offset);
  out.append(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error("bad_magic", "not a checkpoint file (magic bytes differ from \"CARL\")");
  }
  if (bytes.size() < 16) corrupt("truncated preamble");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw Error("version_mismatch", "checkpoint format version " + std::to_string(version) +
                                        " is not supported (expected " +
                                        std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) corrupt("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("unreadable header: ") + e.what());
  }
  const std::string_view blob = bytes.substr(16 + header_len);

  Checkpoint ckpt;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.meta = header.at("meta");
    for (const auto& [name, entry] : header.at("tensors").items()) {
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto shape = entry.at("shape").get<ad::Shape>();
      const std::size_t n = ad::shape_numel(shape);
      if (offset > blob.size() || n * sizeof(double) > blob.size() - offset) {
        corrupt("tensor '" + name + "' extends past end of file");
      }
      std::vector<double> values(n);
      std::memcpy(values.data(), blob.data() + offset, n * sizeof(double));
      ckpt.tensors.emplace(name, ad::Tensor::from(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("malformed header: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io_error", "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io_error", "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing_file", "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

std::uint64_t tensor_map_hash(const std::map<std::string, ad::Tensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

}  // namespace coarl
