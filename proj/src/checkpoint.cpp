#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "hat/model.hpp"

namespace hat {
namespace {

constexpr char kMagic[8] = {'H', 'A', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("truncated checkpoint reading " + what);
  return v;
}

std::string read_string(std::istream& is, const std::string& what) {
  const std::uint32_t n = read_u32(is, what);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("truncated checkpoint reading " + what);
  return s;
}

struct Blob {
  Shape shape;
  std::vector<float> data;
};

struct RawCheckpoint {
  HatConfig config;
  std::vector<std::pair<std::string, Blob>> blobs;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = read_u32(is, "version");
  if (version != kVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  RawCheckpoint raw;
  raw.config = config_from_json(nlohmann::json::parse(read_string(is, "config")));
  const std::uint32_t count = read_u32(is, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = read_string(is, "tensor name");
    Blob blob;
    const std::uint32_t rank = read_u32(is, name + " rank");
    for (std::uint32_t r = 0; r < rank; ++r) blob.shape.push_back(read_u32(is, name + " shape"));
    blob.data.resize(shape_numel(blob.shape));
    if (!is.read(reinterpret_cast<char*>(blob.data.data()), static_cast<std::streamsize>(blob.data.size() * 4)))
      throw std::runtime_error(path.string() + ": truncated data for " + name);
    raw.blobs.emplace_back(std::move(name), std::move(blob));
  }
  return raw;
}

void assign(Tensor t, const Blob& blob) {
  auto vals = t.mutable_values();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = blob.data[i];
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const HatConfig& config, const HatParameters& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  const std::string cfg = to_json(config).dump();
  write_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto named = params.named();
  write_u32(os, static_cast<std::uint32_t>(named.size()));
  std::vector<float> buf;
  for (const auto& nt : named) {
    write_u32(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    write_u32(os, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    buf.assign(nt.tensor.values().begin(), nt.tensor.values().end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto raw = read_raw(path);
  Checkpoint ck{raw.config, init_parameters(raw.config, 0)};
  const auto named = ck.params.named();
  if (named.size() != raw.blobs.size())
    throw std::runtime_error(path.string() + ": expected " + std::to_string(named.size()) + " tensors for config, found " +
                             std::to_string(raw.blobs.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, blob] = raw.blobs[i];
    if (name != named[i].name)
      throw std::runtime_error(path.string() + ": tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                               named[i].name + "'");
    if (blob.shape != named[i].tensor.shape())
      throw std::runtime_error(path.string() + ": shape " + shape_str(blob.shape) + " for '" + name +
                               "' does not match config shape " + shape_str(named[i].tensor.shape()));
    assign(named[i].tensor, blob);
  }
  return ck;
}

std::vector<std::string> load_matching(const std::filesystem::path& path, HatParameters& params) {
  const auto raw = read_raw(path);
  std::map<std::string, const Blob*> by_name;
  for (const auto& [name, blob] : raw.blobs) by_name[name] = &blob;
  std::vector<std::string> untouched;
  for (const auto& nt : params.named()) {
    const auto it = by_name.find(nt.name);
    if (it == by_name.end() || it->second->shape != nt.tensor.shape()) {
      untouched.push_back(nt.name);
      continue;
    }
    assign(nt.tensor, *it->second);
  }
  return untouched;
}

}  // namespace hat
