#include "kgan/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "kgan/error.hpp"
#include "kgan/rng.hpp"

namespace kgan {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'K', 'G', 'A', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw VersionError("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 32)) throw VersionError("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw VersionError("truncated checkpoint");
  return s;
}

}  // namespace

std::uint64_t config_hash(const nlohmann::json& config) {
  Fnv1a h;
  h.update(config.dump());  // nlohmann::json objects are key-sorted
  return h.digest();
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, ckpt.schema_version);
    put<std::uint64_t>(out, config_hash(ckpt.config));
    put_string(out, ckpt.config.dump());
    put<std::int64_t>(out, ckpt.step);
    put<std::uint64_t>(out, ckpt.arrays.size());
    for (const auto& [name, tensor] : ckpt.arrays) {
      auto t = tensor.detach().to(torch::kCPU).contiguous();
      put_string(out, name);
      put<std::int32_t>(out, static_cast<std::int32_t>(t.scalar_type()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
      for (auto d : t.sizes()) put<std::int64_t>(out, d);
      const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
      put<std::uint64_t>(out, nbytes);
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    }
    if (!out) throw Error("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SourceError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw VersionError("not a kgan checkpoint: " + path.string());
  Checkpoint ckpt;
  ckpt.schema_version = get<std::uint32_t>(in);
  if (ckpt.schema_version != kCheckpointSchemaVersion)
    throw VersionError("checkpoint schema version " + std::to_string(ckpt.schema_version) +
                       " is not supported (expected " + std::to_string(kCheckpointSchemaVersion) + ")");
  const auto hash = get<std::uint64_t>(in);
  try {
    ckpt.config = nlohmann::json::parse(get_string(in));
  } catch (const nlohmann::json::parse_error&) {
    throw VersionError("corrupt checkpoint config in " + path.string());
  }
  if (config_hash(ckpt.config) != hash) throw VersionError("checkpoint config hash mismatch");
  ckpt.step = get<std::int64_t>(in);
  const auto n = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = get_string(in);
    const auto dtype = static_cast<c10::ScalarType>(get<std::int32_t>(in));
    const auto ndim = get<std::uint32_t>(in);
    std::vector<std::int64_t> sizes(ndim);
    for (auto& d : sizes) d = get<std::int64_t>(in);
    const auto nbytes = get<std::uint64_t>(in);
    auto t = torch::empty(sizes, torch::TensorOptions().dtype(dtype));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes)
      throw VersionError("array '" + name + "' size mismatch");
    if (!in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes)))
      throw VersionError("truncated checkpoint array '" + name + "'");
    ckpt.arrays.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

void export_module(const torch::nn::Module& module, const std::string& prefix,
                   std::map<std::string, torch::Tensor>& out) {
  for (const auto& p : module.named_parameters(true)) out[prefix + p.key()] = p.value().detach().cpu().clone();
  for (const auto& b : module.named_buffers(true)) out[prefix + b.key()] = b.value().detach().cpu().clone();
}

void import_module(torch::nn::Module& module, const std::string& prefix,
                   const std::map<std::string, torch::Tensor>& arrays) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    auto it = arrays.find(prefix + key);
    if (it == arrays.end()) throw VersionError("checkpoint is missing array '" + prefix + key + "'");
    if (it->second.sizes() != dst.sizes())
      throw VersionError("checkpoint array '" + prefix + key + "' has the wrong shape");
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

}  // namespace kgan
