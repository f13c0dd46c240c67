#include "mtr/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace mtr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'T', 'R', 'C', 'K', 'P', 'T', '0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw LoadError("checkpoint: truncated file '" + path + "'");
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& path,
                     std::uint64_t fingerprint) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("checkpoint: cannot open '" + tmp + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    write_raw(out, kVersion);
    write_raw(out, fingerprint);
    write_raw(out, static_cast<std::uint64_t>(params.size()));
    for (const auto& [name, tensor] : params.entries()) {
      write_raw(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_raw(out, static_cast<std::uint32_t>(tensor.rank()));
      for (std::size_t d : tensor.shape) write_raw(out, static_cast<std::uint64_t>(d));
      out.write(reinterpret_cast<const char*>(tensor.data.data()),
                static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
    }
    if (!out) throw LoadError("checkpoint: write to '" + tmp + "' failed");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw LoadError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const auto version = read_raw<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw LoadError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.fingerprint = read_raw<std::uint64_t>(in, path);
  const auto count = read_raw<std::uint64_t>(in, path);
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = read_raw<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw LoadError("checkpoint: truncated file '" + path + "'");
    const auto rank = read_raw<std::uint32_t>(in, path);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(read_raw<std::uint64_t>(in, path));
      numel *= shape[d];
    }
    std::vector<double> data(numel);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw LoadError("checkpoint: truncated file '" + path + "'");
    ck.params.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return ck;
}

}  // namespace mtr
