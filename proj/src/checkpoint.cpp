#include "diffuse/checkpoint.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "diffuse/error.hpp"

namespace diffuse {

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint64_t kMaxRecord = std::uint64_t{1} << 32;

template <typename U>
void put(std::ostream& out, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), b.size());
}

template <typename U>
U get(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> b;
  if (!in.read(reinterpret_cast<char*>(b.data()), b.size()))
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint32_t>(in, what);
  if (n > 1u << 20) throw FormatError(std::string("checkpoint ") + what + " length implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw FormatError(std::string("checkpoint truncated in ") + what);
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, ckpt.header.init_scheme);
  put<std::uint64_t>(out, ckpt.header.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, t.size());
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(f)) throw NumericError("checkpoint: parameter " + name + " is not finite in float32");
      put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  if (!out) throw IoError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    throw FormatError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.header.init_scheme = get_string(in, "init scheme");
  ck.header.seed = get<std::uint64_t>(in, "seed");
  const auto n = get<std::uint32_t>(in, "record count");
  for (std::uint32_t r = 0; r < n; ++r) {
    NamedTensor nt;
    nt.name = get_string(in, "parameter name");
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank > 8) throw FormatError("parameter " + nt.name + ": rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, "dims");
    const auto count = get<std::uint64_t>(in, "value count");
    if (count > kMaxRecord || count != numel(shape))
      throw FormatError("parameter " + nt.name + ": value count does not match shape " + to_string(shape));
    std::vector<double> v(count);
    for (auto& x : v) x = std::bit_cast<float>(get<std::uint32_t>(in, "values"));
    nt.value = Tensor::from_data(std::move(shape), std::move(v));
    ck.params.push_back(std::move(nt));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace diffuse
