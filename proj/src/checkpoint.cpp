#include "fastmoco/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace fastmoco {

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::uint8_t* p;
  std::size_t len;
  std::size_t off = 0;

  void need(std::size_t n) const {
    if (off + n > len) throw checkpoint_error("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return p[off++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
    off += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p + off, n);
    off += n;
  }
};

}  // namespace

void Checkpoint::add_f32(const std::string& name, std::vector<std::uint32_t> dims,
                         const float* values) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = 0;
  e.dims = std::move(dims);
  e.raw.resize(static_cast<std::size_t>(e.count()) * sizeof(float));
  std::memcpy(e.raw.data(), values, e.raw.size());
  entries_.push_back(std::move(e));
}

void Checkpoint::add_f64(const std::string& name, std::vector<std::uint32_t> dims,
                         const double* values) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = 1;
  e.dims = std::move(dims);
  e.raw.resize(static_cast<std::size_t>(e.count()) * sizeof(double));
  std::memcpy(e.raw.data(), values, e.raw.size());
  entries_.push_back(std::move(e));
}

void Checkpoint::add_u64(const std::string& name, std::uint64_t v) {
  const double d = std::bit_cast<double>(v);
  add_f64(name, {1}, &d);
}

std::optional<std::uint64_t> Checkpoint::get_u64(const std::string& name) const {
  const auto* e = find(name);
  if (!e || e->dtype != 1 || e->raw.size() != sizeof(double)) return std::nullopt;
  double d;
  std::memcpy(&d, e->raw.data(), sizeof(double));
  return std::bit_cast<std::uint64_t>(d);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename S>
std::vector<S> Checkpoint::values_as(const CheckpointEntry& e) const {
  std::vector<S> out(static_cast<std::size_t>(e.count()));
  if (e.dtype == 0) {
    const float* src = reinterpret_cast<const float*>(e.raw.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(src[i]);
  } else if (e.dtype == 1) {
    const double* src = reinterpret_cast<const double*>(e.raw.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(src[i]);
  } else {
    throw checkpoint_error("unknown dtype code in entry " + e.name);
  }
  return out;
}

template std::vector<float> Checkpoint::values_as<float>(const CheckpointEntry&) const;
template std::vector<double> Checkpoint::values_as<double>(const CheckpointEntry&) const;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  auto entries = ck.entries();
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });

  std::vector<std::uint8_t> payload;
  put_u32(payload, kCheckpointVersion);
  put_u32(payload, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw checkpoint_error("entry name too long: " + e.name);
    put_u16(payload, static_cast<std::uint16_t>(e.name.size()));
    payload.insert(payload.end(), e.name.begin(), e.name.end());
    payload.push_back(e.dtype);
    payload.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(payload, d);
    const std::size_t expect =
        static_cast<std::size_t>(e.count()) * (e.dtype == 0 ? sizeof(float) : sizeof(double));
    if (e.raw.size() != expect) throw checkpoint_error("entry size mismatch: " + e.name);
    payload.insert(payload.end(), e.raw.begin(), e.raw.end());
  }

  std::vector<std::uint8_t> out;
  out.reserve(payload.size() + 8);
  out.insert(out.end(), {'F', 'M', 'C', 'K'});
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc =
      static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
  put_u32(out, crc);
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "FMCK", 4) != 0)
    throw checkpoint_error("not a checkpoint file (bad magic)");
  const std::size_t payload_len = bytes.size() - 8;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + static_cast<std::size_t>(i)])
                  << (8 * i);
  const auto crc =
      static_cast<std::uint32_t>(crc32(0L, bytes.data() + 4, static_cast<uInt>(payload_len)));
  if (crc != stored_crc) throw checkpoint_error("checkpoint CRC mismatch: refusing to load");

  Reader r{bytes.data() + 4, payload_len};
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw checkpoint_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.u16();
    e.name.resize(name_len);
    r.bytes(e.name.data(), name_len);
    e.dtype = r.u8();
    if (e.dtype > 1) throw checkpoint_error("unknown dtype code in entry " + e.name);
    const auto rank = r.u8();
    e.dims.resize(rank);
    for (auto& d : e.dims) d = r.u32();
    const std::size_t nbytes =
        static_cast<std::size_t>(e.count()) * (e.dtype == 0 ? sizeof(float) : sizeof(double));
    e.raw.resize(nbytes);
    r.bytes(e.raw.data(), nbytes);
    ck.mutable_entries().push_back(std::move(e));
  }
  if (r.off != payload_len) throw checkpoint_error("trailing bytes after last entry");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw checkpoint_error("cannot open for write: " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw checkpoint_error("write error: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw checkpoint_error("cannot rename " + tmp + " to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace fastmoco
