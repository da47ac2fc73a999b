#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastmoco {

struct checkpoint_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Binary checkpoint container. Layout:
///   magic "FMCK", format version u32 LE, entry count u32 LE,
///   per entry: name length u16 LE + UTF-8 name, dtype u8 (0=f32, 1=f64),
///   rank u8, dims u32 LE each, raw little-endian values;
///   trailing CRC32 (of everything after the magic) as u32 LE.
struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;  // 0 = f32, 1 = f64
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> raw;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

class Checkpoint {
 public:
  void add_f32(const std::string& name, std::vector<std::uint32_t> dims, const float* values);
  void add_f64(const std::string& name, std::vector<std::uint32_t> dims, const double* values);

  /// 64-bit metadata stashed bit-exactly as a one-element f64 entry.
  void add_u64(const std::string& name, std::uint64_t v);
  std::optional<std::uint64_t> get_u64(const std::string& name) const;

  const CheckpointEntry* find(const std::string& name) const;
  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  /// Entry values converted to the requested scalar type.
  template <typename S>
  std::vector<S> values_as(const CheckpointEntry& e) const;

  std::vector<CheckpointEntry>& mutable_entries() { return entries_; }

 private:
  std::vector<CheckpointEntry> entries_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializes to a byte buffer (entries sorted by name).
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);

/// Parses a buffer; throws checkpoint_error on a malformed stream or CRC
/// mismatch.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Write-to-temp-then-rename save.
void save_checkpoint(const std::string& path, const Checkpoint& ck);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace fastmoco
