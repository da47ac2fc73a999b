#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fastmoco {

inline constexpr int kImageSide = 32;
inline constexpr int kImagePixels = 3 * kImageSide * kImageSide;  // planar RGB
inline constexpr int kRecordBytes = 1 + kImagePixels;
inline constexpr int kNumClasses = 10;

/// One labeled image in CIFAR-10 binary layout: label byte followed by
/// 1024 R + 1024 G + 1024 B bytes, row-major.
struct ImageRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kImagePixels> pixels{};
};

struct Dataset {
  std::vector<ImageRecord> records;
  int size() const { return static_cast<int>(records.size()); }
};

/// Maps a record's bytes to floats in [0, 1], planar 3xHxW.
std::vector<double> record_to_float(const ImageRecord& rec);

/// Reads one CIFAR-10 binary batch file (10000 x 3073 bytes, or any multiple
/// of the record size). Order is preserved.
Dataset load_cifar_file(const std::string& path);

/// Reads and concatenates several batch files.
Dataset load_cifar_files(const std::vector<std::string>& paths);

/// Resolves the conventional file names under a directory:
/// data_batch_1..5.bin for train, test_batch.bin otherwise.
Dataset load_cifar_dir(const std::string& dir, bool train);

/// Writes records in the same binary container format, bit-exact.
void write_cifar_file(const std::string& path, const Dataset& ds);

/// Deterministic procedural dataset: one of ten geometric shapes in a random
/// color over a textured background; the class is the shape type. With
/// stratified=true classes are assigned round-robin.
Dataset synth_dataset(int n, std::uint64_t seed, bool stratified = true);

/// Per-channel normalization constants applied after augmentation.
struct ChannelStats {
  std::array<double, 3> mean;
  std::array<double, 3> stddev;
};

ChannelStats cifar_stats();
ChannelStats synth_stats();

}  // namespace fastmoco
