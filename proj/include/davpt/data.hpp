#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace davpt {

/// In-memory image classification set. Pixels are u8, row-major and
/// channel-interleaved, one image after another.
struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept {
    return static_cast<std::size_t>(height) * width * channels;
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  /// Image views for the given sample indices.
  std::vector<std::span<const std::uint8_t>> images(std::span<const std::size_t> indices) const;
};

/// Dataset file (little-endian):
///   "DAVT", u32 version = 1, u32 num_samples, u32 height, u32 width,
///   u32 channels, u32 num_classes, then per sample u16 label followed by
///   height*width*channels bytes.
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 28;

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
/// Rejects bad magic, unsupported versions, truncation, trailing bytes and
/// out-of-range labels, each with a distinct FormatIssue.
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

struct SynthSpec {
  std::size_t num_classes = 8;
  std::size_t samples_per_class = 64;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double separability = 1.0;  ///< 0 = identical prototypes, 1 = full-contrast gratings
  double noise_std = 8.0;     ///< Gaussian pixel noise, in pixel units
  std::uint64_t seed = 0;
};

/// Class c gets a sinusoidal grating with its own orientation and frequency,
/// contrast scaled by separability; samples add Gaussian noise and are
/// clamped and quantized to u8. Sample i has class i mod C.
Dataset generate(const SynthSpec& spec);

/// Noise-free class prototype (before quantization), image_size^2 * channels.
std::vector<double> class_prototype(const SynthSpec& spec, std::size_t cls);

/// Accuracy of assigning each sample to the nearest prototype in pixel space
/// (ties to the lowest class).
double nearest_prototype_accuracy(const SynthSpec& spec, const Dataset& ds);

/// Fisher-Yates permutation of [0, n) keyed by (seed, epoch), cut into
/// batches of batch_size; the last batch may be short.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then first 80% train, next 10% validation, rest test.
Split split_dataset(std::size_t n, std::uint64_t seed);

}  // namespace davpt
