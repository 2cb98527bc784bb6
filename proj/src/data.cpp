#include "davpt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

#include "byteio.hpp"
#include "davpt/checkpoint.hpp"
#include "davpt/error.hpp"
#include "davpt/rng.hpp"

namespace davpt {

namespace {
constexpr char kMagic[4] = {'D', 'A', 'V', 'T'};
}

std::vector<std::span<const std::uint8_t>> Dataset::images(std::span<const std::size_t> indices) const {
  std::vector<std::span<const std::uint8_t>> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(image(i));
  return out;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  if (ds.pixels.size() != ds.size() * ds.image_bytes()) {
    throw ContractError("dataset pixel buffer does not match its sample count");
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.reserve(kDatasetHeaderBytes + ds.size() * (2 + ds.image_bytes()));
  byteio::put_u32(out, kDatasetVersion);
  byteio::put_u32(out, static_cast<std::uint32_t>(ds.size()));
  byteio::put_u32(out, ds.height);
  byteio::put_u32(out, ds.width);
  byteio::put_u32(out, ds.channels);
  byteio::put_u32(out, ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    byteio::put_u16(out, ds.labels[i]);
    auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kDatasetHeaderBytes) {
    throw FormatError(FormatIssue::Truncated, "dataset truncated: expected at least " +
                                                  std::to_string(kDatasetHeaderBytes) + " header bytes, got " +
                                                  std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(FormatIssue::BadMagic, "dataset: bad magic (expected \"DAVT\")");
  }
  const std::uint32_t version = byteio::get_u32(bytes, 4);
  if (version != kDatasetVersion) {
    throw FormatError(FormatIssue::UnsupportedVersion, "dataset: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const std::uint32_t n = byteio::get_u32(bytes, 8);
  ds.height = byteio::get_u32(bytes, 12);
  ds.width = byteio::get_u32(bytes, 16);
  ds.channels = byteio::get_u32(bytes, 20);
  ds.num_classes = byteio::get_u32(bytes, 24);
  if (ds.height == 0 || ds.width == 0 || ds.channels == 0) {
    throw FormatError(FormatIssue::BadHeader, "dataset: zero image dimension");
  }
  if (ds.num_classes == 0 || ds.num_classes > 65536) {
    throw FormatError(FormatIssue::BadHeader, "dataset: num_classes " + std::to_string(ds.num_classes) +
                                                  " outside [1, 65536]");
  }
  const std::uint64_t image = static_cast<std::uint64_t>(ds.height) * ds.width;
  constexpr std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 4;
  if (image > limit / ds.channels) throw FormatError(FormatIssue::BadHeader, "dataset: image dimensions overflow");
  const std::uint64_t record = 2 + image * ds.channels;
  if (n != 0 && record > (limit - kDatasetHeaderBytes) / n) {
    throw FormatError(FormatIssue::BadHeader, "dataset: declared size overflows");
  }
  const std::uint64_t expected = kDatasetHeaderBytes + record * n;
  if (bytes.size() < expected) {
    throw FormatError(FormatIssue::Truncated, "dataset truncated: expected " + std::to_string(expected) +
                                                  " bytes, got " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw FormatError(FormatIssue::TrailingBytes, "dataset: expected " + std::to_string(expected) + " bytes, got " +
                                                      std::to_string(bytes.size()));
  }
  const std::size_t img = static_cast<std::size_t>(record - 2);
  ds.labels.resize(n);
  ds.pixels.resize(static_cast<std::size_t>(n) * img);
  std::size_t at = kDatasetHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = byteio::get_u16(bytes, at);
    if (ds.labels[i] >= ds.num_classes) {
      throw FormatError(FormatIssue::BadLabel, "dataset: sample " + std::to_string(i) + " has label " +
                                                   std::to_string(ds.labels[i]) + " >= num_classes " +
                                                   std::to_string(ds.num_classes));
    }
    std::memcpy(ds.pixels.data() + i * img, bytes.data() + at + 2, img);
    at += static_cast<std::size_t>(record);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) { write_file(path, encode_dataset(ds)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

std::vector<double> class_prototype(const SynthSpec& spec, std::size_t cls) {
  const std::size_t s = spec.image_size, ch = spec.channels;
  const double theta = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(spec.num_classes);
  const double freq = 3.0 + static_cast<double>(cls % 3);
  const double amplitude = 100.0 * spec.separability;
  std::vector<double> out(s * s * ch);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                       static_cast<double>(s);
      for (std::size_t c = 0; c < ch; ++c) {
        const double phase = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(ch);
        out[(y * s + x) * ch + c] = 127.5 + amplitude * std::cos(2.0 * std::numbers::pi * freq * u + phase);
      }
    }
  return out;
}

Dataset generate(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.num_classes > 65535) throw ConfigError("u16 labels cap num_classes at 65535");
  if (spec.image_size == 0 || spec.channels == 0 || spec.samples_per_class == 0) {
    throw ConfigError("synthetic image size, channels and samples per class must be positive");
  }
  if (!(spec.separability >= 0.0 && spec.separability <= 1.0)) throw ConfigError("separability must lie in [0, 1]");
  if (!(spec.noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  Dataset ds;
  ds.height = ds.width = static_cast<std::uint32_t>(spec.image_size);
  ds.channels = static_cast<std::uint32_t>(spec.channels);
  ds.num_classes = static_cast<std::uint32_t>(spec.num_classes);
  std::vector<std::vector<double>> protos;
  for (std::size_t c = 0; c < spec.num_classes; ++c) protos.push_back(class_prototype(spec, c));
  const std::size_t total = spec.num_classes * spec.samples_per_class;
  ds.labels.resize(total);
  ds.pixels.resize(total * ds.image_bytes());
  Rng rng(Rng::derive(spec.seed, 0xDA7A));
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t cls = i % spec.num_classes;
    ds.labels[i] = static_cast<std::uint16_t>(cls);
    std::uint8_t* dst = ds.pixels.data() + i * ds.image_bytes();
    for (std::size_t p = 0; p < ds.image_bytes(); ++p) {
      const double noise = spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0;
      const double v = std::clamp(std::round(protos[cls][p] + noise), 0.0, 255.0);
      dst[p] = static_cast<std::uint8_t>(v);
    }
  }
  return ds;
}

double nearest_prototype_accuracy(const SynthSpec& spec, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::vector<std::vector<double>> protos;
  for (std::size_t c = 0; c < spec.num_classes; ++c) protos.push_back(class_prototype(spec, c));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto img = ds.image(i);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < protos.size(); ++c) {
      double d = 0.0;
      for (std::size_t p = 0; p < img.size(); ++p) {
        const double e = img[p] - protos[c][p];
        d += e * e;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best == ds.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

}  // namespace

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  Rng rng(Rng::derive(Rng::derive(seed, 0xBA7C), epoch));
  const std::vector<std::size_t> order = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

Split split_dataset(std::size_t n, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x5B17));
  const std::vector<std::size_t> order = permutation(n, rng);
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

}  // namespace davpt
