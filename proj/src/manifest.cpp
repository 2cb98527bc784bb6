#include "davpt/manifest.hpp"

#include <openssl/evp.h>

#include <initializer_list>
#include <sstream>

namespace davpt {

namespace {

std::string hex(const unsigned char* d, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = digits[d[i] >> 4];
    out[2 * i + 1] = digits[d[i] & 15];
  }
  return out;
}

std::string body(const RunManifest& m) {
  std::ostringstream os;
  os << "command: " << m.command << '\n' << "seed: " << m.seed << '\n' << "dataset_hash: " << m.dataset_hash << '\n';
  std::istringstream cfg(m.config_text);
  std::string line;
  while (std::getline(cfg, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    os << "config." << line.substr(0, eq) << ": " << line.substr(eq + 3) << '\n';
  }
  return os.str();
}

std::string sha1_parts(std::initializer_list<std::span<const std::uint8_t>> parts) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char d[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  for (auto p : parts) EVP_DigestUpdate(ctx, p.data(), p.size());
  EVP_DigestFinal_ex(ctx, d, &len);
  EVP_MD_CTX_free(ctx);
  return hex(d, len);
}

}  // namespace

std::string sha1_hex(std::span<const std::uint8_t> bytes) { return sha1_parts({bytes}); }

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size());
  // The header's terminating NUL is part of the hashed object.
  return sha1_parts({{reinterpret_cast<const std::uint8_t*>(header.c_str()), header.size() + 1}, bytes});
}

std::string RunManifest::hash() const {
  const std::string b = body(*this);
  return sha1_hex({reinterpret_cast<const std::uint8_t*>(b.data()), b.size()});
}

std::string RunManifest::format() const {
  std::ostringstream os;
  os << "manifest_hash: " << hash() << '\n' << body(*this);
  for (const auto& [k, v] : outputs) os << "output." << k << ": " << v << '\n';
  return os.str();
}

}  // namespace davpt
