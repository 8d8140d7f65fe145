#pragma once

// Run manifests: every output directory gets a manifest.json naming the
// command, its effective parameters, seeds and input digests.

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "hspec/io.hpp"

#ifndef HSPEC_VERSION
#define HSPEC_VERSION "0.0.0"
#endif

namespace hspec::cli {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_bytes(path)); }

inline constexpr const char* kManifestName = "manifest.json";

class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> args)
      : command_(std::move(command)), args_(std::move(args)), start_(std::chrono::steady_clock::now()) {}

  Json& parameters() { return parameters_; }
  Json& seeds() { return seeds_; }

  void add_input(const std::filesystem::path& path) {
    inputs_.push_back(Json{{"path", path.string()}, {"sha256", sha256_file(path)}});
  }

  /// The reproducible part: no timings, no output list.
  Json identity() const {
    return Json{{"tool", "hspec"},       {"version", HSPEC_VERSION}, {"command", command_},
                {"args", args_},         {"parameters", parameters_}, {"seeds", seeds_},
                {"inputs", inputs_}};
  }

  /// Writes an output file and records its digest.
  void write_output(const std::filesystem::path& dir, const std::string& name, const std::string& bytes) {
    const std::filesystem::path path = dir / name;
    std::filesystem::create_directories(path.parent_path());
    atomic_write(path, bytes);
    outputs_.push_back(Json{{"path", name}, {"sha256", sha256_hex(bytes)}});
  }

  void finish(const std::filesystem::path& dir) const {
    Json j = identity();
    j["outputs"] = outputs_;
    j["wall_time_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    atomic_write(dir / kManifestName, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  Json parameters_ = Json::object();
  Json seeds_ = Json::object();
  Json inputs_ = Json::array();
  Json outputs_ = Json::array();
  std::chrono::steady_clock::time_point start_;
};

}  // namespace hspec::cli
