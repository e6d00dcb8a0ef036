#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace convprobe {

enum class BlobType { f32, f64 };

struct NamedArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;  // stored as f32 or f64 depending on the container
};

// Layout: 8-byte magic "CVPROBE1", uint64 LE header length, JSON header,
// then the little-endian blob. The header holds "version", "dtype", the
// caller's "meta" object and per-array name/shape/offset/count.
struct Container {
  BlobType dtype = BlobType::f32;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace convprobe
