#include "convprobe/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "convprobe/error.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'P', 'R', 'O', 'B', 'E', '1'};
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t pos) {
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  return v;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

}  // namespace

const NamedArray& Container::at(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("container has no array named " + name);
}

std::string encode_container(const Container& c) {
  const std::size_t width = c.dtype == BlobType::f32 ? 4 : 8;
  nlohmann::json header;
  header["version"] = kVersion;
  header["dtype"] = c.dtype == BlobType::f32 ? "f32" : "f64";
  header["meta"] = c.meta;
  header["arrays"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& a : c.arrays) {
    if (element_count(a.shape) != a.values.size()) {
      throw DimensionError("array " + a.name + ": shape does not match value count");
    }
    header["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size() * width;
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& a : c.arrays) {
    for (double v : a.values) {
      if (c.dtype == BlobType::f32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("not a container file (bad magic)");
  }
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError("container header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header is not JSON: ") + e.what());
  }
  if (header.value("version", 0) != kVersion) throw FormatError("unsupported container version");
  Container c;
  const std::string dtype = header.value("dtype", "");
  if (dtype == "f32") {
    c.dtype = BlobType::f32;
  } else if (dtype == "f64") {
    c.dtype = BlobType::f64;
  } else {
    throw FormatError("unknown container dtype " + dtype);
  }
  const std::size_t width = c.dtype == BlobType::f32 ? 4 : 8;
  c.meta = header.value("meta", nlohmann::json::object());
  const std::size_t blob = 16 + header_len;
  for (const auto& h : header.at("arrays")) {
    NamedArray a;
    a.name = h.at("name").get<std::string>();
    a.shape = h.at("shape").get<std::vector<std::size_t>>();
    const auto offset = h.at("offset").get<std::size_t>();
    const auto count = h.at("count").get<std::size_t>();
    if (count != element_count(a.shape)) throw FormatError("array " + a.name + ": bad count");
    if (blob + offset + count * width > bytes.size()) {
      throw FormatError("array " + a.name + " runs past end of file");
    }
    a.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t pos = blob + offset + i * width;
      a.values[i] = c.dtype == BlobType::f32 ? get<float>(bytes, pos) : get<double>(bytes, pos);
    }
    c.arrays.push_back(std::move(a));
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

}  // namespace convprobe
