#include <doctest.h>

#include <cstring>
#include <random>

#include "convprobe/container.hpp"
#include "convprobe/error.hpp"

using namespace convprobe;

namespace {

Container sample(BlobType dtype, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  Container c;
  c.dtype = dtype;
  c.meta = {{"kind", "test"}, {"step", 12}};
  for (int a = 0; a < 3; ++a) {
    NamedArray arr;
    arr.name = "arr" + std::to_string(a);
    arr.shape = {static_cast<std::size_t>(a + 1), 7};
    for (std::size_t i = 0; i < arr.shape[0] * 7; ++i) {
      const double v = dist(rng);
      arr.values.push_back(dtype == BlobType::f32 ? static_cast<float>(v) : v);
    }
    c.arrays.push_back(arr);
  }
  return c;
}

}  // namespace

TEST_CASE("container encode/decode is byte exact") {
  std::mt19937_64 rng(1);
  for (BlobType t : {BlobType::f32, BlobType::f64}) {
    const Container c = sample(t, rng);
    const std::string bytes = encode_container(c);
    CHECK(bytes.compare(0, 8, "CVPROBE1") == 0);
    const Container d = decode_container(bytes);
    CHECK(d.meta == c.meta);
    REQUIRE(d.arrays.size() == c.arrays.size());
    for (std::size_t i = 0; i < c.arrays.size(); ++i) {
      CHECK(d.arrays[i].name == c.arrays[i].name);
      CHECK(d.arrays[i].shape == c.arrays[i].shape);
      CHECK(d.arrays[i].values == c.arrays[i].values);
    }
    CHECK(encode_container(d) == bytes);
    CHECK(d.at("arr2").shape == std::vector<std::size_t>{3, 7});
    CHECK_THROWS_AS(d.at("nope"), FormatError);
  }
}

TEST_CASE("container blob is little-endian with the declared width") {
  Container c;
  c.dtype = BlobType::f32;
  c.arrays.push_back({"x", {2}, {1.5, -2.0}});
  const std::string bytes = encode_container(c);
  float tail[2];
  std::memcpy(tail, bytes.data() + bytes.size() - 8, 8);
  CHECK(tail[0] == 1.5f);
  CHECK(tail[1] == -2.0f);
}

TEST_CASE("container rejects corrupt input") {
  std::mt19937_64 rng(2);
  const std::string bytes = encode_container(sample(BlobType::f64, rng));
  CHECK_THROWS_AS(decode_container("short"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_container(bad), FormatError);
  CHECK_THROWS_AS(decode_container(bytes.substr(0, bytes.size() - 3)), FormatError);
  Container mismatch;
  mismatch.arrays.push_back({"x", {3}, {1.0}});
  CHECK_THROWS_AS(encode_container(mismatch), DimensionError);
}
