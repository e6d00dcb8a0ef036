#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "convprobe/error.hpp"

namespace convprobe {

// Dense (batch, channel, time) array, row-major with time fastest.
// Conv weights reuse the same container with shape (C_out, C_in, K).
template <typename T>
class BasicTensor3 {
 public:
  using value_type = T;

  BasicTensor3() = default;
  BasicTensor3(std::size_t batch, std::size_t channels, std::size_t time, T fill = T(0))
      : batch_(batch), channels_(channels), time_(time), data_(batch * channels * time, fill) {}

  std::size_t batch() const { return batch_; }
  std::size_t channels() const { return channels_; }
  std::size_t time() const { return time_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t b, std::size_t c, std::size_t t) {
    return data_[(b * channels_ + c) * time_ + t];
  }
  const T& operator()(std::size_t b, std::size_t c, std::size_t t) const {
    return data_[(b * channels_ + c) * time_ + t];
  }

  std::span<T> row(std::size_t b, std::size_t c) {
    return {data_.data() + (b * channels_ + c) * time_, time_};
  }
  std::span<const T> row(std::size_t b, std::size_t c) const {
    return {data_.data() + (b * channels_ + c) * time_, time_};
  }
  // All channels of one batch item, contiguous.
  std::span<T> item(std::size_t b) {
    return {data_.data() + b * channels_ * time_, channels_ * time_};
  }
  std::span<const T> item(std::size_t b) const {
    return {data_.data() + b * channels_ * time_, channels_ * time_};
  }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool same_shape(const BasicTensor3& o) const {
    return batch_ == o.batch_ && channels_ == o.channels_ && time_ == o.time_;
  }

  std::string shape_string() const {
    return "(" + std::to_string(batch_) + ", " + std::to_string(channels_) + ", " +
           std::to_string(time_) + ")";
  }

  bool operator==(const BasicTensor3&) const = default;

 private:
  std::size_t batch_ = 0;
  std::size_t channels_ = 0;
  std::size_t time_ = 0;
  std::vector<T> data_;
};

using Tensor3 = BasicTensor3<float>;

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

template <typename T>
void require_finite(const BasicTensor3<T>& x, const std::string& where) {
  if (!all_finite(x.flat())) throw NumericError("non-finite values at " + where);
}

}  // namespace convprobe
