#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncam {

struct Shape3 {
  int d = 0, h = 0, w = 0;

  bool operator==(const Shape3&) const = default;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }

  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

// Dense channel-major grid: data laid out as [channel][z][y][x], x fastest.
template <typename T>
struct Grid {
  int channels = 0;
  Shape3 shape;
  std::vector<T> data;

  Grid() = default;
  Grid(int channels_, Shape3 shape_, T fill = T(0))
      : channels(channels_), shape(shape_) {
    if (channels_ < 0 || shape_.d < 0 || shape_.h < 0 || shape_.w < 0)
      throw std::invalid_argument("Grid: negative dimension");
    data.assign(static_cast<std::size_t>(channels_) * shape_.voxels(), fill);
  }

  std::size_t voxels() const { return shape.voxels(); }
  std::size_t size() const { return data.size(); }

  std::size_t idx(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * shape.d + z) * shape.h + y) *
               shape.w +
           x;
  }

  T& at(int c, int z, int y, int x) { return data[idx(c, z, y, x)]; }
  const T& at(int c, int z, int y, int x) const {
    return data[idx(c, z, y, x)];
  }

  T* plane(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* plane(int c) const {
    return data.data() + static_cast<std::size_t>(c) * voxels();
  }

  bool same_layout(const Grid& o) const {
    return channels == o.channels && shape == o.shape;
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out;
    out.channels = channels;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using ChannelGrid = Grid<float>;

}  // namespace ncam
