#pragma once

#include "proxbundle/core/matrix.hpp"

#include <vector>

namespace proxbundle {

/// Dense image, pixels stored row-major with interleaved channels (HWC).
struct Image {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(Index h, Index w, Index c = 1)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), 0.0) {}

  double& at(Index r, Index c, Index ch = 0) {
    return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
  double at(Index r, Index c, Index ch = 0) const {
    return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
};

}  // namespace proxbundle
