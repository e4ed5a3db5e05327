#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfs/rng.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

// Planar [c,h,w] pixel buffer, values in [0,1]. Graymaps load as c=1 and are
// replicated to three channels by the dataset layer.
struct Image {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<real> values;

  real at(int64_t c, int64_t y, int64_t x) const {
    return values[(c * height + y) * width + x];
  }
  real& at(int64_t c, int64_t y, int64_t x) {
    return values[(c * height + y) * width + x];
  }
};

// Binary P5 (gray) / P6 (rgb), maxval <= 255.
Image read_pnm(const std::string& path);
void write_pnm(const Image& image, const std::string& path);

// ASCII P2 graymap from values in [0,1] (clamped, scaled to 0..255).
void write_pgm_ascii(const std::vector<real>& values, int64_t height,
                     int64_t width, const std::string& path);

Image resize_bilinear(const Image& image, int64_t out_h, int64_t out_w);
Image hflip(const Image& image);
Image crop(const Image& image, int64_t y0, int64_t x0, int64_t h, int64_t w);

// v -> clamp((v - 0.5) * contrast + 0.5 + brightness)
Image adjust_brightness_contrast(const Image& image, real brightness,
                                 real contrast);

}  // namespace lfs
