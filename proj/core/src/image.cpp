#include "lfs/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace lfs {

namespace {

// next whitespace-delimited token, skipping '#' comments
std::string next_token(std::istream& is) {
  std::string tok;
  for (;;) {
    int ch = is.get();
    if (ch == EOF) break;
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

int64_t parse_extent(const std::string& tok, const std::string& path) {
  try {
    const int64_t v = std::stoll(tok);
    if (v <= 0) throw std::invalid_argument("nonpositive");
    return v;
  } catch (const std::exception&) {
    throw IoError("bad pnm header field '" + tok + "' in " + path);
  }
}

}  // namespace

Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  const std::string magic = next_token(is);
  int64_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError("unsupported image format '" + magic + "' in " + path);
  }
  const int64_t width = parse_extent(next_token(is), path);
  const int64_t height = parse_extent(next_token(is), path);
  const int64_t maxval = parse_extent(next_token(is), path);
  if (maxval > 255) throw IoError("pnm maxval > 255 unsupported: " + path);

  const int64_t count = channels * height * width;
  std::vector<unsigned char> raw(count);
  is.read(reinterpret_cast<char*>(raw.data()), count);
  if (is.gcount() != count) throw IoError("truncated image data: " + path);

  Image out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.values.resize(count);
  const real scale = real{1} / static_cast<real>(maxval);
  // interleaved on disk, planar in memory
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x)
      for (int64_t c = 0; c < channels; ++c)
        out.at(c, y, x) =
            static_cast<real>(raw[(y * width + x) * channels + c]) * scale;
  return out;
}

void write_pnm(const Image& image, const std::string& path) {
  if (image.channels != 1 && image.channels != 3)
    throw IoError("write_pnm: only 1 or 3 channels supported");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open image for writing: " + path);
  os << (image.channels == 1 ? "P5" : "P6") << "\n"
     << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.channels * image.height * image.width);
  for (int64_t y = 0; y < image.height; ++y)
    for (int64_t x = 0; x < image.width; ++x)
      for (int64_t c = 0; c < image.channels; ++c) {
        const real v = std::clamp(image.at(c, y, x), real{0}, real{1});
        raw[(y * image.width + x) * image.channels + c] =
            static_cast<unsigned char>(std::lround(v * 255));
      }
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("image write failed: " + path);
}

void write_pgm_ascii(const std::vector<real>& values, int64_t height,
                     int64_t width, const std::string& path) {
  if (static_cast<int64_t>(values.size()) != height * width)
    throw DimensionError("write_pgm_ascii: value count mismatch");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open graymap for writing: " + path);
  os << "P2\n" << width << " " << height << "\n255\n";
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      const real v = std::clamp(values[y * width + x], real{0}, real{1});
      os << std::lround(v * 255) << (x + 1 == width ? "\n" : " ");
    }
  }
  if (!os) throw IoError("graymap write failed: " + path);
}

Image resize_bilinear(const Image& image, int64_t out_h, int64_t out_w) {
  if (out_h < 1 || out_w < 1)
    throw DimensionError("resize_bilinear: bad output extents");
  Image out;
  out.channels = image.channels;
  out.height = out_h;
  out.width = out_w;
  out.values.resize(image.channels * out_h * out_w);
  // align-corners-off sampling
  const real sy = static_cast<real>(image.height) / static_cast<real>(out_h);
  const real sx = static_cast<real>(image.width) / static_cast<real>(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const real fy = std::max(real{0}, (static_cast<real>(y) + real{0.5}) * sy -
                                          real{0.5});
    const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy),
                                         image.height - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, image.height - 1);
    const real wy = fy - static_cast<real>(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const real fx = std::max(
          real{0}, (static_cast<real>(x) + real{0.5}) * sx - real{0.5});
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx),
                                           image.width - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, image.width - 1);
      const real wx = fx - static_cast<real>(x0);
      for (int64_t c = 0; c < image.channels; ++c) {
        const real top = image.at(c, y0, x0) * (1 - wx) +
                         image.at(c, y0, x1) * wx;
        const real bottom = image.at(c, y1, x0) * (1 - wx) +
                            image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Image hflip(const Image& image) {
  Image out = image;
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < image.height; ++y)
      for (int64_t x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

Image crop(const Image& image, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > image.height ||
      x0 + w > image.width)
    throw DimensionError("crop: window out of bounds");
  Image out;
  out.channels = image.channels;
  out.height = h;
  out.width = w;
  out.values.resize(image.channels * h * w);
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

Image adjust_brightness_contrast(const Image& image, real brightness,
                                 real contrast) {
  Image out = image;
  for (auto& v : out.values)
    v = std::clamp((v - real{0.5}) * contrast + real{0.5} + brightness,
                   real{0}, real{1});
  return out;
}

}  // namespace lfs
