#include "lfs/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace lfs {

namespace {

constexpr real kPi = real{3.14159265358979323846};
constexpr int kBackgroundPool = 24;
constexpr int kSupersample = 2;

Rng stream(uint64_t seed, const char* role, uint64_t index) {
  return Rng(hash_combine(hash_combine(seed, hash_str(role)), index));
}

struct Rgb {
  real r, g, b;
};

Rgb hsv_to_rgb(real h, real s, real v) {
  h = h - std::floor(h);
  const real c = v * s;
  const real hp = h * 6;
  const real x = c * (1 - std::abs(std::fmod(hp, real{2}) - 1));
  real r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const real m = v - c;
  return {r + m, g + m, b + m};
}

// Per-class shape family: hues follow a golden-ratio permutation so any
// contiguous block of class indices (and hence any train/val/test split)
// spans the whole wheel, vertex counts cycle, and the spike ratio follows an
// independent low-discrepancy sequence.
struct ClassStyle {
  real hue;
  int vertices;
  real spike;
};

ClassStyle class_style(int class_index, int total_classes) {
  (void)total_classes;
  ClassStyle s;
  const real golden = real{0.61803398874989};
  real hue = (class_index + real{0.5}) * golden;
  s.hue = hue - std::floor(hue);
  s.vertices = 3 + class_index % 6;
  const real silver = real{0.41421356237309};
  real frac = (class_index + 1) * silver;
  frac -= std::floor(frac);
  s.spike = real{0.45} + real{0.5} * frac;
  return s;
}

// smooth value noise: bilinear blend of a coarse random grid
void add_value_noise(Image& canvas, Rng& rng, int64_t cells, real amplitude) {
  const int64_t gh = cells + 1, gw = cells + 1;
  std::vector<real> grid(3 * gh * gw);
  for (auto& v : grid) v = static_cast<real>(rng.uniform());
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < canvas.height; ++y) {
      const real fy = static_cast<real>(y) /
                      static_cast<real>(canvas.height) * cells;
      const int64_t y0 = static_cast<int64_t>(fy);
      const real wy = fy - y0;
      for (int64_t x = 0; x < canvas.width; ++x) {
        const real fx = static_cast<real>(x) /
                        static_cast<real>(canvas.width) * cells;
        const int64_t x0 = static_cast<int64_t>(fx);
        const real wx = fx - x0;
        const real* g = grid.data() + c * gh * gw;
        const real top = g[y0 * gw + x0] * (1 - wx) + g[y0 * gw + x0 + 1] * wx;
        const real bot =
            g[(y0 + 1) * gw + x0] * (1 - wx) + g[(y0 + 1) * gw + x0 + 1] * wx;
        canvas.at(c, y, x) += amplitude * (top * (1 - wy) + bot * wy - 0.5);
      }
    }
  }
}

void draw_ellipse(Image& canvas, Rng& rng) {
  const real cy = static_cast<real>(rng.uniform()) * canvas.height;
  const real cx = static_cast<real>(rng.uniform()) * canvas.width;
  const real ry = (real{0.04} + real{0.1} * static_cast<real>(rng.uniform())) *
                  canvas.height;
  const real rx = (real{0.04} + real{0.1} * static_cast<real>(rng.uniform())) *
                  canvas.width;
  const real theta = static_cast<real>(rng.uniform()) * kPi;
  // muted palette so clutter never mimics a foreground hue band
  const Rgb color = hsv_to_rgb(static_cast<real>(rng.uniform()),
                               real{0.15} + real{0.15} * static_cast<real>(
                                                             rng.uniform()),
                               real{0.35} + real{0.3} * static_cast<real>(
                                                            rng.uniform()));
  const real ct = std::cos(theta), st = std::sin(theta);
  const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(cy - ry - rx));
  const int64_t y_hi =
      std::min<int64_t>(canvas.height, static_cast<int64_t>(cy + ry + rx) + 1);
  for (int64_t y = y_lo; y < y_hi; ++y) {
    for (int64_t x = 0; x < canvas.width; ++x) {
      const real dy = y - cy, dx = x - cx;
      const real u = (dx * ct + dy * st) / rx;
      const real v = (-dx * st + dy * ct) / ry;
      if (u * u + v * v <= 1) {
        canvas.at(0, y, x) = color.r;
        canvas.at(1, y, x) = color.g;
        canvas.at(2, y, x) = color.b;
      }
    }
  }
}

Image render_background(const SynthConfig& cfg, uint64_t seed, int index) {
  Rng rng = stream(seed, "background", static_cast<uint64_t>(index));
  const int64_t s = cfg.size * kSupersample;
  Image canvas;
  canvas.channels = 3;
  canvas.height = s;
  canvas.width = s;
  // dull earthy base
  const Rgb base = hsv_to_rgb(
      real{0.18} + real{0.2} * static_cast<real>(rng.uniform()), real{0.25},
      real{0.35} + real{0.2} * static_cast<real>(rng.uniform()));
  canvas.values.resize(3 * s * s);
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      canvas.at(0, y, x) = base.r;
      canvas.at(1, y, x) = base.g;
      canvas.at(2, y, x) = base.b;
    }
  add_value_noise(canvas, rng, 4, real{0.25});
  add_value_noise(canvas, rng, 8, real{0.12});
  const int n_clutter =
      static_cast<int>(std::lround(cfg.clutter_level * 10));
  for (int i = 0; i < n_clutter; ++i) draw_ellipse(canvas, rng);
  for (auto& v : canvas.values) v = std::clamp(v, real{0}, real{1});
  return canvas;
}

struct Polygon {
  std::vector<real> xs, ys;
};

bool point_inside(const Polygon& poly, real x, real y) {
  bool inside = false;
  const size_t n = poly.xs.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const bool crosses = (poly.ys[i] > y) != (poly.ys[j] > y);
    if (crosses) {
      const real t = (y - poly.ys[i]) / (poly.ys[j] - poly.ys[i]);
      if (x < poly.xs[i] + t * (poly.xs[j] - poly.xs[i])) inside = !inside;
    }
  }
  return inside;
}

// Paints the star onto the supersampled canvas and records coverage.
void render_foreground(Image& canvas, std::vector<real>& coverage,
                       const SynthConfig& cfg, const ClassStyle& style,
                       Rng& rng) {
  const int64_t s = canvas.height;
  const real rotation = static_cast<real>(rng.uniform()) * 2 * kPi;
  const real cy =
      s * (real{0.5} + real{0.12} * static_cast<real>(rng.uniform(-1, 1)));
  const real cx =
      s * (real{0.5} + real{0.12} * static_cast<real>(rng.uniform(-1, 1)));
  // radius targeting the requested area fraction; the star's mean radius is
  // roughly R*(1+spike)/2 and its fill factor about 0.8
  const real mean_radius_factor = (1 + style.spike) / 2;
  real radius = s * std::sqrt(cfg.fg_fraction / (kPi * real{0.8})) /
                mean_radius_factor;
  radius *= real{0.85} + real{0.3} * static_cast<real>(rng.uniform());
  const real hue =
      style.hue + real{0.01} * static_cast<real>(rng.uniform(-1, 1));
  const real sat = real{0.75} + real{0.1} * static_cast<real>(rng.uniform());
  const real val = real{0.8} + real{0.15} * static_cast<real>(rng.uniform());
  const Rgb color = hsv_to_rgb(hue, sat, val);

  Polygon poly;
  const int points = 2 * style.vertices;
  for (int i = 0; i < points; ++i) {
    const real angle = rotation + kPi * i / style.vertices;
    const real r = (i % 2 == 0) ? radius : radius * style.spike;
    poly.xs.push_back(cx + r * std::cos(angle));
    poly.ys.push_back(cy + r * std::sin(angle));
  }
  const real reach = radius + 1;
  const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(cy - reach));
  const int64_t y_hi = std::min<int64_t>(s, static_cast<int64_t>(cy + reach) + 1);
  const int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(cx - reach));
  const int64_t x_hi = std::min<int64_t>(s, static_cast<int64_t>(cx + reach) + 1);
  for (int64_t y = y_lo; y < y_hi; ++y) {
    for (int64_t x = x_lo; x < x_hi; ++x) {
      if (point_inside(poly, x + real{0.5}, y + real{0.5})) {
        canvas.at(0, y, x) = color.r;
        canvas.at(1, y, x) = color.g;
        canvas.at(2, y, x) = color.b;
        coverage[y * s + x] = 1;
      }
    }
  }
}

Image downsample(const Image& canvas, int64_t out_size) {
  Image out;
  out.channels = canvas.channels;
  out.height = out_size;
  out.width = out_size;
  out.values.assign(canvas.channels * out_size * out_size, real{0});
  const int64_t f = kSupersample;
  const real inv = real{1} / static_cast<real>(f * f);
  for (int64_t c = 0; c < canvas.channels; ++c)
    for (int64_t y = 0; y < out_size; ++y)
      for (int64_t x = 0; x < out_size; ++x) {
        real acc = 0;
        for (int64_t dy = 0; dy < f; ++dy)
          for (int64_t dx = 0; dx < f; ++dx)
            acc += canvas.at(c, y * f + dy, x * f + dx);
        out.at(c, y, x) = acc * inv;
      }
  return out;
}

}  // namespace

SynthSplitPlan synth_split_plan(int classes) {
  if (classes < 4)
    throw ValidationError("synth: need at least 4 classes to cover 3 splits");
  SynthSplitPlan plan;
  plan.train_classes = static_cast<int>(std::lround(classes * 0.5));
  plan.val_classes =
      std::max(1, static_cast<int>(std::lround(classes * 0.2)));
  plan.train_classes = std::max(1, plan.train_classes);
  plan.test_classes = classes - plan.train_classes - plan.val_classes;
  if (plan.test_classes < 1)
    throw ValidationError("synth: class split leaves no test classes");
  return plan;
}

DatasetManifest synth_generate(const SynthConfig& cfg, uint64_t seed,
                               const std::string& out_dir) {
  if (cfg.per_class < 1 || cfg.size < 16)
    throw ValidationError("synth: per_class >= 1 and size >= 16 required");
  if (cfg.fg_fraction < 0 || cfg.fg_fraction > real{0.8})
    throw ValidationError("synth: fg_fraction out of [0, 0.8]");
  const SynthSplitPlan plan = synth_split_plan(cfg.classes);
  std::filesystem::create_directories(out_dir);

  std::vector<Image> backgrounds;
  backgrounds.reserve(kBackgroundPool);
  for (int i = 0; i < kBackgroundPool; ++i)
    backgrounds.push_back(render_background(cfg, seed, i));

  DatasetManifest manifest;
  manifest.root = out_dir;
  const int64_t big = cfg.size * kSupersample;
  char name_buf[64];
  for (int c = 0; c < cfg.classes; ++c) {
    const ClassStyle style = class_style(c, cfg.classes);
    const std::string split = c < plan.train_classes ? "train"
                              : c < plan.train_classes + plan.val_classes
                                  ? "val"
                                  : "test";
    std::snprintf(name_buf, sizeof(name_buf), "class_%03d", c);
    const std::string class_dir = name_buf;
    std::filesystem::create_directories(
        std::filesystem::path(out_dir) / class_dir);
    for (int i = 0; i < cfg.per_class; ++i) {
      const uint64_t image_id =
          static_cast<uint64_t>(c) * cfg.per_class + i;
      Image canvas = backgrounds[image_id % kBackgroundPool];
      std::vector<real> coverage(big * big, real{0});
      if (cfg.fg_fraction > 0) {
        Rng rng = stream(seed, "image", image_id);
        render_foreground(canvas, coverage, cfg, style, rng);
      }
      Image final_image = downsample(canvas, cfg.size);

      Image mask;
      mask.channels = 1;
      mask.height = cfg.size;
      mask.width = cfg.size;
      mask.values.assign(cfg.size * cfg.size, real{0});
      for (int64_t y = 0; y < cfg.size; ++y)
        for (int64_t x = 0; x < cfg.size; ++x) {
          real acc = 0;
          for (int64_t dy = 0; dy < kSupersample; ++dy)
            for (int64_t dx = 0; dx < kSupersample; ++dx)
              acc += coverage[(y * kSupersample + dy) * big +
                              x * kSupersample + dx];
          mask.at(0, y, x) =
              acc >= kSupersample * kSupersample * real{0.5} ? real{1}
                                                             : real{0};
        }

      std::snprintf(name_buf, sizeof(name_buf), "img_%03d", i);
      const std::string stem = class_dir + "/" + name_buf;
      write_pnm(final_image,
                (std::filesystem::path(out_dir) / (stem + ".ppm")).string());
      write_pnm(mask, (std::filesystem::path(out_dir) / (stem + "_mask.pgm"))
                          .string());

      ManifestEntry e;
      e.split = split;
      std::snprintf(name_buf, sizeof(name_buf), "class_%03d", c);
      e.class_id = name_buf;
      e.relative_path = stem + ".ppm";
      e.width = cfg.size;
      e.height = cfg.size;
      manifest.entries.push_back(std::move(e));
    }
  }
  write_manifest(manifest,
                 (std::filesystem::path(out_dir) / "manifest.tsv").string());
  return manifest;
}

}  // namespace lfs
