#include "lfs/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace lfs {

namespace {

const std::set<std::string> kSplits = {"train", "val", "test"};

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path);
  DatasetManifest manifest;
  manifest.root = std::filesystem::path(path).parent_path().string();
  if (manifest.root.empty()) manifest.root = ".";

  std::string line;
  int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string width_s, height_s;
    if (!std::getline(ls, e.split, '\t') ||
        !std::getline(ls, e.class_id, '\t') ||
        !std::getline(ls, e.relative_path, '\t') ||
        !std::getline(ls, width_s, '\t') || !std::getline(ls, height_s))
      throw ValidationError("manifest line " + std::to_string(line_no) +
                            ": want 5 tab-separated fields");
    if (!kSplits.count(e.split))
      throw ValidationError("manifest line " + std::to_string(line_no) +
                            ": unknown split '" + e.split + "'");
    try {
      e.width = std::stoll(width_s);
      e.height = std::stoll(height_s);
    } catch (const std::exception&) {
      throw ValidationError("manifest line " + std::to_string(line_no) +
                            ": bad extents");
    }
    if (e.width <= 0 || e.height <= 0)
      throw ValidationError("manifest line " + std::to_string(line_no) +
                            ": nonpositive extents");
    manifest.entries.push_back(std::move(e));
  }
  if (manifest.entries.empty())
    throw ValidationError("manifest is empty: " + path);

  // split disjointness over class ids
  std::map<std::string, std::string> owner;
  for (const auto& e : manifest.entries) {
    auto [it, inserted] = owner.emplace(e.class_id, e.split);
    if (!inserted && it->second != e.split)
      throw ValidationError("class '" + e.class_id + "' appears in splits '" +
                            it->second + "' and '" + e.split + "'");
  }
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open manifest for writing: " + path);
  for (const auto& e : manifest.entries)
    os << e.split << "\t" << e.class_id << "\t" << e.relative_path << "\t"
       << e.width << "\t" << e.height << "\n";
  if (!os) throw IoError("manifest write failed: " + path);
}

namespace {

Image to_three_channels(Image image) {
  if (image.channels == 3) return image;
  Image out;
  out.channels = 3;
  out.height = image.height;
  out.width = image.width;
  out.values.resize(3 * image.height * image.width);
  for (int64_t c = 0; c < 3; ++c)
    std::copy(image.values.begin(), image.values.end(),
              out.values.begin() + c * image.height * image.width);
  return out;
}

}  // namespace

LoadedDataset load_dataset(const DatasetManifest& manifest,
                           int64_t input_size) {
  if (input_size < 16)
    throw ValidationError("input size must be at least 16");
  LoadedDataset out;
  out.input_size = input_size;
  std::map<std::string, LoadedSplit*> splits = {
      {"train", &out.train}, {"val", &out.val}, {"test", &out.test}};
  std::map<std::string, std::map<std::string, size_t>> class_index;
  for (const auto& e : manifest.entries) {
    LoadedSplit* split = splits.at(e.split);
    auto& index = class_index[e.split];
    auto it = index.find(e.class_id);
    if (it == index.end()) {
      it = index.emplace(e.class_id, split->classes.size()).first;
      split->classes.push_back(LoadedClass{e.class_id, {}});
    }
    const std::string full =
        (std::filesystem::path(manifest.root) / e.relative_path).string();
    Image image = read_pnm(full);
    if (image.width != e.width || image.height != e.height)
      throw ValidationError("manifest extents disagree with file: " + full);
    image = to_three_channels(std::move(image));
    if (image.height != input_size || image.width != input_size)
      image = resize_bilinear(image, input_size, input_size);
    split->classes[it->second].images.push_back(std::move(image));
  }

  // per-channel moments over the train split
  std::array<double, 3> sum{}, sum_sq{};
  int64_t count = 0;
  for (const auto& cls : out.train.classes) {
    for (const auto& image : cls.images) {
      const int64_t plane = image.height * image.width;
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t i = 0; i < plane; ++i) {
          const double v = image.values[c * plane + i];
          sum[c] += v;
          sum_sq[c] += v * v;
        }
      }
      count += plane;
    }
  }
  if (count == 0) throw ValidationError("dataset has no train images");
  for (int64_t c = 0; c < 3; ++c) {
    const double mean = sum[c] / static_cast<double>(count);
    const double var =
        std::max(0.0, sum_sq[c] / static_cast<double>(count) - mean * mean);
    out.channel_mean[c] = static_cast<real>(mean);
    out.channel_stddev[c] = static_cast<real>(std::max(std::sqrt(var), 1e-6));
  }
  return out;
}

void EpisodeSpec::validate() const {
  if (ways < 2 || shots < 1 || queries < 1)
    throw ValidationError("episode spec: need ways >= 2, shots/queries >= 1");
}

namespace {

// k distinct draws from [0,n), order by first draw
std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k,
                                                Rng& rng) {
  std::vector<int64_t> pool(n);
  for (int64_t i = 0; i < n; ++i) pool[i] = i;
  // partial Fisher-Yates
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.uniform_int(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

Episode sample_episode(const LoadedSplit& split, const EpisodeSpec& spec,
                       Rng& rng) {
  spec.validate();
  const int64_t n_classes = static_cast<int64_t>(split.classes.size());
  if (n_classes < spec.ways)
    throw SamplingError("episode wants " + std::to_string(spec.ways) +
                        " classes, split has " + std::to_string(n_classes));
  const int64_t per_class = spec.shots + spec.queries;
  std::vector<int64_t> classes =
      sample_without_replacement(n_classes, spec.ways, rng);
  Episode episode;
  for (int way = 0; way < spec.ways; ++way) {
    const LoadedClass& cls = split.classes[classes[way]];
    const int64_t n_images = static_cast<int64_t>(cls.images.size());
    if (n_images < per_class)
      throw SamplingError("class '" + cls.class_id + "' has " +
                          std::to_string(n_images) + " images, episode needs " +
                          std::to_string(per_class));
    std::vector<int64_t> picks =
        sample_without_replacement(n_images, per_class, rng);
    for (int i = 0; i < spec.shots; ++i) {
      episode.support.push_back(cls.images[picks[i]]);
      episode.support_labels.push_back(way);
    }
    for (int i = 0; i < spec.queries; ++i) {
      episode.query.push_back(cls.images[picks[spec.shots + i]]);
      episode.query_labels.push_back(way);
    }
  }
  return episode;
}

Image augment_image(const Image& image, Rng& rng, bool train) {
  const int64_t crop_h = std::max<int64_t>(1, image.height * 7 / 8);
  const int64_t crop_w = std::max<int64_t>(1, image.width * 7 / 8);
  if (!train) {
    Image out = crop(image, (image.height - crop_h) / 2,
                     (image.width - crop_w) / 2, crop_h, crop_w);
    return resize_bilinear(out, image.height, image.width);
  }
  Image out = image;
  if (rng.coin(0.5)) out = hflip(out);
  const int64_t y0 =
      static_cast<int64_t>(rng.uniform_int(image.height - crop_h + 1));
  const int64_t x0 =
      static_cast<int64_t>(rng.uniform_int(image.width - crop_w + 1));
  out = crop(out, y0, x0, crop_h, crop_w);
  out = resize_bilinear(out, image.height, image.width);
  const real brightness = static_cast<real>(rng.uniform(-0.2, 0.2));
  const real contrast = static_cast<real>(rng.uniform(0.8, 1.2));
  return adjust_brightness_contrast(out, brightness, contrast);
}

Tensor images_to_tensor(const std::vector<Image>& images,
                        const LoadedDataset& dataset) {
  if (images.empty()) throw DimensionError("images_to_tensor: no images");
  const int64_t s = dataset.input_size;
  const int64_t plane = s * s;
  std::vector<real> data(images.size() * 3 * plane);
  for (size_t i = 0; i < images.size(); ++i) {
    const Image& image = images[i];
    if (image.channels != 3 || image.height != s || image.width != s)
      throw DimensionError("images_to_tensor: image extents mismatch");
    for (int64_t c = 0; c < 3; ++c) {
      const real mean = dataset.channel_mean[c];
      const real inv = real{1} / dataset.channel_stddev[c];
      real* dst = data.data() + (i * 3 + c) * plane;
      const real* src = image.values.data() + c * plane;
      for (int64_t p = 0; p < plane; ++p) dst[p] = (src[p] - mean) * inv;
    }
  }
  return Tensor::from_data({static_cast<int64_t>(images.size()), 3, s, s},
                           std::move(data));
}

}  // namespace lfs
