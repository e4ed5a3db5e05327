#pragma once

#include <array>
#include <string>
#include <vector>

#include "lfs/image.hpp"
#include "lfs/rng.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

struct ManifestEntry {
  std::string split;  // train | val | test
  std::string class_id;
  std::string relative_path;  // relative to the manifest's directory
  int64_t width = 0;
  int64_t height = 0;
};

struct DatasetManifest {
  std::string root;  // directory holding the manifest
  std::vector<ManifestEntry> entries;
};

// Parses and validates: known splits, positive extents, class sets disjoint
// across splits (offending class named in the error).
DatasetManifest load_manifest(const std::string& path);
void write_manifest(const DatasetManifest& manifest, const std::string& path);

struct LoadedClass {
  std::string class_id;
  std::vector<Image> images;  // resized to input_size, 3 channels
};

struct LoadedSplit {
  std::vector<LoadedClass> classes;
};

struct LoadedDataset {
  LoadedSplit train, val, test;
  int64_t input_size = 0;
  std::array<real, 3> channel_mean{};    // train-split statistics
  std::array<real, 3> channel_stddev{};
};

// Reads every image, resizes to input_size, replicates gray to 3 channels,
// and computes train-split normalization statistics.
LoadedDataset load_dataset(const DatasetManifest& manifest,
                           int64_t input_size);

struct EpisodeSpec {
  int ways = 5;
  int shots = 5;
  int queries = 5;  // per class
  void validate() const;
};

struct Episode {
  std::vector<Image> support;
  std::vector<int> support_labels;  // 0..ways-1
  std::vector<Image> query;
  std::vector<int> query_labels;
};

// Classes without replacement, then shots+queries distinct images per class.
Episode sample_episode(const LoadedSplit& split, const EpisodeSpec& spec,
                       Rng& rng);

// train: random hflip, random 7/8 crop resized back, +-20% jitter;
// eval: deterministic center 7/8 crop resized back.
Image augment_image(const Image& image, Rng& rng, bool train);

// [count,3,s,s] tensor normalized by the dataset channel statistics
Tensor images_to_tensor(const std::vector<Image>& images,
                        const LoadedDataset& dataset);

}  // namespace lfs
