#pragma once

#include <cstdint>
#include <string>

#include "lfs/dataset.hpp"

namespace lfs {

// Foreground-on-clutter generator. Each class is a star-polygon family
// (vertex count, hue band, spike ratio) rendered at random pose onto
// backgrounds drawn from one pool shared by every class, so class identity
// lives only in foreground pixels. A coverage mask (P5, 255 = foreground)
// is written next to each image as <name>_mask.pgm; masks stay out of the
// manifest.
struct SynthConfig {
  int classes = 20;  // split 50/20/30 into train/val/test (rounded)
  int per_class = 30;
  int64_t size = 32;
  real fg_fraction = 0.45;   // target foreground area fraction; 0 = none
  real clutter_level = 0.5;  // background ellipse density knob
};

struct SynthSplitPlan {
  int train_classes = 0;
  int val_classes = 0;
  int test_classes = 0;
};
SynthSplitPlan synth_split_plan(int classes);

// Renders every image and mask under out_dir, writes out_dir/manifest.tsv,
// and returns the manifest. Byte-identical output for identical inputs.
DatasetManifest synth_generate(const SynthConfig& cfg, uint64_t seed,
                               const std::string& out_dir);

}  // namespace lfs
