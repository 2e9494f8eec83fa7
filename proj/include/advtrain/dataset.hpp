#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advtrain/model.hpp"

namespace advtrain {

struct DatasetSpec {
  std::string name;                // cifar10 | cifar100 | svhn | synthetic
  std::string root = "data";
  std::string augmentation = "";   // flip_crop | none; empty = dataset default

  // Synthetic generator parameters (ignored for file-backed datasets).
  int64_t n_train = 1024;
  int64_t n_test = 256;
  int classes = 10;
  int channels = 3;
  int height = 32;
  int width = 32;
  float blob_scale = 0.30f;   // spread of the per-class template around 0.5
  float noise_std = 0.10f;    // per-pixel sample noise
  float label_noise = 0.0f;   // fraction of training labels resampled uniformly
  uint64_t gen_seed = 1;

  // flip_crop for cifar10/cifar100, none for svhn, config choice for synthetic.
  std::string effective_augmentation() const;
};

// Images stored as raw bytes; batches materialize floats in [0,1].
// Sample ids are positions in the stored order, stable across runs.
struct Dataset {
  int64_t count = 0;
  int channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<uint8_t> pixels;  // count * channels * height * width
  std::vector<int> labels;

  LabeledBatch batch(const std::vector<int64_t>& ids) const;
  std::vector<int64_t> all_ids() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// Reads the standard published archives (CIFAR binary batches, SVHN .mat)
// or generates the synthetic set. Deterministic id assignment.
DatasetPair load_dataset(const DatasetSpec& spec);

// flip_crop: per-sample horizontal flip (p = 0.5) and random crop from
// 4-pixel zero padding. none: identity. Deterministic per seed.
LabeledBatch augment(const LabeledBatch& batch, const std::string& policy, uint64_t seed);

// Minimal MAT-file (level 5) reader for the SVHN cropped-digit archives.
Dataset load_svhn_mat(const std::string& path);

}  // namespace advtrain
