#pragma once

// Datasets: CIFAR-10 binary batches, generic .npy arrays (GTSRB, SVHN, ...),
// and a procedurally generated shapes set with exact boxes and masks.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "art/tensor.hpp"

namespace art {

/// Inclusive pixel coordinates.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;
  bool operator==(const BoundingBox&) const = default;
};

struct Dataset {
  std::string id;
  Tensor images;  // [N, C, H, W] in [0, 1]
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<BoundingBox> boxes;  // empty when unavailable
  Tensor masks;                    // [N, H, W] in {0, 1}; empty when unavailable

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  Shape item_shape() const;
  Dataset subset(std::span<const std::int64_t> indices) const;
  Tensor image(std::int64_t i) const;  // [C, H, W]
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// First `count` entries of a seeded permutation of [0, total); all indices
/// in order when count <= 0 or count >= total.
std::vector<std::int64_t> subset_indices(std::int64_t total, std::int64_t count, std::uint64_t seed);

struct SyntheticOptions {
  int image_size = 32;
  double contrast_lo = 0.1;
  double contrast_hi = 0.35;
  double noise = 0.05;
  double radius_lo = 5.0;
  double radius_hi = 9.0;
};

/// Ten classes of filled shapes (square, disc, triangle up/down, plus, cross,
/// ring, hollow square, I-beam, diamond) on smooth colored backgrounds, with
/// exact masks and tight boxes. Every shape is one connected region.
Dataset make_synthetic(std::int64_t n, std::uint64_t seed, const SyntheticOptions& opts = {});
/// Mask of one shape centered at (cx, cy) with radius r on a size x size grid.
Tensor synthetic_shape_mask(int cls, double cx, double cy, double r, int size);

/// CIFAR-10 binary version: data_batch_{1..5}.bin / test_batch.bin under root
/// (or root/cifar-10-batches-bin).
Dataset load_cifar10(const std::filesystem::path& root, bool train);

/// images ([N,H,W,C] or [N,C,H,W], uint8 or float) + integer labels.
Dataset load_npy_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, const std::string& id);

/// Adds augmented copies (shift up to 2 px, brightness +-10%) of minority
/// classes until every class matches the largest one.
Dataset balance_by_augmentation(const Dataset& d, std::uint64_t seed);

struct DatasetSpec {
  std::string id = "synthetic";  // synthetic | cifar10 | gtsrb | <name> (npy directory)
  std::filesystem::path root;    // empty: $ART_DATA_ROOT, then ./data
  std::int64_t train_size = 10000;
  std::int64_t test_size = 1000;
  std::uint64_t seed = 0;
  bool balance_classes = false;
  SyntheticOptions synthetic;
};

/// Per-channel mean and standard deviation over every pixel of the split.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};
ChannelStats channel_stats(const Dataset& d);

std::filesystem::path dataset_root(const DatasetSpec& spec);
DatasetSplit load_dataset(const DatasetSpec& spec);

/// Per-sample random crop after zero padding, then horizontal flip.
Tensor augment_batch(const Tensor& batch, std::mt19937_64& rng, int crop_pad, bool flip);

}  // namespace art
