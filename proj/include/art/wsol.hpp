#pragma once

// Weakly supervised localization and segmentation from attribution maps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "art/attribution.hpp"
#include "art/data.hpp"
#include "art/image.hpp"
#include "art/model.hpp"

namespace art {

struct LocalizationResult {
  BoundingBox predicted_box;
  BoundingBox gt_box;
  double iou = 0;
  bool prediction_correct = false;
};

struct SegmentationResult {
  double mask_iou = 0;
  bool prediction_correct = false;
};

struct WsolMetrics {
  double gt_known_loc = 0;
  double top1_loc = 0;
  double top1_acc = 0;
};

/// [H, W] magnitude map: |mean over channels| for [C, H, W] scores, |.| for
/// spatial ones.
Tensor heatmap_grayscale(const Tensor& scores);
/// 3x3 mean filter with edge-replicate padding.
Tensor mean_filter3(const Tensor& map);
/// Min-max normalization to [0, 1] then a 3x3 mean filter. A constant map
/// gives zeros (with a warning).
Tensor heatmap_postprocess(const Tensor& spatial);
Tensor heatmap_postprocess(const AttributionMap& map);

/// 1 where heatmap >= fraction * max(heatmap).
Tensor threshold_mask(const Tensor& heatmap, double fraction);
/// Keeps the largest 8-connected component of a {0,1} mask (first in raster
/// order on ties).
Tensor largest_component(const Tensor& mask);
BoundingBox full_box(int height, int width);
bool valid_box(const BoundingBox& b, int height, int width);
/// Tightest box around the largest component of the thresholded heatmap.
/// An empty mask yields the full image (with a warning).
BoundingBox fit_bounding_box(const Tensor& heatmap, double threshold_fraction = 0.2);

/// Pixel-inclusive intersection over union.
double iou(const BoundingBox& a, const BoundingBox& b);
/// |a and b| / |a or b| over {0,1} masks; two empty masks give 0.
double mask_iou(const Tensor& a, const Tensor& b);

WsolMetrics wsol_metrics(std::span<const LocalizationResult> results, double iou_threshold = 0.5);
double top1_seg(std::span<const SegmentationResult> results, double iou_threshold = 0.5);

struct ManifestEntry {
  std::filesystem::path image;
  int label = 0;
  BoundingBox box;
  std::optional<std::filesystem::path> mask;
};

/// CSV with header image,label,x_min,y_min,x_max,y_max[,mask]. Relative
/// paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& csv);
/// Loads manifest images (PNG, equal sizes) into a dataset with boxes and,
/// when every entry has one, masks (pixels > 127 are foreground).
Dataset load_manifest_dataset(const std::filesystem::path& csv, int num_classes);

struct WsolConfig {
  AttributionConfig attribution{AttributionMethod::gradient, {}, {}};
  ActivationMode mode = ActivationMode::relu();
  double threshold = 0.2;
  double iou_threshold = 0.5;
  std::int64_t max_images = 0;  // 0: all
};

struct WsolRecord {
  std::int64_t index = 0;
  int label = 0;
  int predicted = 0;
  LocalizationResult loc;
  std::optional<double> mask_iou;
};

struct WsolReport {
  std::vector<WsolRecord> records;
  WsolMetrics metrics;
  std::optional<double> top1_seg;
};

/// Heatmap for the ground-truth class, box fit, IoU against the dataset boxes
/// and, when masks exist, Top-1 Seg. Overlays go to overlay_dir if non-empty.
WsolReport evaluate_wsol(const ModelBundle& model, const Dataset& data, const WsolConfig& cfg,
                         const std::filesystem::path& overlay_dir = {});
/// Per-image CSV plus an aggregate JSON next to it.
void write_wsol_report(const WsolReport& report, const std::filesystem::path& csv_path);
/// Input image blended with the heatmap, predicted box in red, ground truth in green.
Image wsol_overlay(const Tensor& image, const Tensor& heatmap01, const BoundingBox& predicted, const BoundingBox& gt,
                   int scale = 4);

}  // namespace art
