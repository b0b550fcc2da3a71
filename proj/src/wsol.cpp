#include "art/wsol.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <sstream>

#include "art/errors.hpp"
#include "art/io.hpp"
#include "art/metrics.hpp"

namespace art {

namespace fs = std::filesystem;

namespace {

void require_spatial(const Tensor& t, const char* what) {
  if (t.ndim() != 2) throw InputError(fmt::format("{} expects an [H, W] map, got {}", what, shape_str(t.shape())));
}

}  // namespace

Tensor heatmap_grayscale(const Tensor& scores) {
  if (scores.ndim() == 3) return abs_scores(channel_mean(scores));
  require_spatial(scores, "heatmap_grayscale");
  return abs_scores(scores);
}

Tensor mean_filter3(const Tensor& map) {
  require_spatial(map, "mean_filter3");
  const std::int64_t h = map.dim(0), w = map.dim(1);
  Tensor out(map.shape());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::int64_t yy = std::clamp<std::int64_t>(y + dy, 0, h - 1);
          const std::int64_t xx = std::clamp<std::int64_t>(x + dx, 0, w - 1);
          s += map[yy * w + xx];
        }
      out[y * w + x] = s / 9.0;
    }
  return out;
}

Tensor heatmap_postprocess(const Tensor& spatial) {
  require_spatial(spatial, "heatmap_postprocess");
  const auto [lo, hi] = std::minmax_element(spatial.data().begin(), spatial.data().end());
  if (spatial.empty() || !(*hi > *lo)) {
    spdlog::warn("constant heatmap; returning zeros");
    return Tensor(spatial.shape());
  }
  Tensor norm = spatial;
  const double a = *lo, range = *hi - *lo;
  for (auto& v : norm.data()) v = (v - a) / range;
  Tensor out = mean_filter3(norm);
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor heatmap_postprocess(const AttributionMap& map) { return heatmap_postprocess(heatmap_grayscale(map.scores)); }

Tensor threshold_mask(const Tensor& heatmap, double fraction) {
  require_spatial(heatmap, "threshold_mask");
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : heatmap.data()) hi = std::max(hi, v);
  Tensor m(heatmap.shape());
  const double t = fraction * hi;
  for (std::int64_t i = 0; i < heatmap.numel(); ++i) m[i] = heatmap[i] >= t ? 1.0 : 0.0;
  return m;
}

Tensor largest_component(const Tensor& mask) {
  require_spatial(mask, "largest_component");
  const std::int64_t h = mask.dim(0), w = mask.dim(1), n = h * w;
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  std::vector<std::int64_t> stack;
  int best = -1, count = 0;
  std::int64_t best_size = 0;
  for (std::int64_t s = 0; s < n; ++s) {
    if (mask[s] <= 0 || comp[static_cast<std::size_t>(s)] >= 0) continue;
    std::int64_t size = 0;
    comp[static_cast<std::size_t>(s)] = count;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      ++size;
      const std::int64_t py = p / w, px = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::int64_t y = py + dy, x = px + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          const std::int64_t q = y * w + x;
          if (mask[q] > 0 && comp[static_cast<std::size_t>(q)] < 0) {
            comp[static_cast<std::size_t>(q)] = count;
            stack.push_back(q);
          }
        }
    }
    if (size > best_size) {
      best_size = size;
      best = count;
    }
    ++count;
  }
  Tensor out(mask.shape());
  for (std::int64_t i = 0; i < n; ++i) out[i] = comp[static_cast<std::size_t>(i)] == best && best >= 0 ? 1.0 : 0.0;
  return out;
}

BoundingBox full_box(int height, int width) { return {0, 0, width - 1, height - 1}; }

bool valid_box(const BoundingBox& b, int height, int width) {
  return b.x_min >= 0 && b.y_min >= 0 && b.x_min <= b.x_max && b.y_min <= b.y_max && b.x_max < width && b.y_max < height;
}

BoundingBox fit_bounding_box(const Tensor& heatmap, double threshold_fraction) {
  require_spatial(heatmap, "fit_bounding_box");
  const int h = static_cast<int>(heatmap.dim(0)), w = static_cast<int>(heatmap.dim(1));
  const Tensor comp = largest_component(threshold_mask(heatmap, threshold_fraction));
  BoundingBox b{w, h, -1, -1};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (comp[static_cast<std::int64_t>(y) * w + x] > 0) {
        b = {std::min(b.x_min, x), std::min(b.y_min, y), std::max(b.x_max, x), std::max(b.y_max, y)};
      }
  if (b.x_max < 0) {
    spdlog::warn("empty localization mask; using the full image");
    return full_box(h, w);
  }
  return b;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  auto area = [](const BoundingBox& r) {
    return static_cast<double>(r.x_max - r.x_min + 1) * static_cast<double>(r.y_max - r.y_min + 1);
  };
  const int iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min) + 1;
  const int ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min) + 1;
  const double inter = iw > 0 && ih > 0 ? static_cast<double>(iw) * ih : 0.0;
  return inter / (area(a) + area(b) - inter);
}

double mask_iou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw InputError(fmt::format("mask shapes differ: {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  double inter = 0, uni = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const bool x = a[i] > 0, y = b[i] > 0;
    inter += x && y;
    uni += x || y;
  }
  return uni > 0 ? inter / uni : 0.0;
}

WsolMetrics wsol_metrics(std::span<const LocalizationResult> results, double iou_threshold) {
  if (results.empty()) throw InputError("wsol_metrics: empty result list");
  WsolMetrics m;
  for (const auto& r : results) {
    const bool loc = r.iou >= iou_threshold;
    m.gt_known_loc += loc;
    m.top1_loc += loc && r.prediction_correct;
    m.top1_acc += r.prediction_correct;
  }
  const auto n = static_cast<double>(results.size());
  m.gt_known_loc /= n;
  m.top1_loc /= n;
  m.top1_acc /= n;
  return m;
}

double top1_seg(std::span<const SegmentationResult> results, double iou_threshold) {
  if (results.empty()) throw InputError("top1_seg: empty result list");
  double hits = 0;
  for (const auto& r : results) hits += r.prediction_correct && r.mask_iou >= iou_threshold;
  return hits / static_cast<double>(results.size());
}

std::vector<ManifestEntry> read_manifest(const fs::path& csv) {
  std::istringstream in(read_file(csv));
  const fs::path base = csv.parent_path();
  std::string line;
  std::vector<ManifestEntry> out;
  bool header = true;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("image", 0) == 0) continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6 && f.size() != 7) {
      throw InputError(fmt::format("{}:{}: expected 6 or 7 fields, got {}", csv.string(), lineno, f.size()));
    }
    ManifestEntry e;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    try {
      e.image = resolve(f[0]);
      e.label = std::stoi(f[1]);
      e.box = {std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4]), std::stoi(f[5])};
    } catch (const std::logic_error&) {
      throw InputError(fmt::format("{}:{}: malformed number", csv.string(), lineno));
    }
    if (f.size() == 7 && !f[6].empty()) e.mask = resolve(f[6]);
    out.push_back(std::move(e));
  }
  return out;
}

Dataset load_manifest_dataset(const fs::path& csv, int num_classes) {
  const auto entries = read_manifest(csv);
  if (entries.empty()) throw InputError("empty manifest " + csv.string());
  std::vector<Tensor> images, masks;
  Dataset d;
  d.id = "manifest";
  d.num_classes = num_classes;
  const bool with_masks = std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.mask.has_value(); });
  for (const auto& e : entries) {
    if (!fs::exists(e.image)) throw PathError("manifest image not found: " + e.image.string());
    const Image img = read_png(e.image);
    if (!images.empty() && images.front().shape() != Shape{3, img.height, img.width}) {
      throw InputError("manifest images differ in size: " + e.image.string());
    }
    if (!valid_box(e.box, img.height, img.width)) throw InputError("box outside image for " + e.image.string());
    if (e.label < 0 || e.label >= num_classes) throw InputError(fmt::format("label {} out of range", e.label));
    images.push_back(tensor_from_image(img));
    d.labels.push_back(e.label);
    d.boxes.push_back(e.box);
    if (with_masks) {
      if (!fs::exists(*e.mask)) throw PathError("manifest mask not found: " + e.mask->string());
      const Image mi = read_png(*e.mask);
      if (mi.width != img.width || mi.height != img.height) throw InputError("mask size differs for " + e.image.string());
      Tensor m({mi.height, mi.width});
      for (int y = 0; y < mi.height; ++y)
        for (int x = 0; x < mi.width; ++x) m[static_cast<std::int64_t>(y) * mi.width + x] = mi.at(x, y)[0] > 127 ? 1.0 : 0.0;
      masks.push_back(std::move(m));
    }
  }
  d.images = stack(images);
  if (with_masks) d.masks = stack(masks);
  return d;
}

Image wsol_overlay(const Tensor& image, const Tensor& heatmap01, const BoundingBox& predicted, const BoundingBox& gt,
                   int scale) {
  const Image base = image_from_tensor(image);
  const Image heat = render_map(heatmap01, true);
  Image out(base.width, base.height);
  for (int y = 0; y < base.height; ++y)
    for (int x = 0; x < base.width; ++x) {
      const Rgb a = base.at(x, y), b = heat.at(x, y);
      Rgb c;
      for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>((a[k] + b[k]) / 2);
      out.set(x, y, c);
    }
  Image big = out.upscaled(scale);
  auto rect = [&](const BoundingBox& b, Rgb c) {
    big.draw_rect(b.x_min * scale, b.y_min * scale, (b.x_max + 1) * scale - 1, (b.y_max + 1) * scale - 1, c);
  };
  rect(gt, {0, 200, 0});
  rect(predicted, {230, 0, 0});
  return big;
}

WsolReport evaluate_wsol(const ModelBundle& model, const Dataset& data, const WsolConfig& cfg, const fs::path& overlay_dir) {
  if (data.boxes.size() != static_cast<std::size_t>(data.size())) throw InputError("dataset has no ground-truth boxes");
  std::int64_t n = data.size();
  if (cfg.max_images > 0) n = std::min(n, cfg.max_images);
  if (n == 0) throw InputError("evaluate_wsol: no images");
  if (!(cfg.threshold > 0.0 && cfg.threshold <= 1.0)) {
    throw InputError(fmt::format("heatmap threshold {} outside (0, 1]", cfg.threshold));
  }
  const bool has_masks = !data.masks.empty();
  const std::vector<int> preds = predict(model, data.images.slice_rows(0, n));
  WsolReport report;
  std::vector<LocalizationResult> locs;
  std::vector<SegmentationResult> segs;
  for (std::int64_t i = 0; i < n; ++i) {
    const Tensor x = data.image(i);
    const int y = data.labels[static_cast<std::size_t>(i)];
    const Tensor heat = heatmap_postprocess(attribute(model, x, y, cfg.attribution, cfg.mode));
    WsolRecord r;
    r.index = i;
    r.label = y;
    r.predicted = preds[static_cast<std::size_t>(i)];
    r.loc.gt_box = data.boxes[static_cast<std::size_t>(i)];
    r.loc.predicted_box = fit_bounding_box(heat, cfg.threshold);
    r.loc.iou = iou(r.loc.predicted_box, r.loc.gt_box);
    r.loc.prediction_correct = r.predicted == y;
    if (has_masks) {
      const Tensor gt = data.masks.slice_rows(i, i + 1).reshaped({heat.dim(0), heat.dim(1)});
      r.mask_iou = mask_iou(threshold_mask(heat, cfg.threshold), gt);
      segs.push_back({*r.mask_iou, r.loc.prediction_correct});
    }
    if (!overlay_dir.empty()) {
      write_png(overlay_dir / fmt::format("wsol_{:05d}.png", i), wsol_overlay(x, heat, r.loc.predicted_box, r.loc.gt_box));
    }
    locs.push_back(r.loc);
    report.records.push_back(r);
  }
  report.metrics = wsol_metrics(locs, cfg.iou_threshold);
  if (has_masks) report.top1_seg = top1_seg(segs, cfg.iou_threshold);
  return report;
}

void write_wsol_report(const WsolReport& report, const fs::path& csv_path) {
  std::string csv = "index,label,predicted,pred_x_min,pred_y_min,pred_x_max,pred_y_max,gt_x_min,gt_y_min,gt_x_max,gt_y_max,iou,mask_iou\n";
  for (const auto& r : report.records) {
    const auto& p = r.loc.predicted_box;
    const auto& g = r.loc.gt_box;
    csv += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{:.6f},{}\n", r.index, r.label, r.predicted, p.x_min, p.y_min, p.x_max,
                       p.y_max, g.x_min, g.y_min, g.x_max, g.y_max, r.loc.iou,
                       r.mask_iou ? fmt::format("{:.6f}", *r.mask_iou) : "");
  }
  write_file_atomic(csv_path, csv);
  nlohmann::json j = {{"images", report.records.size()},
                      {"gt_known_loc", report.metrics.gt_known_loc},
                      {"top1_loc", report.metrics.top1_loc},
                      {"top1_acc", report.metrics.top1_acc}};
  if (report.top1_seg) j["top1_seg"] = *report.top1_seg;
  fs::path json_path = csv_path;
  json_path.replace_extension(".json");
  write_file_atomic(json_path, j.dump(2) + "\n");
}

}  // namespace art
