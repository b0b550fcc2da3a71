#include <filesystem>
#include <fmt/format.h>
#include <random>

#include "art/errors.hpp"
#include "art/io.hpp"
#include "art/wsol.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace art;
namespace fs = std::filesystem;

namespace {

Tensor rect_map(int h, int w, const BoundingBox& b, double value = 1.0) {
  Tensor m({h, w});
  for (int y = b.y_min; y <= b.y_max; ++y)
    for (int x = b.x_min; x <= b.x_max; ++x) m[y * w + x] = value;
  return m;
}

double oracle_iou(const BoundingBox& a, const BoundingBox& b) {
  return oracle::box_iou(a.x_min, a.y_min, a.x_max, a.y_max, b.x_min, b.y_min, b.x_max, b.y_max);
}

BoundingBox random_box(std::mt19937_64& rng, int size) {
  std::uniform_int_distribution<int> c(0, size - 1);
  int x0 = c(rng), x1 = c(rng), y0 = c(rng), y1 = c(rng);
  return {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
}

}  // namespace

TEST_CASE("heatmap postprocessing") {
  CHECK(max_abs_diff(heatmap_postprocess(Tensor({5, 5}, 3.0)), Tensor({5, 5})) == 0.0);
  Tensor hot({7, 7});
  hot[3 * 7 + 3] = 5.0;
  const Tensor out = heatmap_postprocess(hot);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      const bool plateau = std::abs(y - 3) <= 1 && std::abs(x - 3) <= 1;
      CHECK(out[y * 7 + x] == doctest::Approx(plateau ? 1.0 / 9.0 : 0.0).epsilon(1e-15));
    }
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 4);
  Tensor r({3, 9, 11});
  for (auto& v : r.data()) v = n(rng);
  const Tensor g = heatmap_postprocess(AttributionMap{r, AttributionMethod::gradient, 0, Reduction::none});
  CHECK(g.shape() == Shape{9, 11});
  for (double v : g.data()) CHECK((v >= 0.0 && v <= 1.0));
  // edge replicate: a constant border row stays constant
  Tensor edge({4, 4});
  for (int x = 0; x < 4; ++x) edge[x] = 1.0;
  CHECK(mean_filter3(edge)[1] == doctest::Approx(6.0 / 9.0));
  CHECK_THROWS_AS(mean_filter3(Tensor({2, 2, 2})), InputError);
}

TEST_CASE("box fitting") {
  const BoundingBox r{3, 4, 10, 8};
  CHECK(fit_bounding_box(rect_map(16, 16, r), 0.2) == r);
  CHECK(fit_bounding_box(rect_map(16, 16, r, 7.5), 0.2) == r);
  CHECK(fit_bounding_box(rect_map(16, 16, r), 0.0) == full_box(16, 16));

  Tensor two = rect_map(20, 20, {1, 1, 3, 3}) + rect_map(20, 20, {8, 9, 15, 14});
  CHECK(fit_bounding_box(two, 0.2) == BoundingBox{8, 9, 15, 14});
  // diagonal neighbours join under 8-connectivity
  Tensor diag({6, 6});
  diag[0] = diag[7] = diag[14] = 1.0;
  CHECK(fit_bounding_box(diag, 0.5) == BoundingBox{0, 0, 2, 2});
  CHECK(fit_bounding_box(Tensor({4, 4}, std::numeric_limits<double>::quiet_NaN()), 0.2) == full_box(4, 4));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 50; ++t) {
    Tensor h({12, 12});
    for (auto& v : h.data()) v = u(rng);
    CHECK(fit_bounding_box(h, 0.6) == fit_bounding_box(h * 13.0, 0.6));
  }
}

TEST_CASE("iou against pixel enumeration") {
  CHECK(iou({0, 0, 9, 9}, {0, 0, 9, 9}) == 1.0);
  CHECK(iou({0, 0, 9, 9}, {5, 5, 14, 14}) == doctest::Approx(25.0 / 175.0).epsilon(1e-15));
  CHECK(iou({0, 0, 2, 2}, {3, 3, 4, 4}) == 0.0);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 2000; ++t) {
    const BoundingBox a = random_box(rng, 24), b = random_box(rng, 24);
    CHECK(std::abs(iou(a, b) - oracle_iou(a, b)) <= 1e-12);
    CHECK(iou(a, b) == iou(b, a));
    // growing b toward a never lowers the overlap
    BoundingBox g = b;
    g.x_min = std::min(g.x_min, a.x_min);
    g.y_min = std::min(g.y_min, a.y_min);
    CHECK(iou(a, g) >= iou(a, b) - 1e-15);
  }
}

TEST_CASE("wsol metrics") {
  std::vector<LocalizationResult> all(4, LocalizationResult{{}, {}, 1.0, true});
  const WsolMetrics m = wsol_metrics(all);
  CHECK(m.gt_known_loc == 1.0);
  CHECK(m.top1_loc == 1.0);
  CHECK(m.top1_acc == 1.0);
  CHECK_THROWS_AS(wsol_metrics(std::vector<LocalizationResult>{}), InputError);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 1000; ++t) {
    std::vector<LocalizationResult> rs(1 + rng() % 30);
    for (auto& r : rs) {
      r.iou = u(rng);
      r.prediction_correct = u(rng) < 0.6;
    }
    const WsolMetrics w = wsol_metrics(rs);
    CHECK(w.top1_loc <= std::min(w.gt_known_loc, w.top1_acc));
  }
}

TEST_CASE("top-1 segmentation") {
  const Tensor a = rect_map(8, 8, {1, 1, 4, 4}), b = rect_map(8, 8, {5, 5, 7, 7});
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, b) == 0.0);
  std::vector<SegmentationResult> rs{{mask_iou(a, a), true}, {mask_iou(a, b), true}, {mask_iou(a, a), false}};
  CHECK(top1_seg(rs) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(mask_iou(a, Tensor({4, 4})), InputError);
}

TEST_CASE("shape indicators localize exactly through the heatmap path") {
  const Dataset d = make_synthetic(200, 21);
  std::vector<LocalizationResult> rs;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const Tensor mask = d.masks.slice_rows(i, i + 1).reshaped({32, 32});
    const BoundingBox b = fit_bounding_box(heatmap_postprocess(mask), 0.2);
    rs.push_back({b, d.boxes[static_cast<std::size_t>(i)], iou(b, d.boxes[static_cast<std::size_t>(i)]), true});
  }
  CHECK(wsol_metrics(rs).gt_known_loc == 1.0);
}

TEST_CASE("manifest ingestion and evaluation report") {
  const fs::path dir = fs::temp_directory_path() / "art_test_wsol";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Dataset d = make_synthetic(3, 5);
  std::string csv = "image,label,x_min,y_min,x_max,y_max,mask\n";
  for (std::int64_t i = 0; i < 3; ++i) {
    write_png(dir / fmt::format("img{}.png", i), image_from_tensor(d.image(i)));
    Tensor m = d.masks.slice_rows(i, i + 1).reshaped({1, 32, 32});
    write_png(dir / fmt::format("mask{}.png", i), image_from_tensor(m));
    const auto& b = d.boxes[static_cast<std::size_t>(i)];
    csv += fmt::format("img{}.png,{},{},{},{},{},mask{}.png\n", i, d.labels[static_cast<std::size_t>(i)], b.x_min, b.y_min,
                       b.x_max, b.y_max, i);
  }
  write_file_atomic(dir / "manifest.csv", csv);
  const Dataset loaded = load_manifest_dataset(dir / "manifest.csv", 10);
  CHECK(loaded.size() == 3);
  CHECK(loaded.boxes == d.boxes);
  CHECK(max_abs_diff(loaded.masks, d.masks) == 0.0);
  CHECK(max_abs_diff(loaded.images, d.images) <= 0.5 / 255.0 + 1e-12);

  const ModelBundle model = ModelBundle::create(ArchitectureSpec::small_cnn(), 0);
  const WsolReport rep = evaluate_wsol(model, loaded, WsolConfig{}, dir / "overlays");
  CHECK(rep.records.size() == 3);
  CHECK(rep.top1_seg.has_value());
  CHECK(fs::exists(dir / "overlays" / "wsol_00002.png"));
  write_wsol_report(rep, dir / "wsol.csv");
  CHECK(fs::exists(dir / "wsol.json"));

  write_file_atomic(dir / "bad.csv", "image,label\nimg0.png,1\n");
  CHECK_THROWS_AS(read_manifest(dir / "bad.csv"), InputError);
  write_file_atomic(dir / "missing.csv", "nothere.png,1,0,0,1,1\n");
  CHECK_THROWS_AS(load_manifest_dataset(dir / "missing.csv", 10), PathError);
}
