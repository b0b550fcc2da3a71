#include "art/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fmt/format.h>
#include <map>
#include <numeric>

#include "art/errors.hpp"
#include "art/io.hpp"

namespace art {

namespace fs = std::filesystem;

Shape Dataset::item_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset d;
  d.id = id;
  d.num_classes = num_classes;
  d.class_names = class_names;
  d.images = images.gather_rows(indices);
  for (auto i : indices) {
    d.labels.push_back(labels.at(static_cast<std::size_t>(i)));
    if (!boxes.empty()) d.boxes.push_back(boxes.at(static_cast<std::size_t>(i)));
  }
  if (!masks.empty()) d.masks = masks.gather_rows(indices);
  return d;
}

Tensor Dataset::image(std::int64_t i) const { return images.slice_rows(i, i + 1).reshaped(item_shape()); }

std::vector<std::int64_t> subset_indices(std::int64_t total, std::int64_t count, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(total));
  std::iota(idx.begin(), idx.end(), 0);
  if (count <= 0 || count >= total) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

Tensor synthetic_shape_mask(int cls, double cx, double cy, double r, int size) {
  Tensor m({size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy, ax = std::abs(dx), ay = std::abs(dy);
      bool in = false;
      switch (cls) {
        case 0: in = ax <= r && ay <= r; break;
        case 1: in = dx * dx + dy * dy <= r * r; break;
        case 2: in = dy <= r && dy >= -r && ax <= (dy + r) / 2; break;
        case 3: in = dy <= r && dy >= -r && ax <= (r - dy) / 2; break;
        case 4: in = (ax <= r / 3 && ay <= r) || (ay <= r / 3 && ax <= r); break;
        case 5: in = (std::abs(dx - dy) <= r / 3 || std::abs(dx + dy) <= r / 3) && ax <= r && ay <= r; break;
        case 6: {
          const double d = std::sqrt(dx * dx + dy * dy);
          in = d <= r && d >= 0.55 * r;
          break;
        }
        case 7: in = ax <= r && ay <= r && !(ax <= 0.5 * r && ay <= 0.5 * r); break;
        case 8: in = (ax <= r && ((dy >= -r && dy <= -r / 3) || (dy >= r / 3 && dy <= r))) || (ax <= r / 3 && ay <= r); break;
        case 9: in = ax + ay <= r; break;
        default: throw InputError(fmt::format("synthetic class {} out of range [0, 10)", cls));
      }
      m[y * size + x] = in ? 1.0 : 0.0;
    }
  return m;
}

Dataset make_synthetic(std::int64_t n, std::uint64_t seed, const SyntheticOptions& o) {
  const int s = o.image_size;
  if (s < 2 * (o.radius_hi + 1)) throw InputError("synthetic image too small for the shape radius");
  Dataset d;
  d.id = "synthetic";
  d.num_classes = 10;
  d.class_names = {"square", "disc", "triangle_up", "triangle_down", "plus",
                   "cross",  "ring", "hollow_square", "i_beam",      "diamond"};
  d.images = Tensor({n, 3, s, s});
  d.masks = Tensor({n, s, s});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(0, 9);
  std::normal_distribution<double> noise(0.0, o.noise);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const std::int64_t plane = static_cast<std::int64_t>(s) * s;
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = cls(rng);
    double base[3], gx[3], gy[3], col[3];
    for (double& b : base) b = uni(0.1, 0.6);
    for (int ch = 0; ch < 3; ++ch) {
      gx[ch] = uni(-0.15, 0.15);
      gy[ch] = uni(-0.15, 0.15);
    }
    const double r = uni(o.radius_lo, o.radius_hi);
    const double cx = uni(r + 1, s - r - 1), cy = uni(r + 1, s - r - 1);
    for (double& v : col) v = uni(o.contrast_lo, o.contrast_hi);
    const Tensor m = synthetic_shape_mask(c, cx, cy, r, s);
    BoundingBox box{s, s, -1, -1};
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double mv = m[y * s + x];
          const double bg = base[ch] + gx[ch] * ((x + 0.5) / s - 0.5) + gy[ch] * ((y + 0.5) / s - 0.5);
          d.images[(i * 3 + ch) * plane + y * s + x] = std::clamp(bg + mv * col[ch] + noise(rng), 0.0, 1.0);
          if (ch == 0) {
            d.masks[i * plane + y * s + x] = mv;
            if (mv > 0) box = {std::min(box.x_min, x), std::min(box.y_min, y), std::max(box.x_max, x), std::max(box.y_max, y)};
          }
        }
    d.labels.push_back(c);
    d.boxes.push_back(box);
  }
  return d;
}

namespace {

std::string read_existing(const fs::path& p) {
  if (!fs::exists(p)) throw PathError(fmt::format("dataset file not found: {}", p.string()));
  return read_file(p);
}

}  // namespace

Dataset load_cifar10(const fs::path& root, bool train) {
  fs::path dir = root;
  if (fs::exists(root / "cifar-10-batches-bin")) dir = root / "cifar-10-batches-bin";
  std::vector<std::string> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(fmt::format("data_batch_{}.bin", i));
  } else {
    files.emplace_back("test_batch.bin");
  }
  constexpr std::int64_t rec = 1 + 3072;
  std::vector<std::string> blobs;
  std::int64_t n = 0;
  for (const auto& f : files) {
    blobs.push_back(read_existing(dir / f));
    if (blobs.back().size() % rec != 0) throw InputError(fmt::format("{} is not a CIFAR-10 binary batch", (dir / f).string()));
    n += static_cast<std::int64_t>(blobs.back().size()) / rec;
  }
  Dataset d;
  d.id = "cifar10";
  d.num_classes = 10;
  d.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  d.images = Tensor({n, 3, 32, 32});
  std::int64_t i = 0;
  for (const auto& b : blobs) {
    for (std::int64_t r = 0; r < static_cast<std::int64_t>(b.size()) / rec; ++r, ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(b.data() + r * rec);
      d.labels.push_back(p[0]);
      for (std::int64_t j = 0; j < 3072; ++j) d.images[i * 3072 + j] = p[1 + j] / 255.0;
    }
  }
  return d;
}

Dataset load_npy_dataset(const fs::path& images, const fs::path& labels, const std::string& id) {
  const Tensor img = decode_npy(read_existing(images));
  const Tensor lab = decode_npy(read_existing(labels));
  if (img.ndim() != 4) {
    throw InputError(fmt::format("{}: expected a 4-d image array, got {}", images.string(), shape_str(img.shape())));
  }
  const std::int64_t n = img.dim(0);
  if (lab.numel() != n) throw InputError(fmt::format("{} labels for {} images", lab.numel(), n));
  const bool nhwc = (img.dim(3) == 1 || img.dim(3) == 3) && img.dim(1) != 1 && img.dim(1) != 3;
  double hi = 0;
  for (double v : img.data()) hi = std::max(hi, v);
  const double scale = hi > 1.0 ? 1.0 / 255.0 : 1.0;
  Dataset d;
  d.id = id;
  if (nhwc) {
    const std::int64_t h = img.dim(1), w = img.dim(2), c = img.dim(3);
    d.images = Tensor({n, c, h, w});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          for (std::int64_t ch = 0; ch < c; ++ch)
            d.images[((i * c + ch) * h + y) * w + x] = img[((i * h + y) * w + x) * c + ch] * scale;
  } else {
    d.images = img * scale;
  }
  for (double v : lab.data()) {
    if (v < 0) throw InputError(fmt::format("{}: negative label {}", labels.string(), v));
    d.labels.push_back(static_cast<int>(v));
    d.num_classes = std::max(d.num_classes, static_cast<int>(v) + 1);
  }
  return d;
}

Dataset balance_by_augmentation(const Dataset& d, std::uint64_t seed) {
  std::map<int, std::vector<std::int64_t>> by_class;
  for (std::int64_t i = 0; i < d.size(); ++i) by_class[d.labels[static_cast<std::size_t>(i)]].push_back(i);
  std::size_t largest = 0;
  for (const auto& [c, v] : by_class) largest = std::max(largest, v.size());
  std::mt19937_64 rng(seed);
  std::vector<Tensor> extra;
  std::vector<int> extra_labels;
  const Shape item = d.item_shape();
  const std::int64_t c = item[0], h = item[1], w = item[2];
  std::uniform_int_distribution<int> shift(-2, 2);
  std::uniform_real_distribution<double> bright(0.9, 1.1);
  for (const auto& [cls, members] : by_class) {
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    for (std::size_t k = members.size(); k < largest; ++k) {
      const Tensor src = d.image(members[pick(rng)]);
      Tensor out(item);
      const int sx = shift(rng), sy = shift(rng);
      const double b = bright(rng);
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t yy = std::clamp<std::int64_t>(y + sy, 0, h - 1);
            const std::int64_t xx = std::clamp<std::int64_t>(x + sx, 0, w - 1);
            out[(ch * h + y) * w + x] = std::clamp(src[(ch * h + yy) * w + xx] * b, 0.0, 1.0);
          }
      extra.push_back(std::move(out));
      extra_labels.push_back(cls);
    }
  }
  if (extra.empty()) return d;
  Dataset out = d;
  const std::vector<Tensor> parts{d.images, stack(extra)};
  out.images = concat_rows(parts);
  out.labels.insert(out.labels.end(), extra_labels.begin(), extra_labels.end());
  out.boxes.clear();
  out.masks = Tensor();
  return out;
}

fs::path dataset_root(const DatasetSpec& spec) {
  if (!spec.root.empty()) return spec.root;
  if (const char* env = std::getenv("ART_DATA_ROOT")) return env;
  return "data";
}

ChannelStats channel_stats(const Dataset& d) {
  if (d.size() == 0) throw InputError("channel_stats: empty dataset");
  const auto c = d.images.dim(1);
  const auto plane = d.images.dim(2) * d.images.dim(3);
  ChannelStats s;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (std::int64_t i = 0; i < d.size(); ++i) {
      const double* p = d.images.data().data() + (i * c + ch) * plane;
      for (std::int64_t k = 0; k < plane; ++k) sum += p[k], sq += p[k] * p[k];
    }
    const double n = static_cast<double>(d.size() * plane);
    const double mean = sum / n;
    s.mean.push_back(mean);
    s.std.push_back(std::sqrt(std::max(sq / n - mean * mean, 1e-12)));
  }
  return s;
}

DatasetSplit load_dataset(const DatasetSpec& spec) {
  DatasetSplit split;
  if (spec.id == "synthetic") {
    split.train = make_synthetic(spec.train_size, spec.seed * 2 + 1, spec.synthetic);
    split.test = make_synthetic(spec.test_size, spec.seed * 2 + 2, spec.synthetic);
    return split;
  }
  const fs::path root = dataset_root(spec);
  Dataset train, test;
  if (spec.id == "cifar10") {
    train = load_cifar10(root, true);
    test = load_cifar10(root, false);
  } else {
    const fs::path dir = root / spec.id;
    train = load_npy_dataset(dir / "train_images.npy", dir / "train_labels.npy", spec.id);
    test = load_npy_dataset(dir / "test_images.npy", dir / "test_labels.npy", spec.id);
    test.num_classes = train.num_classes = std::max(train.num_classes, test.num_classes);
  }
  const auto tr = subset_indices(train.size(), spec.train_size, spec.seed);
  const auto te = subset_indices(test.size(), spec.test_size, spec.seed + 1);
  split.train = train.subset(tr);
  split.test = test.subset(te);
  if (spec.balance_classes || spec.id == "gtsrb") split.train = balance_by_augmentation(split.train, spec.seed);
  return split;
}

Tensor augment_batch(const Tensor& batch, std::mt19937_64& rng, int crop_pad, bool flip) {
  if (crop_pad == 0 && !flip) return batch;
  const std::int64_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out(batch.shape());
  std::uniform_int_distribution<int> off(-crop_pad, crop_pad);
  std::bernoulli_distribution coin(0.5);
  for (std::int64_t i = 0; i < n; ++i) {
    const int dy = crop_pad ? off(rng) : 0, dx = crop_pad ? off(rng) : 0;
    const bool mirror = flip && coin(rng);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t xo = mirror ? w - 1 - x : x;
          const std::int64_t sy = y + dy, sx = xo + dx;
          const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
          out[((i * c + ch) * h + y) * w + x] = inside ? batch[((i * c + ch) * h + sy) * w + sx] : 0.0;
        }
  }
  return out;
}

}  // namespace art
