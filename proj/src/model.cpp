#include "art/model.hpp"

#include <cmath>
#include <fmt/format.h>
#include <random>

#include "art/errors.hpp"

namespace art {

ActivationMode ActivationMode::softplus(double beta) {
  if (!(beta > 0)) throw InputError(fmt::format("softplus beta must be positive, got {}", beta));
  return {ActivationKind::softplus, beta};
}

std::string ActivationMode::to_string() const {
  return kind == ActivationKind::exact_relu ? std::string("relu") : fmt::format("softplus({})", beta);
}

ArchitectureSpec ArchitectureSpec::small_cnn(Shape input_shape, int num_classes) {
  ArchitectureSpec s;
  s.input_shape = std::move(input_shape);
  s.num_classes = num_classes;
  return s;
}

ArchitectureSpec ArchitectureSpec::linear(Shape input_shape, int num_classes) {
  ArchitectureSpec s;
  s.id = "linear";
  s.input_shape = std::move(input_shape);
  s.num_classes = num_classes;
  s.conv_blocks.clear();
  return s;
}

void to_json(nlohmann::json& j, const ArchitectureSpec& s) {
  j = nlohmann::json{{"id", s.id}, {"input_shape", s.input_shape}, {"num_classes", s.num_classes},
                     {"norm_mean", s.norm_mean}, {"norm_std", s.norm_std}};
  auto blocks = nlohmann::json::array();
  for (const auto& b : s.conv_blocks) {
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"padding", b.padding}});
  }
  j["conv_blocks"] = blocks;
}

void from_json(const nlohmann::json& j, ArchitectureSpec& s) {
  s = ArchitectureSpec{};
  s.id = j.value("id", s.id);
  if (j.contains("input_shape")) s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.value("num_classes", s.num_classes);
  s.norm_mean = j.value("norm_mean", std::vector<double>{});
  s.norm_std = j.value("norm_std", std::vector<double>{});
  if (j.contains("conv_blocks")) {
    s.conv_blocks.clear();
    for (const auto& b : j.at("conv_blocks")) {
      s.conv_blocks.push_back({b.value("out_channels", 16), b.value("kernel", 3), b.value("stride", 1), b.value("padding", 1)});
    }
  }
}

namespace {

void validate(const ArchitectureSpec& s) {
  if (s.id != "small_cnn" && s.id != "linear") {
    throw InputError(fmt::format("unknown architecture '{}' (available: small_cnn, linear)", s.id));
  }
  if (s.input_shape.size() != 3) throw InputError("input_shape must be (C, H, W), got " + shape_str(s.input_shape));
  if (s.num_classes < 1) throw InputError("num_classes must be positive");
  const auto c = static_cast<std::size_t>(s.input_shape[0]);
  if (!s.norm_mean.empty() && (s.norm_mean.size() != c || s.norm_std.size() != c)) {
    throw InputError("normalization mean/std must have one entry per input channel");
  }
  for (double v : s.norm_std) {
    if (!(v > 0)) throw InputError("normalization std must be positive");
  }
  if (s.id == "small_cnn" && s.conv_blocks.empty()) throw InputError("small_cnn needs at least one conv block");
}

ag::Var activate(const ag::Var& z, ActivationMode mode) {
  return mode.kind == ActivationKind::exact_relu ? ag::relu(z) : ag::softplus(z, mode.beta);
}

}  // namespace

ModelBundle ModelBundle::create(const ArchitectureSpec& spec, std::uint64_t seed) {
  validate(spec);
  ModelBundle m;
  m.spec_ = spec;
  std::mt19937_64 rng(seed);
  auto normal_tensor = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  auto uniform_tensor = [&](Shape shape, double bound) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };

  std::int64_t channels = spec.input_shape[0];
  if (spec.id == "small_cnn") {
    for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
      const auto& b = spec.conv_blocks[i];
      const double fan_in = static_cast<double>(channels * b.kernel * b.kernel);
      m.params_.push_back({fmt::format("conv{}.weight", i),
                           ag::Var(normal_tensor({b.out_channels, channels, b.kernel, b.kernel}, std::sqrt(2.0 / fan_in)), true)});
      m.params_.push_back({fmt::format("conv{}.bias", i), ag::Var(Tensor({1, b.out_channels, 1, 1}), true)});
      channels = b.out_channels;
    }
  } else {
    channels = shape_numel(spec.input_shape);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  m.params_.push_back({"fc.weight", ag::Var(uniform_tensor({spec.num_classes, channels}, bound), true)});
  m.params_.push_back({"fc.bias", ag::Var(uniform_tensor({spec.num_classes}, bound), true)});
  return m;
}

std::vector<ag::Var> ModelBundle::parameter_vars() const {
  std::vector<ag::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var);
  return out;
}

std::int64_t ModelBundle::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.var.numel();
  return n;
}

void ModelBundle::set_parameter_values(std::span<const Tensor> values) {
  if (values.size() != params_.size()) {
    throw InputError(fmt::format("expected {} parameter arrays, got {}", params_.size(), values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i].var.shape()) {
      throw InputError(fmt::format("parameter {} expects shape {}, got {}", params_[i].name,
                                   shape_str(params_[i].var.shape()), shape_str(values[i].shape())));
    }
    params_[i].var = ag::Var(values[i], true);
  }
}

Shape ModelBundle::batch_shape(const Shape& x) const {
  const Shape& in = spec_.input_shape;
  if (x.size() == 3 && x == in) return Shape{1, in[0], in[1], in[2]};
  if (x.size() == 4 && std::equal(in.begin(), in.end(), x.begin() + 1)) return x;
  throw InputError(fmt::format("input shape {} does not match model input {}", shape_str(x), shape_str(in)));
}

ag::Var ModelBundle::forward(const ag::Var& x, ActivationMode mode) const {
  const Shape bs = batch_shape(x.shape());
  const std::int64_t n = bs[0];
  ag::Var h = ag::reshape(x, bs);
  if (!spec_.norm_mean.empty()) {
    const std::int64_t c = bs[1];
    Tensor shift({1, c, 1, 1}), inv({1, c, 1, 1});
    for (std::int64_t i = 0; i < c; ++i) {
      shift[i] = spec_.norm_mean[static_cast<std::size_t>(i)];
      inv[i] = 1.0 / spec_.norm_std[static_cast<std::size_t>(i)];
    }
    h = ag::mul(ag::sub(h, ag::Var(std::move(shift))), ag::Var(std::move(inv)));
  }

  std::size_t p = 0;
  if (spec_.id == "small_cnn") {
    for (const auto& b : spec_.conv_blocks) {
      h = ag::conv2d(h, params_[p].var, {b.stride, b.padding});
      h = activate(ag::add(h, params_[p + 1].var), mode);
      p += 2;
    }
    const Shape s = h.shape();
    h = ag::scale(ag::sum_to(h, {s[0], s[1], 1, 1}), 1.0 / static_cast<double>(s[2] * s[3]));
    h = ag::reshape(h, {s[0], s[1]});
  } else {
    h = ag::reshape(h, {n, shape_numel(spec_.input_shape)});
  }
  return ag::add(ag::matmul(h, ag::transpose(params_[p].var)), params_[p + 1].var);
}

Tensor logits(const ModelBundle& model, const Tensor& x) { return logits(model, x, model.activation()); }

Tensor logits(const ModelBundle& model, const Tensor& x, ActivationMode mode) {
  ag::NoGradGuard guard;
  Tensor out = model.forward(ag::Var(x), mode).value();
  if (x.ndim() == 3) out = out.reshaped({model.num_classes()});
  return out;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw InputError("argmax of empty range");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<int> predict(const ModelBundle& model, const Tensor& x) { return predict(model, x, ActivationMode::relu()); }

std::vector<int> predict(const ModelBundle& model, const Tensor& x, ActivationMode mode) {
  const Tensor z = logits(model, x, mode);
  const std::int64_t k = model.num_classes();
  const std::int64_t n = z.numel() / k;
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = argmax(z.data().subspan(i * k, k));
  return out;
}

ag::Var select_logits(const ag::Var& logits, std::span<const int> classes) {
  const auto n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<std::int64_t>(classes.size()) != n) {
    throw InputError(fmt::format("{} class indices for a batch of {}", classes.size(), n));
  }
  Tensor onehot({n, k});
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = classes[static_cast<std::size_t>(i)];
    if (c < 0 || c >= k) throw InputError(fmt::format("class index {} out of range [0, {})", c, k));
    onehot[i * k + c] = 1.0;
  }
  return ag::sum(ag::mul(logits, ag::Var(std::move(onehot))));
}

ag::Var cross_entropy(const ag::Var& logits, std::span<const int> labels) {
  const auto n = logits.shape()[0];
  ag::Var picked = select_logits(logits, labels);
  return ag::scale(ag::sub(ag::sum(ag::logsumexp_rows(logits)), picked), 1.0 / static_cast<double>(n));
}

ag::Var input_gradient(const ModelBundle& model, const ag::Var& x, std::span<const int> class_indices,
                       ActivationMode mode, bool create_graph) {
  if (!x.requires_grad()) throw InputError("input_gradient: x must require grad");
  ag::GradModeGuard recording(true);
  ag::Var z = model.forward(x, mode);
  ag::Var s = select_logits(z, class_indices);
  const ag::Var inputs[] = {x};
  return ag::grad(s, inputs, {}, create_graph)[0];
}

Tensor input_gradient(const ModelBundle& model, const Tensor& x, std::span<const int> class_indices,
                      ActivationMode mode) {
  const Shape bs = model.batch_shape(x.shape());
  ag::Var xv(x.reshaped(bs), true);
  return input_gradient(model, xv, class_indices, mode, false).value().reshaped(x.shape());
}

Tensor input_gradient(const ModelBundle& model, const Tensor& x, int class_index, ActivationMode mode) {
  const Shape bs = model.batch_shape(x.shape());
  const std::vector<int> classes(static_cast<std::size_t>(bs[0]), class_index);
  return input_gradient(model, x, classes, mode);
}

Tensor input_gradient(const ModelBundle& model, const Tensor& x, int class_index) {
  return input_gradient(model, x, class_index, model.activation());
}

}  // namespace art
