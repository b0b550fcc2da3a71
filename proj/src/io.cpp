#include "art/io.hpp"

#include <bit>
#include <cstring>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <fstream>
#include <regex>
#include <sstream>

#include "art/errors.hpp"

static_assert(std::endian::native == std::endian::little, "payloads are written in native little-endian order");

namespace art {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PathError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw PathError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot read " + path.string() + (fs::exists(path) ? "" : " (no such file)"));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string encode_npy(const Tensor& t) {
  std::string shape = fmt::format("{}", fmt::join(t.shape(), ", "));
  if (t.ndim() == 1) shape += ",";
  std::string header = fmt::format("{{'descr': '<f8', 'fortran_order': False, 'shape': ({}), }}", shape);
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>(len >> 8));
  out += header;
  out.append(reinterpret_cast<const char*>(t.data().data()), static_cast<std::size_t>(t.numel()) * sizeof(double));
  return out;
}

Tensor decode_npy(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw InputError("not a .npy file");
  const int major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    offset = 10;
  } else {
    if (bytes.size() < 12) throw InputError("truncated .npy header");
    std::uint32_t l;
    std::memcpy(&l, bytes.data() + 8, 4);
    header_len = l;
    offset = 12;
  }
  if (bytes.size() < offset + header_len) throw InputError("truncated .npy header");
  const std::string header = bytes.substr(offset, header_len);
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr':\s*'([^']+)')"))) throw InputError("npy: missing descr");
  const std::string descr = m[1];
  if (std::regex_search(header, std::regex(R"('fortran_order':\s*True)"))) throw InputError("npy: fortran order unsupported");
  if (!std::regex_search(header, m, std::regex(R"('shape':\s*\(([^)]*)\))"))) throw InputError("npy: missing shape");
  Shape shape;
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it) {
    shape.push_back(std::stoll(it->str()));
  }
  const std::int64_t n = shape_numel(shape);
  const char* p = bytes.data() + offset + header_len;
  const std::size_t avail = bytes.size() - offset - header_len;
  std::vector<double> data(static_cast<std::size_t>(n));
  auto read_as = [&]<class T>(T) {
    if (avail < static_cast<std::size_t>(n) * sizeof(T)) throw InputError("npy: truncated payload");
    for (std::int64_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, p + i * sizeof(T), sizeof(T));
      data[static_cast<std::size_t>(i)] = static_cast<double>(v);
    }
  };
  if (descr == "<f8") {
    read_as(double{});
  } else if (descr == "<f4") {
    read_as(float{});
  } else if (descr == "|u1" || descr == "<u1") {
    read_as(std::uint8_t{});
  } else if (descr == "<i4") {
    read_as(std::int32_t{});
  } else if (descr == "<i8") {
    read_as(std::int64_t{});
  } else {
    throw InputError("npy: unsupported dtype " + descr);
  }
  return Tensor(std::move(shape), std::move(data));
}

void write_npy(const fs::path& path, const Tensor& t) { write_file_atomic(path, encode_npy(t)); }

Tensor read_npy(const fs::path& path) { return decode_npy(read_file(path)); }

namespace {

constexpr char kMagic[8] = {'A', 'R', 'T', 'C', 'K', 'P', 'T', '\0'};

nlohmann::json activation_json(ActivationMode m) {
  return {{"kind", m.kind == ActivationKind::exact_relu ? "exact_relu" : "softplus"}, {"beta", m.beta}};
}

ActivationMode activation_from_json(const nlohmann::json& j) {
  return j.at("kind") == "exact_relu" ? ActivationMode::relu() : ActivationMode::softplus(j.at("beta").get<double>());
}

}  // namespace

void save_checkpoint(const fs::path& path, const ModelBundle& model, const OptimizerState& optimizer,
                     const TrainingMetadata& metadata) {
  nlohmann::json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["architecture"] = model.spec();
  header["activation"] = activation_json(model.activation());
  std::string payload;
  auto arrays = nlohmann::json::array();
  auto append = [&](const std::string& name, const Tensor& t) {
    arrays.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size() / sizeof(double)}});
    payload.append(reinterpret_cast<const char*>(t.data().data()), static_cast<std::size_t>(t.numel()) * sizeof(double));
  };
  for (const auto& p : model.parameters()) append("param/" + p.name, p.var.value());
  for (std::size_t i = 0; i < optimizer.momentum.size(); ++i) {
    append("momentum/" + model.parameters()[i].name, optimizer.momentum[i]);
  }
  header["arrays"] = arrays;
  header["optimizer"] = {{"steps", optimizer.steps}, {"has_momentum", !optimizer.momentum.empty()}};
  header["metadata"] = {{"epoch", metadata.epoch},
                        {"seed", metadata.seed},
                        {"config_hash", metadata.config_hash},
                        {"training_kind", metadata.training_kind},
                        {"extra", metadata.extra}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += h;
  out += payload;
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw InputError(path.string() + " is not a checkpoint");
  }
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (bytes.size() < 16 + len) throw InputError("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  const int version = header.at("format_version").get<int>();
  if (version != Checkpoint::kFormatVersion) {
    throw InputError(fmt::format("unsupported checkpoint format version {} (expected {})", version, Checkpoint::kFormatVersion));
  }
  const char* payload = bytes.data() + 16 + len;
  const std::size_t payload_doubles = (bytes.size() - 16 - len) / sizeof(double);

  Checkpoint ck{ModelBundle::create(header.at("architecture").get<ArchitectureSpec>(), 0), {}, {}};
  ck.model.set_activation(activation_from_json(header.at("activation")));
  std::vector<Tensor> params, momentum;
  for (const auto& a : header.at("arrays")) {
    Shape shape = a.at("shape").get<Shape>();
    const auto offset = a.at("offset").get<std::size_t>();
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    if (offset + n > payload_doubles) throw InputError("checkpoint array out of bounds: " + a.at("name").get<std::string>());
    std::vector<double> data(n);
    std::memcpy(data.data(), payload + offset * sizeof(double), n * sizeof(double));
    const std::string name = a.at("name");
    (name.rfind("param/", 0) == 0 ? params : momentum).emplace_back(std::move(shape), std::move(data));
  }
  ck.model.set_parameter_values(params);
  ck.optimizer.momentum = std::move(momentum);
  ck.optimizer.steps = header.at("optimizer").at("steps").get<std::int64_t>();
  const auto& md = header.at("metadata");
  ck.metadata.epoch = md.at("epoch");
  ck.metadata.seed = md.at("seed");
  ck.metadata.config_hash = md.at("config_hash");
  ck.metadata.training_kind = md.value("training_kind", "");
  ck.metadata.extra = md.value("extra", nlohmann::json::object());
  return ck;
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace art
