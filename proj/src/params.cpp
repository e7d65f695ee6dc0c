#include "ctxguard/params.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ctxguard/errors.hpp"

namespace ctxguard {

using nlohmann::json;

std::size_t ParamSet::add(std::string name, Matrix value) {
  tensors_.push_back({std::move(name), std::move(value)});
  return tensors_.size() - 1;
}

const Matrix& ParamSet::at(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t.value;
  throw ArgumentError("no tensor named '" + std::string(name) + "'");
}

std::size_t ParamSet::total_size() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (const auto& t : tensors_) z.add(t.name, Matrix(t.value.rows(), t.value.cols()));
  return z;
}

bool ParamSet::same_schema(const ParamSet& other) const noexcept {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
      return false;
  }
  return true;
}

void ParamSet::set_zero() {
  for (auto& t : tensors_) t.value.fill(0.0);
}

void ParamSet::add_scaled(const ParamSet& other, double scale) {
  if (!same_schema(other)) throw ShapeError("add_scaled: schema mismatch");
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto dst = tensors_[i].value.data();
    auto src = other.tensors_[i].value.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
  }
}

std::vector<double> flatten_params(const ParamSet& params) {
  std::vector<double> flat;
  flat.reserve(params.total_size());
  for (const auto& t : params.tensors()) {
    auto d = t.value.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  return flat;
}

void unflatten_into(std::span<const double> flat, ParamSet& params) {
  if (flat.size() != params.total_size()) {
    throw ShapeError("unflatten: got " + std::to_string(flat.size()) + " values, schema needs " +
                     std::to_string(params.total_size()));
  }
  std::size_t off = 0;
  for (auto& t : params.tensors()) {
    auto d = t.value.data();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
    off += d.size();
  }
}

ParamSet unflatten_params(std::span<const double> flat, const ParamSet& schema) {
  ParamSet out = schema;
  unflatten_into(flat, out);
  return out;
}

std::string checkpoint_to_string(const ParamSet& params) {
  json layers = json::array();
  for (const auto& t : params.tensors()) {
    layers.push_back({{"name", t.name},
                      {"shape", {t.value.rows(), t.value.cols()}},
                      {"data", t.value.values()}});
  }
  json doc = {{"version", 1}, {"layers", std::move(layers)}};
  return doc.dump() + "\n";
}

ParamSet checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 1);
  }
  try {
    if (doc.at("version").get<int>() != 1) {
      throw VersionError("checkpoint version " + doc.at("version").dump() + " unsupported");
    }
    ParamSet out;
    for (const auto& layer : doc.at("layers")) {
      const auto shape = layer.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw ParseError("checkpoint: shape must have two entries", 1);
      auto data = layer.at("data").get<std::vector<double>>();
      Matrix m(shape[0], shape[1], std::move(data));
      if (!m.all_finite()) throw NumericError("checkpoint: non-finite weight");
      out.add(layer.at("name").get<std::string>(), std::move(m));
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 1);
  }
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << checkpoint_to_string(params);
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

ParamSet load_checkpoint(const std::filesystem::path& path, const ParamSet& schema) {
  ParamSet p = load_checkpoint(path);
  if (!p.same_schema(schema)) {
    throw ShapeError("checkpoint " + path.string() + " does not match the expected layer schema");
  }
  return p;
}

}  // namespace ctxguard
