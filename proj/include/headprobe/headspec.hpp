#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/json_io.hpp"
#include "headprobe/matrix.hpp"

namespace headprobe {

enum class HeadKind { FullyConnected, Conv1x1Gap };
enum class Activation { ReLU, Identity };

inline constexpr int kHeadSpecFormatVersion = 1;

/// Input geometry of a head. Fully-connected heads use channels = D and a
/// 1x1 spatial extent.
struct InputShape {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;

  static InputShape features(std::size_t d) { return {d, 1, 1}; }
  static InputShape spatial(std::size_t c, std::size_t h, std::size_t w) { return {c, h, w}; }

  std::size_t flat_size() const noexcept { return channels * height * width; }
  std::size_t spatial_size() const noexcept { return height * width; }

  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct AffineLayer {
  Matrix weight;  // out_width x in_width
  Vector bias;    // out_width
  Activation activation = Activation::Identity;

  std::size_t in_width() const noexcept { return weight.cols(); }
  std::size_t out_width() const noexcept { return weight.rows(); }

  friend bool operator==(const AffineLayer&, const AffineLayer&) = default;
};

/// Coarse range of backbone activations on random input noise.
struct LatentRangeInfo {
  double min_val = 0.0;
  double max_val = 0.0;
  double abs_max = 0.0;
  bool nonnegative = true;
  std::size_t probe_batch = 0;

  static LatentRangeInfo from_bounds(double min_val, double max_val, std::size_t probe_batch) {
    return {min_val, max_val, std::max(std::fabs(min_val), std::fabs(max_val)), min_val >= 0.0,
            probe_batch};
  }

  friend bool operator==(const LatentRangeInfo&, const LatentRangeInfo&) = default;
};

struct HeadSpec {
  std::string model_id;
  HeadKind head_kind = HeadKind::FullyConnected;
  InputShape input_shape;
  std::size_t num_classes = 0;
  std::vector<AffineLayer> layers;
  LatentRangeInfo latent_range;
  std::optional<std::string> arch_tag;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

/// Throws ShapeMismatch / NonFiniteWeight / ConfigInvalid when a structural
/// invariant does not hold. Everything downstream relies on this check.
inline void validate(const HeadSpec& h) {
  if (h.num_classes == 0) throw Error(ErrorCode::ShapeMismatch, "num_classes must be positive");
  if (h.layers.empty()) throw Error(ErrorCode::ShapeMismatch, "head has no layers");
  if (h.input_shape.flat_size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty input shape");

  if (h.head_kind == HeadKind::Conv1x1Gap) {
    if (h.layers.size() != 1)
      throw Error(ErrorCode::ShapeMismatch, "conv1x1_gap heads have exactly one layer");
    if (h.layers[0].activation != Activation::ReLU)
      throw Error(ErrorCode::ShapeMismatch, "conv1x1_gap layer must use relu");
    if (h.layers[0].in_width() != h.input_shape.channels)
      throw Error(ErrorCode::ShapeMismatch, "conv weight width != input channels");
  } else {
    if (h.input_shape.height != 1 || h.input_shape.width != 1)
      throw Error(ErrorCode::ShapeMismatch, "fc heads take a flat feature vector");
    std::size_t width = h.input_shape.channels;
    for (std::size_t i = 0; i < h.layers.size(); ++i) {
      if (h.layers[i].in_width() != width)
        throw Error(ErrorCode::ShapeMismatch,
                    "layer " + std::to_string(i) + " expects width " +
                        std::to_string(h.layers[i].in_width()) + ", got " + std::to_string(width));
      width = h.layers[i].out_width();
    }
  }
  if (h.layers.back().out_width() != h.num_classes)
    throw Error(ErrorCode::ShapeMismatch, "last layer width != num_classes");

  for (std::size_t i = 0; i < h.layers.size(); ++i) {
    const auto& layer = h.layers[i];
    if (layer.out_width() == 0 || layer.in_width() == 0)
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " is empty");
    if (layer.bias.size() != layer.out_width())
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " bias length");
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(layer.weight.data().begin(), layer.weight.data().end(), finite) ||
        !std::all_of(layer.bias.begin(), layer.bias.end(), finite))
      throw Error(ErrorCode::NonFiniteWeight, "layer " + std::to_string(i));
  }

  const auto& r = h.latent_range;
  if (!std::isfinite(r.min_val) || !std::isfinite(r.max_val) || r.min_val > r.max_val)
    throw Error(ErrorCode::MalformedDocument, "latent_range requires finite min <= max");
}

/// Elementwise extremes of a b x D activation dump.
inline LatentRangeInfo estimate_latent_range(const Matrix& activations) {
  if (activations.rows() == 0 || activations.cols() == 0)
    throw Error(ErrorCode::EmptyBatch, "activation batch is empty");
  double lo = activations.data()[0];
  double hi = lo;
  for (double v : activations.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteActivation, "activation dump");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return LatentRangeInfo::from_bounds(lo, hi, activations.rows());
}

namespace detail {

inline const Json& require(const Json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key))
    throw Error(ErrorCode::MalformedDocument, std::string("missing field \"") + key + "\"");
  return obj.at(key);
}

inline double as_real(const Json& v, const char* what) {
  if (!v.is_number()) throw Error(ErrorCode::MalformedDocument, std::string(what) + " must be a number");
  return v.get<double>();
}

inline std::size_t as_count(const Json& v, const char* what) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw Error(ErrorCode::MalformedDocument, std::string(what) + " must be a non-negative integer");
  return v.get<std::size_t>();
}

inline Vector as_real_array(const Json& v, const char* what) {
  if (!v.is_array()) throw Error(ErrorCode::MalformedDocument, std::string(what) + " must be an array");
  Vector out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back(as_real(e, what));
  return out;
}

}  // namespace detail

inline HeadSpec headspec_from_json(const Json& doc) {
  using detail::require;
  if (!doc.is_object()) throw Error(ErrorCode::MalformedDocument, "head spec must be an object");
  const auto& version = require(doc, "format_version");
  if (!version.is_number_integer()) throw Error(ErrorCode::MalformedDocument, "format_version");
  if (version.get<long long>() != kHeadSpecFormatVersion)
    throw Error(ErrorCode::UnsupportedVersion, "format_version " + version.dump());

  HeadSpec h;
  const auto& id = require(doc, "model_id");
  if (!id.is_string()) throw Error(ErrorCode::MalformedDocument, "model_id must be a string");
  h.model_id = id.get<std::string>();

  const auto& kind = require(doc, "head_kind");
  if (kind == "fc") {
    h.head_kind = HeadKind::FullyConnected;
  } else if (kind == "conv1x1_gap") {
    h.head_kind = HeadKind::Conv1x1Gap;
  } else {
    throw Error(ErrorCode::MalformedDocument, "unknown head_kind " + kind.dump());
  }

  const auto& shape = require(doc, "input_shape");
  if (h.head_kind == HeadKind::FullyConnected) {
    h.input_shape = InputShape::features(detail::as_count(require(shape, "d"), "input_shape.d"));
  } else {
    h.input_shape = InputShape::spatial(detail::as_count(require(shape, "c"), "input_shape.c"),
                                        detail::as_count(require(shape, "h"), "input_shape.h"),
                                        detail::as_count(require(shape, "w"), "input_shape.w"));
  }
  h.num_classes = detail::as_count(require(doc, "num_classes"), "num_classes");

  const auto& layers = require(doc, "layers");
  if (!layers.is_array()) throw Error(ErrorCode::MalformedDocument, "layers must be an array");
  for (const auto& lj : layers) {
    AffineLayer layer;
    const auto& rows = require(lj, "weight");
    if (!rows.is_array() || rows.empty())
      throw Error(ErrorCode::MalformedDocument, "weight must be a non-empty array of rows");
    std::vector<Vector> parsed;
    for (const auto& r : rows) parsed.push_back(detail::as_real_array(r, "weight row"));
    for (const auto& r : parsed)
      if (r.size() != parsed.front().size())
        throw Error(ErrorCode::ShapeMismatch, "ragged weight matrix");
    layer.weight = Matrix::from_rows(parsed);
    layer.bias = detail::as_real_array(require(lj, "bias"), "bias");
    const auto& act = require(lj, "activation");
    if (act == "relu") {
      layer.activation = Activation::ReLU;
    } else if (act == "none") {
      layer.activation = Activation::Identity;
    } else {
      throw Error(ErrorCode::MalformedDocument, "unknown activation " + act.dump());
    }
    h.layers.push_back(std::move(layer));
  }

  const auto& range = require(doc, "latent_range");
  h.latent_range = LatentRangeInfo::from_bounds(
      detail::as_real(require(range, "min"), "latent_range.min"),
      detail::as_real(require(range, "max"), "latent_range.max"),
      detail::as_count(require(range, "probe_batch"), "latent_range.probe_batch"));

  if (doc.contains("arch_tag") && !doc.at("arch_tag").is_null()) {
    if (!doc.at("arch_tag").is_string()) throw Error(ErrorCode::MalformedDocument, "arch_tag");
    h.arch_tag = doc.at("arch_tag").get<std::string>();
  }

  validate(h);
  return h;
}

inline HeadSpec parse_headspec(std::string_view text) { return headspec_from_json(parse_json_text(text)); }

inline Json headspec_to_json(const HeadSpec& h) {
  Json doc;
  doc["format_version"] = kHeadSpecFormatVersion;
  doc["model_id"] = h.model_id;
  if (h.head_kind == HeadKind::FullyConnected) {
    doc["head_kind"] = "fc";
    doc["input_shape"] = {{"d", h.input_shape.channels}};
  } else {
    doc["head_kind"] = "conv1x1_gap";
    doc["input_shape"] = {{"c", h.input_shape.channels},
                          {"h", h.input_shape.height},
                          {"w", h.input_shape.width}};
  }
  doc["num_classes"] = h.num_classes;
  Json layers = Json::array();
  for (const auto& layer : h.layers) {
    Json rows = Json::array();
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      auto row = layer.weight.row(r);
      rows.push_back(Json(std::vector<double>(row.begin(), row.end())));
    }
    layers.push_back({{"weight", std::move(rows)},
                      {"bias", layer.bias},
                      {"activation", layer.activation == Activation::ReLU ? "relu" : "none"}});
  }
  doc["layers"] = std::move(layers);
  // abs_max and nonnegative are derived on parse
  doc["latent_range"] = {{"min", h.latent_range.min_val},
                         {"max", h.latent_range.max_val},
                         {"probe_batch", h.latent_range.probe_batch}};
  if (h.arch_tag) doc["arch_tag"] = *h.arch_tag;
  return doc;
}

inline std::string serialize_headspec(const HeadSpec& h) { return dump_canonical(headspec_to_json(h)); }

inline HeadSpec load_headspec(const std::filesystem::path& path) {
  return parse_headspec(read_text_file(path));
}

inline void save_headspec(const HeadSpec& h, const std::filesystem::path& path) {
  write_text_file(path, serialize_headspec(h));
}

}  // namespace headprobe
