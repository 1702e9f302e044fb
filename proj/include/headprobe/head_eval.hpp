#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/matrix.hpp"
#include "headprobe/probe.hpp"

namespace headprobe {

/// Logits, softmax probabilities and predicted labels of N inputs over K classes.
struct ResponseSet {
  Matrix logits;
  Matrix probabilities;
  std::vector<std::size_t> labels;

  std::size_t count() const noexcept { return logits.rows(); }
  std::size_t num_classes() const noexcept { return logits.cols(); }
};

/// Numerically stable softmax of one row (row max subtracted first).
inline void softmax_row(std::span<const double> logits, std::span<double> out) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

namespace detail {

// One affine layer over every row of `inputs`. Each output entry is summed in
// ascending input order, then the bias is added, so results match a naive
// triple loop bit for bit. The weight is transposed so the inner loop walks
// K independent accumulators over contiguous memory; rows go four at a time
// to reuse each weight row.
inline Matrix apply_layer(const AffineLayer& layer, const Matrix& inputs) {
  constexpr std::size_t kBlock = 4;
  const std::size_t in = layer.in_width();
  const std::size_t out = layer.out_width();
  const std::size_t rows = inputs.rows();
  const Matrix wt = layer.weight.transposed();
  Matrix result(rows, out);
  std::vector<double> acc_storage(kBlock * out);
  double* __restrict acc = acc_storage.data();
  for (std::size_t n0 = 0; n0 < rows; n0 += kBlock) {
    const std::size_t block = std::min(kBlock, rows - n0);
    std::fill(acc_storage.begin(), acc_storage.end(), 0.0);
    for (std::size_t d = 0; d < in; ++d) {
      const double* __restrict w = wt.row(d).data();
      for (std::size_t b = 0; b < block; ++b) {
        const double xd = inputs(n0 + b, d);
        double* __restrict a = acc + b * out;
        for (std::size_t k = 0; k < out; ++k) a[k] += w[k] * xd;
      }
    }
    for (std::size_t b = 0; b < block; ++b) {
      auto dst = result.row(n0 + b);
      for (std::size_t k = 0; k < out; ++k) {
        const double z = acc[b * out + k] + layer.bias[k];
        dst[k] = layer.activation == Activation::ReLU ? std::max(z, 0.0) : z;
      }
    }
  }
  return result;
}

// 1x1 convolution (K x C) at every spatial position, ReLU, then global average pooling.
inline Matrix apply_conv_gap(const AffineLayer& layer, const InputShape& shape, const Matrix& inputs) {
  const std::size_t channels = shape.channels;
  const std::size_t positions = shape.spatial_size();
  const std::size_t classes = layer.out_width();
  const Matrix wt = layer.weight.transposed();
  Matrix result(inputs.rows(), classes);
  std::vector<double> acc(classes);
  std::vector<double> pooled(classes);
  for (std::size_t n = 0; n < inputs.rows(); ++n) {
    auto x = inputs.row(n);
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (std::size_t s = 0; s < positions; ++s) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double xc = x[c * positions + s];
        const double* w = wt.row(c).data();
        for (std::size_t k = 0; k < classes; ++k) acc[k] += w[k] * xc;
      }
      for (std::size_t k = 0; k < classes; ++k)
        pooled[k] += std::max(acc[k] + layer.bias[k], 0.0);
    }
    auto dst = result.row(n);
    for (std::size_t k = 0; k < classes; ++k) dst[k] = pooled[k] / static_cast<double>(positions);
  }
  return result;
}

inline ResponseSet respond(const HeadSpec& h, const Matrix& inputs) {
  if (inputs.cols() != h.input_shape.flat_size())
    throw Error(ErrorCode::ShapeMismatch, "input width " + std::to_string(inputs.cols()) +
                                              " != head input size " +
                                              std::to_string(h.input_shape.flat_size()));
  ResponseSet resp;
  if (h.head_kind == HeadKind::Conv1x1Gap) {
    resp.logits = apply_conv_gap(h.layers.front(), h.input_shape, inputs);
  } else {
    resp.logits = apply_layer(h.layers.front(), inputs);
    for (std::size_t i = 1; i < h.layers.size(); ++i) resp.logits = apply_layer(h.layers[i], resp.logits);
  }
  resp.probabilities = Matrix(resp.logits.rows(), resp.logits.cols());
  resp.labels.resize(resp.logits.rows());
  for (std::size_t n = 0; n < resp.logits.rows(); ++n) {
    softmax_row(resp.logits.row(n), resp.probabilities.row(n));
    resp.labels[n] = argmax(resp.probabilities.row(n));
  }
  return resp;
}

}  // namespace detail

/// Queries the head with a probe batch.
inline ResponseSet forward(const HeadSpec& h, const ProbeBatch& probes) {
  if (!(probes.shape == h.input_shape))
    throw Error(ErrorCode::ShapeMismatch, "probe shape does not match head input shape");
  return detail::respond(h, probes.values);
}

/// forward() without materializing the probe batch: probes are drawn and
/// evaluated in blocks. Bit-identical to forward(h, generate_probes(cfg, ...)).
inline ResponseSet forward_probes(const HeadSpec& h, const ProbeConfig& cfg, std::size_t block_rows = 256) {
  ProbeStream stream(cfg, h.input_shape);
  ResponseSet resp;
  resp.logits = Matrix(cfg.count, h.num_classes);
  resp.probabilities = Matrix(cfg.count, h.num_classes);
  resp.labels.reserve(cfg.count);
  std::size_t row = 0;
  while (stream.remaining() > 0) {
    const auto part = detail::respond(h, stream.next(block_rows));
    for (std::size_t r = 0; r < part.count(); ++r, ++row) {
      std::copy(part.logits.row(r).begin(), part.logits.row(r).end(), resp.logits.row(row).begin());
      std::copy(part.probabilities.row(r).begin(), part.probabilities.row(r).end(),
                resp.probabilities.row(row).begin());
      resp.labels.push_back(part.labels[r]);
    }
  }
  return resp;
}

/// Same kernel as forward(), for arbitrary latent feature rows (M x D).
inline ResponseSet forward_latents(const HeadSpec& h, const Matrix& latents) {
  return detail::respond(h, latents);
}

}  // namespace headprobe
