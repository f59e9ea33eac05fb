#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "noduleid/nn/layers.hpp"
#include "noduleid/tensor.hpp"

namespace noduleid::nn {

inline constexpr double kBceEps = 1e-7;  // probabilities clamped to [eps, 1-eps]

// Binary cross entropy on a probability. Inputs at exactly 0 or 1 are clamped.
template <typename T>
T bce_loss(T p, int label) {
  if (p < T(0) || p > T(1)) throw std::invalid_argument("bce_loss: probability outside [0,1]");
  if (label != 0 && label != 1) throw std::invalid_argument("bce_loss: label must be 0 or 1");
  const T q = std::clamp(p, static_cast<T>(kBceEps), static_cast<T>(1.0 - kBceEps));
  return label == 1 ? -std::log(q) : -std::log(T(1) - q);
}

// d/dp of bce_loss (within the clamp interior).
template <typename T>
T bce_loss_grad(T p, int label) {
  const T q = std::clamp(p, static_cast<T>(kBceEps), static_cast<T>(1.0 - kBceEps));
  return label == 1 ? -T(1) / q : T(1) / (T(1) - q);
}

// Contrastive loss for one pair: label*d^2 + (1-label)*max(0, m-d)^2.
template <typename T>
T contrastive_loss(T d, int label, T margin) {
  if (d < T(0)) throw std::invalid_argument("contrastive_loss: distance must be >= 0");
  if (!(margin > T(0))) throw std::invalid_argument("contrastive_loss: margin must be > 0");
  if (label != 0 && label != 1)
    throw std::invalid_argument("contrastive_loss: label must be 0 or 1");
  if (label == 1) return d * d;
  const T hinge = std::max(T(0), margin - d);
  return hinge * hinge;
}

template <typename T>
T contrastive_loss_grad(T d, int label, T margin) {
  if (label == 1) return T(2) * d;
  return d < margin ? T(-2) * (margin - d) : T(0);
}

// Numerically stable BCE on logits, mean reduction with optional per-sample
// weights. Returns the loss; writes dL/dz into dz.
template <typename T>
T bce_with_logits(const std::vector<T>& z, const std::vector<int>& labels,
                  const std::vector<T>& weights, std::vector<T>& dz) {
  const std::size_t n = z.size();
  dz.assign(n, T(0));
  if (n == 0) return T(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = static_cast<double>(z[i]);
    const double y = labels[i];
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[i]);
    // log(1 + exp(-|z|)) + max(z, 0) - z*y
    const double loss = std::log1p(std::exp(-std::abs(zi))) + std::max(zi, 0.0) - zi * y;
    total += w * loss;
    const double p = 1.0 / (1.0 + std::exp(-zi));
    dz[i] = static_cast<T>(w * (p - y) / static_cast<double>(n));
  }
  return static_cast<T>(total / static_cast<double>(n));
}

// Mean contrastive loss over a batch of distances; writes dL/dd into dd.
template <typename T>
T contrastive_batch(const std::vector<T>& d, const std::vector<int>& labels, T margin,
                    std::vector<T>& dd) {
  const std::size_t n = d.size();
  dd.assign(n, T(0));
  if (n == 0) return T(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += static_cast<double>(contrastive_loss(d[i], labels[i], margin));
    dd[i] = contrastive_loss_grad(d[i], labels[i], margin) / static_cast<T>(n);
  }
  return static_cast<T>(total / static_cast<double>(n));
}

// Smooth L1 (Huber with delta=1), mean over elements; used by the detector
// regression head.
template <typename T>
T smooth_l1(const std::vector<T>& pred, const std::vector<T>& target, std::vector<T>& dpred) {
  const std::size_t n = pred.size();
  dpred.assign(n, T(0));
  if (n == 0) return T(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    if (std::abs(e) < 1.0) {
      total += 0.5 * e * e;
      dpred[i] = static_cast<T>(e / static_cast<double>(n));
    } else {
      total += std::abs(e) - 0.5;
      dpred[i] = static_cast<T>((e > 0 ? 1.0 : -1.0) / static_cast<double>(n));
    }
  }
  return static_cast<T>(total / static_cast<double>(n));
}

}  // namespace noduleid::nn
