#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "nodedrop/tensor.hpp"

namespace nodedrop {

enum class ActivationKind { relu, clamped_relu, soft_clamped_relu };

std::string_view to_string(ActivationKind kind);
ActivationKind parse_activation(std::string_view name);

// True when the activation is exactly 0 on (-inf, 0].
constexpr bool has_flat_zero_region(ActivationKind) { return true; }

// True when every output lies in [0, 1].
constexpr bool is_unit_bounded(ActivationKind kind) {
  return kind == ActivationKind::clamped_relu || kind == ActivationKind::soft_clamped_relu;
}

namespace detail {

// log(1 + e^z) without overflow for large z. Plain log rather than log1p:
// callers only need absolute accuracy, and log is several times faster.
template <typename T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log(T(1) + std::exp(-std::abs(z)));
}

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace detail

// max(0, 1 - log(1 + e^{beta (1 - v)}) / beta). Exactly 0 for v <= 0.
// NaN inputs pass through so the training loop can detect them.
template <typename T>
T soft_clamped_relu(T v, T beta) {
  if (v <= T(0)) return T(0);
  const T raw = T(1) - detail::softplus(beta * (T(1) - v)) / beta;
  return raw < T(0) ? T(0) : raw;
}

template <typename T>
T soft_clamped_relu_grad(T v, T beta) {
  if (!(v > T(0))) return T(0);
  const T z = beta * (T(1) - v);
  const T raw = T(1) - detail::softplus(z) / beta;
  return raw > T(0) ? detail::sigmoid(z) : T(0);
}

template <typename T>
T activate(ActivationKind kind, T beta, T v) {
  switch (kind) {
    case ActivationKind::relu:
      return v <= T(0) ? T(0) : v;
    case ActivationKind::clamped_relu:
      return v <= T(0) ? T(0) : (v >= T(1) ? T(1) : v);
    case ActivationKind::soft_clamped_relu:
      return soft_clamped_relu(v, beta);
  }
  return T(0);
}

template <typename T>
T activate_grad(ActivationKind kind, T beta, T v) {
  switch (kind) {
    case ActivationKind::relu:
      return v > T(0) ? T(1) : T(0);
    case ActivationKind::clamped_relu:
      return (v > T(0) && v < T(1)) ? T(1) : T(0);
    case ActivationKind::soft_clamped_relu:
      return soft_clamped_relu_grad(v, beta);
  }
  return T(0);
}

template <typename T>
Tensor<T> activation_apply(ActivationKind kind, T beta, const Tensor<T>& v) {
  if (kind == ActivationKind::soft_clamped_relu && !(beta > T(0)))
    throw ContractError("soft_clamped_relu needs beta > 0");
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate(kind, beta, v[i]);
  return out;
}

// Elementwise derivative d activation / d v.
template <typename T>
Tensor<T> activation_grad(ActivationKind kind, T beta, const Tensor<T>& v) {
  if (kind == ActivationKind::soft_clamped_relu && !(beta > T(0)))
    throw ContractError("soft_clamped_relu needs beta > 0");
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate_grad(kind, beta, v[i]);
  return out;
}

}  // namespace nodedrop
