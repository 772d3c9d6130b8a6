#pragma once

// Training objectives and rank statistics. Each loss has a plain-double
// evaluation and a differentiable Var form built from the same formula.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "unqa/autograd.hpp"
#include "unqa/core.hpp"

namespace unqa {

namespace detail {

inline void check_batch(std::size_t o, std::size_t s, std::size_t min_size, const char* op) {
  require(o == s, ErrorCode::shape_mismatch,
          std::string(op) + ": " + std::to_string(o) + " predictions vs " + std::to_string(s) + " targets");
  require(o >= min_size, ErrorCode::invalid_argument,
          std::string(op) + ": batch needs at least " + std::to_string(min_size) + " element(s)");
}

inline bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain evaluation

inline double mae_loss(std::span<const double> o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 1, "mae_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) acc += std::fabs(o[i] - s[i]);
  return acc / static_cast<double>(o.size());
}

/// (1/B^2) sum_ij max(0, |s_i - s_j| - e_ij (o_i - o_j)), e_ij = +1 iff s_i >= s_j.
inline double rank_loss(std::span<const double> o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 1, "rank_loss");
  const std::size_t b = o.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double e = s[i] >= s[j] ? 1.0 : -1.0;
      acc += std::max(0.0, std::fabs(s[i] - s[j]) - e * (o[i] - o[j]));
    }
  }
  return acc / static_cast<double>(b * b);
}

inline double combined_loss(std::span<const double> o, std::span<const double> s) {
  return mae_loss(o, s) + rank_loss(o, s);
}

/// Ascending ranks from 1; ties share the mean of their positions.
inline std::vector<double> rank_with_ties(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation; a constant argument yields 0 and a warning.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  detail::check_batch(a.size(), b.size(), 2, "pearson");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) {
    warn("correlation of a constant vector is undefined; reporting 0");
    return 0.0;
  }
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

inline double srcc_exact(std::span<const double> o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 2, "srcc_exact");
  const auto ro = rank_with_ties(o);
  const auto rs = rank_with_ties(s);
  return pearson(ro, rs);
}

enum class SrccMode { exact, soft };

// ---------------------------------------------------------------------------
// Differentiable forms; `o` is a length-B Var, targets are data.

inline Var mae_loss(const Var& o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 1, "mae_loss");
  const Var target = constant({s.size()}, {s.begin(), s.end()});
  return mean(abs(sub(reshape(o, {o.size()}), target)));
}

inline Var rank_loss(const Var& o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 1, "rank_loss");
  const std::size_t b = s.size();
  std::vector<double> gap(b * b), sign(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      gap[i * b + j] = std::fabs(s[i] - s[j]);
      sign[i * b + j] = s[i] >= s[j] ? 1.0 : -1.0;
    }
  }
  const Var d = pairwise_diff(reshape(o, {b}));
  const Var hinge = relu(sub(constant({b, b}, std::move(gap)), mul(constant({b, b}, std::move(sign)), d)));
  return scale(sum(hinge), 1.0 / static_cast<double>(b * b));
}

inline Var combined_loss(const Var& o, std::span<const double> s) { return add(mae_loss(o, s), rank_loss(o, s)); }

/// softrank_i = 1 + sum_{j != i} sigmoid((o_i - o_j) / tau).
inline Var soft_rank(const Var& o, double tau) {
  require(tau > 0.0, ErrorCode::invalid_argument, "soft_rank: temperature must be positive");
  const std::size_t b = o.size();
  const Var sig = sigmoid(scale(pairwise_diff(reshape(o, {b})), 1.0 / tau));
  // The diagonal contributes sigmoid(0) = 0.5 per row.
  return add_scalar(sum_rows(sig), 0.5);
}

/// 1 - Pearson(softrank(o), rank(s)). Constant targets are a degenerate
/// training batch and raise.
inline Var srcc_loss_soft(const Var& o, std::span<const double> s, double tau = 0.1) {
  detail::check_batch(o.size(), s.size(), 2, "srcc_loss");
  require(!detail::is_constant(s), ErrorCode::degenerate, "srcc_loss: constant ground truth in batch");
  const std::size_t b = s.size();
  auto rs = rank_with_ties(s);
  const double mean_s = std::accumulate(rs.begin(), rs.end(), 0.0) / static_cast<double>(b);
  double var_s = 0.0;
  for (double& r : rs) {
    r -= mean_s;
    var_s += r * r;
  }
  const Var r = soft_rank(o, tau);
  const Var centered = sub(r, expand_scalar(mean(r), {b}));
  const Var cov = sum(mul(centered, constant({b}, std::move(rs))));
  // A tiny guard keeps the surrogate finite when all predictions coincide.
  const Var norm = sqrt(scale(add_scalar(sum(square(centered)), 1e-12), var_s));
  return add_scalar(scale(div(cov, norm), -1.0), 1.0);
}

inline double srcc_loss(std::span<const double> o, std::span<const double> s, SrccMode mode, double tau = 0.1) {
  if (mode == SrccMode::exact) {
    detail::check_batch(o.size(), s.size(), 2, "srcc_loss");
    require(!detail::is_constant(s), ErrorCode::degenerate, "srcc_loss: constant ground truth in batch");
    return 1.0 - srcc_exact(o, s);
  }
  return srcc_loss_soft(constant({o.size()}, {o.begin(), o.end()}), s, tau).item();
}

/// Mean squared error, used by the linear-rescale baseline.
inline Var mse_loss(const Var& o, std::span<const double> s) {
  detail::check_batch(o.size(), s.size(), 1, "mse_loss");
  const Var target = constant({s.size()}, {s.begin(), s.end()});
  return mean(square(sub(reshape(o, {o.size()}), target)));
}

}  // namespace unqa
