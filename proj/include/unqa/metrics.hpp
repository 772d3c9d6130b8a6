#pragma once

// Correlation criteria used by validation and evaluation.

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multifit_nlinear.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "unqa/objectives.hpp"

namespace unqa {

struct MetricPair {
  double srcc = 0.0;
  double plcc = 0.0;
  // PLCC after the logistic mapping; NaN when the fit was not requested.
  double plcc_logistic = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
};

/// beta2 + (beta1 - beta2) / (1 + exp(-(x - beta3) / |beta4|)).
inline double logistic4(const std::array<double, 4>& beta, double x) {
  const double scale = std::max(std::fabs(beta[3]), 1e-12);
  return beta[1] + (beta[0] - beta[1]) / (1.0 + std::exp(-(x - beta[2]) / scale));
}

namespace detail {

struct LogisticData {
  std::span<const double> x;
  std::span<const double> y;
};

inline int logistic_residual(const gsl_vector* b, void* data, gsl_vector* f) {
  const auto* d = static_cast<const LogisticData*>(data);
  const std::array<double, 4> beta{gsl_vector_get(b, 0), gsl_vector_get(b, 1), gsl_vector_get(b, 2),
                                   gsl_vector_get(b, 3)};
  for (std::size_t i = 0; i < d->x.size(); ++i) gsl_vector_set(f, i, logistic4(beta, d->x[i]) - d->y[i]);
  return GSL_SUCCESS;
}

}  // namespace detail

/// Least-squares fit of the four-parameter logistic mapping x to y.
/// Returns nullopt when the solver fails.
inline std::optional<std::array<double, 4>> fit_logistic4(std::span<const double> x, std::span<const double> y) {
  static const bool handler_off = [] {
    gsl_set_error_handler_off();
    return true;
  }();
  (void)handler_off;
  const std::size_t n = x.size();
  if (n < 4) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double sx = 0.0;
  for (double v : x) sx += (v - mx) * (v - mx);
  sx = std::sqrt(sx / static_cast<double>(n));
  if (sx <= 0.0) return std::nullopt;
  const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());

  detail::LogisticData data{x, y};
  gsl_multifit_nlinear_fdf fdf;
  fdf.f = detail::logistic_residual;
  fdf.df = nullptr;  // finite-difference Jacobian
  fdf.fvv = nullptr;
  fdf.n = n;
  fdf.p = 4;
  fdf.params = &data;
  gsl_multifit_nlinear_parameters params = gsl_multifit_nlinear_default_parameters();
  gsl_multifit_nlinear_workspace* w = gsl_multifit_nlinear_alloc(gsl_multifit_nlinear_trust, &params, n, 4);
  double start[4] = {*ymax, *ymin, mx, sx};
  gsl_vector_view b0 = gsl_vector_view_array(start, 4);
  gsl_multifit_nlinear_init(&b0.vector, &fdf, w);
  int info = 0;
  const int status = gsl_multifit_nlinear_driver(200, 1e-10, 1e-10, 1e-10, nullptr, nullptr, &info, w);
  std::array<double, 4> beta{};
  for (std::size_t i = 0; i < 4; ++i) beta[i] = gsl_vector_get(w->x, i);
  gsl_multifit_nlinear_free(w);
  if (status != GSL_SUCCESS && status != GSL_EMAXITER) return std::nullopt;
  for (double v : beta) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  return beta;
}

/// Pearson correlation, optionally after mapping predictions through a
/// fitted four-parameter logistic. Constant input gives 0 with a warning.
inline double plcc(std::span<const double> o, std::span<const double> s, bool fit_logistic = false) {
  detail::check_batch(o.size(), s.size(), 2, "plcc");
  if (!fit_logistic) return pearson(o, s);
  const auto beta = fit_logistic4(o, s);
  if (!beta) {
    warn("plcc: logistic fit failed; reporting the unmapped correlation");
    return pearson(o, s);
  }
  std::vector<double> mapped(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) mapped[i] = logistic4(*beta, o[i]);
  return pearson(mapped, s);
}

/// Plain PLCC always; the logistic-mapped PLCC only when requested.
inline MetricPair metric_pair(std::span<const double> o, std::span<const double> s, bool fit_logistic = false) {
  MetricPair m;
  m.srcc = srcc_exact(o, s);
  m.plcc = plcc(o, s, false);
  if (fit_logistic) m.plcc_logistic = plcc(o, s, true);
  m.n = o.size();
  return m;
}

}  // namespace unqa
