#pragma once

// Brute-force reference computations used by the tests. They share no code
// with the library beyond the data types.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "gibbscs/prior_model.hpp"
#include "gibbscs/sampler.hpp"

namespace oracle {

using gibbscs::Image;
using gibbscs::Matrix;
using gibbscs::Vector;

// Dense N x N matrix C with vec(correlate(x)) = C vec(x), row-major vec.
inline Matrix circulant(Eigen::Index rows, Eigen::Index cols, std::span<const gibbscs::Offset> offsets,
                        std::span<const double> taps) {
  const Eigen::Index n = rows * cols;
  Matrix c = Matrix::Zero(n, n);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index col = 0; col < cols; ++col) {
      for (size_t k = 0; k < offsets.size(); ++k) {
        const Eigen::Index rr = ((r + offsets[k].dr) % rows + rows) % rows;
        const Eigen::Index cc = ((col + offsets[k].dc) % cols + cols) % cols;
        c(r * cols + col, rr * cols + cc) += taps[k];
      }
    }
  }
  return c;
}

inline double normal_pdf(double t, double variance) {
  return std::exp(-0.5 * t * t / variance) / std::sqrt(2.0 * std::numbers::pi * variance);
}

inline double mixture_log_density(double t, const std::vector<double>& weights,
                                  const std::vector<double>& variances) {
  double s = 0.0;
  for (size_t n = 0; n < weights.size(); ++n) s += weights[n] * normal_pdf(t, variances[n]);
  return std::log(s);
}

struct DenseSystem {
  Matrix precision;
  Vector rhs;
};

// P = F^T S^-1 F + ridge I and b = F^T S^-1 mu from the explicitly stacked F.
inline DenseSystem dense_system(const gibbscs::PriorModel& model, const gibbscs::AuxiliaryField& z,
                                Eigen::Index rows, Eigen::Index cols, const Matrix* A,
                                const Vector* y, double noise_variance, double ridge) {
  const Eigen::Index n = rows * cols;
  const Eigen::Index prior_rows = model.num_filters() * n;
  const Eigen::Index meas_rows = A ? A->rows() : 0;
  Matrix F = Matrix::Zero(prior_rows + meas_rows, n);
  Vector inv_var = Vector::Zero(prior_rows + meas_rows);
  Vector mu = Vector::Zero(prior_rows + meas_rows);
  for (int m = 0; m < model.num_filters(); ++m) {
    F.block(m * n, 0, n, n) = circulant(rows, cols, model.filters().offsets(), model.filters().filter(m));
    for (Eigen::Index p = 0; p < n; ++p) {
      inv_var[m * n + p] = 1.0 / model.grid().variance(z.at(m, p));
    }
  }
  if (A) {
    F.bottomRows(meas_rows) = *A;
    inv_var.tail(meas_rows).setConstant(1.0 / noise_variance);
    mu.tail(meas_rows) = *y;
  }
  DenseSystem s;
  s.precision = F.transpose() * inv_var.asDiagonal() * F + ridge * Matrix::Identity(n, n);
  s.rhs = F.transpose() * inv_var.asDiagonal() * mu;
  return s;
}

// Windowed SSIM written directly from the definition: every 8x8 window at
// stride 1, population statistics, averaged.
inline double ssim(const Image& a, const Image& b, double peak = 1.0) {
  const double c1 = std::pow(0.01 * peak, 2);
  const double c2 = std::pow(0.03 * peak, 2);
  const int w = 8;
  double total = 0.0;
  int windows = 0;
  for (Eigen::Index r = 0; r + w <= a.rows(); ++r) {
    for (Eigen::Index c = 0; c + w <= a.cols(); ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j) {
          ma += a(r + i, c + j);
          mb += b(r + i, c + j);
        }
      ma /= w * w;
      mb /= w * w;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j) {
          const double da = a(r + i, c + j) - ma;
          const double db = b(r + i, c + j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= w * w;
      vb /= w * w;
      cov /= w * w;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / windows;
}

inline Image random_image(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                          double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

// Zero-mean random taps for every filter, weights drawn from a Dirichlet(1).
inline gibbscs::PriorModel random_model(gibbscs::Footprint footprint, int filters,
                                        gibbscs::ScaleGrid grid, std::mt19937_64& rng,
                                        double tap_scale = 1.0) {
  const int taps = static_cast<int>(gibbscs::footprint_offsets(footprint).size());
  std::normal_distribution<double> g(0.0, tap_scale);
  gibbscs::TapMatrix t(filters, taps);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = g(rng);
  if (taps > 1) {
    for (int m = 0; m < filters; ++m) t.row(m).array() -= t.row(m).mean();
  }
  std::exponential_distribution<double> e(1.0);
  gibbscs::MixtureWeights::Table w(filters, grid.size());
  for (int m = 0; m < filters; ++m) {
    for (int n = 0; n < grid.size(); ++n) w(m, n) = e(rng) + 1e-3;
    w.row(m) /= w.row(m).sum();
  }
  return gibbscs::PriorModel(gibbscs::FilterBank(footprint, t), std::move(grid),
                             gibbscs::MixtureWeights(w));
}

}  // namespace oracle
