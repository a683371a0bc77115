#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gibbscs/image.hpp"
#include "gibbscs/prior_model.hpp"

namespace gibbscs {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(peak^2 / MSE), capped at kPsnrCap (returned for identical images).
double psnr(const Image& reference, const Image& test, double peak = 1.0);

// Mean SSIM over all 8x8 windows (stride 1, uniform weights, population
// moments) with C1 = (0.01 peak)^2 and C2 = (0.03 peak)^2.
double ssim(const Image& reference, const Image& test, double peak = 1.0);

// Uniform-bin histogram with normalized masses. Values outside the edge range
// are counted in the first or last bin.
class Histogram {
 public:
  Histogram(double lo, double hi, int bins);

  void add(double value, double weight = 1.0);
  // Rescales masses to sum to one; no-op on an empty histogram.
  void normalize();

  int bins() const noexcept { return static_cast<int>(mass_.size()); }
  const std::vector<double>& edges() const noexcept { return edges_; }
  const std::vector<double>& masses() const noexcept { return mass_; }
  double total() const noexcept;
  int bin_of(double value) const noexcept;

  // "bin_center,mass" rows.
  std::string to_text() const;

 private:
  std::vector<double> edges_;
  std::vector<double> mass_;
};

struct KldResult {
  double nats;
  int floored_bins;  // q bins raised to the 1e-12 floor
};

inline constexpr double kKldFloor = 1e-12;

// sum_i p_i ln(p_i / q_i); both histograms must share their edges.
KldResult kld(const Histogram& p, const Histogram& q);

// Half-width covering the given quantile of |response| over all filters,
// positions and images.
double response_range(const PriorModel& model, const std::vector<Image>& images,
                      double quantile = 0.999);

// Pools every filter response of every image into one normalized histogram
// over [-half_range, half_range].
Histogram response_histogram(const PriorModel& model, const std::vector<Image>& images,
                             int bins, double half_range);

enum class ActivationKind { kRelu, kArctan, kGmm };

struct ActivationFunction {
  ActivationKind kind = ActivationKind::kRelu;
  // Only for kGmm: mixture weights of one filter and the grid.
  std::vector<double> weights;
  std::optional<ScaleGrid> grid;

  double operator()(double t) const;

  static ActivationFunction relu() { return {ActivationKind::kRelu, {}, std::nullopt}; }
  static ActivationFunction arctan() { return {ActivationKind::kArctan, {}, std::nullopt}; }
  static ActivationFunction gmm(const PriorModel& model, int row);
};

// DFT magnitudes (bins 0..n/2) of the function sampled at n evenly spaced
// points covering [-half_range, half_range] inclusive.
std::vector<double> activation_spectrum(const ActivationFunction& fn, int samples,
                                        double half_range);

// Mean magnitude over the top quarter of non-DC frequency bins.
double high_band_magnitude(const std::vector<double>& spectrum);

// 0.5 ||A x - y||^2 + lambda ||x||_1
double lasso_objective(const Matrix& A, const Vector& y, double lambda, const Vector& x);

// Largest eigenvalue of A^T A by power iteration; throws SolverError when the
// estimate does not settle.
double spectral_norm_sq(const Matrix& A, int max_iters = 5000, double tolerance = 1e-10);

// Iterative soft thresholding from x = 0 with step 1/L, L a slightly inflated
// power-iteration estimate of ||A||_2^2. When `objective_trace` is given it
// receives the objective after every iteration.
Vector lasso_ista(const Matrix& A, const Vector& y, double lambda, int iterations,
                  std::vector<double>* objective_trace = nullptr);

struct ReportRow {
  std::string image;
  std::string method;
  double mr = 0.0;
  std::optional<double> snr_db;  // empty for noiseless
  double psnr_db = 0.0;
  double ssim = 0.0;
  double runtime_s = 0.0;
  std::uint64_t operator_seed = 0;
  std::uint64_t noise_seed = 0;
  std::uint64_t chain_seed = 0;
};

struct ReportAggregate {
  std::size_t count = 0;
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  double mean_runtime_s = 0.0;
};

struct RestorationReport {
  std::vector<ReportRow> rows;
  ReportAggregate aggregate;

  // One row per image; runtime is left out unless asked for, so the file is
  // reproducible byte for byte.
  std::string to_csv(bool include_runtime = false) const;
  std::string summary_json(bool include_runtime = false) const;
};

// Sorts rows by (image, method, mr, snr) and computes the aggregate means.
RestorationReport build_report(std::vector<ReportRow> rows);

}  // namespace gibbscs
