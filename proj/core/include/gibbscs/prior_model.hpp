#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gibbscs/image.hpp"

namespace gibbscs {

// Spatial support shared by every filter of a bank. Offsets are relative to
// the output pixel; responses are circular correlations.
enum class Footprint {
  kPoint,    // single tap; used by analytic test models
  kPlus5,    // centre plus the four nearest neighbours
  kSquare3,  // 3x3
  kSquare5,  // 5x5
};

struct Offset {
  int dr;
  int dc;
};

std::span<const Offset> footprint_offsets(Footprint footprint) noexcept;
// Half-width of the bounding box (0, 1, 1, 2).
int footprint_radius(Footprint footprint) noexcept;
inline int footprint_extent(Footprint footprint) noexcept {
  return 2 * footprint_radius(footprint) + 1;
}
std::string_view to_string(Footprint footprint) noexcept;
Footprint parse_footprint(std::string_view name);

using TapMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// out(r, c) = sum_k taps[k] * image((r + dr_k) mod R, (c + dc_k) mod C)
Image correlate(const Image& image, std::span<const Offset> offsets,
                std::span<const double> taps);
// Adjoint of correlate() with respect to the image.
Image correlate_adjoint(const Image& response, std::span<const Offset> offsets,
                        std::span<const double> taps);

class FilterBank {
 public:
  // `taps` is (filters x taps-per-footprint); all values must be finite.
  FilterBank(Footprint footprint, TapMatrix taps);

  Footprint footprint() const noexcept { return footprint_; }
  std::span<const Offset> offsets() const noexcept { return footprint_offsets(footprint_); }
  int num_filters() const noexcept { return static_cast<int>(taps_.rows()); }
  int taps_per_filter() const noexcept { return static_cast<int>(taps_.cols()); }
  const TapMatrix& taps() const noexcept { return taps_; }
  std::span<const double> filter(int m) const {
    return {taps_.row(m).data(), static_cast<size_t>(taps_.cols())};
  }

 private:
  Footprint footprint_;
  TapMatrix taps_;
};

// Ascending positive scales delta(1..N) and the fixed base variance. Mixture
// component n has variance base_variance / delta(n).
class ScaleGrid {
 public:
  ScaleGrid(std::vector<double> scales, double base_variance);

  // exp({-7, -3, 0, 3, 7})
  static ScaleGrid delta1(double base_variance = 1.0);
  // exp({-7, -5, -3, -1, 1, 3, 5, 7})
  static ScaleGrid delta2(double base_variance = 1.0);

  int size() const noexcept { return static_cast<int>(scales_.size()); }
  const std::vector<double>& scales() const noexcept { return scales_; }
  double base_variance() const noexcept { return base_variance_; }
  double variance(int n) const { return base_variance_ / scales_[n]; }
  double precision(int n) const { return scales_[n] / base_variance_; }

 private:
  std::vector<double> scales_;
  double base_variance_;
};

// Per-filter mixture weights over the scale grid, each row on the simplex.
class MixtureWeights {
 public:
  using Table = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  // Rows must be non-negative and sum to one within 1e-12.
  explicit MixtureWeights(Table weights);

  static MixtureWeights uniform(int filters, int scales);
  // Row-wise normalized exponentials of unconstrained logits.
  static MixtureWeights from_logits(const Table& logits);

  // Canonical unconstrained parameters: log(weights). from_logits(logits())
  // reproduces the weights up to rounding.
  Table logits() const;

  const Table& table() const noexcept { return weights_; }
  int rows() const noexcept { return static_cast<int>(weights_.rows()); }
  int cols() const noexcept { return static_cast<int>(weights_.cols()); }
  std::span<const double> row(int m) const {
    return {weights_.row(m).data(), static_cast<size_t>(weights_.cols())};
  }

 private:
  Table weights_;
};

inline constexpr int kModelFormatVersion = 1;

class PriorModel {
 public:
  PriorModel(FilterBank filters, ScaleGrid grid, MixtureWeights weights,
             std::optional<std::string> preset_name = std::nullopt);

  const FilterBank& filters() const noexcept { return filters_; }
  const ScaleGrid& grid() const noexcept { return grid_; }
  const MixtureWeights& weights() const noexcept { return weights_; }
  const std::optional<std::string>& preset_name() const noexcept { return preset_name_; }
  int format_version() const noexcept { return kModelFormatVersion; }

  int num_filters() const noexcept { return filters_.num_filters(); }
  int num_scales() const noexcept { return grid_.size(); }
  // Filter taps plus mixture weights.
  int trainable_parameter_count() const noexcept;

  // Throws InvalidInput unless both image dimensions cover the footprint.
  void check_image(const Image& image) const;

 private:
  FilterBank filters_;
  ScaleGrid grid_;
  MixtureWeights weights_;
  std::optional<std::string> preset_name_;
};

bool operator==(const PriorModel& a, const PriorModel& b);

// Log-density terms of one filter's Gaussian mixture, precomputed so the
// per-response work is N exponentials at most.
class GmmActivation {
 public:
  GmmActivation(std::span<const double> weights, const ScaleGrid& grid);

  int size() const noexcept { return static_cast<int>(log_offset_.size()); }
  // log pi_n + log N(t; 0, v_n)
  double log_component(int n, double t) const noexcept {
    return log_offset_[n] - 0.5 * t * t * precision_[n];
  }
  double precision(int n) const noexcept { return precision_[n]; }
  // log sum_n pi_n N(t; 0, v_n), via log-sum-exp.
  double log_density(double t) const noexcept;
  // Posterior responsibilities over scales at response t; returns log_density(t).
  double responsibilities(double t, std::span<double> out) const noexcept;

 private:
  std::vector<double> log_offset_;
  std::vector<double> precision_;
};

// Response of filter m; same shape as the image.
Image filter_response(const PriorModel& model, const Image& image, int m);

double gmm_log_activation(double t, std::span<const double> weights, const ScaleGrid& grid);

// Sum over filters and positions of the log mixture activation: the log prior
// up to the (never computed) log partition function.
double log_prior_exponent(const PriorModel& model, const Image& image);

struct ExponentGradients {
  TapMatrix taps;                 // d/d tap, (filters x taps)
  MixtureWeights::Table logits;   // d/d unconstrained weight logits
};

ExponentGradients exponent_gradients(const PriorModel& model, const Image& image);

// bcnn1..bcnn5 with small zero-mean random taps drawn from `seed` and uniform
// weights.
PriorModel preset_model(std::string_view name, std::uint64_t seed, double base_variance = 1.0);
std::vector<std::string> preset_names();

// Structured-text (JSON) model file with full round-trip precision.
void save_model(const PriorModel& model, const std::filesystem::path& path);
PriorModel load_model(const std::filesystem::path& path);
std::string serialize_model(const PriorModel& model);
PriorModel parse_model(std::string_view text);

}  // namespace gibbscs
