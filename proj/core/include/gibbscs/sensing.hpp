#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "gibbscs/image.hpp"

namespace gibbscs {

// Dense Gaussian sensing matrix with i.i.d. N(0, 1/M) entries. Regenerating
// from (seed, M, N) is bit-identical, so records store only those three.
class MeasurementOperator {
 public:
  static MeasurementOperator gaussian(Eigen::Index measurements, Eigen::Index pixels,
                                      std::uint64_t seed);
  // Wraps an explicit matrix (tests, identity or selection operators).
  static MeasurementOperator from_matrix(Matrix A, std::uint64_t seed = 0);

  const Matrix& matrix() const noexcept { return A_; }
  Eigen::Index measurements() const noexcept { return A_.rows(); }
  Eigen::Index pixels() const noexcept { return A_.cols(); }
  std::uint64_t seed() const noexcept { return seed_; }
  // False for operators wrapped by from_matrix(); their records cannot be saved.
  bool regenerable() const noexcept { return regenerable_; }
  double measurement_ratio() const noexcept {
    return static_cast<double>(A_.rows()) / static_cast<double>(A_.cols());
  }

 private:
  MeasurementOperator(Matrix A, std::uint64_t seed, bool regenerable)
      : A_(std::move(A)), seed_(seed), regenerable_(regenerable) {}

  Matrix A_;
  std::uint64_t seed_;
  bool regenerable_;
};

// Number of measurements for a ratio, rounded to nearest: round(mr * N).
Eigen::Index measurements_for_ratio(double mr, Eigen::Index pixels);

MeasurementOperator make_gaussian_matrix(Eigen::Index measurements, Eigen::Index pixels,
                                         std::uint64_t seed);

struct NoiseInfo {
  double snr_db;
  std::uint64_t seed;
};

struct MeasurementRecord {
  Vector y;
  std::uint64_t operator_seed = 0;
  bool regenerable = true;
  Eigen::Index measurements = 0;
  Eigen::Index pixels = 0;
  Eigen::Index image_rows = 0;
  Eigen::Index image_cols = 0;
  std::optional<NoiseInfo> noise;
  // Reference image path for evaluation; empty when unknown.
  std::string true_image;
};

MeasurementRecord measure(const MeasurementOperator& op, const Image& image);

// Adds i.i.d. Gaussian noise with variance ||y||^2 / (M * 10^(snr/10)).
MeasurementRecord add_noise_snr(const MeasurementRecord& record, double snr_db,
                                std::uint64_t seed);

// The noise vector add_noise_snr would draw for `clean`; used to verify replay.
Vector regenerate_noise(const MeasurementRecord& clean, double snr_db, std::uint64_t seed);

inline constexpr int kRecordFormatVersion = 1;

// Structured text (JSON): operator seed, dimensions, y, noise metadata.
std::string serialize_record(const MeasurementRecord& record);
MeasurementRecord parse_record(std::string_view text);
void save_record(const MeasurementRecord& record, const std::filesystem::path& path);
MeasurementRecord load_record(const std::filesystem::path& path);

// Rebuilds the operator a record was taken with.
MeasurementOperator operator_for(const MeasurementRecord& record);

}  // namespace gibbscs
