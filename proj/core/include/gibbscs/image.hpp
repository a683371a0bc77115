#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <span>
#include <vector>

namespace gibbscs {

// Grayscale image in double precision. Storage is row-major, which fixes the
// flattening convention used by every linear operator in the library.
using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline Eigen::Map<const Vector> vec(const Image& image) {
  return {image.data(), image.size()};
}
inline Eigen::Map<Vector> vec(Image& image) { return {image.data(), image.size()}; }

// Inverse of vec(); throws InvalidInput when rows*cols != values.size().
Image unvec(const Vector& values, Eigen::Index rows, Eigen::Index cols);

// Reads an 8- or 16-bit grayscale PGM (P2/P5) or PNG file, scaled to [0,1].
// Color PNGs are converted with Rec. 601 luma weights.
Image read_image(const std::filesystem::path& path);

// Writes an image clamped to [0,1] as 8-bit PGM or PNG (chosen by extension).
void write_image(const std::filesystem::path& path, const Image& image);

// Sorted list of *.pgm and *.png files directly inside `dir`.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace gibbscs
