#include "gibbscs/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "gibbscs/errors.hpp"

namespace gibbscs {
namespace fs = std::filesystem;

namespace {

std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

// Skips whitespace and '#' comments in a PNM header.
void skip_pnm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

long read_pnm_int(std::istream& in, const fs::path& path) {
  skip_pnm_space(in);
  long v = -1;
  if (!(in >> v) || v < 0) throw MalformedFile("bad PGM header in " + path.string());
  return v;
}

Image read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '2' && magic[1] != '5')) {
    throw MalformedFile("not a grayscale PGM: " + path.string());
  }
  const long cols = read_pnm_int(in, path);
  const long rows = read_pnm_int(in, path);
  const long maxval = read_pnm_int(in, path);
  if (cols == 0 || rows == 0 || maxval == 0 || maxval > 65535) {
    throw MalformedFile("bad PGM dimensions in " + path.string());
  }
  Image image(rows, cols);
  const double scale = 1.0 / static_cast<double>(maxval);
  if (magic[1] == '2') {
    for (Eigen::Index i = 0; i < image.size(); ++i) {
      long v = 0;
      if (!(in >> v)) throw MalformedFile("truncated PGM: " + path.string());
      image.data()[i] = static_cast<double>(v) * scale;
    }
    return image;
  }
  in.get();  // single whitespace byte after maxval
  const bool wide = maxval > 255;
  std::vector<unsigned char> raw(static_cast<size_t>(image.size()) * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw MalformedFile("truncated PGM: " + path.string());
  }
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    const double v = wide ? static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1])
                          : static_cast<double>(raw[i]);
    image.data()[i] = v * scale;
  }
  return image;
}

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pgm(const fs::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i) raw[i] = quantize(image.data()[i]);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw MalformedFile("corrupt PNG " + path.string() + ": " + png.message);
  }
  Image image(png.height, png.width);
  for (Eigen::Index i = 0; i < image.size(); ++i) image.data()[i] = buffer[i] / 255.0;
  return image;
}

void write_png(const fs::path& path, const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.cols());
  png.height = static_cast<png_uint_32>(image.rows());
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(static_cast<size_t>(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i) buffer[i] = quantize(image.data()[i]);
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

}  // namespace

Image unvec(const Vector& values, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 0 || cols < 0 || rows * cols != values.size()) {
    std::ostringstream msg;
    msg << "unvec: " << values.size() << " values cannot fill " << rows << "x" << cols;
    throw InvalidInput(msg.str());
  }
  return Eigen::Map<const Image>(values.data(), rows, cols);
}

Image read_image(const fs::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".png") return read_png(path);
  throw IoError("unsupported image format: " + path.string());
}

void write_image(const fs::path& path, const Image& image) {
  const std::string ext = lower_extension(path);
  if (ext == ".pgm") return write_pgm(path, image);
  if (ext == ".png") return write_png(path, image);
  throw IoError("unsupported image format: " + path.string());
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = lower_extension(entry.path());
    if (ext == ".pgm" || ext == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace gibbscs
