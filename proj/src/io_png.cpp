#include "glimpse/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace glimpse::io {

ImageD read_png(const fs::path& path, int channels) {
  if (channels != 0 && channels != 1 && channels != 3) throw InvalidParameter("read_png: channels must be 0, 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    const std::string msg = img.message;
    if (!fs::exists(path)) throw IoError("cannot open " + path.string());
    throw FormatError(path.string() + ": " + msg);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  const int c = channels != 0 ? channels : (gray ? 1 : 3);
  img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError(path.string() + ": " + msg);
  }
  ImageD out(static_cast<int>(img.width), static_cast<int>(img.height), c);
  for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data[i] = buf[static_cast<std::size_t>(i)] / 255.0;
  return out;
}

void write_png(const fs::path& path, const ImageD& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidParameter("write_png: images must have 1 or 3 channels");
  std::vector<png_byte> buf(static_cast<std::size_t>(image.data.size()));
  for (Eigen::Index i = 0; i < image.data.size(); ++i) {
    const double v = std::isfinite(image.data[i]) ? std::clamp(image.data[i], 0.0, 1.0) : 0.0;
    buf[static_cast<std::size_t>(i)] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write " + path.string() + ": " + img.message);
  }
}

void write_png(const fs::path& path, const ImageF& image) { write_png(path, image.cast<double>()); }

}  // namespace glimpse::io
