#include <cstring>
#include <fstream>

#include "vitpose/data.hpp"

#ifdef VITPOSE_WITH_PNG
#include <png.h>
#endif

namespace vitpose {

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  b[at] = v & 0xff;
  b[at + 1] = (v >> 8) & 0xff;
}
void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = (v >> (8 * i)) & 0xff;
}
std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[at + i];
  return v;
}
std::uint16_t get_u16(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

std::string extension(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot == std::string::npos) return {};
  std::string e = path.substr(dot + 1);
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace

void write_bmp(const std::string& path, const Image& img) {
  const std::size_t row = (img.width * 3 + 3) / 4 * 4;
  std::vector<std::uint8_t> b(54 + row * img.height, 0);
  b[0] = 'B';
  b[1] = 'M';
  put_u32(b, 2, static_cast<std::uint32_t>(b.size()));
  put_u32(b, 10, 54);
  put_u32(b, 14, 40);
  put_u32(b, 18, static_cast<std::uint32_t>(img.width));
  put_u32(b, 22, static_cast<std::uint32_t>(img.height));
  put_u16(b, 26, 1);
  put_u16(b, 28, 24);
  put_u32(b, 34, static_cast<std::uint32_t>(row * img.height));
  for (std::size_t y = 0; y < img.height; ++y) {
    std::uint8_t* dst = &b[54 + (img.height - 1 - y) * row];
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint8_t* p = img.px(x, y);
      dst[3 * x] = p[2];
      dst[3 * x + 1] = p[1];
      dst[3 * x + 2] = p[0];
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Image read_bmp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw std::runtime_error(path + ": not a BMP file");
  const std::uint32_t offset = get_u32(b, 10);
  const auto width = static_cast<std::int32_t>(get_u32(b, 18));
  const auto height = static_cast<std::int32_t>(get_u32(b, 22));
  if (get_u16(b, 28) != 24 || get_u32(b, 30) != 0) {
    throw std::runtime_error(path + ": only uncompressed 24-bit BMP is supported");
  }
  if (width <= 0 || height == 0) throw std::runtime_error(path + ": bad BMP dimensions");
  const bool top_down = height < 0;
  Image img(static_cast<std::size_t>(width), static_cast<std::size_t>(top_down ? -height : height));
  const std::size_t row = (img.width * 3 + 3) / 4 * 4;
  if (b.size() < offset + row * img.height) throw std::runtime_error(path + ": truncated BMP");
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::uint8_t* src = &b[offset + (top_down ? y : img.height - 1 - y) * row];
    for (std::size_t x = 0; x < img.width; ++x) {
      std::uint8_t* p = img.px(x, y);
      p[0] = src[3 * x + 2];
      p[1] = src[3 * x + 1];
      p[2] = src[3 * x];
    }
  }
  return img;
}

#ifdef VITPOSE_WITH_PNG
bool png_supported() { return true; }

Image read_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) throw std::runtime_error(path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image img(pi.width, pi.height);
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw std::runtime_error(path + ": " + pi.message);
  }
  return img;
}

void write_png(const std::string& path, const Image& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw std::runtime_error(path + ": " + pi.message);
  }
}
#else
bool png_supported() { return false; }
Image read_png(const std::string& path) { throw std::runtime_error(path + ": built without PNG support"); }
void write_png(const std::string& path, const Image&) {
  throw std::runtime_error(path + ": built without PNG support");
}
#endif

Image read_image(const std::string& path) {
  const std::string e = extension(path);
  if (e == "bmp") return read_bmp(path);
  if (e == "png") return read_png(path);
  throw std::runtime_error(path + ": unsupported image format '" + e + "' (PNG and BMP only)");
}

void write_image(const std::string& path, const Image& img) {
  const std::string e = extension(path);
  if (e == "bmp") return write_bmp(path, img);
  if (e == "png") return write_png(path, img);
  throw std::runtime_error(path + ": unsupported image format '" + e + "' (PNG and BMP only)");
}

Tensor image_to_tensor(const Image& img) {
  Tensor t({3, img.height, img.width});
  double* d = t.data();
  const std::size_t plane = img.height * img.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) d[c * plane + i] = img.rgb[3 * i + c] / 255.0;
  }
  return t;
}

}  // namespace vitpose
