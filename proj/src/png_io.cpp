#include "maskdiff/png_io.hpp"

#include <png.h>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace maskdiff {
namespace {

struct WriteBuffer {
  std::vector<std::uint8_t> bytes;
};

void write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.insert(buf->bytes.end(), data, data + length);
}

void flush_callback(png_structp) {}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + length > cur->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->bytes.data() + cur->pos, length);
  cur->pos += length;
}

[[noreturn]] void error_callback(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
void warning_callback(png_structp, png_const_charp) {}

// Class palette: background black, then tubuli red, glomeruli blue, vessels
// green; remaining entries a gray ramp so every byte is a valid index.
std::array<png_color, 256> class_palette() {
  std::array<png_color, 256> p{};
  const png_color head[] = {{0, 0, 0}, {220, 40, 40}, {40, 70, 220}, {40, 180, 60}, {230, 200, 40}, {180, 60, 200}};
  for (int i = 0; i < 256; ++i) {
    const auto g = static_cast<png_byte>(i);
    p[i] = {g, g, g};
  }
  for (std::size_t i = 0; i < std::size(head); ++i) p[i] = head[i];
  return p;
}

std::vector<std::uint8_t> encode(int width, int height, int color_type, const std::vector<std::uint8_t>& rows,
                                 int channels, bool palette) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  if (!png) throw IoError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  WriteBuffer buf;
  try {
    png_set_write_fn(png, &buf, write_callback, flush_callback);
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    if (palette) {
      auto pal = class_palette();
      png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
    }
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(rows.data() + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

struct Decoded {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Decodes to 8-bit samples. Palette images keep their indices unless expand_palette.
Decoded decode(std::span<const std::uint8_t> bytes, bool expand_palette) {
  if (!has_png_signature(bytes)) throw IoError("png: missing PNG signature");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  if (!png) throw IoError("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{bytes, 0};
  Decoded out;
  try {
    png_set_read_fn(png, &cur, read_callback);
    png_read_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.color_type = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (depth < 8) png_set_packing(png);
    if (out.color_type == PNG_COLOR_TYPE_PALETTE && expand_palette) png_set_palette_to_rgb(png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY && depth < 8 && expand_palette) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    out.channels = png_get_channels(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    out.pixels.resize(rowbytes * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

bool has_png_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

std::uint8_t to_byte(float v) {
  const double x = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(x, 0.0, 255.0));
}

float from_byte(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

std::vector<std::uint8_t> encode_png_rgb(const Tensor<float>& image) {
  if (image.n() != 1 || image.c() != 3) throw ShapeError("encode_png_rgb expects (1,3,H,W), got " + image.shape().str());
  const int h = image.h(), w = image.w();
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) rows[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.at(0, c, y, x));
  return encode(w, h, PNG_COLOR_TYPE_RGB, rows, 3, false);
}

Tensor<float> decode_png_rgb(std::span<const std::uint8_t> bytes) {
  Decoded d = decode(bytes, true);
  if (d.channels != 3 && d.channels != 4 && d.channels != 1) {
    throw IoError("png: unsupported channel count " + std::to_string(d.channels));
  }
  Tensor<float> t(Shape{1, 3, d.height, d.width});
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = d.channels == 1 ? 0 : c;
        t.at(0, c, y, x) = from_byte(d.pixels[(static_cast<std::size_t>(y) * d.width + x) * d.channels + src]);
      }
  return t;
}

std::vector<std::uint8_t> encode_png_mask(const LabelMap& mask) {
  if (mask.height < 1 || mask.width < 1) throw ShapeError("encode_png_mask: empty mask");
  return encode(mask.width, mask.height, PNG_COLOR_TYPE_PALETTE, mask.labels, 1, true);
}

LabelMap decode_png_mask(std::span<const std::uint8_t> bytes) {
  Decoded d = decode(bytes, false);
  if (!(d.color_type == PNG_COLOR_TYPE_PALETTE || d.color_type == PNG_COLOR_TYPE_GRAY) || d.channels != 1) {
    throw IoError("png: mask must be an 8-bit indexed or grayscale image");
  }
  LabelMap m(d.height, d.width);
  m.labels = std::move(d.pixels);
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Tensor<float> read_image(const std::filesystem::path& path) { return decode_png_rgb(read_file(path)); }
void write_image(const std::filesystem::path& path, const Tensor<float>& image) {
  write_file(path, encode_png_rgb(image));
}
LabelMap read_mask(const std::filesystem::path& path) { return decode_png_mask(read_file(path)); }
void write_mask(const std::filesystem::path& path, const LabelMap& mask) { write_file(path, encode_png_mask(mask)); }

}  // namespace maskdiff
