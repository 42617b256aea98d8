#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dofkit/depth_align.hpp"
#include "dofkit/image.hpp"

namespace dofkit {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

[[noreturn]] inline void png_throw(png_structp, png_const_charp message) {
  throw IoError(std::string("png: ") + message);
}

inline void png_silent(png_structp, png_const_charp) {}

struct PngReadSource {
  std::span<const std::uint8_t> data;
  std::size_t offset = 0;
};

inline void png_read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->offset + length > src->data.size()) png_error(png, "truncated stream");
  std::memcpy(out, src->data.data() + src->offset, length);
  src->offset += length;
}

inline void png_write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

inline void png_flush_callback(png_structp) {}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_silent);
    if (!png) throw IoError("png: cannot create read struct");
    info = png_create_info_struct(png);
    if (!info) {
      png_destroy_read_struct(&png, nullptr, nullptr);
      throw IoError("png: cannot create info struct");
    }
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_silent);
    if (!png) throw IoError("png: cannot create write struct");
    info = png_create_info_struct(png);
    if (!info) {
      png_destroy_write_struct(&png, nullptr);
      throw IoError("png: cannot create info struct");
    }
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;
};

struct DecodedPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint16_t> samples;
};

inline DecodedPng decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("not a PNG stream");
  PngReader reader;
  PngReadSource source{bytes, 0};
  png_set_read_fn(reader.png, &source, png_read_callback);
  png_read_info(reader.png, reader.info);

  const int color_type = png_get_color_type(reader.png, reader.info);
  int bit_depth = png_get_bit_depth(reader.png, reader.info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(reader.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(reader.png);
  if (png_get_valid(reader.png, reader.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(reader.png);
  if (bit_depth == 16 && std::endian::native == std::endian::little) png_set_swap(reader.png);
  png_read_update_info(reader.png, reader.info);

  DecodedPng out;
  out.width = static_cast<int>(png_get_image_width(reader.png, reader.info));
  out.height = static_cast<int>(png_get_image_height(reader.png, reader.info));
  out.channels = png_get_channels(reader.png, reader.info);
  bit_depth = png_get_bit_depth(reader.png, reader.info);
  out.bit_depth = bit_depth;
  const std::size_t rowbytes = png_get_rowbytes(reader.png, reader.info);
  std::vector<std::uint8_t> raw(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = raw.data() + rowbytes * y;
  png_read_image(reader.png, rows.data());

  const std::size_t count = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(count);
  for (int y = 0; y < out.height; ++y) {
    const std::uint8_t* row = rows[y];
    for (std::size_t i = 0; i < static_cast<std::size_t>(out.width) * out.channels; ++i) {
      std::uint16_t v;
      if (bit_depth == 16) {
        std::memcpy(&v, row + 2 * i, 2);
      } else {
        v = row[i];
      }
      out.samples[static_cast<std::size_t>(y) * out.width * out.channels + i] = v;
    }
  }
  return out;
}

// Fixed filter and compression settings keep the byte stream reproducible.
inline Bytes encode_png(int width, int height, int color_type, int bit_depth,
                        std::span<const std::uint8_t> raw, std::size_t rowbytes) {
  PngWriter writer;
  Bytes out;
  png_set_write_fn(writer.png, &out, png_write_callback, png_flush_callback);
  png_set_IHDR(writer.png, writer.info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_filter(writer.png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_set_compression_level(writer.png, 6);
  png_write_info(writer.png, writer.info);
  if (bit_depth == 16 && std::endian::native == std::endian::little) png_set_swap(writer.png);
  for (int y = 0; y < height; ++y) {
    png_write_row(writer.png, const_cast<png_bytep>(raw.data() + rowbytes * y));
  }
  png_write_end(writer.png, nullptr);
  return out;
}

}  // namespace detail

inline std::uint8_t quantize8(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

// 8-bit RGB PNG with values mapped to [0, 1]. Gray and alpha inputs are
// expanded or dropped.
inline DisplayImage decode_png_rgb(std::span<const std::uint8_t> bytes) {
  const auto png = detail::decode_png(bytes);
  const double scale = png.bit_depth == 16 ? 65535.0 : 255.0;
  DisplayImage image(png.width, png.height, 3);
  auto dst = image.values();
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      const int src_c = png.channels >= 3 ? c : 0;
      dst[p * 3 + c] = png.samples[p * png.channels + src_c] / scale;
    }
  }
  return image;
}

inline Bytes encode_png_rgb(const DisplayImage& image) {
  if (image.channels() != 3) throw IoError("encode_png_rgb: expected 3 channels");
  std::vector<std::uint8_t> raw(image.values().size());
  std::transform(image.values().begin(), image.values().end(), raw.begin(), quantize8);
  return detail::encode_png(image.width(), image.height(), PNG_COLOR_TYPE_RGB, 8, raw,
                            static_cast<std::size_t>(image.width()) * 3);
}

inline DisplayImage read_png(const std::filesystem::path& path) {
  try {
    return decode_png_rgb(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_png(const std::filesystem::path& path, const DisplayImage& image) {
  write_file(path, encode_png_rgb(image));
}

// Image as it comes back from an 8-bit round trip.
inline DisplayImage quantize_image(const DisplayImage& image) {
  DisplayImage out = image;
  for (double& v : out.values()) v = quantize8(v) / 255.0;
  return out;
}

// 16-bit grayscale depth: depth = near + v / 65535 * (far - near).
struct DepthEncoding {
  double near_depth = 1.0;
  double far_depth = 10.0;
};

inline DepthMap decode_depth_png16(std::span<const std::uint8_t> bytes, const DepthEncoding& enc) {
  if (!(enc.near_depth > 0.0) || !(enc.far_depth >= enc.near_depth)) {
    throw IoError("depth PNG range must satisfy 0 < near <= far");
  }
  const auto png = detail::decode_png(bytes);
  if (png.channels != 1 || png.bit_depth != 16) throw IoError("depth PNG must be 16-bit grayscale");
  std::vector<double> values(png.samples.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = enc.near_depth + png.samples[i] / 65535.0 * (enc.far_depth - enc.near_depth);
  }
  return DepthMap(png.width, png.height, std::move(values));
}

inline Bytes encode_depth_png16(const DepthMap& depth, const DepthEncoding& enc) {
  const double span = enc.far_depth - enc.near_depth;
  std::vector<std::uint8_t> raw(depth.pixel_count() * 2);
  for (std::size_t i = 0; i < depth.pixel_count(); ++i) {
    const double t = span > 0.0 ? (depth.values()[i] - enc.near_depth) / span : 0.0;
    const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(t, 0.0, 1.0) * 65535.0));
    std::memcpy(raw.data() + 2 * i, &v, 2);
  }
  return detail::encode_png(depth.width(), depth.height(), PNG_COLOR_TYPE_GRAY, 16, raw,
                            static_cast<std::size_t>(depth.width()) * 2);
}

inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

// ---------------------------------------------------------------------------
// PFM (single channel "Pf"; rows stored bottom-to-top)

inline DepthMap decode_pfm(std::span<const std::uint8_t> bytes) {
  std::string header(bytes.begin(), bytes.begin() + std::min<std::size_t>(bytes.size(), 256));
  std::istringstream in(header);
  std::string magic;
  int width = 0;
  int height = 0;
  double scale = 0.0;
  if (!(in >> magic >> width >> height >> scale)) throw IoError("pfm: malformed header");
  if (magic != "Pf" && magic != "PF") throw IoError("pfm: bad magic '" + magic + "'");
  const int channels = magic == "PF" ? 3 : 1;
  if (width <= 0 || height <= 0 || scale == 0.0) throw IoError("pfm: invalid dimensions or scale");
  // Exactly one whitespace byte follows the scale token.
  const auto data_offset = static_cast<std::size_t>(in.tellg()) + 1;
  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() < data_offset + count * 4) throw IoError("pfm: truncated data");
  const bool little = scale < 0.0;
  std::vector<double> values(static_cast<std::size_t>(width) * height);
  for (int row = 0; row < height; ++row) {
    const int y = height - 1 - row;
    for (int x = 0; x < width; ++x) {
      const std::size_t i = (static_cast<std::size_t>(row) * width + x) * channels;
      std::uint32_t raw;
      std::memcpy(&raw, bytes.data() + data_offset + i * 4, 4);
      if (little != (std::endian::native == std::endian::little)) raw = byteswap32(raw);
      values[static_cast<std::size_t>(y) * width + x] = std::bit_cast<float>(raw);
    }
  }
  return DepthMap(width, height, std::move(values));
}

inline Bytes encode_pfm(const DepthMap& depth) {
  const std::string header =
      "Pf\n" + std::to_string(depth.width()) + " " + std::to_string(depth.height()) + "\n-1.0\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + depth.pixel_count() * 4);
  for (int row = 0; row < depth.height(); ++row) {
    const int y = depth.height() - 1 - row;
    for (int x = 0; x < depth.width(); ++x) {
      auto raw = std::bit_cast<std::uint32_t>(static_cast<float>(depth.at(x, y)));
      if constexpr (std::endian::native != std::endian::little) raw = byteswap32(raw);
      std::uint8_t b[4];
      std::memcpy(b, &raw, 4);
      out.insert(out.end(), b, b + 4);
    }
  }
  return out;
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
  try {
    return decode_pfm(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_pfm(const std::filesystem::path& path, const DepthMap& depth) {
  write_file(path, encode_pfm(depth));
}

// Dense depth from .pfm, or from a 16-bit .png with an explicit range.
inline DepthMap read_depth(const std::filesystem::path& path,
                           const std::optional<DepthEncoding>& png_range = std::nullopt) {
  const auto ext = path.extension().string();
  if (ext == ".pfm") return read_pfm(path);
  if (ext == ".png") {
    if (!png_range) throw IoError(path.string() + ": 16-bit depth PNG needs a declared depth range");
    return decode_depth_png16(read_file(path), *png_range);
  }
  throw IoError(path.string() + ": unsupported depth format (expected .pfm or .png)");
}

// ---------------------------------------------------------------------------
// Sparse depth: CSV "x,y,depth" lines or JSON.

inline SparseDepth parse_sparse_csv(const std::string& text, int width, int height) {
  SparseDepth sparse{width, height, {}};
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    double x = 0.0, y = 0.0, d = 0.0;
    if (!(fields >> x >> y >> d)) {
      if (sparse.samples.empty() && std::isalpha(static_cast<unsigned char>(line[first]))) continue;
      throw IoError("sparse csv line " + std::to_string(line_no) + ": expected x,y,depth");
    }
    if (x != std::floor(x) || y != std::floor(y)) {
      throw IoError("sparse csv line " + std::to_string(line_no) + ": pixel coordinates must be integers");
    }
    sparse.samples.push_back({static_cast<int>(x), static_cast<int>(y), d});
  }
  sparse.validate();
  return sparse;
}

// Accepts {"samples": [{"x":..,"y":..,"depth":..}, ...]} or a bare array of
// such objects or of [x, y, depth] triples.
inline SparseDepth parse_sparse_json(const std::string& text, int width, int height) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("sparse json: ") + e.what());
  }
  const auto& list = doc.is_object() ? doc.at("samples") : doc;
  if (!list.is_array()) throw IoError("sparse json: expected an array of samples");
  SparseDepth sparse{width, height, {}};
  for (const auto& item : list) {
    try {
      if (item.is_array()) {
        sparse.samples.push_back({item.at(0).get<int>(), item.at(1).get<int>(), item.at(2).get<double>()});
      } else {
        sparse.samples.push_back(
            {item.at("x").get<int>(), item.at("y").get<int>(), item.at("depth").get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("sparse json: ") + e.what());
    }
  }
  sparse.validate();
  return sparse;
}

inline SparseDepth read_sparse(const std::filesystem::path& path, int width, int height) {
  const auto text = read_text(path);
  if (path.extension() == ".json") return parse_sparse_json(text, width, height);
  return parse_sparse_csv(text, width, height);
}

}  // namespace dofkit
