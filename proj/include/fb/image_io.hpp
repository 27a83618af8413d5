#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "fb/errors.hpp"
#include "fb/masks.hpp"
#include "fb/tensor.hpp"

namespace fb {

enum class ResizePolicy { NONE, SHORTEST_EDGE };

struct IngestOptions {
  ResizePolicy policy = ResizePolicy::NONE;
  int shortest_edge = 0;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

// Raw decoded image: 1 or 3 channels, values already scaled to [0, 1].
struct DecodedImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<double> data;  // row-major, channels fastest
};

inline DecodedImage decode_png(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8)) {
    throw IoError("not a PNG file: " + path);
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> row_ptrs;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int out_depth = png_get_bit_depth(png, info);
  const int out_channels = png_get_channels(png, info);
  if (out_depth != 8 && out_depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG bit depth in " + path);
  }
  if (out_channels != 1 && out_channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG channel count in " + path);
  }
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * h);
  row_ptrs.resize(h);
  for (png_uint_32 i = 0; i < h; ++i) row_ptrs[i] = buffer.data() + i * row_bytes;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  DecodedImage img;
  img.height = static_cast<int>(h);
  img.width = static_cast<int>(w);
  img.channels = out_channels;
  img.bit_depth = out_depth;
  img.data.resize(static_cast<std::size_t>(h) * w * out_channels);
  const double scale = out_depth == 8 ? 255.0 : 65535.0;
  for (png_uint_32 i = 0; i < h; ++i) {
    const png_byte* row = row_ptrs[i];
    for (std::size_t k = 0; k < static_cast<std::size_t>(w) * out_channels; ++k) {
      double v;
      if (out_depth == 8) {
        v = row[k];
      } else {
        v = (static_cast<unsigned>(row[2 * k]) << 8) | row[2 * k + 1];
      }
      img.data[static_cast<std::size_t>(i) * w * out_channels + k] = v / scale;
    }
  }
  return img;
}

struct JpegErrorJmp {
  jpeg_error_mgr mgr;
  jmp_buf env;
};

inline void jpeg_error_longjmp(j_common_ptr cinfo) {
  longjmp(reinterpret_cast<JpegErrorJmp*>(cinfo->err)->env, 1);
}

inline DecodedImage decode_jpeg(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegErrorJmp err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_longjmp;
  jpeg_create_decompress(&cinfo);
  DecodedImage img;
  std::vector<JSAMPLE> row;
  if (setjmp(err.env)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("JPEG decode failed: " + path);
  }
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  const int c = cinfo.output_components;
  if (c != 1 && c != 3) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("unsupported JPEG channel count in " + path);
  }
  img.height = h;
  img.width = w;
  img.channels = c;
  img.data.resize(static_cast<std::size_t>(h) * w * c);
  row.resize(static_cast<std::size_t>(w) * c);
  JSAMPROW rp = row.data();
  for (int i = 0; i < h; ++i) {
    jpeg_read_scanlines(&cinfo, &rp, 1);
    for (std::size_t k = 0; k < row.size(); ++k) {
      img.data[static_cast<std::size_t>(i) * w * c + k] = row[k] / 255.0;
    }
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

inline bool has_png_magic(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char magic[8] = {0};
  const std::size_t n = std::fread(magic, 1, 8, f.get());
  return n == 8 && png_sig_cmp(magic, 0, 8) == 0;
}

// Bilinear sample with half-pixel centers, clamped to the source extent.
inline double bilinear_at(const DecodedImage& img, double y, double x, int c) {
  const int h = img.height, w = img.width, ch = img.channels;
  const double yc = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(yc));
  const int x0 = static_cast<int>(std::floor(xc));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = yc - y0;
  const double fx = xc - x0;
  auto at = [&](int i, int j) {
    return img.data[(static_cast<std::size_t>(i) * w + j) * ch + c];
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace detail

// Target size for SHORTEST_EDGE(n): the short side becomes n, the long side
// scales by the same factor and rounds half away from zero.
inline std::pair<int, int> shortest_edge_dims(int height, int width, int edge) {
  if (edge <= 0) throw std::invalid_argument("shortest_edge must be positive");
  if (height <= width) {
    const int w = static_cast<int>(std::lround(
        static_cast<double>(width) * edge / static_cast<double>(height)));
    return {edge, std::max(1, w)};
  }
  const int h = static_cast<int>(std::lround(
      static_cast<double>(height) * edge / static_cast<double>(width)));
  return {std::max(1, h), edge};
}

// Decode an 8/16-bit PNG or 8-bit JPEG into [0, 1] intensities, optionally
// bilinearly resized so the shortest edge matches, then clamped to [0, 1].
inline ImageTensor ingest_image(const std::string& path,
                                const IngestOptions& opts = {}) {
  detail::DecodedImage img;
  if (detail::has_png_magic(path)) {
    img = detail::decode_png(path);
  } else {
    img = detail::decode_jpeg(path);
  }

  int out_h = img.height;
  int out_w = img.width;
  if (opts.policy == ResizePolicy::SHORTEST_EDGE) {
    std::tie(out_h, out_w) = shortest_edge_dims(img.height, img.width,
                                                opts.shortest_edge);
  }
  Tensor3 t(out_h, out_w, img.channels);
  if (out_h == img.height && out_w == img.width) {
    t.data().assign(img.data.begin(), img.data.end());
  } else {
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        const double y = (i + 0.5) * sy - 0.5;
        const double x = (j + 0.5) * sx - 0.5;
        for (int c = 0; c < img.channels; ++c) {
          t(i, j, c) = std::clamp(detail::bilinear_at(img, y, x, c), 0.0, 1.0);
        }
      }
    }
  }
  std::string id = path;
  const std::size_t slash = id.find_last_of('/');
  if (slash != std::string::npos) id = id.substr(slash + 1);
  const std::size_t dot = id.find_last_of('.');
  if (dot != std::string::npos) id = id.substr(0, dot);
  return ImageTensor(std::move(t), id);
}

// Segmentation map from a single-channel integer PNG (8/16-bit, unscaled
// class ids) or an .npy array file.
inline SegMap ingest_segmap_png(const std::string& path) {
  detail::DecodedImage img = detail::decode_png(path);
  if (img.channels != 1) {
    throw IoError("segmentation map must be single-channel: " + path);
  }
  SegMap sm;
  sm.height = img.height;
  sm.width = img.width;
  sm.labels.resize(img.data.size());
  // decode_png scaled by bit depth; undo to recover the raw integer ids.
  const double scale = img.bit_depth == 8 ? 255.0 : 65535.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    sm.labels[i] = static_cast<std::int32_t>(std::lround(img.data[i] * scale));
  }
  std::string id = path;
  const std::size_t slash = id.find_last_of('/');
  if (slash != std::string::npos) id = id.substr(slash + 1);
  const std::size_t dot = id.find_last_of('.');
  if (dot != std::string::npos) id = id.substr(0, dot);
  sm.image_id = id;
  return sm;
}

// Minimal .npy (format 1.0) reader/writer for 2-D integer arrays.
inline void write_npy_i32(const std::string& path,
                          const std::vector<std::int32_t>& data, int height,
                          int width) {
  std::string header = "{'descr': '<i4', 'fortran_order': False, 'shape': (" +
                       std::to_string(height) + ", " + std::to_string(width) +
                       "), }";
  const std::size_t base = 10 + header.size() + 1;
  const std::size_t pad = (64 - base % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');
  detail::FilePtr f = detail::open_file(path, "wb");
  const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  std::fwrite(magic, 1, 8, f.get());
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  const unsigned char hl[2] = {static_cast<unsigned char>(hlen & 0xff),
                               static_cast<unsigned char>(hlen >> 8)};
  std::fwrite(hl, 1, 2, f.get());
  std::fwrite(header.data(), 1, header.size(), f.get());
  std::fwrite(data.data(), sizeof(std::int32_t), data.size(), f.get());
}

inline SegMap ingest_segmap_npy(const std::string& path) {
  detail::FilePtr f = detail::open_file(path, "rb");
  unsigned char magic[8];
  if (std::fread(magic, 1, 8, f.get()) != 8 ||
      std::memcmp(magic, "\x93NUMPY", 6) != 0) {
    throw IoError("not an npy file: " + path);
  }
  unsigned char hl[2];
  if (std::fread(hl, 1, 2, f.get()) != 2) throw IoError("truncated npy header");
  const std::size_t hlen = hl[0] | (static_cast<std::size_t>(hl[1]) << 8);
  std::string header(hlen, '\0');
  if (std::fread(header.data(), 1, hlen, f.get()) != hlen) {
    throw IoError("truncated npy header");
  }
  auto find_field = [&](const std::string& key) {
    const std::size_t pos = header.find(key);
    if (pos == std::string::npos) throw IoError("malformed npy header");
    return pos + key.size();
  };
  const std::size_t dpos = find_field("'descr':");
  const std::size_t q1 = header.find('\'', dpos);
  const std::size_t q2 = header.find('\'', q1 + 1);
  const std::string descr = header.substr(q1 + 1, q2 - q1 - 1);
  if (header.find("'fortran_order': False") == std::string::npos) {
    throw IoError("npy: only C-order supported");
  }
  const std::size_t spos = find_field("'shape':");
  const std::size_t p1 = header.find('(', spos);
  const std::size_t p2 = header.find(')', p1);
  std::string shape = header.substr(p1 + 1, p2 - p1 - 1);
  std::vector<int> dims;
  std::size_t start = 0;
  while (start < shape.size()) {
    std::size_t comma = shape.find(',', start);
    std::string tok = shape.substr(start, comma == std::string::npos
                                              ? std::string::npos
                                              : comma - start);
    const std::size_t first = tok.find_first_not_of(" \t");
    if (first != std::string::npos) {
      tok = tok.substr(first);
      if (!tok.empty()) dims.push_back(std::stoi(tok));
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (dims.size() != 2) throw IoError("npy segmap must be 2-D: " + path);

  SegMap sm;
  sm.height = dims[0];
  sm.width = dims[1];
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1];
  sm.labels.resize(n);
  auto read_all = [&](void* dst, std::size_t bytes) {
    if (std::fread(dst, 1, bytes, f.get()) != bytes) {
      throw IoError("truncated npy payload: " + path);
    }
  };
  if (descr == "<i4") {
    read_all(sm.labels.data(), n * 4);
  } else if (descr == "|u1" || descr == "<u1") {
    std::vector<std::uint8_t> raw(n);
    read_all(raw.data(), n);
    for (std::size_t i = 0; i < n; ++i) sm.labels[i] = raw[i];
  } else if (descr == "<u2") {
    std::vector<std::uint16_t> raw(n);
    read_all(raw.data(), n * 2);
    for (std::size_t i = 0; i < n; ++i) sm.labels[i] = raw[i];
  } else {
    throw IoError("npy: unsupported dtype " + descr);
  }
  std::string id = path;
  const std::size_t slash = id.find_last_of('/');
  if (slash != std::string::npos) id = id.substr(slash + 1);
  const std::size_t dot = id.find_last_of('.');
  if (dot != std::string::npos) id = id.substr(0, dot);
  sm.image_id = id;
  return sm;
}

inline SegMap ingest_segmap(const std::string& path) {
  if (path.size() > 4 && path.substr(path.size() - 4) == ".npy") {
    return ingest_segmap_npy(path);
  }
  return ingest_segmap_png(path);
}

inline void write_png_rgb8(const std::string& path, const Tensor3& image) {
  if (image.channels() != 3 && image.channels() != 1) {
    throw std::invalid_argument("write_png_rgb8: need 1 or 3 channels");
  }
  detail::FilePtr f = detail::open_file(path, "wb");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path);
  }
  png_init_io(png, f.get());
  const int color = image.channels() == 3 ? PNG_COLOR_TYPE_RGB
                                          : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()),
               static_cast<png_uint_32>(image.height()), 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(image.width()) *
                            image.channels());
  for (int i = 0; i < image.height(); ++i) {
    for (int j = 0; j < image.width(); ++j) {
      for (int c = 0; c < image.channels(); ++c) {
        row[static_cast<std::size_t>(j) * image.channels() + c] =
            static_cast<png_byte>(std::lround(
                std::clamp(image(i, j, c), 0.0, 1.0) * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Deterministic palette: golden-angle hue walk.
inline void overlay_color(int index, double rgb[3]) {
  const double h = std::fmod(0.61803398875 * index, 1.0) * 6.0;
  const double s = 0.75, v = 0.95;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

// Figure-style overlay: white where no mask is predicted, masked pixels
// blend the image with a per-index color; later masks paint over earlier.
inline void render_overlay(const ImageTensor& image,
                           const std::vector<Mask2D>& masks,
                           const std::string& out_path) {
  Tensor3 canvas(image.height(), image.width(), 3, 1.0);
  auto intensity = [&](int i, int j, int c) {
    return image.channels() == 3 ? image.tensor()(i, j, c)
                                 : image.tensor()(i, j, 0);
  };
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const Mask2D& m = masks[k];
    if (m.height != image.height() || m.width != image.width()) {
      throw std::invalid_argument("render_overlay: mask shape mismatch");
    }
    double rgb[3];
    overlay_color(static_cast<int>(k), rgb);
    for (int i = 0; i < m.height; ++i) {
      for (int j = 0; j < m.width; ++j) {
        if (!m.at(i, j)) continue;
        for (int c = 0; c < 3; ++c) {
          canvas(i, j, c) = 0.5 * intensity(i, j, c) + 0.5 * rgb[c];
        }
      }
    }
  }
  write_png_rgb8(out_path, canvas);
}

}  // namespace fb
