#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "cxrdiff/image.hpp"
#include "cxrdiff/io.hpp"

namespace cxrdiff {

namespace detail {

[[noreturn]] inline void png_throw(png_structp, png_const_charp msg) {
  throw data_error("FormatError", std::string("png: ") + msg);
}
inline void png_warn(png_structp, png_const_charp) {}

inline void png_write_to_string(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}
inline void png_flush_noop(png_structp) {}

struct PngReadBuffer {
  const std::vector<char>* bytes;
  std::size_t pos = 0;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t len) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + len > buf->bytes->size()) png_error(png, "truncated file");
  std::memcpy(out, buf->bytes->data() + buf->pos, len);
  buf->pos += len;
}

}  // namespace detail

// Encodes an image as 8- or 16-bit grayscale PNG. No time or text chunks are
// written, so identical pixels give identical bytes.
inline std::string encode_png(const ImageSample& img, int bit_depth = 8) {
  if (bit_depth != 8 && bit_depth != 16)
    throw config_error("FormatError", "png bit depth must be 8 or 16");
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_throw,
                                            detail::png_warn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const double peak = bit_depth == 8 ? 255.0 : 65535.0;
  const std::size_t bytes_per = bit_depth / 8;
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * bytes_per);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * peak));
      if (bit_depth == 8) {
        row[x] = static_cast<png_byte>(q);
      } else {
        row[2 * x] = static_cast<png_byte>(q >> 8);
        row[2 * x + 1] = static_cast<png_byte>(q & 0xFF);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  return out;
}

// Decodes an 8- or 16-bit grayscale PNG; source_range is set from bit depth.
inline ImageSample decode_png(const std::vector<char>& bytes, std::string id) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw data_error("FormatError", id + ": not a PNG file");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_throw, detail::png_warn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  detail::PngReadBuffer buf{&bytes, 0};
  png_set_read_fn(png, &buf, detail::png_read_from_buffer);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY)
    throw data_error("FormatError", id + ": only grayscale PNG is supported");
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  png_read_update_info(png, info);

  ImageSample img;
  img.id = std::move(id);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.source_range = depth == 16 ? 65535.0 : 255.0;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x) {
      const unsigned q = depth == 16 ? (static_cast<unsigned>(row[2 * x]) << 8) | row[2 * x + 1]
                                     : row[x];
      img.at(x, y) = q / img.source_range;
    }
  }
  return img;
}

inline json labels_to_json(const LabelVector& labels) {
  json arr = json::array();
  for (auto s : labels) {
    if (s == LabelState::missing)
      arr.push_back(nullptr);
    else
      arr.push_back(static_cast<int>(s));
  }
  return arr;
}

inline LabelVector labels_from_json(const json& arr, const std::string& locus) {
  if (!arr.is_array() || arr.size() != kNumClasses)
    throw data_error("FormatError", locus + ": labels must be an array of 14 entries");
  LabelVector out{};
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    const auto& v = arr[i];
    if (v.is_null()) {
      out[i] = LabelState::missing;
    } else if (v.is_number_integer() && (v == -1 || v == 0 || v == 1)) {
      out[i] = static_cast<LabelState>(v.get<int>());
    } else {
      throw data_error("FormatError", locus + ": label entry " + std::to_string(i) +
                                          " must be -1, 0, 1 or null");
    }
  }
  return out;
}

// Raw format: <stem>.json sidecar {id, width, height, source_range[, labels]}
// plus <stem>.f32 holding little-endian float32 values in source units.
inline void write_raw_image(ArtifactSet& out, const fs::path& dir, const ImageSample& img) {
  json side = {{"id", img.id},
               {"width", img.width},
               {"height", img.height},
               {"source_range", img.source_range},
               {"payload", img.id + ".f32"}};
  if (img.labels) side["labels"] = labels_to_json(*img.labels);
  std::vector<double> scaled(img.pixels.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = img.pixels[i] * img.source_range;
  std::string payload;
  append_f32(payload, scaled.data(), scaled.size());
  out.add(dir / (img.id + ".f32"), std::move(payload));
  out.add_json(dir / (img.id + ".json"), side);
}

inline ImageSample read_raw_image(const fs::path& sidecar_path) {
  const json side = read_json_file(sidecar_path);
  const std::string locus = sidecar_path.string();
  ImageSample img;
  try {
    img.id = side.at("id").get<std::string>();
    img.width = side.at("width").get<int>();
    img.height = side.at("height").get<int>();
    img.source_range = side.at("source_range").get<double>();
  } catch (const json::exception& e) {
    throw data_error("FormatError", locus + ": " + e.what());
  }
  if (img.width <= 0 || img.height <= 0)
    throw data_error("FormatError", locus + ": non-positive dimensions");
  if (!(img.source_range > 0)) throw data_error("RangeError", locus + ": source_range must be > 0");
  if (side.contains("labels")) img.labels = labels_from_json(side["labels"], locus);
  const fs::path payload_path =
      sidecar_path.parent_path() / side.value("payload", sidecar_path.stem().string() + ".f32");
  const auto bytes = read_binary_file(payload_path);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() != 4 * n)
    throw data_error("FormatError", payload_path.string() + ": expected " + std::to_string(4 * n) +
                                        " bytes, found " + std::to_string(bytes.size()));
  const auto raw = decode_f32(bytes.data(), n);
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(raw[i] >= 0.0 && raw[i] <= img.source_range))
      throw data_error("RangeError", locus + ": pixel " + std::to_string(i) + " value " +
                                         std::to_string(raw[i]) + " outside [0, " +
                                         std::to_string(img.source_range) + "]");
    img.pixels[i] = raw[i] / img.source_range;
  }
  return img;
}

// A PNG record may carry an optional <stem>.json sidecar with id and labels.
inline ImageSample read_png_image(const fs::path& path) {
  ImageSample img = decode_png(read_binary_file(path), path.stem().string());
  fs::path side = path;
  side.replace_extension(".json");
  if (fs::exists(side)) {
    const json j = read_json_file(side);
    if (j.contains("id")) img.id = j["id"].get<std::string>();
    if (j.contains("labels")) img.labels = labels_from_json(j["labels"], side.string());
  }
  return img;
}

inline ImageSample read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return read_png_image(path);
  if (ext == ".json") return read_raw_image(path);
  throw data_error("FormatError", path.string() + ": unsupported image record (expected .png or .json)");
}

}  // namespace cxrdiff
