#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cxrdiff/errors.hpp"

namespace cxrdiff {

inline constexpr std::size_t kNumClasses = 14;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "Atelectasis",      "Cardiomegaly",  "Consolidation",    "Edema",
    "Enlarged Cardiomediastinum",        "Fracture",         "Lung Lesion",
    "Lung Opacity",     "No Finding",    "Pleural Effusion", "Pleural Other",
    "Pneumonia",        "Pneumothorax",  "Support Devices"};

inline constexpr std::size_t kNoFindingIndex = 8;

inline std::optional<std::size_t> class_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (kClassNames[i] == name) return i;
  return std::nullopt;
}

// Labeler output alphabet. Integer values follow the report JSON encoding.
enum class LabelState : int { negative = 0, positive = 1, uncertain = -1, missing = 2 };

using LabelVector = std::array<LabelState, kNumClasses>;
using BinaryLabels = std::array<int, kNumClasses>;

// A grayscale pixel grid, values normalized to [0,1]. source_range is the
// peak of the original encoding (255 for 8-bit, 65535 for 16-bit).
struct ImageSample {
  std::string id;
  int width = 0;
  int height = 0;
  double source_range = 1.0;
  std::vector<double> pixels;  // row-major, size width*height
  std::optional<LabelVector> labels;

  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }

  void validate() const {
    if (width <= 0 || height <= 0)
      throw data_error("FormatError", "image " + id + ": non-positive dimensions");
    if (static_cast<std::size_t>(width) * height != pixels.size())
      throw data_error("FormatError", "image " + id + ": pixel count does not match width*height");
    if (!(source_range > 0))
      throw data_error("RangeError", "image " + id + ": source_range must be positive");
    for (double p : pixels)
      if (!(p >= 0.0 && p <= 1.0))
        throw data_error("RangeError", "image " + id + ": pixel outside [0,1]");
  }
};

inline ImageSample blank_image(std::string id, int width, int height, double source_range = 255.0) {
  ImageSample img;
  img.id = std::move(id);
  img.width = width;
  img.height = height;
  img.source_range = source_range;
  img.pixels.assign(static_cast<std::size_t>(width) * height, 0.0);
  return img;
}

inline void require_same_shape(const ImageSample& a, const ImageSample& b) {
  if (a.width != b.width || a.height != b.height)
    throw data_error("ShapeMismatch", a.id + " is " + std::to_string(a.width) + "x" +
                                          std::to_string(a.height) + ", " + b.id + " is " +
                                          std::to_string(b.width) + "x" + std::to_string(b.height));
}

}  // namespace cxrdiff
