#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cxrdiff/image.hpp"
#include "cxrdiff/ingestion.hpp"
#include "cxrdiff/metrics.hpp"
#include "cxrdiff/rng.hpp"

namespace cxrdiff {

// Desk-scale stand-in for frontal chest radiographs: a bright thorax with two
// dark lung fields and a spine. Effusion-positive images carry a bright blob
// at the base of the image-left lung.
struct SyntheticCxrOptions {
  int size = 64;
  double blob_amplitude = 0.45;
  double noise = 0.004;
};

namespace detail {

inline double smoothstep_edge(double d, double width) {
  // 1 inside (d < 0), 0 outside, logistic transition of the given width.
  return 1.0 / (1.0 + std::exp(d / width));
}

}  // namespace detail

inline ImageSample make_synthetic_cxr(std::uint64_t seed, std::size_t index, bool effusion,
                                      const SyntheticCxrOptions& opt = {}) {
  Rng rng(derive_seed(seed, 0xC52, index * 2 + (effusion ? 1 : 0)));
  const double s = opt.size / 64.0;
  ImageSample img = blank_image((effusion ? "pos_" : "neg_") + std::to_string(index), opt.size, opt.size, 255.0);

  const double body = 0.62 + 0.05 * rng.uniform(-1, 1);
  const double lung = 0.20 + 0.04 * rng.uniform(-1, 1);
  const double lx = (21 + 1.5 * rng.uniform(-1, 1)) * s, rx = (43 + 1.5 * rng.uniform(-1, 1)) * s;
  const double ly = (30 + 1.5 * rng.uniform(-1, 1)) * s;
  const double ax = (9.5 + 1.0 * rng.uniform(-1, 1)) * s, ay = (17 + 1.5 * rng.uniform(-1, 1)) * s;
  const double bx = (21 + 2 * rng.uniform(-1, 1)) * s, by = (43 + 2 * rng.uniform(-1, 1)) * s;
  const double edge = 1.6 * s;

  for (int y = 0; y < opt.size; ++y)
    for (int x = 0; x < opt.size; ++x) {
      const double cx = x - opt.size / 2.0, cy = y - opt.size / 2.0;
      const double r = std::sqrt(cx * cx / (0.9 * 0.9) + cy * cy) / (opt.size * 0.5);
      double v = 0.08 + (body - 0.08) * detail::smoothstep_edge((r - 0.92) * opt.size * 0.5, edge);
      auto lung_mask = [&](double ox) {
        const double dx = (x - ox) / ax, dy = (y - ly) / ay;
        return detail::smoothstep_edge((std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(ax, ay), edge);
      };
      const double m = std::max(lung_mask(lx), lung_mask(rx));
      v = v * (1 - m) + lung * m;
      const double spine = std::exp(-cx * cx / (2 * (2.2 * s) * (2.2 * s)));
      v += 0.12 * spine;
      if (effusion) {
        const double dx = x - bx, dy = y - by;
        v += opt.blob_amplitude * std::exp(-(dx * dx + dy * dy) / (2 * (4.5 * s) * (4.5 * s)));
      }
      v += opt.noise * rng.normal();
      img.at(x, y) = std::clamp(v, 0.0, 1.0);
    }

  LabelVector labels;
  labels.fill(LabelState::negative);
  if (effusion)
    labels[*class_index("Pleural Effusion")] = LabelState::positive;
  else
    labels[kNoFindingIndex] = LabelState::positive;
  img.labels = labels;
  return img;
}

inline std::vector<ImageSample> make_synthetic_cxrs(std::uint64_t seed, std::size_t count, bool effusion,
                                                    std::size_t first_index = 0,
                                                    const SyntheticCxrOptions& opt = {}) {
  std::vector<ImageSample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_synthetic_cxr(seed, first_index + i, effusion, opt));
  return out;
}

// The 5+5 adaptation set, captioned with the two evaluation prompts.
inline FinetuneSet make_synthetic_finetune_set(std::uint64_t seed, std::size_t negatives = 5,
                                               std::size_t positives = 5, const SyntheticCxrOptions& opt = {}) {
  return make_finetune_set(make_synthetic_cxrs(seed, negatives, false, 0, opt),
                           make_synthetic_cxrs(seed, positives, true, 0, opt));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Logistic regression on an 8x8 pooled image, fit to synthetic images with
// and without the effusion blob. Stands in for a pretrained classifier.
class ToyEffusionClassifier final : public ClassifierContract {
 public:
  static constexpr int kGrid = 8;

  ToyEffusionClassifier(Eigen::VectorXd weights, double bias) : w_(std::move(weights)), b_(bias) {}

  static ToyEffusionClassifier fit(std::uint64_t seed, std::size_t per_class = 60, int iterations = 400,
                                   double l2 = 1e-3) {
    std::vector<ImageSample> imgs = make_synthetic_cxrs(derive_seed(seed, 0xC1F), per_class, false, 1000);
    for (auto& p : make_synthetic_cxrs(derive_seed(seed, 0xC1F), per_class, true, 1000)) imgs.push_back(std::move(p));
    const auto n = static_cast<Eigen::Index>(imgs.size());
    Eigen::MatrixXd x(n, kGrid * kGrid);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x.row(i) = features(imgs[static_cast<std::size_t>(i)]).transpose();
      y[i] = i < static_cast<Eigen::Index>(per_class) ? 0.0 : 1.0;
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
    double b = 0.0;
    const double lr = 2.0;
    for (int it = 0; it < iterations; ++it) {
      Eigen::VectorXd p = (x * w).array() + b;
      for (Eigen::Index i = 0; i < n; ++i) p[i] = sigmoid(p[i]);
      const Eigen::VectorXd r = p - y;
      w -= lr * ((x.transpose() * r) / static_cast<double>(n) + l2 * w);
      b -= lr * r.mean();
    }
    return ToyEffusionClassifier(w, b);
  }

  static Eigen::VectorXd features(const ImageSample& img) {
    return (pool_image(img, kGrid).array() - 0.5).matrix() * 4.0;
  }

  std::string finding_id() const override { return "Pleural Effusion"; }
  double score(const ImageSample& img) const override { return sigmoid(features(img).dot(w_) + b_); }

  json to_json() const {
    return {{"kind", "toy-effusion-logistic"},
            {"grid", kGrid},
            {"weights", std::vector<double>(w_.data(), w_.data() + w_.size())},
            {"bias", b_}};
  }
  static ToyEffusionClassifier from_json(const json& j) {
    if (j.value("kind", "") != "toy-effusion-logistic") throw data_error("FormatError", "unknown classifier kind");
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != kGrid * kGrid) throw data_error("FormatError", "classifier weight count mismatch");
    return ToyEffusionClassifier(Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())),
                                 j.at("bias").get<double>());
  }

 private:
  Eigen::VectorXd w_;
  double b_;
};

}  // namespace cxrdiff
