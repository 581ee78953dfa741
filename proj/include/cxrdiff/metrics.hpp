#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cxrdiff/image.hpp"
#include "cxrdiff/ingestion.hpp"
#include "cxrdiff/io.hpp"
#include "cxrdiff/rng.hpp"

namespace cxrdiff {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Pairwise image metrics

// Root-mean-square error in source_range units (the first image's range).
inline double rmse(const ImageSample& a, const ImageSample& b) {
  require_same_shape(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.pixels.size())) * a.source_range;
}

// Peak is source_range on denormalized values, i.e. 1.0 on normalized pixels.
// Identical images give +inf.
inline double psnr(const ImageSample& a, const ImageSample& b) {
  const double e = rmse(a, b);
  if (e == 0.0) return kInf;
  return 20.0 * std::log10(a.source_range / e);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2.0 * sigma * sigma));
      w[static_cast<std::size_t>(y) * size + x] = v;
      total += v;
    }
  for (double& v : w) v /= total;
  return w;
}

// Mean of the local SSIM map over every fully-contained window position.
inline double ssim(const ImageSample& a, const ImageSample& b, const SsimOptions& opt = {}) {
  require_same_shape(a, b);
  if (std::min(a.width, a.height) < opt.window)
    throw data_error("ImageTooSmall", a.id + ": smaller than the " + std::to_string(opt.window) +
                                          "-pixel SSIM window");
  const auto w = gaussian_window(opt.window, opt.sigma);
  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  const int nx = a.width - opt.window + 1;
  const int ny = a.height - opt.window + 1;
  double total = 0.0;
  for (int oy = 0; oy < ny; ++oy) {
    for (int ox = 0; ox < nx; ++ox) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = 0; y < opt.window; ++y)
        for (int x = 0; x < opt.window; ++x) {
          const double wt = w[static_cast<std::size_t>(y) * opt.window + x];
          const double pa = a.at(ox + x, oy + y);
          const double pb = b.at(ox + x, oy + y);
          ma += wt * pa;
          mb += wt * pb;
          saa += wt * pa * pa;
          sbb += wt * pb * pb;
          sab += wt * pa * pb;
        }
      const double va = saa - ma * ma;
      const double vb = sbb - mb * mb;
      const double cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / (static_cast<double>(nx) * ny);
}

struct PairMetrics {
  std::string id;
  double rmse = 0;
  double psnr = 0;
  double ssim = 0;
};

inline PairMetrics pair_metrics(const ImageSample& a, const ImageSample& b) {
  return {a.id, rmse(a, b), psnr(a, b), ssim(a, b)};
}

// ---------------------------------------------------------------------------
// Fréchet distance between Gaussian fits of two feature sets

struct FeatureSet {
  Eigen::MatrixXd features;  // N x F
  std::string extractor_id;
};

namespace detail {

inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

// Returns nullopt when the eigendecomposition fails or reports eigenvalues
// that are negative beyond rounding.
inline std::optional<double> trace_sqrt_product(const Eigen::MatrixXd& sp, const Eigen::MatrixXd& sq) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(sp);
  if (ep.info() != Eigen::Success) return std::nullopt;
  const double scale = std::max({1.0, sp.diagonal().cwiseAbs().maxCoeff(), sq.diagonal().cwiseAbs().maxCoeff()});
  const double tol = 1e-9 * scale;
  Eigen::VectorXd ev = ep.eigenvalues();
  if (!ev.allFinite() || ev.minCoeff() < -tol) return std::nullopt;
  const Eigen::VectorXd root = ev.cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sp_half = ep.eigenvectors() * root.asDiagonal() * ep.eigenvectors().transpose();
  Eigen::MatrixXd m = sp_half * sq * sp_half;
  m = (0.5 * (m + m.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  if (em.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd mv = em.eigenvalues();
  if (!mv.allFinite() || mv.minCoeff() < -tol * scale) return std::nullopt;
  return mv.cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace detail

// ‖μp−μq‖² + Tr(Σp + Σq − 2(ΣpΣq)^{1/2}). The trace of the matrix root is
// taken from the eigenvalues of Σp^{1/2} Σq Σp^{1/2}; a 1e-6 diagonal jitter
// is added once if that decomposition fails.
inline double fid(const FeatureSet& p, const FeatureSet& q) {
  if (p.features.cols() != q.features.cols())
    throw data_error("DimensionMismatch", "feature dimensions " + std::to_string(p.features.cols()) +
                                              " and " + std::to_string(q.features.cols()));
  if (p.extractor_id != q.extractor_id)
    throw data_error("DimensionMismatch", "feature sets come from different extractors (" +
                                              p.extractor_id + ", " + q.extractor_id + ")");
  if (p.features.rows() < 2 || q.features.rows() < 2)
    throw data_error("DegenerateCovariance", "FID needs at least two samples per set");
  if (!p.features.allFinite() || !q.features.allFinite())
    throw numerical_error("NonFinite", "feature matrix has non-finite entries");

  const Eigen::VectorXd mp = p.features.colwise().mean().transpose();
  const Eigen::VectorXd mq = q.features.colwise().mean().transpose();
  Eigen::MatrixXd sp = detail::sample_covariance(p.features, mp);
  Eigen::MatrixXd sq = detail::sample_covariance(q.features, mq);

  auto tr_root = detail::trace_sqrt_product(sp, sq);
  if (!tr_root) {
    const auto jitter = 1e-6 * Eigen::MatrixXd::Identity(sp.rows(), sp.cols());
    sp += jitter;
    sq += jitter;
    tr_root = detail::trace_sqrt_product(sp, sq);
    if (!tr_root) throw numerical_error("DegenerateCovariance", "matrix square root failed after jitter");
  }
  const double value = (mp - mq).squaredNorm() + sp.trace() + sq.trace() - 2.0 * *tr_root;
  return std::max(0.0, value);
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw data_error("DimensionMismatch", "vectors of length " + std::to_string(u.size()) + " and " +
                                              std::to_string(v.size()));
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw data_error("ZeroVector", "cosine similarity of a zero vector");
  return std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
}

inline double cosine_similarity(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  return cosine_similarity(std::span<const double>(u.data(), static_cast<std::size_t>(u.size())),
                           std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

// ---------------------------------------------------------------------------
// Classification

struct Confusion {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  long total() const { return tp + fp + fn + tn; }
};

struct ClassificationReport {
  std::optional<double> auc;  // nullopt when only one class is present
  double accuracy = 0, f1 = 0, precision = 0, recall = 0;
  Confusion confusion;
  double prevalence = 0;
};

inline ClassificationReport report_from_confusion(const Confusion& c) {
  ClassificationReport r;
  r.confusion = c;
  const double n = static_cast<double>(c.total());
  r.accuracy = n > 0 ? static_cast<double>(c.tp + c.tn) / n : 0.0;
  r.precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  r.recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  r.prevalence = n > 0 ? static_cast<double>(c.tp + c.fn) / n : 0.0;
  return r;
}

// Mann–Whitney U / (n1 n0) with average ranks, so each tied
// positive/negative pair contributes 0.5.
inline std::optional<double> auc_mann_whitney(std::span<const double> scores, std::span<const int> truth) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double n1 = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (truth[i]) {
      n1 += 1;
      rank_sum += rank[i];
    }
  const double n0 = static_cast<double>(n) - n1;
  if (n1 == 0 || n0 == 0) return std::nullopt;
  return (rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0);
}

inline constexpr double kDecisionThreshold = 0.5;

inline ClassificationReport classification_report(std::span<const double> scores, std::span<const int> truth,
                                                  double threshold = kDecisionThreshold) {
  if (scores.size() != truth.size())
    throw data_error("LengthMismatch", std::to_string(scores.size()) + " scores vs " +
                                           std::to_string(truth.size()) + " labels");
  if (scores.empty()) throw data_error("LengthMismatch", "classification report needs at least one sample");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = truth[i] != 0;
    if (pred && pos) ++c.tp;
    else if (pred) ++c.fp;
    else if (pos) ++c.fn;
    else ++c.tn;
  }
  auto r = report_from_confusion(c);
  r.auc = auc_mann_whitney(scores, truth);
  return r;
}

inline json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

inline json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline json to_json(const ClassificationReport& r) {
  return {{"auc", optional_number(r.auc)},
          {"accuracy", r.accuracy},
          {"f1", r.f1},
          {"precision", r.precision},
          {"recall", r.recall},
          {"prevalence", r.prevalence},
          {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}}}};
}

// ---------------------------------------------------------------------------
// Model contracts used by the evaluation pipelines

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual Eigen::VectorXd extract(const ImageSample& img) const = 0;

  FeatureSet features(std::span<const ImageSample> images) const {
    FeatureSet fs;
    fs.extractor_id = id();
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Eigen::VectorXd f = extract(images[i]);
      if (i == 0) fs.features.resize(static_cast<Eigen::Index>(images.size()), f.size());
      fs.features.row(static_cast<Eigen::Index>(i)) = f.transpose();
    }
    return fs;
  }
};

class ClassifierContract {
 public:
  virtual ~ClassifierContract() = default;
  virtual std::string finding_id() const = 0;
  // Calibrated probability in [0,1] that the finding is present.
  virtual double score(const ImageSample& img) const = 0;
};

// Area-average pooling onto a fixed grid; works for any image at least
// grid x grid in size.
inline Eigen::VectorXd pool_image(const ImageSample& img, int grid) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(grid * grid);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(grid * grid);
  for (int y = 0; y < img.height; ++y) {
    const int gy = std::min(grid - 1, y * grid / img.height);
    for (int x = 0; x < img.width; ++x) {
      const int gx = std::min(grid - 1, x * grid / img.width);
      out[gy * grid + gx] += img.at(x, y);
      count[gy * grid + gx] += 1;
    }
  }
  return out.cwiseQuotient(count.cwiseMax(1.0));
}

// Seeded random projection of an 8x8 pooled image followed by tanh.
class ToyFeatureExtractor final : public FeatureExtractor {
 public:
  explicit ToyFeatureExtractor(std::uint64_t seed = 7, int features = 16, int grid = 8)
      : seed_(seed), grid_(grid), weights_(features, grid * grid), bias_(features) {
    Rng rng(derive_seed(seed, 0xFEA7));
    const double scale = 4.0 / grid;
    for (Eigen::Index r = 0; r < weights_.rows(); ++r)
      for (Eigen::Index c = 0; c < weights_.cols(); ++c) weights_(r, c) = scale * rng.normal();
    for (Eigen::Index r = 0; r < bias_.size(); ++r) bias_[r] = 0.1 * rng.normal();
  }

  std::string id() const override {
    return "toy-linear-tanh/seed=" + std::to_string(seed_) + "/f=" + std::to_string(weights_.rows());
  }

  Eigen::VectorXd extract(const ImageSample& img) const override {
    const Eigen::VectorXd pooled = pool_image(img, grid_).array() - 0.5;
    return (weights_ * pooled + bias_).array().tanh();
  }

 private:
  std::uint64_t seed_;
  int grid_;
  Eigen::MatrixXd weights_;
  Eigen::VectorXd bias_;
};

// ---------------------------------------------------------------------------
// Reconstruction evaluation

struct SummaryStats {
  double mean = 0, sd = 0, median = 0, min = 0, max = 0;
  std::size_t n = 0;
};

inline SummaryStats summarize(std::vector<double> v) {
  SummaryStats s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1 && std::isfinite(s.mean)) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline json to_json(const SummaryStats& s) {
  return {{"mean", number_or_inf(s.mean)},     {"sd", number_or_inf(s.sd)},
          {"median", number_or_inf(s.median)}, {"min", number_or_inf(s.min)},
          {"max", number_or_inf(s.max)},       {"n", s.n}};
}

struct ClassRow {
  std::string finding;
  double prevalence = 0;
  ClassificationReport original;
  ClassificationReport reconstructed;
};

struct ReconstructionReport {
  std::vector<PairMetrics> pairs;
  SummaryStats rmse, psnr, ssim, cosine;
  std::vector<double> cosines;
  std::vector<double> batch_fid;
  double fid_mean = 0;
  std::string extractor_id;
  std::vector<ClassRow> classes;
};

inline constexpr std::size_t kFidBatchSize = 32;

// Pairs originals with reconstructions by id, then computes per-pair metrics,
// FID over consecutive batches (in id order), embedding cosine similarity,
// and optional per-finding classification on both sets.
inline ReconstructionReport reconstruction_report(
    std::vector<ImageSample> originals, std::vector<ImageSample> reconstructions, const FeatureExtractor& embedder,
    std::span<const ClassifierContract* const> classifiers = {}, std::size_t fid_batch = kFidBatchSize) {
  auto by_id = [](const auto& a, const auto& b) { return a.id < b.id; };
  std::sort(originals.begin(), originals.end(), by_id);
  std::sort(reconstructions.begin(), reconstructions.end(), by_id);
  for (std::size_t i = 0; i < std::max(originals.size(), reconstructions.size()); ++i) {
    if (i >= originals.size())
      throw data_error("IdMismatch", "reconstruction " + reconstructions[i].id + " has no original");
    if (i >= reconstructions.size())
      throw data_error("IdMismatch", "original " + originals[i].id + " has no reconstruction");
    if (originals[i].id != reconstructions[i].id) {
      const auto& o = originals[i].id;
      const auto& r = reconstructions[i].id;
      throw data_error("IdMismatch", o < r ? "original " + o + " has no reconstruction"
                                           : "reconstruction " + r + " has no original");
    }
  }
  if (originals.empty()) throw data_error("IdMismatch", "no image pairs");

  ReconstructionReport rep;
  rep.extractor_id = embedder.id();
  std::vector<double> rm, ps, ss;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    try {
      rep.pairs.push_back(pair_metrics(originals[i], reconstructions[i]));
    } catch (const Error& e) {
      throw Error(e.family(), e.kind(), "pair " + originals[i].id + ": " + e.what());
    }
    rm.push_back(rep.pairs.back().rmse);
    ps.push_back(rep.pairs.back().psnr);
    ss.push_back(rep.pairs.back().ssim);
  }
  rep.rmse = summarize(rm);
  rep.psnr = summarize(ps);
  rep.ssim = summarize(ss);

  const FeatureSet fo = embedder.features(originals);
  const FeatureSet fr = embedder.features(reconstructions);
  for (Eigen::Index i = 0; i < fo.features.rows(); ++i)
    rep.cosines.push_back(cosine_similarity(Eigen::VectorXd(fo.features.row(i).transpose()),
                                            Eigen::VectorXd(fr.features.row(i).transpose())));
  rep.cosine = summarize(rep.cosines);

  const auto n = static_cast<Eigen::Index>(originals.size());
  for (Eigen::Index start = 0; start < n; start += static_cast<Eigen::Index>(fid_batch)) {
    const Eigen::Index len = std::min<Eigen::Index>(static_cast<Eigen::Index>(fid_batch), n - start);
    if (len < 2) continue;
    FeatureSet a{fo.features.middleRows(start, len), fo.extractor_id};
    FeatureSet b{fr.features.middleRows(start, len), fr.extractor_id};
    rep.batch_fid.push_back(fid(a, b));
  }
  if (!rep.batch_fid.empty())
    rep.fid_mean = std::accumulate(rep.batch_fid.begin(), rep.batch_fid.end(), 0.0) /
                   static_cast<double>(rep.batch_fid.size());

  for (const ClassifierContract* clf : classifiers) {
    const auto idx = class_index(clf->finding_id());
    if (!idx) throw config_error("UnknownFinding", clf->finding_id());
    std::vector<int> truth;
    std::vector<double> so, sr;
    for (std::size_t i = 0; i < originals.size(); ++i) {
      if (!originals[i].labels) throw data_error("MissingLabels", originals[i].id);
      truth.push_back(normalize_labels(*originals[i].labels)[*idx]);
      so.push_back(clf->score(originals[i]));
      sr.push_back(clf->score(reconstructions[i]));
    }
    ClassRow row;
    row.finding = clf->finding_id();
    row.original = classification_report(so, truth);
    row.reconstructed = classification_report(sr, truth);
    row.prevalence = row.original.prevalence;
    rep.classes.push_back(std::move(row));
  }
  return rep;
}

inline constexpr int kReportSchemaVersion = 1;

inline json to_json(const ReconstructionReport& r) {
  json pairs = json::array();
  for (const auto& p : r.pairs)
    pairs.push_back({{"id", p.id}, {"rmse", p.rmse}, {"psnr", number_or_inf(p.psnr)}, {"ssim", p.ssim}});
  json classes = json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"finding", c.finding},
                       {"prevalence", c.prevalence},
                       {"original", to_json(c.original)},
                       {"reconstructed", to_json(c.reconstructed)}});
  return {{"schema_version", kReportSchemaVersion},
          {"kind", "reconstruction_report"},
          {"pairs", pairs},
          {"rmse", to_json(r.rmse)},
          {"psnr", to_json(r.psnr)},
          {"ssim", to_json(r.ssim)},
          {"cosine", to_json(r.cosine)},
          {"fid", {{"extractor_id", r.extractor_id}, {"batch_size", kFidBatchSize}, {"batches", r.batch_fid}, {"mean", r.fid_mean}}},
          {"classes", classes}};
}

// Finding, Prevalence, AUC/Accuracy/F1 for originals and reconstructions.
inline std::string class_table_csv(const std::vector<ClassRow>& rows) {
  std::string out = csv_row({"Finding", "Prevalence", "AUC orig", "AUC recon", "Accuracy orig",
                             "Accuracy recon", "F1 orig", "F1 recon"});
  auto auc = [](const ClassificationReport& r) { return r.auc ? fmt_fixed(*r.auc, 3) : std::string("NA"); };
  for (const auto& c : rows)
    out += csv_row({c.finding, fmt_fixed(c.prevalence, 3), auc(c.original), auc(c.reconstructed),
                    fmt_fixed(c.original.accuracy, 3), fmt_fixed(c.reconstructed.accuracy, 3),
                    fmt_fixed(c.original.f1, 3), fmt_fixed(c.reconstructed.f1, 3)});
  return out;
}

}  // namespace cxrdiff
