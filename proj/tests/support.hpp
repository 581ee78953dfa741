#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "cxrdiff/errors.hpp"
#include "cxrdiff/image.hpp"
#include "cxrdiff/io.hpp"
#include "cxrdiff/rng.hpp"

namespace cxrdiff::testing {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cxrdiff_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline ImageSample random_image(Rng& rng, const std::string& id, int w, int h, double range = 255.0) {
  ImageSample img = blank_image(id, w, h, range);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

inline ImageSample constant_image(const std::string& id, int w, int h, double value, double range = 255.0) {
  ImageSample img = blank_image(id, w, h, range);
  std::fill(img.pixels.begin(), img.pixels.end(), value);
  return img;
}

// Straight-line CheXpert@k: explicit dot products, full sort by
// (similarity desc, index asc), count same-label hits.
struct BruteRetrieval {
  std::vector<double> per_report;
  double global = 0;
  std::map<int, double> per_class;
  double macro = 0;
};

inline BruteRetrieval brute_force_chexpert(const Eigen::MatrixXd& e, const std::vector<int>& labels, int k) {
  const int n = static_cast<int>(labels.size());
  BruteRetrieval out;
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> cand;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double dot = 0;
      for (Eigen::Index d = 0; d < e.cols(); ++d) dot += e(i, d) * e(j, d);
      cand.emplace_back(dot, j);
    }
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    int hits = 0;
    for (int r = 0; r < k; ++r) hits += labels[static_cast<std::size_t>(cand[static_cast<std::size_t>(r)].second)] ==
                                        labels[static_cast<std::size_t>(i)];
    out.per_report.push_back(static_cast<double>(hits) / k);
  }
  std::map<int, std::pair<double, int>> acc;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    sum += out.per_report[static_cast<std::size_t>(i)];
    acc[labels[static_cast<std::size_t>(i)]].first += out.per_report[static_cast<std::size_t>(i)];
    acc[labels[static_cast<std::size_t>(i)]].second += 1;
  }
  out.global = sum / n;
  double msum = 0;
  for (const auto& [c, a] : acc) {
    out.per_class[c] = a.first / a.second;
    msum += out.per_class[c];
  }
  out.macro = msum / static_cast<double>(acc.size());
  return out;
}

inline Eigen::MatrixXd random_orthogonal(Rng& rng, Eigen::Index d) {
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

// |a - n| / max(|a|, |n|); pairs where both are below `floor` compare
// absolutely against it.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

// Central differences of f over every coordinate of theta, compared with
// the analytic gradient; returns the largest relative error. The default
// step sits near the cube root of machine epsilon, where rounding and
// truncation error balance for O(1) parameters.
inline double max_fd_error(Eigen::VectorXd& theta, const Eigen::VectorXd& analytic, const std::function<double()>& f,
                           double h = 3e-5) {
  double worst = 0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double lp = f();
    theta[i] = orig - h;
    const double lm = f();
    theta[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (lp - lm) / (2 * h)));
  }
  return worst;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Owned copy of named parameter blocks, and the (block, index) pairs whose
// bits differ between two copies. Blocks that change size count as one diff
// at index -1.
using ParameterSnapshot = std::map<std::string, std::vector<double>>;

template <class Blocks>
ParameterSnapshot snapshot(const Blocks& blocks) {
  ParameterSnapshot s;
  for (const auto& b : blocks) s[b.name].assign(b.values.begin(), b.values.end());
  return s;
}

inline std::vector<std::pair<std::string, long>> bitwise_diff(const ParameterSnapshot& a, const ParameterSnapshot& b) {
  std::vector<std::pair<std::string, long>> out;
  for (const auto& [name, va] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.size() != va.size()) {
      out.emplace_back(name, -1);
      continue;
    }
    for (std::size_t i = 0; i < va.size(); ++i)
      if (std::memcmp(&va[i], &it->second[i], sizeof(double)) != 0) out.emplace_back(name, static_cast<long>(i));
  }
  for (const auto& [name, vb] : b)
    if (!a.count(name)) out.emplace_back(name, -1);
  return out;
}

// Kind of the cxrdiff::Error thrown by f, or "" when nothing is thrown.
template <class F>
std::string error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

}  // namespace cxrdiff::testing
