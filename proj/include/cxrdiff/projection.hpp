#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cxrdiff/errors.hpp"
#include "cxrdiff/ingestion.hpp"
#include "cxrdiff/io.hpp"
#include "cxrdiff/optim.hpp"
#include "cxrdiff/rng.hpp"

namespace cxrdiff {

enum class ProjectionMode { document, token };

inline ProjectionMode parse_projection_mode(const std::string& s) {
  if (s == "document") return ProjectionMode::document;
  if (s == "token") return ProjectionMode::token;
  throw config_error("UnknownMode", s);
}
inline std::string mode_name(ProjectionMode m) { return m == ProjectionMode::document ? "document" : "token"; }

inline constexpr double kLayerNormEps = 1e-5;

// Maps in-domain encoder embeddings into the conditioning encoder's space:
//   input -> Linear(W1, b1) -> LayerNorm(gamma, beta) -> ReLU -> Linear(W2, b2)
// All parameters live in one flat vector laid out as
//   [W1 (D x H, column-major) | b1 | gamma | beta | W2 (H x D) | b2].
class ProjectionMLP {
 public:
  using Map = Eigen::Map<Eigen::MatrixXd>;
  using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  ProjectionMLP(Eigen::Index dim, Eigen::Index hidden)
      : d_(dim), h_(hidden), theta_(Eigen::VectorXd::Zero(param_count(dim, hidden))) {
    gamma().setOnes();
  }

  // W entries uniform in ±1/sqrt(fan_in); gamma 1, beta and biases 0.
  static ProjectionMLP initialized(Eigen::Index dim, Eigen::Index hidden, std::uint64_t seed) {
    ProjectionMLP mlp(dim, hidden);
    Rng rng(derive_seed(seed, 0x9A0));
    const double a1 = 1.0 / std::sqrt(static_cast<double>(dim));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto w1 = mlp.w1();
    for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = rng.uniform(-a1, a1);
    auto w2 = mlp.w2();
    for (Eigen::Index i = 0; i < w2.size(); ++i) w2.data()[i] = rng.uniform(-a2, a2);
    return mlp;
  }

  static Eigen::Index param_count(Eigen::Index d, Eigen::Index h) { return d * h + 3 * h + h * d + d; }

  Eigen::Index dim() const { return d_; }
  Eigen::Index hidden() const { return h_; }
  Eigen::VectorXd& parameters() { return theta_; }
  const Eigen::VectorXd& parameters() const { return theta_; }

  Map w1() { return Map(theta_.data(), d_, h_); }
  VecMap b1() { return VecMap(theta_.data() + d_ * h_, h_); }
  VecMap gamma() { return VecMap(theta_.data() + d_ * h_ + h_, h_); }
  VecMap beta() { return VecMap(theta_.data() + d_ * h_ + 2 * h_, h_); }
  Map w2() { return Map(theta_.data() + d_ * h_ + 3 * h_, h_, d_); }
  VecMap b2() { return VecMap(theta_.data() + 2 * d_ * h_ + 3 * h_, d_); }

  ConstMap w1() const { return ConstMap(theta_.data(), d_, h_); }
  ConstVecMap b1() const { return ConstVecMap(theta_.data() + d_ * h_, h_); }
  ConstVecMap gamma() const { return ConstVecMap(theta_.data() + d_ * h_ + h_, h_); }
  ConstVecMap beta() const { return ConstVecMap(theta_.data() + d_ * h_ + 2 * h_, h_); }
  ConstMap w2() const { return ConstMap(theta_.data() + d_ * h_ + 3 * h_, h_, d_); }
  ConstVecMap b2() const { return ConstVecMap(theta_.data() + 2 * d_ * h_ + 3 * h_, d_); }

  struct Cache {
    Eigen::MatrixXd input, normalized, activated;  // X, N̂, relu(Z)
    Eigen::VectorXd inv_std;                         // per row
    Eigen::MatrixXd preact;                          // Z = gamma*N̂ + beta
  };

  // Row-wise forward over a T x D matrix.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
    if (x.cols() != d_)
      throw data_error("DimMismatch", "projection expects width " + std::to_string(d_) + ", got " +
                                          std::to_string(x.cols()));
    Eigen::MatrixXd a = x * w1();
    a.rowwise() += b1().transpose();
    Eigen::VectorXd inv_std(a.rows());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double mean = a.row(r).mean();
      a.row(r).array() -= mean;
      const double var = a.row(r).squaredNorm() / static_cast<double>(h_);
      inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
      a.row(r) *= inv_std[r];
    }
    Eigen::MatrixXd z = a * gamma().asDiagonal();
    z.rowwise() += beta().transpose();
    const Eigen::MatrixXd act = z.cwiseMax(0.0);
    Eigen::MatrixXd y = act * w2();
    y.rowwise() += b2().transpose();
    if (cache) *cache = {x, a, act, inv_std, z};
    return y;
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
    return forward(Eigen::MatrixXd(x.transpose())).row(0).transpose();
  }

  // Gradient of the loss with respect to theta, given dL/dY for the cached pass.
  Eigen::VectorXd backward(const Cache& c, const Eigen::MatrixXd& dy) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(theta_.size());
    Map gw1(g.data(), d_, h_);
    VecMap gb1(g.data() + d_ * h_, h_);
    VecMap ggamma(g.data() + d_ * h_ + h_, h_);
    VecMap gbeta(g.data() + d_ * h_ + 2 * h_, h_);
    Map gw2(g.data() + d_ * h_ + 3 * h_, h_, d_);
    VecMap gb2(g.data() + 2 * d_ * h_ + 3 * h_, d_);

    gw2 = c.activated.transpose() * dy;
    gb2 = dy.colwise().sum().transpose();
    Eigen::MatrixXd dz = (dy * w2().transpose()).cwiseProduct((c.preact.array() > 0.0).cast<double>().matrix());
    ggamma = dz.cwiseProduct(c.normalized).colwise().sum().transpose();
    gbeta = dz.colwise().sum().transpose();
    const Eigen::MatrixXd dn = dz * gamma().asDiagonal();
    Eigen::MatrixXd da(dn.rows(), dn.cols());
    const double hh = static_cast<double>(h_);
    for (Eigen::Index r = 0; r < dn.rows(); ++r) {
      const double mean_dn = dn.row(r).sum() / hh;
      const double mean_dnn = dn.row(r).dot(c.normalized.row(r)) / hh;
      da.row(r) = c.inv_std[r] * (dn.row(r).array() - mean_dn - c.normalized.row(r).array() * mean_dnn).matrix();
    }
    gw1 = c.input.transpose() * da;
    gb1 = da.colwise().sum().transpose();
    return g;
  }

 private:
  Eigen::Index d_, h_;
  Eigen::VectorXd theta_;
};

// Mean over rows of the squared Euclidean error, with optional gradient.
inline double projection_loss(const ProjectionMLP& mlp, const Eigen::MatrixXd& x, const Eigen::MatrixXd& target,
                              Eigen::VectorXd* grad = nullptr) {
  ProjectionMLP::Cache cache;
  const Eigen::MatrixXd y = mlp.forward(x, &cache);
  const Eigen::MatrixXd diff = y - target;
  const double n = static_cast<double>(x.rows());
  if (grad) *grad = mlp.backward(cache, (2.0 / n) * diff);
  return diff.squaredNorm() / n;
}

// One training example: a single row in document mode, an aligned sequence
// of rows in token mode.
struct ProjectionPair {
  Eigen::MatrixXd source;
  Eigen::MatrixXd target;
};

struct TokenAlignment {
  std::vector<ProjectionPair> pairs;
  std::size_t dropped = 0;
};

inline constexpr double kMaxLengthMismatch = 0.25;

// Truncates each pair to the shorter sequence; drops pairs whose lengths
// differ by more than 25% of the longer one.
inline TokenAlignment align_token_pairs(const std::vector<Eigen::MatrixXd>& sources,
                                        const std::vector<Eigen::MatrixXd>& targets) {
  if (sources.size() != targets.size()) throw data_error("NoPairs", "source and target counts differ");
  TokenAlignment out;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto ls = sources[i].rows(), lt = targets[i].rows();
    const auto longer = std::max(ls, lt), shorter = std::min(ls, lt);
    if (shorter == 0 || static_cast<double>(longer - shorter) > kMaxLengthMismatch * static_cast<double>(longer)) {
      ++out.dropped;
      continue;
    }
    out.pairs.push_back({sources[i].topRows(shorter), targets[i].topRows(shorter)});
  }
  return out;
}

struct ProjectionTrainConfig {
  ProjectionMode mode = ProjectionMode::document;
  double learning_rate = 1e-3;
  int steps = 500;
  int batch_size = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  Eigen::Index hidden = 0;  // 0: same as input width
};

struct ProjectionTrainResult {
  ProjectionMLP mlp;
  std::vector<double> loss_trace;
};

inline ProjectionTrainResult train_projection(const std::vector<ProjectionPair>& pairs, const ProjectionTrainConfig& cfg,
                                              std::optional<ProjectionMLP> init = std::nullopt) {
  if (pairs.empty()) throw data_error("NoPairs", "no source/target pairs");
  if (cfg.steps < 1 || cfg.batch_size < 1) throw config_error("InvalidConfig", "steps and batch_size must be >= 1");
  const Eigen::Index d = pairs.front().source.cols();
  for (const auto& p : pairs)
    if (p.source.cols() != d || p.target.cols() != d || p.source.rows() != p.target.rows() || p.source.rows() == 0)
      throw data_error("DimMismatch", "projection pairs must share width and aligned lengths");

  ProjectionTrainResult res{init ? *init : ProjectionMLP::initialized(d, cfg.hidden > 0 ? cfg.hidden : d, cfg.seed), {}};
  Optimizer opt(cfg.optimizer, cfg.learning_rate, res.mlp.parameters().size());
  Rng rng(derive_seed(cfg.seed, 0x7A1));
  Eigen::VectorXd grad;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    Eigen::Index rows = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(rng.index(pairs.size()));
      rows += pairs[batch.back()].source.rows();
    }
    Eigen::MatrixXd x(rows, d), t(rows, d);
    Eigen::Index r = 0;
    for (auto i : batch) {
      x.middleRows(r, pairs[i].source.rows()) = pairs[i].source;
      t.middleRows(r, pairs[i].target.rows()) = pairs[i].target;
      r += pairs[i].source.rows();
    }
    const double loss = projection_loss(res.mlp, x, t, &grad);
    if (!std::isfinite(loss) || !grad.allFinite())
      throw numerical_error("NonFiniteLoss", "projection training diverged at step " + std::to_string(step));
    res.loss_trace.push_back(loss);
    opt.step(res.mlp.parameters(), grad);
  }
  return res;
}

inline std::string loss_trace_csv(const std::vector<double>& trace) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::ostringstream ss;
    ss << i << "," << std::setprecision(17) << trace[i] << "\n";
    out += ss.str();
  }
  return out;
}

// Checkpoint: one JSON header line, then the flat parameters as LE float32.
inline std::string encode_projection_checkpoint(const ProjectionMLP& mlp, ProjectionMode mode, std::uint64_t seed,
                                                long step) {
  json header = {{"format", "cxrdiff-projection"},
                 {"version", 1},
                 {"dims", {{"input", mlp.dim()}, {"hidden", mlp.hidden()}}},
                 {"mode", mode_name(mode)},
                 {"seed", seed},
                 {"step", step},
                 {"param_count", mlp.parameters().size()}};
  std::string out = header.dump() + "\n";
  append_f32(out, mlp.parameters().data(), static_cast<std::size_t>(mlp.parameters().size()));
  return out;
}

struct ProjectionCheckpoint {
  ProjectionMLP mlp;
  ProjectionMode mode;
  std::uint64_t seed;
  long step;
};

inline ProjectionCheckpoint decode_projection_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw data_error("FormatError", "projection checkpoint lacks a header line");
  json h;
  try {
    h = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw data_error("FormatError", std::string("projection checkpoint header: ") + e.what());
  }
  if (h.value("format", "") != "cxrdiff-projection") throw data_error("FormatError", "not a projection checkpoint");
  ProjectionMLP mlp(h["dims"]["input"].get<Eigen::Index>(), h["dims"]["hidden"].get<Eigen::Index>());
  const auto n = static_cast<std::size_t>(mlp.parameters().size());
  if (bytes.size() - nl - 1 != 4 * n) throw data_error("FormatError", "projection checkpoint payload size mismatch");
  const auto vals = decode_f32(bytes.data() + nl + 1, n);
  for (std::size_t i = 0; i < n; ++i) mlp.parameters()[static_cast<Eigen::Index>(i)] = vals[i];
  return {mlp, parse_projection_mode(h["mode"].get<std::string>()), h["seed"].get<std::uint64_t>(),
          h["step"].get<long>()};
}

// ---------------------------------------------------------------------------
// Prompt corpora for projection training

enum class PromptFamily { object, style };

inline PromptFamily parse_prompt_family(const std::string& s) {
  if (s == "object") return PromptFamily::object;
  if (s == "style") return PromptFamily::style;
  throw config_error("UnknownFamily", s);
}

inline std::string base_template(PromptFamily f) {
  return f == PromptFamily::object ? "a photo of a {}" : "a photo in the style of a {}";
}

// Lexical variants added after the base template of each family.
inline std::vector<std::string> default_variants(PromptFamily f) {
  if (f == PromptFamily::object)
    return {"a picture of a {}", "an image of a {}", "a close-up photo of a {}", "a rendering of a {}",
            "a cropped photo of a {}"};
  return {"a picture in the style of a {}", "an image in the style of a {}", "a rendering in the style of a {}",
          "a painting in the style of a {}"};
}

inline std::string fill_template(const std::string& tpl, const std::string& word) {
  const auto pos = tpl.find("{}");
  if (pos == std::string::npos) return tpl;
  return tpl.substr(0, pos) + word + tpl.substr(pos + 2);
}

inline PromptCorpus expand_prompt_templates(const std::vector<std::string>& concepts, PromptFamily family,
                                            const std::vector<std::string>& variants) {
  if (concepts.empty()) throw config_error("NoConcepts", "prompt expansion needs at least one concept");
  PromptCorpus corpus;
  corpus.origin = PromptCorpus::Origin::template_expanded;
  for (const auto& c : concepts) {
    corpus.prompts.push_back(fill_template(base_template(family), c));
    for (const auto& v : variants) corpus.prompts.push_back(fill_template(v, c));
  }
  return corpus;
}

inline PromptCorpus expand_prompt_templates(const std::vector<std::string>& concepts, PromptFamily family) {
  return expand_prompt_templates(concepts, family, default_variants(family));
}

}  // namespace cxrdiff
