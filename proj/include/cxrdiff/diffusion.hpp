#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cxrdiff/encoder_bench.hpp"
#include "cxrdiff/image.hpp"
#include "cxrdiff/io.hpp"
#include "cxrdiff/rng.hpp"
#include "cxrdiff/synthetic.hpp"

namespace cxrdiff {

using Latent = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Noise schedule and forward process

struct NoiseSchedule {
  int timesteps = 0;
  double beta_start = 0, beta_end = 0;
  std::vector<double> betas, alphas, alpha_bars;
};

// Linear betas; alpha_bars by cumulative product.
inline NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw config_error("InvalidRange", "timestep count must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw config_error("InvalidRange", "need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double prod = 1.0;
  for (int t = 0; t < timesteps; ++t) {
    const double beta =
        timesteps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / static_cast<double>(timesteps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

// Toy default: 100 steps; the final signal coefficient sqrt(alpha_bar) is < 0.1.
inline NoiseSchedule default_toy_schedule() { return make_schedule(100, 8.5e-3, 0.12); }

inline void check_timestep(int t, const NoiseSchedule& s) {
  if (t < 0 || t >= s.timesteps)
    throw config_error("TOutOfRange", "t=" + std::to_string(t) + " outside [0, " + std::to_string(s.timesteps) + ")");
}

inline Latent forward_diffuse(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& s) {
  check_timestep(t, s);
  if (x0.size() != eps.size()) throw data_error("ShapeMismatch", "latent and noise sizes differ");
  const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// ---------------------------------------------------------------------------
// Component contracts

struct LatentShape {
  int channels = 4, height = 8, width = 8;
  Eigen::Index size() const { return static_cast<Eigen::Index>(channels) * height * width; }
  bool operator==(const LatentShape&) const = default;
};

struct LatentDistribution {
  Latent mean;
  Latent log_variance;
};

// Named view of a component's parameters, used by freeze checks.
struct ParameterBlock {
  std::string name;
  std::span<const double> values;
};

class LatentVAE {
 public:
  virtual ~LatentVAE() = default;
  virtual std::string kind() const = 0;
  virtual LatentShape latent_shape() const = 0;
  virtual int image_width() const = 0;
  virtual int image_height() const = 0;
  virtual LatentDistribution encode(const ImageSample& img) const = 0;
  virtual ImageSample decode(const Latent& z) const = 0;
  virtual double scaling() const { return 1.0; }
  virtual std::vector<ParameterBlock> parameter_blocks() const = 0;
  virtual std::unique_ptr<LatentVAE> clone() const = 0;

  // Mean latent, or a reparameterized draw when rng is given; scaled.
  Latent encode_latent(const ImageSample& img, Rng* rng = nullptr) const {
    LatentDistribution d = encode(img);
    Latent z = d.mean;
    if (rng)
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] += std::exp(0.5 * d.log_variance[i]) * rng->normal();
    return z * scaling();
  }
  ImageSample decode_latent(const Latent& z) const { return decode(z / scaling()); }
};

// Gradient with respect to an EncoderOutput's token states and pooled vector.
struct ConditioningGrad {
  Eigen::MatrixXd token_states;
  Eigen::VectorXd pooled;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::string kind() const = 0;
  virtual Eigen::Index width() const = 0;
  virtual std::vector<int> tokenize(const std::string& text) const = 0;
  virtual EncoderOutput encode_tokens(const std::vector<int>& ids) const = 0;

  virtual Eigen::Index vocab_size() const = 0;
  virtual std::optional<int> token_id(const std::string& surface) const = 0;
  virtual Eigen::VectorXd embedding_row(int id) const = 0;
  virtual void set_embedding_row(int id, const Eigen::VectorXd& row) = 0;
  // Appends a vocabulary entry; throws DuplicateToken if surface is known.
  virtual int add_token(const std::string& surface, const Eigen::VectorXd& init) = 0;

  // Returns dL/d(embedding table), V x D, for the given token ids.
  virtual Eigen::MatrixXd embedding_gradient(const std::vector<int>& ids, const ConditioningGrad& g) const = 0;

  virtual std::vector<ParameterBlock> parameter_blocks() const = 0;
  virtual std::unique_ptr<TextEncoder> clone() const = 0;

  EncoderOutput encode_text(const std::string& text) const { return encode_tokens(tokenize(text)); }
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::string kind() const = 0;
  virtual LatentShape latent_shape() const = 0;
  virtual Eigen::Index conditioning_width() const = 0;
  virtual Latent predict_noise(const Latent& x, int t, const EncoderOutput& cond) const = 0;
  // Given dL/d(output), returns dL/d(conditioning) and, when param_grad is
  // non-null, adds dL/d(parameters) into it.
  virtual ConditioningGrad backward(const Latent& x, int t, const EncoderOutput& cond, const Latent& d_out,
                                    Eigen::VectorXd* param_grad) const = 0;
  virtual Eigen::VectorXd& parameters() = 0;
  virtual const Eigen::VectorXd& parameters() const = 0;
  virtual std::unique_ptr<Denoiser> clone() const = 0;
};

// ---------------------------------------------------------------------------
// Toy VAE: per-patch PCA with per-channel standardization. Each
// (size/latent_w) x (size/latent_h) patch maps to `channels` coefficients.

class ToyPatchVAE final : public LatentVAE {
 public:
  ToyPatchVAE(int image_size, LatentShape shape, double log_variance = -9.0)
      : size_(image_size), shape_(shape), log_var_(log_variance) {
    if (image_size % shape.width != 0 || image_size % shape.height != 0 || shape.width != shape.height)
      throw config_error("InconsistentDims", "image size must be a multiple of the square latent grid");
    patch_ = image_size / shape.width;
    const Eigen::Index p = static_cast<Eigen::Index>(patch_) * patch_;
    if (shape.channels > p) throw config_error("InconsistentDims", "more latent channels than patch pixels");
    basis_ = Eigen::MatrixXd::Zero(p, shape.channels);
    for (int c = 0; c < shape.channels; ++c) basis_(c, c) = 1.0;
    mean_ = Eigen::VectorXd::Constant(p, 0.5);
    scale_ = Eigen::VectorXd::Ones(shape.channels);
  }

  // Fits the basis to the leading principal directions of the patches of
  // `images`, and the scales to the coefficient standard deviations.
  void prefit(std::span<const ImageSample> images) {
    if (images.empty()) throw data_error("NoImages", "VAE pre-fit needs images");
    const Eigen::Index p = basis_.rows();
    std::vector<Eigen::VectorXd> patches;
    for (const auto& img : images) {
      check_image(img);
      for (int py = 0; py < shape_.height; ++py)
        for (int px = 0; px < shape_.width; ++px) patches.push_back(read_patch(img, px, py));
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(patches.size()), p);
    for (std::size_t i = 0; i < patches.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = patches[i].transpose();
    mean_ = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean_.transpose();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    for (int c = 0; c < shape_.channels; ++c) {
      Eigen::VectorXd v = es.eigenvectors().col(p - 1 - c);
      Eigen::Index imax = 0;
      v.cwiseAbs().maxCoeff(&imax);
      if (v[imax] < 0) v = -v;
      basis_.col(c) = v;
      scale_[c] = std::sqrt(std::max(es.eigenvalues()[p - 1 - c], 1e-8));
    }
  }

  std::string kind() const override { return "toy-patch-pca"; }
  LatentShape latent_shape() const override { return shape_; }
  int image_width() const override { return size_; }
  int image_height() const override { return size_; }

  LatentDistribution encode(const ImageSample& img) const override {
    check_image(img);
    Latent z(shape_.size());
    for (int py = 0; py < shape_.height; ++py)
      for (int px = 0; px < shape_.width; ++px) {
        const Eigen::VectorXd coef = basis_.transpose() * (read_patch(img, px, py) - mean_);
        for (int c = 0; c < shape_.channels; ++c) z[index(c, py, px)] = coef[c] / scale_[c];
      }
    return {z, Latent::Constant(z.size(), log_var_)};
  }

  ImageSample decode(const Latent& z) const override {
    if (z.size() != shape_.size()) throw data_error("ShapeMismatch", "latent size does not match VAE");
    ImageSample img = blank_image("decoded", size_, size_, 255.0);
    Eigen::VectorXd coef(shape_.channels);
    for (int py = 0; py < shape_.height; ++py)
      for (int px = 0; px < shape_.width; ++px) {
        for (int c = 0; c < shape_.channels; ++c) coef[c] = z[index(c, py, px)] * scale_[c];
        const Eigen::VectorXd patch = basis_ * coef + mean_;
        for (int y = 0; y < patch_; ++y)
          for (int x = 0; x < patch_; ++x)
            img.at(px * patch_ + x, py * patch_ + y) = std::clamp(patch[y * patch_ + x], 0.0, 1.0);
      }
    return img;
  }

  std::vector<ParameterBlock> parameter_blocks() const override {
    return {{"vae.basis", {basis_.data(), static_cast<std::size_t>(basis_.size())}},
            {"vae.mean", {mean_.data(), static_cast<std::size_t>(mean_.size())}},
            {"vae.scale", {scale_.data(), static_cast<std::size_t>(scale_.size())}}};
  }
  std::unique_ptr<LatentVAE> clone() const override { return std::make_unique<ToyPatchVAE>(*this); }

  double log_variance() const { return log_var_; }
  int image_size() const { return size_; }

  // Flat payload: basis (column-major), mean, scale.
  std::vector<double> flat() const {
    std::vector<double> out(basis_.data(), basis_.data() + basis_.size());
    out.insert(out.end(), mean_.data(), mean_.data() + mean_.size());
    out.insert(out.end(), scale_.data(), scale_.data() + scale_.size());
    return out;
  }
  void load_flat(const std::vector<double>& v) {
    const auto nb = static_cast<std::size_t>(basis_.size()), nm = static_cast<std::size_t>(mean_.size());
    if (v.size() != nb + nm + static_cast<std::size_t>(scale_.size()))
      throw data_error("FormatError", "VAE payload size mismatch");
    std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nb), basis_.data());
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(nb), v.begin() + static_cast<std::ptrdiff_t>(nb + nm), mean_.data());
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(nb + nm), v.end(), scale_.data());
  }

 private:
  Eigen::Index index(int c, int py, int px) const {
    return (static_cast<Eigen::Index>(c) * shape_.height + py) * shape_.width + px;
  }
  void check_image(const ImageSample& img) const {
    if (img.width != size_ || img.height != size_)
      throw data_error("ShapeMismatch", img.id + ": VAE expects " + std::to_string(size_) + "x" + std::to_string(size_));
  }
  Eigen::VectorXd read_patch(const ImageSample& img, int px, int py) const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(patch_) * patch_);
    for (int y = 0; y < patch_; ++y)
      for (int x = 0; x < patch_; ++x) v[y * patch_ + x] = img.at(px * patch_ + x, py * patch_ + y);
    return v;
  }

  int size_;
  LatentShape shape_;
  double log_var_;
  int patch_ = 8;
  Eigen::MatrixXd basis_;
  Eigen::VectorXd mean_, scale_;
};

// ---------------------------------------------------------------------------
// Toy text encoder: word-level tokenizer, hash-seeded embedding rows, fixed
// sinusoidal positions. token_states[i] = E[id_i] + P[i]; pooled = mean over
// tokens.

class ToyTextEncoder final : public TextEncoder {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kMaxLength = 77;
  static constexpr int kHashBuckets = 64;

  ToyTextEncoder(Eigen::Index width, std::uint64_t seed) : width_(width), seed_(seed) {
    words_ = {"<|startoftext|>", "<|endoftext|>"};
    for (const char* w : base_words()) words_.push_back(w);
    for (std::size_t i = 0; i < words_.size(); ++i) lookup_[words_[i]] = static_cast<int>(i);
    base_count_ = static_cast<int>(words_.size());
    table_.resize(static_cast<Eigen::Index>(base_count_ + kHashBuckets), width_);
    for (int i = 0; i < base_count_; ++i) table_.row(i) = seeded_row(fnv1a(words_[static_cast<std::size_t>(i)])).transpose();
    for (int b = 0; b < kHashBuckets; ++b) table_.row(base_count_ + b) = seeded_row(splitmix64(0xB0C4E7 + b)).transpose();
    positions_.resize(kMaxLength, width_);
    for (int pos = 0; pos < kMaxLength; ++pos)
      for (Eigen::Index d = 0; d < width_; ++d) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(2 * (d / 2)) / static_cast<double>(width_));
        positions_(pos, d) = 0.1 * (d % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
      }
  }

  std::string kind() const override { return "toy-hash-text"; }
  Eigen::Index width() const override { return width_; }
  std::uint64_t seed() const { return seed_; }

  // Lowercased alphanumeric words; "<...>" spans are kept whole so
  // registered placeholder tokens survive tokenization.
  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < text.size(); ++i) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (c == '<') {
        const auto close = text.find('>', i);
        if (close != std::string::npos) {
          if (!cur.empty()) out.push_back(std::exchange(cur, {}));
          std::string tok = text.substr(i, close - i + 1);
          std::transform(tok.begin(), tok.end(), tok.begin(), [](unsigned char ch) { return std::tolower(ch); });
          out.push_back(tok);
          i = close;
          continue;
        }
      }
      if (std::isalnum(c)) {
        cur += static_cast<char>(std::tolower(c));
      } else if (!cur.empty()) {
        out.push_back(std::exchange(cur, {}));
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> ids = {kBos};
    for (const auto& w : split_words(text)) {
      if (static_cast<int>(ids.size()) >= kMaxLength - 1) break;
      auto it = lookup_.find(w);
      ids.push_back(it != lookup_.end() ? it->second
                                        : base_count_ + static_cast<int>(fnv1a(w) % static_cast<std::uint64_t>(kHashBuckets)));
    }
    ids.push_back(kEos);
    return ids;
  }

  EncoderOutput encode_tokens(const std::vector<int>& ids) const override {
    EncoderOutput out;
    out.encoder_id = kind();
    out.token_states.resize(static_cast<Eigen::Index>(ids.size()), width_);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      check_id(ids[i]);
      out.token_states.row(static_cast<Eigen::Index>(i)) = table_.row(ids[i]) + positions_.row(static_cast<Eigen::Index>(i));
    }
    out.pooled = out.token_states.colwise().mean().transpose();
    return out;
  }

  Eigen::Index vocab_size() const override { return table_.rows(); }

  std::optional<int> token_id(const std::string& surface) const override {
    auto it = lookup_.find(surface);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  Eigen::VectorXd embedding_row(int id) const override {
    check_id(id);
    return table_.row(id).transpose();
  }
  void set_embedding_row(int id, const Eigen::VectorXd& row) override {
    check_id(id);
    if (row.size() != width_) throw data_error("DimensionMismatch", "embedding row width");
    table_.row(id) = row.transpose();
  }

  int add_token(const std::string& surface, const Eigen::VectorXd& init) override {
    if (surface.empty() || surface.find_first_of(" \t\n") != std::string::npos)
      throw config_error("InvalidToken", "token surface must be a single non-empty word");
    const auto words = split_words(surface);
    if (words.size() != 1 || words[0] != surface)
      throw config_error("InvalidToken", "'" + surface + "' would not survive tokenization as one token");
    if (lookup_.count(surface)) throw config_error("DuplicateToken", surface);
    if (init.size() != width_) throw data_error("DimensionMismatch", "initial embedding width");
    const int id = static_cast<int>(table_.rows());
    table_.conservativeResize(table_.rows() + 1, Eigen::NoChange);
    table_.row(id) = init.transpose();
    added_.push_back({surface, id});
    lookup_[surface] = id;
    return id;
  }

  Eigen::MatrixXd embedding_gradient(const std::vector<int>& ids, const ConditioningGrad& g) const override {
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(table_.rows(), width_);
    const double inv_t = 1.0 / static_cast<double>(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(width_);
      if (g.token_states.size() > 0) row += g.token_states.row(static_cast<Eigen::Index>(i));
      if (g.pooled.size() > 0) row += inv_t * g.pooled.transpose();
      grad.row(ids[i]) += row;
    }
    return grad;
  }

  std::vector<ParameterBlock> parameter_blocks() const override {
    return {{"text.embeddings", {table_.data(), static_cast<std::size_t>(table_.size())}},
            {"text.positions", {positions_.data(), static_cast<std::size_t>(positions_.size())}}};
  }
  std::unique_ptr<TextEncoder> clone() const override { return std::make_unique<ToyTextEncoder>(*this); }

  const Eigen::MatrixXd& embedding_table() const { return table_; }
  Eigen::MatrixXd& embedding_table() { return table_; }
  const Eigen::MatrixXd& positions() const { return positions_; }
  Eigen::MatrixXd& positions() { return positions_; }
  const std::vector<std::pair<std::string, int>>& added_tokens() const { return added_; }

  // Registered tokens are restored from a checkpoint in id order.
  void restore_added(const std::vector<std::string>& surfaces) {
    for (const auto& s : surfaces) add_token(s, Eigen::VectorXd::Zero(width_));
  }

 private:
  static const std::vector<const char*>& base_words() {
    static const std::vector<const char*> words = {
        "a", "an", "the", "of", "in", "on", "with", "without", "and", "or", "no", "not", "is", "are", "there",
        "photo", "picture", "image", "rendering", "painting", "close", "up", "cropped", "style", "lung", "lungs",
        "xray", "x", "ray", "chest", "radiograph", "radiology", "visible", "pleural", "effusion", "effusions",
        "atelectasis", "cardiomegaly", "consolidation", "edema", "enlarged", "cardiomediastinum", "fracture",
        "lesion", "opacity", "finding", "findings", "pneumonia", "pneumothorax", "support", "devices", "device",
        "acute", "process", "normal", "left", "right", "bilateral", "small", "large", "moderate", "mild",
        "severe", "heart", "size", "clear", "unchanged", "stable", "new", "tube", "line", "catheter", "basilar",
        "base", "apex", "upper", "lower", "lobe", "mediastinum", "silhouette", "frontal", "lateral", "view",
        "patient", "study", "impression", "cardiopulmonary", "abnormality", "evidence", "likely", "possible",
        "compared", "prior", "interval", "increase", "decrease", "focal", "diffuse", "vascular", "congestion"};
    return words;
  }

  Eigen::VectorXd seeded_row(std::uint64_t key) const {
    Rng rng(derive_seed(seed_, key));
    return rng.normal_vector(width_);
  }

  void check_id(int id) const {
    if (id < 0 || id >= table_.rows()) throw data_error("UnknownToken", "token id " + std::to_string(id));
  }

  Eigen::Index width_;
  std::uint64_t seed_;
  std::vector<std::string> words_;
  std::map<std::string, int> lookup_;
  int base_count_ = 0;
  Eigen::MatrixXd table_;
  Eigen::MatrixXd positions_;
  std::vector<std::pair<std::string, int>> added_;
};

// ---------------------------------------------------------------------------
// Toy denoiser. A preconditioned linear estimate plus an MLP correction:
//   mu   = m0 + M pooled                      (conditioning-dependent mean latent)
//   lin  = c[t] (x - sqrt(ab[t]) mu)
//   cond = [sinusoidal timestep embedding ; pooled]
//   h1 = silu(W1 x + Wc cond + b1), h2 = silu(W2 h1 + b2)
//   out  = lin + W3 h2 + b3
// c[t] makes `lin` the least-squares noise estimate when latents are Gaussian
// with mean mu and per-coordinate variance sigma_data^2.

inline double silu(double a) { return a / (1.0 + std::exp(-a)); }
inline double silu_grad(double a) {
  const double s = 1.0 / (1.0 + std::exp(-a));
  return s * (1.0 + a * (1.0 - s));
}

inline Eigen::VectorXd timestep_embedding(int t, int dims) {
  Eigen::VectorXd e(dims);
  const int half = dims / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(1000.0) * k / std::max(1, half - 1));
    e[k] = std::sin(t * freq);
    e[k + half] = std::cos(t * freq);
  }
  if (dims % 2) e[dims - 1] = 0.0;
  return e;
}

// c[t] = (1 - sqrt(ab) g) / sqrt(1 - ab), g = sqrt(ab) s2 / (ab s2 + 1 - ab).
inline double preconditioned_skip(double alpha_bar, double sigma_data) {
  const double s2 = sigma_data * sigma_data;
  const double g = std::sqrt(alpha_bar) * s2 / (alpha_bar * s2 + 1.0 - alpha_bar);
  return (1.0 - std::sqrt(alpha_bar) * g) / std::sqrt(1.0 - alpha_bar);
}

class ToyMlpDenoiser final : public Denoiser {
 public:
  static constexpr int kTimeDims = 16;

  ToyMlpDenoiser(LatentShape shape, Eigen::Index cond_width, Eigen::Index hidden, std::uint64_t seed,
                 const NoiseSchedule& schedule, double sigma_data)
      : shape_(shape), l_(shape.size()), c_(cond_width), h_(hidden), sigma_data_(sigma_data),
        theta_(Eigen::VectorXd::Zero(param_count(shape.size(), cond_width, hidden))) {
    if (!(sigma_data > 0)) throw config_error("InvalidRange", "sigma_data must be > 0");
    for (double ab : schedule.alpha_bars) {
      skip_.push_back(preconditioned_skip(ab, sigma_data));
      root_ab_.push_back(std::sqrt(ab));
    }
    Rng rng(derive_seed(seed, 0xDE7));
    auto fill = [&](Eigen::Index off, Eigen::Index n, double a) {
      for (Eigen::Index i = 0; i < n; ++i) theta_[off + i] = rng.uniform(-a, a);
    };
    const auto o = offsets();
    fill(o.w1, h_ * l_, 1.0 / std::sqrt(static_cast<double>(l_)));
    fill(o.wc, h_ * (kTimeDims + c_), 1.0 / std::sqrt(static_cast<double>(kTimeDims + c_)));
    fill(o.w2, h_ * h_, 1.0 / std::sqrt(static_cast<double>(h_)));
    fill(o.w3, l_ * h_, 1.0 / std::sqrt(static_cast<double>(h_)));
    fill(o.m, l_ * c_, 1.0 / std::sqrt(static_cast<double>(c_)));
  }

  static Eigen::Index param_count(Eigen::Index l, Eigen::Index c, Eigen::Index h) {
    return h * l + h * (kTimeDims + c) + h + h * h + h + l * h + l + l + l * c;
  }

  std::string kind() const override { return "toy-mlp-denoiser"; }
  LatentShape latent_shape() const override { return shape_; }
  Eigen::Index conditioning_width() const override { return c_; }
  Eigen::Index hidden() const { return h_; }
  double sigma_data() const { return sigma_data_; }
  Eigen::VectorXd& parameters() override { return theta_; }
  const Eigen::VectorXd& parameters() const override { return theta_; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<ToyMlpDenoiser>(*this); }

  Latent predict_noise(const Latent& x, int t, const EncoderOutput& cond) const override {
    const Pass p = run(x, t, cond);
    return p.out;
  }

  ConditioningGrad backward(const Latent& x, int t, const EncoderOutput& cond, const Latent& d_out,
                            Eigen::VectorXd* param_grad) const override {
    const Pass p = run(x, t, cond);
    const auto o = offsets();
    using CMap = Eigen::Map<const Eigen::MatrixXd>;
    const CMap w2(theta_.data() + o.w2, h_, h_);
    const CMap w3(theta_.data() + o.w3, l_, h_);
    const CMap wc(theta_.data() + o.wc, h_, kTimeDims + c_);
    const CMap m(theta_.data() + o.m, l_, c_);

    const Eigen::VectorXd dh2 = w3.transpose() * d_out;
    Eigen::VectorXd da2(h_), da1(h_);
    for (Eigen::Index i = 0; i < h_; ++i) da2[i] = dh2[i] * silu_grad(p.a2[i]);
    const Eigen::VectorXd dh1 = w2.transpose() * da2;
    for (Eigen::Index i = 0; i < h_; ++i) da1[i] = dh1[i] * silu_grad(p.a1[i]);
    const auto ts = static_cast<std::size_t>(t);
    const Eigen::VectorXd dmu = -skip_[ts] * root_ab_[ts] * d_out;

    if (param_grad) {
      Eigen::VectorXd& g = *param_grad;
      Eigen::Map<Eigen::MatrixXd>(g.data() + o.w1, h_, l_) += da1 * x.transpose();
      Eigen::Map<Eigen::MatrixXd>(g.data() + o.wc, h_, kTimeDims + c_) += da1 * p.cond.transpose();
      g.segment(o.b1, h_) += da1;
      Eigen::Map<Eigen::MatrixXd>(g.data() + o.w2, h_, h_) += da2 * p.h1.transpose();
      g.segment(o.b2, h_) += da2;
      Eigen::Map<Eigen::MatrixXd>(g.data() + o.w3, l_, h_) += d_out * p.h2.transpose();
      g.segment(o.b3, l_) += d_out;
      g.segment(o.m0, l_) += dmu;
      Eigen::Map<Eigen::MatrixXd>(g.data() + o.m, l_, c_) += dmu * p.cond.tail(c_).transpose();
    }
    ConditioningGrad cg;
    cg.pooled = (wc.transpose() * da1).tail(c_) + m.transpose() * dmu;
    return cg;
  }

 private:
  struct Offsets {
    Eigen::Index w1, wc, b1, w2, b2, w3, b3, m0, m;
  };
  Offsets offsets() const {
    Offsets o;
    o.w1 = 0;
    o.wc = o.w1 + h_ * l_;
    o.b1 = o.wc + h_ * (kTimeDims + c_);
    o.w2 = o.b1 + h_;
    o.b2 = o.w2 + h_ * h_;
    o.w3 = o.b2 + h_;
    o.b3 = o.w3 + l_ * h_;
    o.m0 = o.b3 + l_;
    o.m = o.m0 + l_;
    return o;
  }

  struct Pass {
    Eigen::VectorXd cond, a1, h1, a2, h2, out;
  };

  Pass run(const Latent& x, int t, const EncoderOutput& enc) const {
    if (x.size() != l_) throw data_error("ShapeMismatch", "latent size does not match denoiser");
    if (t < 0 || t >= static_cast<int>(skip_.size()))
      throw config_error("TOutOfRange", "t=" + std::to_string(t) + " outside the denoiser's schedule");
    if (!enc.pooled || enc.pooled->size() != c_)
      throw data_error("DimensionMismatch", "denoiser needs a pooled conditioning vector of width " + std::to_string(c_));
    const auto o = offsets();
    const auto ts = static_cast<std::size_t>(t);
    using CMap = Eigen::Map<const Eigen::MatrixXd>;
    Pass p;
    p.cond.resize(kTimeDims + c_);
    p.cond << timestep_embedding(t, kTimeDims), *enc.pooled;
    p.a1 = CMap(theta_.data() + o.w1, h_, l_) * x + CMap(theta_.data() + o.wc, h_, kTimeDims + c_) * p.cond +
           theta_.segment(o.b1, h_);
    p.h1 = p.a1.unaryExpr([](double a) { return silu(a); });
    p.a2 = CMap(theta_.data() + o.w2, h_, h_) * p.h1 + theta_.segment(o.b2, h_);
    p.h2 = p.a2.unaryExpr([](double a) { return silu(a); });
    const Eigen::VectorXd mu = theta_.segment(o.m0, l_) + CMap(theta_.data() + o.m, l_, c_) * *enc.pooled;
    p.out = skip_[ts] * (x - root_ab_[ts] * mu) + CMap(theta_.data() + o.w3, l_, h_) * p.h2 +
            theta_.segment(o.b3, l_);
    return p;
  }

  LatentShape shape_;
  Eigen::Index l_, c_, h_;
  double sigma_data_;
  Eigen::VectorXd theta_;
  std::vector<double> skip_, root_ab_;
};

// Predicts the exact noise implied by x_t and a known clean latent x0.
class ExactNoiseOracle final : public Denoiser {
 public:
  ExactNoiseOracle(Latent x0, NoiseSchedule schedule, LatentShape shape, Eigen::Index cond_width)
      : x0_(std::move(x0)), schedule_(std::move(schedule)), shape_(shape), c_(cond_width) {}

  std::string kind() const override { return "exact-noise-oracle"; }
  LatentShape latent_shape() const override { return shape_; }
  Eigen::Index conditioning_width() const override { return c_; }
  Latent predict_noise(const Latent& x, int t, const EncoderOutput&) const override {
    const double ab = schedule_.alpha_bars[static_cast<std::size_t>(t)];
    return (x - std::sqrt(ab) * x0_) / std::sqrt(1.0 - ab);
  }
  ConditioningGrad backward(const Latent&, int, const EncoderOutput&, const Latent&, Eigen::VectorXd*) const override {
    return {};
  }
  Eigen::VectorXd& parameters() override { return empty_; }
  const Eigen::VectorXd& parameters() const override { return empty_; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<ExactNoiseOracle>(*this); }

 private:
  Latent x0_;
  NoiseSchedule schedule_;
  LatentShape shape_;
  Eigen::Index c_;
  Eigen::VectorXd empty_;
};

// ---------------------------------------------------------------------------
// Bundle

struct DiffusionBundle {
  std::unique_ptr<LatentVAE> vae;
  std::unique_ptr<TextEncoder> text;
  std::unique_ptr<Denoiser> denoiser;
  NoiseSchedule schedule;
  std::uint64_t seed = 0;

  DiffusionBundle() = default;
  DiffusionBundle(std::unique_ptr<LatentVAE> v, std::unique_ptr<TextEncoder> t, std::unique_ptr<Denoiser> d,
                  NoiseSchedule s, std::uint64_t sd)
      : vae(std::move(v)), text(std::move(t)), denoiser(std::move(d)), schedule(std::move(s)), seed(sd) {
    validate();
  }
  DiffusionBundle(DiffusionBundle&&) = default;
  DiffusionBundle& operator=(DiffusionBundle&&) = default;

  DiffusionBundle clone() const {
    return DiffusionBundle(vae->clone(), text->clone(), denoiser->clone(), schedule, seed);
  }

  void validate() const {
    if (!vae || !text || !denoiser) throw config_error("InconsistentDims", "bundle is missing a component");
    if (text->width() != denoiser->conditioning_width())
      throw config_error("InconsistentDims", "text width " + std::to_string(text->width()) +
                                                 " != denoiser conditioning width " +
                                                 std::to_string(denoiser->conditioning_width()));
    if (!(vae->latent_shape() == denoiser->latent_shape()))
      throw config_error("InconsistentDims", "VAE and denoiser latent shapes differ");
    if (schedule.timesteps < 1) throw config_error("InconsistentDims", "bundle schedule is empty");
  }

  // Every parameter of every component, named.
  std::vector<ParameterBlock> parameter_blocks() const {
    auto out = vae->parameter_blocks();
    for (auto& b : text->parameter_blocks()) out.push_back(b);
    const auto& th = denoiser->parameters();
    out.push_back({"denoiser", {th.data(), static_cast<std::size_t>(th.size())}});
    return out;
  }
};

struct ToyBundleConfig {
  int image_size = 64;
  LatentShape latent{4, 8, 8};
  Eigen::Index cond_width = 768;
  Eigen::Index hidden = 256;
  int timesteps = 100;
  double beta_start = 8.5e-3;
  double beta_end = 0.12;
  double sigma_data = 0.15;  // assumed per-coordinate latent spread about the mean
  std::uint64_t seed = 0;
  std::size_t vae_fit_images = 32;  // per class, synthetic
};

inline DiffusionBundle build_toy_bundle(const ToyBundleConfig& cfg) {
  auto vae = std::make_unique<ToyPatchVAE>(cfg.image_size, cfg.latent);
  SyntheticCxrOptions sopt;
  sopt.size = cfg.image_size;
  auto fit = make_synthetic_cxrs(derive_seed(cfg.seed, 0x7AE), cfg.vae_fit_images, false, 0, sopt);
  for (auto& p : make_synthetic_cxrs(derive_seed(cfg.seed, 0x7AE), cfg.vae_fit_images, true, 0, sopt))
    fit.push_back(std::move(p));
  vae->prefit(fit);
  auto text = std::make_unique<ToyTextEncoder>(cfg.cond_width, derive_seed(cfg.seed, 0x7E7));
  auto schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
  auto den = std::make_unique<ToyMlpDenoiser>(cfg.latent, cfg.cond_width, cfg.hidden, derive_seed(cfg.seed, 0xD0), schedule,
                                              cfg.sigma_data);
  return DiffusionBundle(std::move(vae), std::move(text), std::move(den), std::move(schedule), cfg.seed);
}

// ---------------------------------------------------------------------------
// Training objective

// Which parameters receive gradient. Frozen parameters get exact zeros.
struct GradientMask {
  bool denoiser = true;
  std::optional<int> embedding_row;  // the only trainable embedding row, if any

  static GradientMask frozen() { return {false, std::nullopt}; }
  static GradientMask denoiser_only() { return {true, std::nullopt}; }
  static GradientMask token_row(int id) { return {false, id}; }
};

struct DenoiseLoss {
  double loss = 0;
  Eigen::VectorXd denoiser_grad;  // same size as denoiser parameters
  Eigen::VectorXd embedding_grad; // gradient for mask.embedding_row, width D (empty if none)
};

// mean((eps_hat - eps)^2) with eps_hat = denoiser(forward_diffuse(x0, t, eps), t, text(caption)).
inline DenoiseLoss denoise_loss(const DiffusionBundle& b, const Latent& x0, const std::vector<int>& caption_ids,
                                int t, const Latent& eps, const GradientMask& mask = {}) {
  const Latent xt = forward_diffuse(x0, t, eps, b.schedule);
  const EncoderOutput cond = b.text->encode_tokens(caption_ids);
  const Latent pred = b.denoiser->predict_noise(xt, t, cond);
  const Latent diff = pred - eps;
  const double n = static_cast<double>(diff.size());
  DenoiseLoss out;
  out.loss = diff.squaredNorm() / n;
  out.denoiser_grad = Eigen::VectorXd::Zero(b.denoiser->parameters().size());
  if (!mask.denoiser && !mask.embedding_row) return out;
  const Latent d_out = (2.0 / n) * diff;
  const ConditioningGrad cg = b.denoiser->backward(xt, t, cond, d_out, mask.denoiser ? &out.denoiser_grad : nullptr);
  if (mask.embedding_row) {
    const Eigen::MatrixXd eg = b.text->embedding_gradient(caption_ids, cg);
    out.embedding_grad = eg.row(*mask.embedding_row).transpose();
  }
  return out;
}

inline DenoiseLoss denoise_loss(const DiffusionBundle& b, const Latent& x0, const std::string& caption, int t,
                                const Latent& eps, const GradientMask& mask = {}) {
  return denoise_loss(b, x0, b.text->tokenize(caption), t, eps, mask);
}

// ---------------------------------------------------------------------------
// Sampling

enum class SamplerMode { ancestral, deterministic };

inline SamplerMode parse_sampler_mode(const std::string& s) {
  if (s == "ancestral") return SamplerMode::ancestral;
  if (s == "deterministic") return SamplerMode::deterministic;
  throw config_error("UnknownSampler", s);
}
inline std::string sampler_mode_name(SamplerMode m) { return m == SamplerMode::ancestral ? "ancestral" : "deterministic"; }

struct SamplerSettings {
  int steps = 50;
  SamplerMode mode = SamplerMode::deterministic;
};

// Evenly spaced descending timesteps from T-1 down to 0.
inline std::vector<int> sampling_timesteps(int steps, int timesteps) {
  if (steps < 1 || steps > timesteps)
    throw config_error("InvalidSteps", "steps=" + std::to_string(steps) + " must lie in [1, " + std::to_string(timesteps) + "]");
  std::vector<int> ts;
  if (steps == 1) return {timesteps - 1};
  for (int i = 0; i < steps; ++i)
    ts.push_back(static_cast<int>((static_cast<long>(steps - 1 - i) * (timesteps - 1)) / (steps - 1)));
  return ts;
}

// Reverse process from x_T. Deterministic mode is the eta = 0 update (no noise
// after initialization); ancestral mode uses eta = 1.
inline Latent reverse_process(const Denoiser& den, const NoiseSchedule& s, const EncoderOutput& cond, Latent x,
                              const SamplerSettings& settings, Rng& rng) {
  const auto ts = sampling_timesteps(settings.steps, s.timesteps);
  const double eta = settings.mode == SamplerMode::ancestral ? 1.0 : 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
    const double ab_prev = i + 1 < ts.size() ? s.alpha_bars[static_cast<std::size_t>(ts[i + 1])] : 1.0;
    const Latent eps = den.predict_noise(x, t, cond);
    const Latent x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * eps;
    if (sigma > 0) x += sigma * rng.normal_vector(x.size());
  }
  return x;
}

inline Latent sample_latent(const DiffusionBundle& b, const std::string& caption, const SamplerSettings& settings,
                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5A3));
  const EncoderOutput cond = b.text->encode_text(caption);
  Latent x = rng.normal_vector(b.vae->latent_shape().size());
  return reverse_process(*b.denoiser, b.schedule, cond, std::move(x), settings, rng);
}

inline ImageSample sample(const DiffusionBundle& b, const std::string& caption, const SamplerSettings& settings,
                          std::uint64_t seed) {
  return b.vae->decode_latent(sample_latent(b, caption, settings, seed));
}

// ---------------------------------------------------------------------------
// Bundle checkpoints: <dir>/bundle.json manifest + one float32 payload per
// component.

inline std::string encode_f32_payload(std::span<const double> v) {
  std::string out;
  append_f32(out, v.data(), v.size());
  return out;
}

inline std::vector<double> read_f32_payload(const fs::path& p) {
  const auto bytes = read_binary_file(p);
  if (bytes.size() % 4) throw data_error("FormatError", p.string() + ": payload is not float32");
  return decode_f32(bytes.data(), bytes.size() / 4);
}

inline void save_bundle(ArtifactSet& out, const fs::path& dir, const DiffusionBundle& b) {
  const auto* vae = dynamic_cast<const ToyPatchVAE*>(b.vae.get());
  const auto* text = dynamic_cast<const ToyTextEncoder*>(b.text.get());
  const auto* den = dynamic_cast<const ToyMlpDenoiser*>(b.denoiser.get());
  if (!vae || !text || !den) throw config_error("UnsupportedComponent", "only toy components can be checkpointed");

  std::vector<std::string> added;
  for (const auto& [s, id] : text->added_tokens()) added.push_back(s);
  const auto ls = vae->latent_shape();
  json manifest = {
      {"format", "cxrdiff-bundle"},
      {"version", 1},
      {"seed", b.seed},
      {"schedule", {{"timesteps", b.schedule.timesteps}, {"beta_start", b.schedule.beta_start},
                    {"beta_end", b.schedule.beta_end}, {"betas", b.schedule.betas}}},
      {"components",
       {{"vae", {{"kind", vae->kind()}, {"file", "vae.f32"}, {"image_size", vae->image_size()},
                 {"latent", {ls.channels, ls.height, ls.width}}, {"log_variance", vae->log_variance()}}},
        {"text", {{"kind", text->kind()}, {"file", "text.f32"}, {"width", text->width()}, {"seed", text->seed()},
                  {"added_tokens", added}, {"vocab_size", text->vocab_size()}}},
        {"denoiser", {{"kind", den->kind()}, {"file", "denoiser.f32"}, {"hidden", den->hidden()},
                      {"sigma_data", den->sigma_data()},
                      {"param_count", den->parameters().size()}}}}}};
  out.add_json(dir / "bundle.json", manifest);
  out.add(dir / "vae.f32", encode_f32_payload(vae->flat()));
  std::string tp = encode_f32_payload({text->embedding_table().data(), static_cast<std::size_t>(text->embedding_table().size())});
  tp += encode_f32_payload({text->positions().data(), static_cast<std::size_t>(text->positions().size())});
  out.add(dir / "text.f32", std::move(tp));
  out.add(dir / "denoiser.f32", encode_f32_payload({den->parameters().data(), static_cast<std::size_t>(den->parameters().size())}));
}

inline DiffusionBundle load_bundle(const fs::path& dir) {
  const json m = read_json_file(dir / "bundle.json");
  if (m.value("format", "") != "cxrdiff-bundle") throw data_error("FormatError", dir.string() + ": not a bundle");
  try {
    const auto& cv = m.at("components").at("vae");
    const auto& ct = m.at("components").at("text");
    const auto& cd = m.at("components").at("denoiser");
    const auto lat = cv.at("latent").get<std::vector<int>>();
    const LatentShape shape{lat.at(0), lat.at(1), lat.at(2)};
    auto vae = std::make_unique<ToyPatchVAE>(cv.at("image_size").get<int>(), shape, cv.at("log_variance").get<double>());
    vae->load_flat(read_f32_payload(dir / cv.at("file").get<std::string>()));

    auto text = std::make_unique<ToyTextEncoder>(ct.at("width").get<Eigen::Index>(), ct.at("seed").get<std::uint64_t>());
    text->restore_added(ct.at("added_tokens").get<std::vector<std::string>>());
    const auto tv = read_f32_payload(dir / ct.at("file").get<std::string>());
    auto& table = text->embedding_table();
    auto& pos = text->positions();
    if (tv.size() != static_cast<std::size_t>(table.size() + pos.size()))
      throw data_error("FormatError", "text payload size mismatch");
    std::copy(tv.begin(), tv.begin() + table.size(), table.data());
    std::copy(tv.begin() + table.size(), tv.end(), pos.data());

    const auto& sj = m.at("schedule");
    auto schedule = make_schedule(sj.at("timesteps").get<int>(), sj.at("beta_start").get<double>(),
                                  sj.at("beta_end").get<double>());
    auto den = std::make_unique<ToyMlpDenoiser>(shape, text->width(), cd.at("hidden").get<Eigen::Index>(), 0, schedule,
                                                cd.at("sigma_data").get<double>());
    const auto dv = read_f32_payload(dir / cd.at("file").get<std::string>());
    if (dv.size() != static_cast<std::size_t>(den->parameters().size()))
      throw data_error("FormatError", "denoiser payload size mismatch");
    std::copy(dv.begin(), dv.end(), den->parameters().data());
    return DiffusionBundle(std::move(vae), std::move(text), std::move(den), std::move(schedule),
                           m.at("seed").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw data_error("FormatError", dir.string() + "/bundle.json: " + e.what());
  }
}

}  // namespace cxrdiff
