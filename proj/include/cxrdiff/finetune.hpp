#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cxrdiff/diffusion.hpp"
#include "cxrdiff/ingestion.hpp"
#include "cxrdiff/optim.hpp"

namespace cxrdiff {

struct TokenRegistration {
  std::string surface;
  int token_id = -1;
  Eigen::VectorXd init;
};

// Appends `surface` to the vocabulary. The new row copies init_from's row, or
// is a seeded Gaussian draw scaled like the base rows.
inline TokenRegistration register_token(DiffusionBundle& b, const std::string& surface,
                                        const std::optional<std::string>& init_from = std::nullopt,
                                        std::uint64_t seed = 0) {
  if (b.text->token_id(surface)) throw config_error("DuplicateToken", surface);
  Eigen::VectorXd init;
  if (init_from) {
    const auto id = b.text->token_id(*init_from);
    if (!id) throw config_error("UnknownToken", "init_from '" + *init_from + "' is not in the vocabulary");
    init = b.text->embedding_row(*id);
  } else {
    Rng rng(derive_seed(seed, fnv1a(surface)));
    init = rng.normal_vector(b.text->width());
  }
  TokenRegistration reg{surface, -1, init};
  reg.token_id = b.text->add_token(surface, init);
  return reg;
}

enum class FinetuneStrategy { textual_inversion, unet, unet_with_prior };

inline FinetuneStrategy parse_finetune_strategy(const std::string& s) {
  if (s == "textual_inversion") return FinetuneStrategy::textual_inversion;
  if (s == "unet") return FinetuneStrategy::unet;
  if (s == "unet_with_prior") return FinetuneStrategy::unet_with_prior;
  throw config_error("UnknownStrategy", s);
}

inline std::string strategy_name(FinetuneStrategy s) {
  switch (s) {
    case FinetuneStrategy::textual_inversion: return "textual_inversion";
    case FinetuneStrategy::unet: return "unet";
    case FinetuneStrategy::unet_with_prior: return "unet_with_prior";
  }
  return "?";
}

struct PriorSample {
  ImageSample image;
  std::string caption;
  std::uint64_t seed = 0;
};

struct FinetuneConfig {
  FinetuneStrategy strategy = FinetuneStrategy::unet;
  int steps = 400;
  double learning_rate = 1e-3;
  int batch_size = 4;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double prior_weight = 1.0;
  std::vector<PriorSample> prior_set;

  void validate() const {
    if (steps < 1) throw config_error("InvalidSteps", "steps must be >= 1");
    if (batch_size < 1) throw config_error("InvalidBatch", "batch_size must be >= 1");
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw config_error("InvalidRange", "learning_rate must be finite and >= 0");
    if (!(prior_weight >= 0) || !std::isfinite(prior_weight))
      throw config_error("InvalidRange", "prior_weight must be finite and >= 0");
  }
};

struct TrainingRun {
  std::vector<double> loss_trace;      // per step, total objective
  std::vector<double> instance_trace;  // per step, instance term only
  json provenance;
};

inline std::uint64_t image_hash(const ImageSample& img, std::uint64_t h = 0xcbf29ce484222325ULL) {
  h = fnv1a(img.id, h);
  return fnv1a_bytes(img.pixels.data(), img.pixels.size() * sizeof(double), h);
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

inline std::string finetune_set_hash(const FinetuneSet& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < data.size(); ++i) h = fnv1a(data.caption(i), image_hash(data.image(i), h));
  return hex64(h);
}

inline std::string prior_set_hash(const std::vector<PriorSample>& prior) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : prior) h = fnv1a(p.caption, image_hash(p.image, h));
  return hex64(h);
}

// Mean of the first and last `fraction` of a loss trace.
struct LossHalving {
  double head = 0, tail = 0;
  bool halved() const { return tail < 0.5 * head; }
};

inline LossHalving loss_halving(const std::vector<double>& trace, double fraction = 0.1) {
  if (trace.empty()) return {};
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(trace.size() * fraction));
  LossHalving r;
  for (std::size_t i = 0; i < n; ++i) {
    r.head += trace[i];
    r.tail += trace[trace.size() - 1 - i];
  }
  r.head /= static_cast<double>(n);
  r.tail /= static_cast<double>(n);
  return r;
}

namespace detail {

struct EncodedExample {
  Latent latent;
  std::vector<int> tokens;
};

struct StepDraw {
  std::size_t index;
  int t;
  Latent eps;
};

inline StepDraw draw_step(Rng& rng, std::size_t n, const DiffusionBundle& b, Eigen::Index latent_size) {
  StepDraw d;
  d.index = rng.index(n);
  d.t = static_cast<int>(rng.index(static_cast<std::size_t>(b.schedule.timesteps)));
  d.eps = rng.normal_vector(latent_size);
  return d;
}

// Latents are drawn once per image from the VAE's posterior with a seeded
// reparameterization.
inline std::vector<EncodedExample> encode_examples(const DiffusionBundle& b, const FinetuneSet& data,
                                                   std::uint64_t seed) {
  std::vector<EncodedExample> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(derive_seed(seed, 0xE7C, i));
    out.push_back({b.vae->encode_latent(data.image(i), &rng), b.text->tokenize(data.caption(i))});
  }
  return out;
}

inline std::vector<EncodedExample> encode_prior(const DiffusionBundle& b, const std::vector<PriorSample>& prior,
                                                std::uint64_t seed) {
  std::vector<EncodedExample> out;
  for (std::size_t i = 0; i < prior.size(); ++i) {
    Rng rng(derive_seed(seed, 0xE7D, i));
    out.push_back({b.vae->encode_latent(prior[i].image, &rng), b.text->tokenize(prior[i].caption)});
  }
  return out;
}

inline void check_finite(double loss, int step) {
  if (!std::isfinite(loss))
    throw numerical_error("NonFiniteLoss", "non-finite training loss at step " + std::to_string(step));
}

inline json base_provenance(const FinetuneConfig& cfg, const FinetuneSet& data) {
  return {{"strategy", strategy_name(cfg.strategy)},
          {"steps", cfg.steps},
          {"seed", cfg.seed},
          {"learning_rate", cfg.learning_rate},
          {"batch_size", cfg.batch_size},
          {"optimizer", optimizer_name(cfg.optimizer)},
          {"data_hashes", {{"instances", finetune_set_hash(data)}}},
          {"instance_count", data.size()}};
}

}  // namespace detail

// Trains only the registered token's embedding row. Every other parameter in
// the bundle is left bit-identical.
inline TrainingRun train_textual_inversion(DiffusionBundle& b, const FinetuneSet& data, const TokenRegistration& reg,
                                           const FinetuneConfig& cfg) {
  cfg.validate();
  data.validate();
  if (cfg.strategy != FinetuneStrategy::textual_inversion)
    throw config_error("StrategyMismatch", "textual inversion trainer got strategy " + strategy_name(cfg.strategy));
  const auto examples = detail::encode_examples(b, data, cfg.seed);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& tok = examples[i].tokens;
    if (std::find(tok.begin(), tok.end(), reg.token_id) == tok.end())
      throw data_error("TokenNotInCaption", "caption '" + data.caption(i) + "' does not contain " + reg.surface);
  }

  Rng rng(derive_seed(cfg.seed, 0x71));
  Optimizer opt(cfg.optimizer, cfg.learning_rate, b.text->width());
  const auto mask = GradientMask::token_row(reg.token_id);
  const Eigen::Index ls = b.vae->latent_shape().size();
  TrainingRun run;
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(b.text->width());
    double loss = 0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const auto d = detail::draw_step(rng, examples.size(), b, ls);
      const auto r = denoise_loss(b, examples[d.index].latent, examples[d.index].tokens, d.t, d.eps, mask);
      loss += r.loss;
      grad += r.embedding_grad;
    }
    loss /= cfg.batch_size;
    detail::check_finite(loss, step);
    grad /= cfg.batch_size;
    Eigen::VectorXd row = b.text->embedding_row(reg.token_id);
    opt.step(row, grad);
    b.text->set_embedding_row(reg.token_id, row);
    run.loss_trace.push_back(loss);
    run.instance_trace.push_back(loss);
  }
  run.provenance = detail::base_provenance(cfg, data);
  run.provenance["token"] = {{"surface", reg.surface}, {"id", reg.token_id}};
  return run;
}

// n samples from the bundle as it stands, each paired with class_caption.
inline std::vector<PriorSample> generate_prior_set(const DiffusionBundle& b, const std::string& class_caption,
                                                   std::size_t n, std::uint64_t seed,
                                                   const SamplerSettings& settings = {}) {
  if (n < 1) throw config_error("InvalidRange", "prior set size must be >= 1");
  std::vector<PriorSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = derive_seed(seed, 0x9B1, i);
    PriorSample p{sample(b, class_caption, settings, s), class_caption, s};
    p.image.id = "prior_" + std::to_string(i);
    out.push_back(std::move(p));
  }
  return out;
}

// Trains only the denoiser. With a prior set, each step adds
// prior_weight times the same objective on prior-set pairs; prior draws come
// from their own random stream so instance draws do not depend on the prior.
inline TrainingRun train_unet(DiffusionBundle& b, const FinetuneSet& data, const FinetuneConfig& cfg) {
  cfg.validate();
  data.validate();
  if (cfg.strategy == FinetuneStrategy::textual_inversion)
    throw config_error("StrategyMismatch", "U-Net trainer got strategy textual_inversion");
  const bool with_prior = cfg.strategy == FinetuneStrategy::unet_with_prior;
  if (with_prior && cfg.prior_set.empty()) throw config_error("EmptyPriorSet", "unet_with_prior needs a prior set");

  const auto examples = detail::encode_examples(b, data, cfg.seed);
  const auto prior = with_prior ? detail::encode_prior(b, cfg.prior_set, cfg.seed)
                                : std::vector<detail::EncodedExample>{};
  Rng rng(derive_seed(cfg.seed, 0x72));
  Rng prior_rng(derive_seed(cfg.seed, 0x73));
  auto& theta = b.denoiser->parameters();
  Optimizer opt(cfg.optimizer, cfg.learning_rate, theta.size());
  const auto mask = GradientMask::denoiser_only();
  const Eigen::Index ls = b.vae->latent_shape().size();
  TrainingRun run;
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
    double inst = 0, prior_loss = 0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const auto d = detail::draw_step(rng, examples.size(), b, ls);
      const auto r = denoise_loss(b, examples[d.index].latent, examples[d.index].tokens, d.t, d.eps, mask);
      inst += r.loss;
      grad += r.denoiser_grad;
    }
    if (with_prior) {
      for (int k = 0; k < cfg.batch_size; ++k) {
        const auto d = detail::draw_step(prior_rng, prior.size(), b, ls);
        const auto r = denoise_loss(b, prior[d.index].latent, prior[d.index].tokens, d.t, d.eps, mask);
        prior_loss += r.loss;
        grad += cfg.prior_weight * r.denoiser_grad;
      }
    }
    inst /= cfg.batch_size;
    prior_loss /= cfg.batch_size;
    const double loss = inst + cfg.prior_weight * prior_loss;
    detail::check_finite(loss, step);
    grad /= cfg.batch_size;
    opt.step(theta, grad);
    run.loss_trace.push_back(loss);
    run.instance_trace.push_back(inst);
  }
  run.provenance = detail::base_provenance(cfg, data);
  if (with_prior) {
    run.provenance["prior_weight"] = cfg.prior_weight;
    run.provenance["prior_count"] = cfg.prior_set.size();
    run.provenance["data_hashes"]["prior"] = prior_set_hash(cfg.prior_set);
  }
  return run;
}

inline std::string loss_trace_csv(const TrainingRun& run) {
  std::string out = "step,loss,instance_loss\n";
  for (std::size_t i = 0; i < run.loss_trace.size(); ++i)
    out += std::to_string(i) + "," + fmt_fixed(run.loss_trace[i], 8) + "," + fmt_fixed(run.instance_trace[i], 8) + "\n";
  return out;
}

}  // namespace cxrdiff
