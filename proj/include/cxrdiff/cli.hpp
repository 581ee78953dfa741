#pragma once

#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cxrdiff/encoder_bench.hpp"
#include "cxrdiff/eval.hpp"
#include "cxrdiff/finetune.hpp"
#include "cxrdiff/ingestion.hpp"
#include "cxrdiff/metrics.hpp"
#include "cxrdiff/projection.hpp"
#include "cxrdiff/synthetic.hpp"

namespace cxrdiff::cli {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutEnv = "CXRDIFF_OUT_DIR";
inline constexpr const char* kThreadsEnv = "CXRDIFF_THREADS";

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"recon-eval", "text-bench",  "train-projection", "train-ti",
                                             "train-unet", "generate",    "classify-eval",    "fid-grid"};
  return c;
}

// ---------------------------------------------------------------------------
// Strict config reading: every key must be consumed, or finish() rejects it.

class ConfigReader {
 public:
  ConfigReader(const json& j, std::string locus) : j_(j), locus_(std::move(locus)) {
    if (!j_.is_object()) throw config_error("TypeError", locus_ + " must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw config_error("MissingKey", path(key) + " is required");
    return convert<T>(key);
  }

  ConfigReader child(const std::string& key) {
    if (!has(key)) throw config_error("MissingKey", path(key) + " is required");
    return ConfigReader(j_.at(key), path(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return locus_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw config_error("UnknownKey", "unknown config key " + path(k));
  }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw config_error("TypeError", path(key) + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw config_error("TypeError", path(key) + " must be an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
        throw config_error("TypeError", path(key) + " must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw config_error("TypeError", path(key) + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw config_error("TypeError", path(key) + " must be a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception& e) {
      throw config_error("TypeError", path(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string locus_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Shared sub-configs

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
};

struct Common {
  std::uint64_t seed = 0;
  fs::path out = "out";
  int threads = 1;
  fs::path base;  // relative input paths resolve against this
  fs::path resolve(const std::string& p) const { return fs::path(p).is_absolute() ? fs::path(p) : base / p; }
};

inline Common read_common(ConfigReader& r, const std::string& command, const Overrides& ov, const fs::path& base) {
  const int version = r.get<int>("schema_version", kConfigSchemaVersion);
  if (version != kConfigSchemaVersion)
    throw config_error("SchemaVersion", "unsupported schema_version " + std::to_string(version));
  if (r.has("command") && r.raw("command") != command)
    throw config_error("CommandMismatch", "config is for '" + r.raw("command").dump() + "', not '" + command + "'");
  Common c;
  c.base = base;
  c.seed = r.get<std::uint64_t>("seed", 0);
  c.out = r.get<std::string>("out", "out");
  c.threads = r.get<int>("threads", 1);
  if (const char* env = std::getenv(kOutEnv); env && *env) c.out = env;
  if (const char* env = std::getenv(kThreadsEnv); env && *env) {
    try {
      c.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw config_error("TypeError", std::string(kThreadsEnv) + " must be an integer");
    }
  }
  if (ov.seed) c.seed = *ov.seed;
  if (ov.out) c.out = *ov.out;
  if (c.threads < 1) throw config_error("InvalidRange", "threads must be >= 1");
  if (c.out.is_relative()) c.out = fs::current_path() / c.out;
  return c;
}

struct BundleSource {
  std::optional<fs::path> path;
  ToyBundleConfig toy;
};

inline BundleSource read_bundle_source(ConfigReader& r, const Common& c) {
  BundleSource s;
  const bool has_path = r.has("bundle"), has_toy = r.has("toy_bundle");
  if (has_path && has_toy) throw config_error("ConflictingKeys", "give either 'bundle' or 'toy_bundle', not both");
  if (has_path) {
    s.path = c.resolve(r.require<std::string>("bundle"));
    return s;
  }
  s.toy.seed = c.seed;
  if (!has_toy) return s;
  auto t = r.child("toy_bundle");
  s.toy.image_size = t.get<int>("image_size", s.toy.image_size);
  if (t.has("latent")) {
    const auto l = t.require<std::vector<int>>("latent");
    if (l.size() != 3) throw config_error("TypeError", t.path("latent") + " must be [channels, height, width]");
    s.toy.latent = {l[0], l[1], l[2]};
  }
  s.toy.cond_width = t.get<Eigen::Index>("cond_width", s.toy.cond_width);
  s.toy.hidden = t.get<Eigen::Index>("hidden", s.toy.hidden);
  s.toy.timesteps = t.get<int>("timesteps", s.toy.timesteps);
  s.toy.beta_start = t.get<double>("beta_start", s.toy.beta_start);
  s.toy.beta_end = t.get<double>("beta_end", s.toy.beta_end);
  s.toy.sigma_data = t.get<double>("sigma_data", s.toy.sigma_data);
  s.toy.vae_fit_images = t.get<std::size_t>("vae_fit_images", s.toy.vae_fit_images);
  t.finish();
  if (s.toy.cond_width < 1 || s.toy.hidden < 1) throw config_error("InvalidRange", "toy_bundle widths must be >= 1");
  return s;
}

inline DiffusionBundle open_bundle(const BundleSource& s) {
  if (s.path) return load_bundle(*s.path);
  return build_toy_bundle(s.toy);
}

inline SamplerSettings read_sampler(ConfigReader& r) {
  SamplerSettings s;
  if (!r.has("sampler")) return s;
  auto c = r.child("sampler");
  s.steps = c.get<int>("steps", s.steps);
  s.mode = parse_sampler_mode(c.get<std::string>("mode", sampler_mode_name(s.mode)));
  c.finish();
  return s;
}

struct ClassifierSpec {
  std::optional<fs::path> path;
  std::uint64_t seed = 7;
  std::size_t per_class = 60;
  int iterations = 400;
};

inline ClassifierSpec read_classifier(ConfigReader& r, const Common& c) {
  ClassifierSpec s;
  if (!r.has("classifier")) return s;
  auto cr = r.child("classifier");
  if (cr.has("path")) s.path = c.resolve(cr.require<std::string>("path"));
  s.seed = cr.get<std::uint64_t>("seed", s.seed);
  s.per_class = cr.get<std::size_t>("per_class", s.per_class);
  s.iterations = cr.get<int>("iterations", s.iterations);
  cr.finish();
  return s;
}

inline ToyEffusionClassifier open_classifier(const ClassifierSpec& s) {
  if (s.path) return ToyEffusionClassifier::from_json(read_json_file(*s.path));
  return ToyEffusionClassifier::fit(s.seed, s.per_class, s.iterations);
}

struct TrainingDataSpec {
  std::optional<fs::path> negatives, positives, images;
  std::size_t synthetic_negatives = 5, synthetic_positives = 5;
  bool synthetic = false;
};

inline TrainingDataSpec read_training_data(ConfigReader& r, const Common& c, bool single_set) {
  TrainingDataSpec s;
  auto d = r.child("data");
  if (d.has("synthetic")) {
    s.synthetic = true;
    auto syn = d.child("synthetic");
    s.synthetic_negatives = syn.get<std::size_t>("negatives", single_set ? 0 : s.synthetic_negatives);
    s.synthetic_positives = syn.get<std::size_t>("positives", s.synthetic_positives);
    syn.finish();
  } else if (single_set) {
    s.images = c.resolve(d.require<std::string>("images"));
  } else {
    s.negatives = c.resolve(d.require<std::string>("negatives"));
    s.positives = c.resolve(d.require<std::string>("positives"));
  }
  d.finish();
  return s;
}

// ---------------------------------------------------------------------------
// Commands. Each parses its config completely before touching any data.

struct Outcome {
  ArtifactSet artifacts;
  json summary = json::object();
};

using Command = std::function<Outcome()>;

inline Command recon_eval(ConfigReader& r, const Common& c) {
  const auto originals = c.resolve(r.require<std::string>("originals"));
  const auto recons = c.resolve(r.require<std::string>("reconstructions"));
  const auto fid_batch = r.get<std::size_t>("fid_batch", kFidBatchSize);
  const auto extractor_seed = r.get<std::uint64_t>("extractor_seed", 7);
  const bool with_classifier = r.has("classifier");
  const auto clf_spec = read_classifier(r, c);
  if (fid_batch < 2) throw config_error("InvalidRange", "fid_batch must be >= 2");
  return [=] {
    Outcome o;
    const ToyFeatureExtractor embedder(extractor_seed);
    std::vector<const ClassifierContract*> clfs;
    std::optional<ToyEffusionClassifier> clf;
    if (with_classifier) {
      clf = open_classifier(clf_spec);
      clfs.push_back(&*clf);
    }
    const auto rep = reconstruction_report(load_images(originals), load_images(recons), embedder, clfs, fid_batch);
    o.artifacts.add_json(c.out / "report.json", to_json(rep));
    if (!rep.classes.empty()) o.artifacts.add(c.out / "classes.csv", class_table_csv(rep.classes));
    o.summary = {{"pairs", rep.pairs.size()},
                 {"ssim_mean", number_or_inf(rep.ssim.mean)},
                 {"rmse_mean", number_or_inf(rep.rmse.mean)},
                 {"psnr_mean", number_or_inf(rep.psnr.mean)},
                 {"cosine_mean", number_or_inf(rep.cosine.mean)},
                 {"fid_mean", rep.fid_mean}};
    return o;
  };
}

inline Command text_bench(ConfigReader& r, const Common& c) {
  std::vector<fs::path> encoder_files;
  if (r.has("encoder_outputs") && r.raw("encoder_outputs").is_string()) {
    encoder_files.push_back(c.resolve(r.require<std::string>("encoder_outputs")));
  } else {
    for (const auto& p : r.require<std::vector<std::string>>("encoder_outputs")) encoder_files.push_back(c.resolve(p));
  }
  const auto reports_path = c.resolve(r.require<std::string>("reports"));
  const int k = r.get<int>("k", 10);
  const auto mode = parse_label_mode(r.get<std::string>("label_mode", "primary_class"));
  std::vector<ExtractionStrategy> strategies(kAllStrategies.begin(), kAllStrategies.end());
  if (r.has("strategies")) {
    strategies.clear();
    for (const auto& s : r.require<std::vector<std::string>>("strategies")) strategies.push_back(parse_strategy(s));
  }
  const bool bow = r.get<bool>("bow_baseline", true);
  if (encoder_files.empty()) throw config_error("MissingKey", "encoder_outputs lists no files");
  if (k < 1) throw config_error("KTooLarge", "k must be >= 1");

  return [=] {
    Outcome o;
    auto reports = parse_reports_jsonl(read_text_file(reports_path), reports_path.string());
    std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::vector<LabeledReport> valid;
    for (auto& rep : reports) {
      if (rep.primary_class) valid.push_back(std::move(rep));
      else log_event("warn", "report skipped: no positive class", {{"id", rep.id}});
    }
    const auto labels = match_labels(valid, mode);
    const auto groups = primary_groups(valid);

    json results = json::array();
    std::vector<std::pair<std::string, std::map<ExtractionStrategy, std::optional<double>>>> strategy_rows;
    std::vector<std::pair<std::string, BenchmarkResult>> class_cols;
    json best_global = json::object();
    for (const auto& file : encoder_files) {
      auto outs = read_encoder_outputs(file);
      std::map<std::string, EncoderOutput> by_id;
      for (auto& e : outs) by_id[e.id] = std::move(e);
      std::vector<EncoderOutput> ordered;
      for (const auto& rep : valid) {
        auto it = by_id.find(rep.id);
        if (it == by_id.end()) throw data_error("IdMismatch", file.string() + " has no output for report " + rep.id);
        ordered.push_back(it->second);
      }
      if (ordered.empty()) throw data_error("NoReports", "no labelled reports to benchmark");
      const std::string encoder = ordered.front().encoder_id;
      std::map<ExtractionStrategy, std::optional<double>> cells;
      std::optional<BenchmarkResult> best;
      for (auto s : strategies) {
        const bool available = std::all_of(ordered.begin(), ordered.end(),
                                           [s](const EncoderOutput& e) { return strategy_available(e, s); });
        if (!available) {
          cells[s] = std::nullopt;
          continue;
        }
        auto res = chexpert_per_class(embedding_matrix(ordered, s), labels, k, groups);
        res.encoder_id = encoder;
        res.strategy = strategy_name(s);
        cells[s] = res.global;
        results.push_back(to_json(res));
        if (!best || res.global > best->global) best = res;
      }
      strategy_rows.emplace_back(encoder, cells);
      if (best) {
        class_cols.emplace_back(encoder, *best);
        best_global[encoder] = {{"strategy", best->strategy}, {"global", best->global}, {"macro", best->macro}};
      }
    }
    if (bow) {
      std::vector<std::string> texts;
      for (const auto& rep : valid) texts.push_back(rep.impression);
      auto res = aggregate_per_class(chexpert_at_k_from_similarity(bow_similarity_matrix(texts), labels, k), groups);
      res.k = k;
      res.encoder_id = "bag-of-words";
      res.strategy = "iou";
      results.push_back(to_json(res));
      class_cols.emplace_back("Bag-of-words", res);
      best_global["bag-of-words"] = {{"strategy", "iou"}, {"global", res.global}, {"macro", res.macro}};
    }
    o.artifacts.add_json(c.out / "benchmark.json", {{"schema_version", kReportSchemaVersion},
                                                    {"kind", "text_bench"},
                                                    {"k", k},
                                                    {"label_mode", mode == LabelMode::primary_class ? "primary_class" : "full_vector"},
                                                    {"reports", valid.size()},
                                                    {"results", results}});
    o.artifacts.add(c.out / "strategies.csv", strategy_table_csv(strategy_rows));
    o.artifacts.add(c.out / "classes.csv", class_score_table_csv(class_cols));
    o.summary = {{"reports", valid.size()}, {"k", k}, {"best", best_global}};
    if (!class_cols.empty()) o.summary["global"] = class_cols.front().second.global;
    return o;
  };
}

inline Command train_projection_cmd(ConfigReader& r, const Common& c) {
  const auto source = c.resolve(r.require<std::string>("source"));
  const auto target = c.resolve(r.require<std::string>("target"));
  ProjectionTrainConfig cfg;
  cfg.mode = parse_projection_mode(r.get<std::string>("mode", "document"));
  const auto strategy = parse_strategy(r.get<std::string>("strategy", "mean_hidden_states"));
  cfg.learning_rate = r.get<double>("learning_rate", cfg.learning_rate);
  cfg.steps = r.get<int>("steps", cfg.steps);
  cfg.batch_size = r.get<int>("batch_size", cfg.batch_size);
  cfg.optimizer = parse_optimizer(r.get<std::string>("optimizer", optimizer_name(cfg.optimizer)));
  cfg.hidden = r.get<Eigen::Index>("hidden", 0);
  cfg.seed = c.seed;
  if (cfg.steps < 1 || cfg.batch_size < 1) throw config_error("InvalidRange", "steps and batch_size must be >= 1");

  return [=] {
    Outcome o;
    const auto src = read_encoder_outputs(source);
    std::map<std::string, const EncoderOutput*> tgt_by_id;
    const auto tgt = read_encoder_outputs(target);
    for (const auto& t : tgt) tgt_by_id[t.id] = &t;
    std::vector<ProjectionPair> pairs;
    std::size_t dropped = 0;
    std::vector<Eigen::MatrixXd> ss, ts;
    for (const auto& s : src) {
      auto it = tgt_by_id.find(s.id);
      if (it == tgt_by_id.end()) {
        log_event("warn", "source record has no target", {{"id", s.id}});
        continue;
      }
      if (cfg.mode == ProjectionMode::document) {
        pairs.push_back({extract_embedding(s, strategy).transpose(), extract_embedding(*it->second, strategy).transpose()});
      } else {
        ss.push_back(s.token_states);
        ts.push_back(it->second->token_states);
      }
    }
    if (cfg.mode == ProjectionMode::token) {
      auto al = align_token_pairs(ss, ts);
      pairs = std::move(al.pairs);
      dropped = al.dropped;
      if (dropped) log_event("info", "dropped misaligned token pairs", {{"count", dropped}});
    }
    const auto res = train_projection(pairs, cfg);
    o.artifacts.add(c.out / "projection.ckpt",
                    encode_projection_checkpoint(res.mlp, cfg.mode, cfg.seed, static_cast<long>(res.loss_trace.size())));
    o.artifacts.add(c.out / "loss.csv", loss_trace_csv(res.loss_trace));
    o.summary = {{"pairs", pairs.size()},
                 {"dropped", dropped},
                 {"mode", mode_name(cfg.mode)},
                 {"first_loss", res.loss_trace.front()},
                 {"final_loss", res.loss_trace.back()}};
    return o;
  };
}

inline FinetuneConfig read_finetune_common(ConfigReader& r, const Common& c, FinetuneConfig cfg) {
  cfg.steps = r.get<int>("steps", cfg.steps);
  cfg.learning_rate = r.get<double>("learning_rate", cfg.learning_rate);
  cfg.batch_size = r.get<int>("batch_size", cfg.batch_size);
  cfg.optimizer = parse_optimizer(r.get<std::string>("optimizer", optimizer_name(cfg.optimizer)));
  cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

inline void add_training_artifacts(Outcome& o, const Common& c, const DiffusionBundle& b, const TrainingRun& run) {
  save_bundle(o.artifacts, c.out / "bundle", b);
  o.artifacts.add_json(c.out / "provenance.json", run.provenance);
  o.artifacts.add(c.out / "loss.csv", loss_trace_csv(run));
  const auto h = loss_halving(run.loss_trace);
  o.summary["loss_head"] = h.head;
  o.summary["loss_tail"] = h.tail;
  o.summary["loss_halved"] = h.halved();
  o.summary["steps"] = run.loss_trace.size();
}

inline Command train_ti(ConfigReader& r, const Common& c) {
  const auto bundle = read_bundle_source(r, c);
  const auto data = read_training_data(r, c, true);
  const auto token = r.get<std::string>("token", "<lung-xray>");
  const auto init_from = r.has("init_from") ? std::optional<std::string>(r.require<std::string>("init_from")) : std::nullopt;
  const auto caption = r.get<std::string>("caption", "a photo of a " + token);
  FinetuneConfig defaults;
  defaults.strategy = FinetuneStrategy::textual_inversion;
  defaults.steps = 300;
  defaults.learning_rate = 5e-2;
  const auto cfg = read_finetune_common(r, c, defaults);

  return [=] {
    Outcome o;
    auto b = open_bundle(bundle);
    std::vector<ImageSample> imgs;
    if (data.synthetic) {
      imgs = make_synthetic_cxrs(derive_seed(c.seed, 0xDA7A), data.synthetic_positives, true);
      for (auto& n : make_synthetic_cxrs(derive_seed(c.seed, 0xDA7A), data.synthetic_negatives, false)) imgs.push_back(std::move(n));
    } else {
      imgs = load_images(*data.images);
    }
    const auto set = make_finetune_set({}, std::move(imgs), "", caption);
    const auto reg = register_token(b, token, init_from, c.seed);
    const auto run = train_textual_inversion(b, set, reg, cfg);
    add_training_artifacts(o, c, b, run);
    o.summary["token_id"] = reg.token_id;
    return o;
  };
}

inline Command train_unet_cmd(ConfigReader& r, const Common& c) {
  const auto bundle = read_bundle_source(r, c);
  const auto data = read_training_data(r, c, false);
  const auto neg_caption = r.get<std::string>("negative_caption", kNegativePrompt);
  const auto pos_caption = r.get<std::string>("positive_caption", kPositivePrompt);
  FinetuneConfig defaults;
  defaults.strategy = parse_finetune_strategy(r.get<std::string>("strategy", "unet"));
  if (defaults.strategy == FinetuneStrategy::textual_inversion)
    throw config_error("StrategyMismatch", "train-unet takes strategy unet or unet_with_prior");
  std::string class_caption = "a chest radiograph";
  std::optional<std::size_t> prior_count;
  SamplerSettings prior_sampler;
  if (r.has("prior")) {
    auto p = r.child("prior");
    class_caption = p.get<std::string>("class_caption", class_caption);
    if (p.has("count")) prior_count = p.require<std::size_t>("count");
    defaults.prior_weight = p.get<double>("weight", defaults.prior_weight);
    prior_sampler = read_sampler(p);
    p.finish();
    if (prior_count && *prior_count < 1) throw config_error("InvalidRange", "prior.count must be >= 1");
  }
  const auto cfg_base = read_finetune_common(r, c, defaults);

  return [=] {
    Outcome o;
    auto b = open_bundle(bundle);
    FinetuneSet set;
    if (data.synthetic) {
      set = make_finetune_set(make_synthetic_cxrs(derive_seed(c.seed, 0xDA7A), data.synthetic_negatives, false),
                              make_synthetic_cxrs(derive_seed(c.seed, 0xDA7A), data.synthetic_positives, true),
                              neg_caption, pos_caption);
    } else {
      set = make_finetune_set(load_images(*data.negatives), load_images(*data.positives), neg_caption, pos_caption);
    }
    auto cfg = cfg_base;
    if (cfg.strategy == FinetuneStrategy::unet_with_prior) {
      const std::size_t n = prior_count.value_or(2 * set.size());
      cfg.prior_set = generate_prior_set(b, class_caption, n, derive_seed(c.seed, 0x9121), prior_sampler);
      o.summary["prior_count"] = n;
    }
    const auto run = train_unet(b, set, cfg);
    add_training_artifacts(o, c, b, run);
    o.summary["strategy"] = strategy_name(cfg.strategy);
    return o;
  };
}

inline Command generate_cmd(ConfigReader& r, const Common& c) {
  const auto bundle = read_bundle_source(r, c);
  GenerationSpec spec = effusion_generation_spec(c.seed);
  if (r.has("prompts")) {
    spec.prompts.clear();
    const json& arr = r.raw("prompts");
    if (!arr.is_array()) throw config_error("TypeError", "prompts must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ConfigReader p(arr[i], "prompts[" + std::to_string(i) + "]");
      spec.prompts.push_back({p.require<std::string>("caption"), p.require<int>("label")});
      p.finish();
    }
  }
  spec.per_prompt_count = r.get<std::size_t>("per_prompt_count", spec.per_prompt_count);
  spec.sampler = read_sampler(r);
  spec.validate();

  return [=] {
    Outcome o;
    const auto b = open_bundle(bundle);
    const auto images = generate_suite(b, spec);
    write_generated(o.artifacts, c.out / "images", images);
    o.summary = {{"images", images.size()}, {"prompts", spec.prompts.size()}, {"steps", spec.sampler.steps},
                 {"mode", sampler_mode_name(spec.sampler.mode)}};
    return o;
  };
}

inline Command classify_eval(ConfigReader& r, const Common& c) {
  const auto images = c.resolve(r.require<std::string>("images"));
  const auto method = r.get<std::string>("method", "generated");
  const auto spec = read_classifier(r, c);
  return [=] {
    Outcome o;
    const auto clf = open_classifier(spec);
    const auto set = read_generated(images);
    const Table4Row row{method, evaluate_generated(set, clf)};
    json report = to_json(row);
    report["schema_version"] = kReportSchemaVersion;
    report["kind"] = "classification_report";
    report["finding"] = clf.finding_id();
    report["threshold"] = kDecisionThreshold;
    o.artifacts.add_json(c.out / "report.json", report);
    o.artifacts.add(c.out / "table4.csv", table4_csv({row}));
    o.summary = {{"method", method}, {"auc", optional_number(row.report.auc)}, {"accuracy", row.report.accuracy},
                 {"f1", row.report.f1}, {"images", set.size()}};
    return o;
  };
}

inline Command fid_grid_cmd(ConfigReader& r, const Common& c) {
  std::vector<std::pair<std::string, BundleSource>> bundles;
  const json& arr = r.raw("bundles");
  if (!arr.is_array() || arr.empty()) throw config_error("TypeError", "bundles must be a non-empty array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    ConfigReader b(arr[i], "bundles[" + std::to_string(i) + "]");
    const auto name = b.require<std::string>("name");
    bundles.emplace_back(name, read_bundle_source(b, c));
    b.finish();
  }
  const auto prompts = r.get<std::vector<std::string>>("prompts", {kNegativePrompt, kPositivePrompt});
  std::vector<fs::path> refs;
  for (const auto& p : r.require<std::vector<std::string>>("references")) refs.push_back(c.resolve(p));
  if (refs.size() != prompts.size()) throw config_error("LengthMismatch", "need one reference manifest per prompt");
  const auto per_prompt = r.get<std::size_t>("per_prompt_count", 50);
  const auto extractor_seed = r.get<std::uint64_t>("extractor_seed", 7);
  const auto sampler = read_sampler(r);

  return [=] {
    Outcome o;
    const ToyFeatureExtractor extractor(extractor_seed);
    std::vector<FeatureSet> ref_sets;
    for (const auto& p : refs) ref_sets.push_back(extractor.features(load_images(p)));
    std::vector<DiffusionBundle> opened;
    for (const auto& [name, src] : bundles) opened.push_back(open_bundle(src));
    std::vector<NamedGenerator> gens;
    for (std::size_t i = 0; i < bundles.size(); ++i) gens.push_back(bundle_generator(bundles[i].first, opened[i], sampler));
    const auto grid = fid_grid(gens, prompts, ref_sets, extractor, per_prompt, c.seed);
    o.artifacts.add(c.out / "fid_grid.csv", fid_grid_csv(grid));
    json j = to_json(grid);
    j["schema_version"] = kReportSchemaVersion;
    j["extractor_id"] = extractor.id();
    j["per_prompt_count"] = per_prompt;
    o.artifacts.add_json(c.out / "fid_grid.json", j);
    o.summary = {{"rows", grid.rows.size()}, {"columns", grid.columns.size()}};
    return o;
  };
}

// ---------------------------------------------------------------------------

struct RunResult {
  int exit_code = 0;
  json summary;
};

inline Command parse_command(const std::string& command, ConfigReader& r, const Common& c) {
  if (command == "recon-eval") return recon_eval(r, c);
  if (command == "text-bench") return text_bench(r, c);
  if (command == "train-projection") return train_projection_cmd(r, c);
  if (command == "train-ti") return train_ti(r, c);
  if (command == "train-unet") return train_unet_cmd(r, c);
  if (command == "generate") return generate_cmd(r, c);
  if (command == "classify-eval") return classify_eval(r, c);
  if (command == "fid-grid") return fid_grid_cmd(r, c);
  throw config_error("UnknownCommand", "'" + command + "'");
}

// Validates the whole config, runs the command, and publishes its artifacts
// only if everything succeeded. Never throws.
inline RunResult run(const std::string& command, const json& config, const Overrides& ov = {},
                     const fs::path& base_dir = fs::current_path()) {
  RunResult res;
  try {
    ConfigReader r(config, "config");
    const Common c = read_common(r, command, ov, base_dir);
    const Command cmd = parse_command(command, r, c);
    r.finish();
    log_event("info", "start", {{"command", command}, {"seed", c.seed}, {"out", c.out.string()}, {"threads", c.threads}});
    Outcome o = cmd();
    json artifacts = json::array();
    for (const auto& p : o.artifacts.paths()) artifacts.push_back(fs::relative(p, c.out).generic_string());
    res.summary = {{"command", command}, {"status", "ok"}, {"seed", c.seed}, {"artifacts", artifacts}};
    res.summary.update(o.summary);
    o.artifacts.add_json(c.out / "summary.json", res.summary);
    o.artifacts.commit();
    log_event("info", "done", {{"command", command}, {"artifacts", artifacts.size()}});
  } catch (const Error& e) {
    res.exit_code = exit_code(e.family());
    res.summary = {{"command", command}, {"status", "error"}, {"kind", e.kind()}, {"message", e.what()}};
    log_event("error", e.what(), {{"command", command}, {"kind", e.kind()}});
  } catch (const json::exception& e) {
    res.exit_code = exit_code(ErrorFamily::data);
    res.summary = {{"command", command}, {"status", "error"}, {"kind", "FormatError"}, {"message", e.what()}};
    log_event("error", e.what(), {{"command", command}, {"kind", "FormatError"}});
  } catch (const fs::filesystem_error& e) {
    res.exit_code = exit_code(ErrorFamily::data);
    res.summary = {{"command", command}, {"status", "error"}, {"kind", "IOError"}, {"message", e.what()}};
    log_event("error", e.what(), {{"command", command}, {"kind", "IOError"}});
  }
  return res;
}

inline RunResult run_file(const std::string& command, const fs::path& config_path, const Overrides& ov = {}) {
  json config;
  try {
    config = read_json_file(config_path);
  } catch (const Error& e) {
    log_event("error", e.what(), {{"command", command}, {"kind", e.kind()}});
    return {exit_code(ErrorFamily::config), {{"command", command}, {"status", "error"}, {"kind", e.kind()}, {"message", e.what()}}};
  }
  return run(command, config, ov, fs::absolute(config_path).parent_path());
}

}  // namespace cxrdiff::cli
