#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cxrdiff/diffusion.hpp"
#include "cxrdiff/image_io.hpp"
#include "cxrdiff/metrics.hpp"

namespace cxrdiff {

struct LabeledPrompt {
  std::string caption;
  int expected_label = 0;
};

struct GenerationSpec {
  std::vector<LabeledPrompt> prompts;
  std::size_t per_prompt_count = 50;
  std::uint64_t seed = 0;
  SamplerSettings sampler;

  void validate() const {
    if (per_prompt_count < 1) throw config_error("InvalidRange", "per_prompt_count must be >= 1");
    if (prompts.empty()) throw config_error("InvalidRange", "generation needs at least one prompt");
    for (const auto& p : prompts)
      if (p.expected_label != 0 && p.expected_label != 1)
        throw config_error("InvalidRange", "expected_label must be 0 or 1 for '" + p.caption + "'");
  }
};

inline GenerationSpec effusion_generation_spec(std::uint64_t seed, std::size_t per_prompt = 50) {
  GenerationSpec s;
  s.prompts = {{kNegativePrompt, 0}, {kPositivePrompt, 1}};
  s.per_prompt_count = per_prompt;
  s.seed = seed;
  return s;
}

struct GeneratedImage {
  ImageSample image;
  std::string caption;
  int expected_label = 0;
  std::uint64_t seed = 0;
  std::size_t prompt_index = 0, sample_index = 0;
  SamplerSettings sampler;
};

// Seed of sample j of prompt i. Adding prompts or samples never changes the
// seeds of existing ones.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t prompt_index, std::size_t sample_index) {
  return derive_seed(seed, prompt_index, sample_index);
}

inline std::vector<GeneratedImage> generate_suite(const DiffusionBundle& b, const GenerationSpec& spec) {
  spec.validate();
  std::vector<GeneratedImage> out;
  for (std::size_t i = 0; i < spec.prompts.size(); ++i)
    for (std::size_t j = 0; j < spec.per_prompt_count; ++j) {
      GeneratedImage g;
      g.seed = sample_seed(spec.seed, i, j);
      g.image = sample(b, spec.prompts[i].caption, spec.sampler, g.seed);
      g.image.id = "p" + std::to_string(i) + "_s" + std::to_string(j);
      g.caption = spec.prompts[i].caption;
      g.expected_label = spec.prompts[i].expected_label;
      g.prompt_index = i;
      g.sample_index = j;
      g.sampler = spec.sampler;
      out.push_back(std::move(g));
    }
  return out;
}

inline json sidecar_json(const GeneratedImage& g) {
  return {{"id", g.image.id},
          {"caption", g.caption},
          {"expected_label", g.expected_label},
          {"seed", g.seed},
          {"prompt_index", g.prompt_index},
          {"sample_index", g.sample_index},
          {"steps", g.sampler.steps},
          {"mode", sampler_mode_name(g.sampler.mode)}};
}

// PNG + sidecar per image, and an index listing every sidecar.
inline void write_generated(ArtifactSet& out, const fs::path& dir, const std::vector<GeneratedImage>& images) {
  json index = json::array();
  for (const auto& g : images) {
    out.add(dir / (g.image.id + ".png"), encode_png(g.image));
    json side = sidecar_json(g);
    out.add_json(dir / (g.image.id + ".json"), side);
    index.push_back(std::move(side));
  }
  out.add_json(dir / "index.json", {{"images", index}});
}

inline std::vector<GeneratedImage> read_generated(const fs::path& dir) {
  const json index = read_json_file(dir / "index.json");
  std::vector<GeneratedImage> out;
  try {
    for (const auto& s : index.at("images")) {
      GeneratedImage g;
      const auto id = s.at("id").get<std::string>();
      g.image = decode_png(read_binary_file(dir / (id + ".png")), id);
      g.caption = s.at("caption").get<std::string>();
      g.expected_label = s.at("expected_label").get<int>();
      g.seed = s.at("seed").get<std::uint64_t>();
      g.prompt_index = s.at("prompt_index").get<std::size_t>();
      g.sample_index = s.at("sample_index").get<std::size_t>();
      g.sampler.steps = s.at("steps").get<int>();
      g.sampler.mode = parse_sampler_mode(s.at("mode").get<std::string>());
      out.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw data_error("FormatError", (dir / "index.json").string() + ": " + e.what());
  }
  return out;
}

inline ClassificationReport evaluate_generated(const std::vector<GeneratedImage>& images, const ClassifierContract& clf) {
  std::vector<double> scores;
  std::vector<int> truth;
  for (const auto& g : images) {
    scores.push_back(clf.score(g.image));
    truth.push_back(g.expected_label);
  }
  const auto r = classification_report(scores, truth);
  if (!r.auc) throw data_error("SingleClassOnly", "generated set needs both expected labels for AUC");
  return r;
}

struct Table4Row {
  std::string method;
  ClassificationReport report;
};

inline std::string table4_csv(const std::vector<Table4Row>& rows) {
  std::string out = csv_row({"Method", "Prevalence", "AUC", "Accuracy", "F1Score", "Precision", "Recall"});
  for (const auto& r : rows)
    out += csv_row({r.method, fmt_fixed(r.report.prevalence, 3), r.report.auc ? fmt_fixed(*r.report.auc, 3) : "",
                    fmt_fixed(r.report.accuracy, 3), fmt_fixed(r.report.f1, 3), fmt_fixed(r.report.precision, 3),
                    fmt_fixed(r.report.recall, 3)});
  return out;
}

inline json to_json(const Table4Row& r) {
  json j = to_json(r.report);
  j["method"] = r.method;
  return j;
}

// ---------------------------------------------------------------------------
// FID grid: one row per generator, one column per prompt.

struct NamedGenerator {
  std::string name;
  // (caption, prompt index, sample index, seed) -> image
  std::function<ImageSample(const std::string&, std::size_t, std::size_t, std::uint64_t)> generate;
};

inline NamedGenerator bundle_generator(std::string name, const DiffusionBundle& b, SamplerSettings settings = {}) {
  return {std::move(name), [&b, settings](const std::string& caption, std::size_t, std::size_t, std::uint64_t seed) {
            return sample(b, caption, settings, seed);
          }};
}

struct FidGrid {
  std::vector<std::string> rows;     // generator names
  std::vector<std::string> columns;  // prompts
  std::vector<std::vector<double>> values;
};

inline FidGrid fid_grid(const std::vector<NamedGenerator>& generators, const std::vector<std::string>& prompts,
                        const std::vector<FeatureSet>& reference_sets, const FeatureExtractor& extractor,
                        std::size_t per_prompt_count, std::uint64_t seed) {
  if (reference_sets.size() != prompts.size())
    throw config_error("LengthMismatch", "need one reference set per prompt");
  if (per_prompt_count < 2) throw config_error("InvalidRange", "FID needs at least two samples per prompt");
  for (std::size_t j = 0; j < prompts.size(); ++j)
    if (reference_sets[j].features.rows() < 2)
      throw data_error("DegenerateCovariance", "reference set for '" + prompts[j] + "' has fewer than two samples");
  FidGrid grid;
  grid.columns = prompts;
  for (const auto& g : generators) {
    grid.rows.push_back(g.name);
    std::vector<double> row;
    for (std::size_t j = 0; j < prompts.size(); ++j) {
      std::vector<ImageSample> imgs;
      for (std::size_t k = 0; k < per_prompt_count; ++k)
        imgs.push_back(g.generate(prompts[j], j, k, sample_seed(seed, j, k)));
      row.push_back(fid(extractor.features(imgs), reference_sets[j]));
    }
    grid.values.push_back(std::move(row));
  }
  return grid;
}

inline std::string fid_grid_csv(const FidGrid& g) {
  std::vector<std::string> header = {"Strategy"};
  header.insert(header.end(), g.columns.begin(), g.columns.end());
  std::string out = csv_row(header);
  for (std::size_t i = 0; i < g.rows.size(); ++i) {
    std::vector<std::string> cells = {g.rows[i]};
    for (double v : g.values[i]) cells.push_back(fmt_fixed(v, 2));
    out += csv_row(cells);
  }
  return out;
}

inline json to_json(const FidGrid& g) {
  json rows = json::array();
  for (std::size_t i = 0; i < g.rows.size(); ++i) rows.push_back({{"strategy", g.rows[i]}, {"fid", g.values[i]}});
  return {{"prompts", g.columns}, {"rows", rows}};
}

}  // namespace cxrdiff
