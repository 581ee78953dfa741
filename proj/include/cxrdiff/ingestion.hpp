#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "cxrdiff/image_io.hpp"
#include "cxrdiff/io.hpp"

namespace cxrdiff {

struct LabeledReport {
  std::string id;
  std::string full_text;
  std::string impression;  // empty when the record is flagged invalid
  LabelVector labels{};
  std::optional<std::size_t> primary_class;
  bool valid = false;
};

struct PromptCorpus {
  enum class Origin { template_expanded, external_file };
  std::vector<std::string> prompts;
  Origin origin = Origin::external_file;
};

// Few-shot adaptation set: every image carries exactly one caption.
struct FinetuneSet {
  std::vector<ImageSample> negatives;
  std::vector<ImageSample> positives;
  std::vector<std::string> negative_captions;
  std::vector<std::string> positive_captions;

  std::size_t size() const { return negatives.size() + positives.size(); }
  // Flattened (image, caption) view: negatives first, then positives.
  const ImageSample& image(std::size_t i) const {
    return i < negatives.size() ? negatives[i] : positives[i - negatives.size()];
  }
  const std::string& caption(std::size_t i) const {
    return i < negatives.size() ? negative_captions[i] : positive_captions[i - negatives.size()];
  }
  void validate() const {
    if (negatives.size() != negative_captions.size() || positives.size() != positive_captions.size())
      throw data_error("FormatError", "finetune set: every image needs exactly one caption");
    if (size() == 0) throw data_error("FormatError", "finetune set is empty");
  }
};

inline constexpr const char* kNegativePrompt = "a photo of a lung xray";
inline constexpr const char* kPositivePrompt = "a photo of a lung xray with visible pleural effusion";

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Returns the text following the last case-insensitive "IMPRESSION:" marker,
// up to the next all-caps section header ("NOTIFICATION:", "RECOMMENDATION:").
inline std::string extract_impression(const std::string& full_text) {
  if (full_text.empty()) throw data_error("MissingSection", "empty report text");
  static const std::regex marker("impression\\s*:", std::regex::icase);
  std::size_t start = std::string::npos;
  for (auto it = std::sregex_iterator(full_text.begin(), full_text.end(), marker);
       it != std::sregex_iterator(); ++it)
    start = static_cast<std::size_t>(it->position() + it->length());
  if (start == std::string::npos) throw data_error("MissingSection", "no IMPRESSION marker");

  const std::string rest = full_text.substr(start);
  static const std::regex header("(^|\\s)[A-Z][A-Z ]{2,}:");
  std::smatch m;
  std::string body = rest;
  if (std::regex_search(rest, m, header)) body = rest.substr(0, static_cast<std::size_t>(m.position()));
  body = trim(body);
  if (body.empty()) throw data_error("MissingSection", "IMPRESSION section is empty");
  return body;
}

// Uncertain counts as present; missing counts as absent.
inline BinaryLabels normalize_labels(const LabelVector& raw) {
  BinaryLabels out{};
  for (std::size_t i = 0; i < kNumClasses; ++i)
    out[i] = (raw[i] == LabelState::positive || raw[i] == LabelState::uncertain) ? 1 : 0;
  return out;
}

inline LabelVector binary_to_labels(const BinaryLabels& b) {
  LabelVector out{};
  for (std::size_t i = 0; i < kNumClasses; ++i)
    out[i] = b[i] ? LabelState::positive : LabelState::negative;
  return out;
}

// Lowest-index positive class; "No Finding" only when it is the sole positive.
// Positivity is judged on normalized labels.
inline std::optional<std::size_t> primary_class(const LabelVector& raw) {
  const auto bin = normalize_labels(raw);
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (i != kNoFindingIndex && bin[i]) return i;
  if (bin[kNoFindingIndex]) return kNoFindingIndex;
  return std::nullopt;
}

inline LabeledReport make_report(std::string id, std::string text, const LabelVector& labels) {
  LabeledReport r;
  r.id = std::move(id);
  r.full_text = std::move(text);
  r.labels = labels;
  r.primary_class = primary_class(labels);
  try {
    r.impression = extract_impression(r.full_text);
    r.valid = r.primary_class.has_value();
  } catch (const Error&) {
    r.valid = false;
  }
  return r;
}

// Reports: JSON lines {id, text, labels: [14 of -1|0|1|null]}.
inline std::vector<LabeledReport> parse_reports_jsonl(const std::string& text, const std::string& locus) {
  std::vector<LabeledReport> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = locus + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
      out.push_back(make_report(j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                                labels_from_json(j.at("labels"), where)));
    } catch (const json::exception& e) {
      throw data_error("FormatError", where + ": " + e.what());
    }
  }
  return out;
}

inline std::string reports_to_jsonl(const std::vector<LabeledReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    json j = {{"id", r.id}, {"text", r.full_text}, {"labels", labels_to_json(r.labels)}};
    out += j.dump() + "\n";
  }
  return out;
}

inline PromptCorpus parse_prompts(const std::string& text) {
  PromptCorpus corpus;
  corpus.origin = PromptCorpus::Origin::external_file;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = trim(text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos));
    pos = nl == std::string::npos ? text.size() : nl + 1;
    if (!line.empty()) corpus.prompts.push_back(std::move(line));
  }
  return corpus;
}

enum class ManifestKind { images, reports, prompts };

inline ManifestKind parse_manifest_kind(const std::string& s) {
  if (s == "images") return ManifestKind::images;
  if (s == "reports") return ManifestKind::reports;
  if (s == "prompts") return ManifestKind::prompts;
  throw config_error("FormatError", "unknown manifest kind '" + s + "'");
}

struct Dataset {
  ManifestKind kind = ManifestKind::images;
  std::vector<ImageSample> images;
  std::vector<LabeledReport> reports;
  PromptCorpus prompts;
};

// Manifest: {"kind": "images"|"reports"|"prompts", "records": [relative paths]}.
// Image records are .png files or raw .json sidecars; report records are
// JSON-lines files; prompt records are text files with one prompt per line.
inline Dataset load_manifest(const fs::path& path, ManifestKind kind) {
  const json m = read_json_file(path);
  if (!m.is_object() || !m.contains("records") || !m["records"].is_array())
    throw data_error("FormatError", path.string() + ": manifest needs a 'records' array");
  if (m.contains("kind") && parse_manifest_kind(m["kind"].get<std::string>()) != kind)
    throw data_error("FormatError", path.string() + ": manifest kind does not match request");

  Dataset ds;
  ds.kind = kind;
  const fs::path base = path.parent_path();
  std::size_t idx = 0;
  for (const auto& rec : m["records"]) {
    if (!rec.is_string())
      throw data_error("FormatError", path.string() + ": record " + std::to_string(idx) + " is not a path");
    const fs::path p = base / rec.get<std::string>();
    switch (kind) {
      case ManifestKind::images: ds.images.push_back(read_image(p)); break;
      case ManifestKind::reports: {
        auto reps = parse_reports_jsonl(read_text_file(p), p.string());
        for (auto& r : reps) ds.reports.push_back(std::move(r));
        break;
      }
      case ManifestKind::prompts: {
        auto c = parse_prompts(read_text_file(p));
        for (auto& s : c.prompts) ds.prompts.prompts.push_back(std::move(s));
        break;
      }
    }
    ++idx;
  }
  std::stable_sort(ds.images.begin(), ds.images.end(),
                   [](const auto& a, const auto& b) { return a.id < b.id; });
  std::stable_sort(ds.reports.begin(), ds.reports.end(),
                   [](const auto& a, const auto& b) { return a.id < b.id; });
  for (const auto& img : ds.images) img.validate();

  const std::size_t count = ds.images.size() + ds.reports.size() + ds.prompts.prompts.size();
  if (count == 0) log_event("warn", "empty manifest", {{"path", path.string()}});
  return ds;
}

inline std::vector<ImageSample> load_images(const fs::path& manifest) {
  return load_manifest(manifest, ManifestKind::images).images;
}

// Writes images in the raw format plus a manifest listing them.
inline void write_image_collection(ArtifactSet& out, const fs::path& dir,
                                   const std::vector<ImageSample>& images) {
  json records = json::array();
  for (const auto& img : images) {
    write_raw_image(out, dir, img);
    records.push_back(img.id + ".json");
  }
  out.add_json(dir / "manifest.json", {{"kind", "images"}, {"records", records}});
}

inline FinetuneSet make_finetune_set(std::vector<ImageSample> negatives, std::vector<ImageSample> positives,
                                     const std::string& negative_caption = kNegativePrompt,
                                     const std::string& positive_caption = kPositivePrompt) {
  FinetuneSet set;
  set.negative_captions.assign(negatives.size(), negative_caption);
  set.positive_captions.assign(positives.size(), positive_caption);
  set.negatives = std::move(negatives);
  set.positives = std::move(positives);
  set.validate();
  return set;
}

}  // namespace cxrdiff
