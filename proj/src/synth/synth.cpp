#include "qme/synth/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "qme/core/io.hpp"
#include "qme/core/ops.hpp"

namespace qme::synth {
namespace {

// Substream indices: keep every random decision on its own deterministic
// stream so per-query generation could run in parallel unchanged.
constexpr std::uint64_t kStreamIdentity = 1;
constexpr std::uint64_t kStreamGallery = 2;
constexpr std::uint64_t kStreamQueryBase = 1000;
constexpr std::uint64_t kSplitStride = 1u << 24;

Vector gaussian_vector(Rng& rng, Eigen::Index d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = normal(rng);
  return v;
}

Vector unit_vector(Rng& rng, Eigen::Index d) {
  Vector v = gaussian_vector(rng, d);
  double n = v.norm();
  while (n < 1e-9) {
    v = gaussian_vector(rng, d);
    n = v.norm();
  }
  return v / n;
}

Vector noisy_copy(const Vector& base, double scale, Rng& rng, bool renormalize) {
  Vector v = base + scale * gaussian_vector(rng, base.size());
  if (renormalize) {
    const double n = v.norm();
    if (n > 1e-9) v /= n;
  }
  return v;
}

std::string subject_name(bool test, int index) {
  std::ostringstream out;
  out << (test ? "te" : "tr");
  out.width(3);
  out.fill('0');
  out << index;
  return out.str();
}

const SynthModality& find_modality(const std::vector<SynthModality>& mods,
                                   const std::string& id) {
  for (const auto& m : mods)
    if (m.modality_id == id) return m;
  fail("UnknownModality", id);
}

SynthSplit generate_split(const SynthConfig& config, bool test) {
  const int subjects = test ? config.test_subjects : config.train_subjects;
  const std::uint64_t split_offset = test ? kSplitStride : 0;

  SynthSplit split;
  for (int s = 0; s < subjects; ++s)
    split.manifest.subjects.push_back(subject_name(test, s));

  // Per-modality mean direction, shared across splits so a model trained on
  // the train split sees the same quality-bias geometry at test time.
  std::map<std::string, Vector> mean_dirs;
  {
    std::uint64_t mod_index = 0;
    for (const auto& mod : config.modalities) {
      Rng rng(substream_seed(config.seed, 900 + mod_index));
      mean_dirs[mod.modality_id] = unit_vector(rng, mod.feature_dim);
      ++mod_index;
    }
  }

  // Identity vectors per modality per subject.
  std::map<std::string, Matrix> identities;
  {
    std::uint64_t mod_index = 0;
    for (const auto& mod : config.modalities) {
      Rng rng(substream_seed(config.seed,
                             split_offset + kStreamIdentity * 100 + mod_index));
      Matrix ids(subjects, mod.feature_dim);
      const Vector mean = config.identity_mean * mean_dirs.at(mod.modality_id);
      for (int s = 0; s < subjects; ++s) {
        Vector id = mean + gaussian_vector(rng, mod.feature_dim);
        ids.row(s) = (id / id.norm()).transpose();
      }
      identities[mod.modality_id] = std::move(ids);
      ++mod_index;
    }
  }

  // Gallery templates, shared template order across modalities.
  for (int s = 0; s < subjects; ++s)
    for (int g = 0; g < config.gallery_per_subject; ++g)
      split.manifest.templates.push_back(
          {split.manifest.subjects[static_cast<std::size_t>(s)] + "_t" +
               std::to_string(g),
           split.manifest.subjects[static_cast<std::size_t>(s)]});
  {
    std::uint64_t mod_index = 0;
    for (const auto& mod : config.modalities) {
      Rng rng(substream_seed(config.seed,
                             split_offset + kStreamGallery * 100 + mod_index));
      const bool renorm = mod.metric_kind == core::MetricKind::kCosine;
      Matrix gal(static_cast<Eigen::Index>(split.manifest.templates.size()),
                 mod.feature_dim);
      Eigen::Index row = 0;
      for (int s = 0; s < subjects; ++s) {
        const Vector id = identities[mod.modality_id].row(s).transpose();
        for (int g = 0; g < config.gallery_per_subject; ++g)
          gal.row(row++) = noisy_copy(id, mod.sigma, rng, renorm).transpose();
      }
      split.manifest.gallery_features[mod.modality_id] = std::move(gal);
      ++mod_index;
    }
  }

  // Queries. One substream per query; every random draw for a query comes
  // from it, so query generation is order-independent.
  const int query_total = subjects * config.queries_per_subject;
  std::vector<std::string> query_ids;
  for (int s = 0; s < subjects; ++s)
    for (int q = 0; q < config.queries_per_subject; ++q)
      query_ids.push_back(split.manifest.subjects[static_cast<std::size_t>(s)] +
                          "_q" + std::to_string(q));

  for (auto& mod : config.modalities) {
    split.scores.emplace(
        mod.modality_id,
        core::ScoreMatrix::zeros(mod.modality_id, query_ids, [&] {
          std::vector<std::string> tids;
          for (const auto& t : split.manifest.templates)
            tids.push_back(t.template_id);
          return tids;
        }()));
  }

  for (int qi = 0; qi < query_total; ++qi) {
    const int s = qi / config.queries_per_subject;
    const std::string& subject = split.manifest.subjects[static_cast<std::size_t>(s)];
    Rng rng(substream_seed(config.seed, split_offset + kStreamQueryBase +
                                            static_cast<std::uint64_t>(qi)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    const bool degraded = uni(rng) < config.degraded_fraction;
    split.degraded.push_back(degraded);
    const bool missing = !config.missing_modality.empty() &&
                         uni(rng) < config.missing_fraction;

    core::QueryRecord record;
    record.info = {query_ids[static_cast<std::size_t>(qi)], subject,
                   config.frames_per_query};
    for (const auto& mod : config.modalities) {
      if (missing && mod.modality_id == config.missing_modality) {
        // absent modality: NA score row, no frames, no quality entry
        core::ScoreMatrix& sm = split.scores.at(mod.modality_id);
        sm.values.row(qi).setConstant(std::numeric_limits<double>::quiet_NaN());
        sm.mask.row(qi).setConstant(false);
        continue;
      }
      double q_factor;
      if (degraded && mod.modality_id == config.degraded_modality) {
        q_factor = config.degraded_q_min +
                   (config.degraded_q_max - config.degraded_q_min) * uni(rng);
      } else {
        q_factor = config.clean_q_min + (1.0 - config.clean_q_min) * uni(rng);
      }
      const double noise_scale = mod.sigma * (1.0 + config.kappa * (1.0 - q_factor));
      const bool renorm = mod.metric_kind == core::MetricKind::kCosine;
      const Vector id =
          identities[mod.modality_id].row(s).transpose() +
          config.bias_kappa * (1.0 - q_factor) * mean_dirs.at(mod.modality_id);

      Matrix frames(config.frames_per_query, mod.feature_dim);
      quality::FrameStack stack;
      stack.blocks = config.blocks;
      stack.patches = config.patches;
      const double patch_scale =
          config.patch_sigma * (1.0 + config.kappa * (1.0 - q_factor));
      for (int f = 0; f < config.frames_per_query; ++f) {
        const Vector frame = noisy_copy(id, noise_scale, rng, renorm);
        frames.row(f) = frame.transpose();
        Matrix patches(config.blocks * config.patches, mod.feature_dim);
        for (Eigen::Index p = 0; p < patches.rows(); ++p)
          patches.row(p) =
              (frame + patch_scale * gaussian_vector(rng, mod.feature_dim))
                  .transpose();
        stack.frames.push_back(std::move(patches));
      }

      const Vector pooled = core::aggregate_query_feature(frames);
      core::ScoreMatrix& sm = split.scores.at(mod.modality_id);
      sm.values.row(qi) =
          core::similarity_scores(
              pooled, split.manifest.gallery_features.at(mod.modality_id),
              mod.metric_kind)
              .transpose();
      sm.mask.row(qi).setConstant(true);

      record.frames[mod.modality_id] = std::move(frames);
      split.intermediate[mod.modality_id][record.info.query_id] = std::move(stack);
      split.quality.push_back({record.info.query_id, mod.modality_id, q_factor});
    }
    split.manifest.queries.push_back(record.info);
    split.queries.push_back(std::move(record));
  }

  split.manifest.validate();
  return split;
}

void emit_split(const SynthSplit& split, const std::vector<SynthModality>& mods,
                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  core::save_manifest(split.manifest, dir / "manifest.json");
  for (const auto& mod : mods) {
    const std::string& id = mod.modality_id;
    {
      // Gallery features as a feature CSV keyed by template id (one "frame").
      std::map<std::string, Matrix> rows;
      const Matrix& gal = split.manifest.gallery_features.at(id);
      for (std::size_t t = 0; t < split.manifest.templates.size(); ++t)
        rows[split.manifest.templates[t].template_id] =
            gal.row(static_cast<Eigen::Index>(t));
      core::save_feature_csv(rows, dir / ("gallery_" + id + ".csv"));
    }
    core::save_score_csv(split.scores.at(id), dir / ("scores_" + id + ".csv"));
    {
      std::map<std::string, Matrix> frames;
      for (const auto& q : split.queries) {
        auto it = q.frames.find(id);
        if (it != q.frames.end()) frames[q.info.query_id] = it->second;
      }
      core::save_feature_csv(frames, dir / ("features_" + id + ".csv"));
    }
    save_stack_csv(split.intermediate.count(id) ? split.intermediate.at(id)
                                                : std::map<std::string, quality::FrameStack>{},
                   dir / ("qe_features_" + id + ".csv"));
  }
  save_quality_csv(split.quality, dir / "quality.csv");
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, v);
  require(res.ec == std::errc() && res.ptr == last, "ParseError", s);
  return v;
}

}  // namespace

void SynthConfig::validate() const {
  require(train_subjects >= 1 && test_subjects >= 1, "DegenerateConfig");
  require(gallery_per_subject >= 1 && queries_per_subject >= 1, "DegenerateConfig");
  require(frames_per_query >= 1 && blocks >= 1 && patches >= 1, "DegenerateConfig");
  require(!modalities.empty(), "DegenerateConfig", "no modalities");
  for (const auto& m : modalities) {
    require(m.feature_dim >= 2, "DegenerateConfig", "feature_dim < 2");
    require(m.sigma > 0.0, "DegenerateConfig", "sigma <= 0");
  }
  require(kappa >= 0.0, "DegenerateConfig", "kappa < 0");
  require(identity_mean >= 0.0 && bias_kappa >= 0.0, "DegenerateConfig",
          "negative identity_mean or bias_kappa");
  require(patch_sigma > 0.0, "DegenerateConfig", "patch_sigma <= 0");
  require(degraded_fraction >= 0.0 && degraded_fraction <= 1.0, "DegenerateConfig");
  require(missing_fraction >= 0.0 && missing_fraction <= 1.0, "DegenerateConfig");
  require(0.0 <= degraded_q_min && degraded_q_min <= degraded_q_max &&
              degraded_q_max <= 1.0,
          "DegenerateConfig", "degraded quality range");
  require(clean_q_min >= 0.0 && clean_q_min <= 1.0, "DegenerateConfig");
  if (degraded_fraction > 0.0)
    find_modality(modalities, degraded_modality);
  if (missing_fraction > 0.0 && !missing_modality.empty())
    find_modality(modalities, missing_modality);
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : modalities)
    mods.push_back({{"modality_id", m.modality_id},
                    {"metric_kind", core::to_string(m.metric_kind)},
                    {"feature_dim", m.feature_dim},
                    {"sigma", m.sigma}});
  return {{"train_subjects", train_subjects},
          {"test_subjects", test_subjects},
          {"gallery_per_subject", gallery_per_subject},
          {"queries_per_subject", queries_per_subject},
          {"frames_per_query", frames_per_query},
          {"modalities", mods},
          {"blocks", blocks},
          {"patches", patches},
          {"identity_mean", identity_mean},
          {"bias_kappa", bias_kappa},
          {"kappa", kappa},
          {"patch_sigma", patch_sigma},
          {"degraded_fraction", degraded_fraction},
          {"degraded_modality", degraded_modality},
          {"degraded_q_min", degraded_q_min},
          {"degraded_q_max", degraded_q_max},
          {"clean_q_min", clean_q_min},
          {"missing_fraction", missing_fraction},
          {"missing_modality", missing_modality},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.train_subjects = j.value("train_subjects", c.train_subjects);
  c.test_subjects = j.value("test_subjects", c.test_subjects);
  c.gallery_per_subject = j.value("gallery_per_subject", c.gallery_per_subject);
  c.queries_per_subject = j.value("queries_per_subject", c.queries_per_subject);
  c.frames_per_query = j.value("frames_per_query", c.frames_per_query);
  if (j.contains("modalities")) {
    c.modalities.clear();
    for (const auto& m : j.at("modalities"))
      c.modalities.push_back(
          {m.at("modality_id").get<std::string>(),
           core::metric_kind_from_string(m.value("metric_kind", "cosine")),
           m.value("feature_dim", 32), m.value("sigma", 0.05)});
  }
  c.blocks = j.value("blocks", c.blocks);
  c.patches = j.value("patches", c.patches);
  c.identity_mean = j.value("identity_mean", c.identity_mean);
  c.bias_kappa = j.value("bias_kappa", c.bias_kappa);
  c.kappa = j.value("kappa", c.kappa);
  c.patch_sigma = j.value("patch_sigma", c.patch_sigma);
  c.degraded_fraction = j.value("degraded_fraction", c.degraded_fraction);
  c.degraded_modality = j.value("degraded_modality", c.degraded_modality);
  c.degraded_q_min = j.value("degraded_q_min", c.degraded_q_min);
  c.degraded_q_max = j.value("degraded_q_max", c.degraded_q_max);
  c.clean_q_min = j.value("clean_q_min", c.clean_q_min);
  c.missing_fraction = j.value("missing_fraction", c.missing_fraction);
  c.missing_modality = j.value("missing_modality", c.missing_modality);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

double SynthSplit::quality_factor(const std::string& query_id,
                                  const std::string& modality_id) const {
  for (const auto& row : quality)
    if (row.query_id == query_id && row.modality_id == modality_id)
      return row.quality_factor;
  fail("UnknownQuery", query_id + "/" + modality_id);
}

SynthDataset generate(const SynthConfig& config) {
  config.validate();
  SynthDataset out;
  out.config = config;
  out.train = generate_split(config, false);
  out.test = generate_split(config, true);
  return out;
}

void emit(const SynthDataset& dataset, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream meta(out_dir / "dataset.json");
  require(meta.good(), "IoError", (out_dir / "dataset.json").string());
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = dataset.config.to_json();
  meta << j.dump(2) << "\n";
  require(meta.good(), "IoError", "dataset.json write");
  emit_split(dataset.train, dataset.config.modalities, out_dir / "train");
  emit_split(dataset.test, dataset.config.modalities, out_dir / "test");
}

SynthSplit load_split(const std::filesystem::path& dir,
                      const std::vector<SynthModality>& modalities) {
  SynthSplit split;
  split.manifest = core::load_manifest(dir / "manifest.json");
  for (const auto& mod : modalities) {
    const std::string& id = mod.modality_id;
    {
      auto rows = core::load_feature_csv(dir / ("gallery_" + id + ".csv"));
      Matrix gal(static_cast<Eigen::Index>(split.manifest.templates.size()),
                 mod.feature_dim);
      for (std::size_t t = 0; t < split.manifest.templates.size(); ++t) {
        const auto it = rows.find(split.manifest.templates[t].template_id);
        require(it != rows.end(), "MissingTemplateFeature",
                split.manifest.templates[t].template_id);
        gal.row(static_cast<Eigen::Index>(t)) = it->second.row(0);
      }
      split.manifest.gallery_features[id] = std::move(gal);
    }
    split.scores.emplace(id, core::load_score_csv(dir / ("scores_" + id + ".csv"), id));
    split.intermediate[id] = load_stack_csv(dir / ("qe_features_" + id + ".csv"),
                                            0, 0);  // shape read from header
  }
  auto frame_sets = [&] {
    std::map<std::string, std::map<std::string, Matrix>> out;
    for (const auto& mod : modalities)
      out[mod.modality_id] =
          core::load_feature_csv(dir / ("features_" + mod.modality_id + ".csv"));
    return out;
  }();
  for (const auto& info : split.manifest.queries) {
    core::QueryRecord record;
    record.info = info;
    for (const auto& mod : modalities) {
      auto it = frame_sets[mod.modality_id].find(info.query_id);
      if (it != frame_sets[mod.modality_id].end())
        record.frames[mod.modality_id] = it->second;
    }
    split.queries.push_back(std::move(record));
  }
  split.quality = load_quality_csv(dir / "quality.csv");
  split.manifest.validate();
  return split;
}

SynthDataset load_dataset(const std::filesystem::path& root_dir) {
  std::ifstream meta(root_dir / "dataset.json");
  require(meta.good(), "IoError", (root_dir / "dataset.json").string());
  nlohmann::json j;
  meta >> j;
  require(j.value("format_version", 0) == 1, "FormatVersionMismatch");
  SynthDataset out;
  out.config = SynthConfig::from_json(j.at("config"));
  out.train = load_split(root_dir / "train", out.config.modalities);
  out.test = load_split(root_dir / "test", out.config.modalities);
  return out;
}

void save_stack_csv(const std::map<std::string, quality::FrameStack>& stacks,
                    const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "IoError", path.string());
  Eigen::Index d = 0;
  int blocks = 1, patches = 1;
  if (!stacks.empty()) {
    const auto& first = stacks.begin()->second;
    d = first.frames.empty() ? 0 : first.frames.front().cols();
    blocks = first.blocks;
    patches = first.patches;
  }
  out << "# blocks=" << blocks << " patches=" << patches << "\n";
  out << "query_id,frame_index,patch_index";
  for (Eigen::Index i = 0; i < d; ++i) out << ",f" << i;
  out << "\n";
  for (const auto& [query_id, stack] : stacks) {
    for (std::size_t f = 0; f < stack.frames.size(); ++f) {
      const Matrix& m = stack.frames[f];
      for (Eigen::Index p = 0; p < m.rows(); ++p) {
        out << query_id << "," << f << "," << p;
        for (Eigen::Index i = 0; i < m.cols(); ++i)
          out << "," << core::format_double(m(p, i));
        out << "\n";
      }
    }
  }
  require(out.good(), "IoError", path.string());
}

std::map<std::string, quality::FrameStack> load_stack_csv(
    const std::filesystem::path& path, int blocks, int patches) {
  std::ifstream in(path);
  require(in.good(), "IoError", path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "missing shape line");
  {
    int b = 0, p = 0;
    const int got = std::sscanf(line.c_str(), "# blocks=%d patches=%d", &b, &p);
    require(got == 2, "ParseError", "stack csv shape line");
    if (blocks <= 0) blocks = b;
    if (patches <= 0) patches = p;
    require(blocks == b && patches == p, "ShapeError", "stack csv block/patch shape");
  }
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "missing header");

  std::map<std::string, quality::FrameStack> out;
  const int rows_per_frame = blocks * patches;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_line(line);
    require(fields.size() >= 4, "ParseError", line);
    const std::string& query_id = fields[0];
    const int frame = static_cast<int>(parse_double(fields[1]));
    const int patch = static_cast<int>(parse_double(fields[2]));
    auto& stack = out[query_id];
    stack.blocks = blocks;
    stack.patches = patches;
    if (frame == static_cast<int>(stack.frames.size()))
      stack.frames.emplace_back(rows_per_frame,
                                static_cast<Eigen::Index>(fields.size() - 3));
    require(frame == static_cast<int>(stack.frames.size()) - 1, "ParseError",
            "non-contiguous frame rows for " + query_id);
    Matrix& m = stack.frames.back();
    require(patch >= 0 && patch < m.rows(), "ParseError", "patch index");
    for (std::size_t i = 3; i < fields.size(); ++i)
      m(patch, static_cast<Eigen::Index>(i - 3)) = parse_double(fields[i]);
  }
  for (auto& [query_id, stack] : out) stack.validate();
  return out;
}

void save_quality_csv(const std::vector<QualityRow>& rows,
                      const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "IoError", path.string());
  out << "query_id,modality_id,quality_factor\n";
  for (const auto& row : rows)
    out << row.query_id << "," << row.modality_id << ","
        << core::format_double(row.quality_factor) << "\n";
  require(out.good(), "IoError", path.string());
}

std::vector<QualityRow> load_quality_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "IoError", path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "missing header");
  require(line == "query_id,modality_id,quality_factor", "ParseError", line);
  std::vector<QualityRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_line(line);
    require(fields.size() == 3, "ParseError", line);
    rows.push_back({fields[0], fields[1], parse_double(fields[2])});
  }
  return rows;
}

}  // namespace qme::synth
