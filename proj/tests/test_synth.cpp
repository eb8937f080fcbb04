#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "qme/metrics/metrics.hpp"
#include "qme/synth/synth.hpp"

using namespace qme;

namespace {

template <typename Fn>
std::string error_code(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("qme_synth_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Rank-1 of one modality's raw score matrix against the split's gallery.
double modality_rank1(const synth::SynthSplit& split, const std::string& modality,
                      const std::vector<bool>* subset = nullptr) {
  const core::ScoreMatrix& sm = split.scores.at(modality);
  std::vector<metrics::QueryScores> queries;
  for (Eigen::Index q = 0; q < sm.values.rows(); ++q) {
    if (subset && !(*subset)[static_cast<std::size_t>(q)]) continue;
    metrics::QueryScores qs;
    qs.scores = sm.values.row(q).transpose();
    const std::string& subject =
        split.manifest.queries[static_cast<std::size_t>(q)].subject_id;
    for (const auto& t : split.manifest.templates)
      qs.is_match.push_back(t.subject_id == subject);
    qs.valid.resize(static_cast<std::size_t>(sm.values.cols()));
    for (Eigen::Index t = 0; t < sm.values.cols(); ++t)
      qs.valid[static_cast<std::size_t>(t)] = sm.mask(q, t);
    queries.push_back(std::move(qs));
  }
  return metrics::cmc(queries, 1).value;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t k = 0; k < ra.size(); ++k) {
    num += (ra[k] - ma) * (rb[k] - mb);
    da += (ra[k] - ma) * (ra[k] - ma);
    db += (rb[k] - mb) * (rb[k] - mb);
  }
  return num / std::sqrt(da * db);
}

synth::SynthConfig small_config() {
  synth::SynthConfig c;
  c.train_subjects = 6;
  c.test_subjects = 5;
  c.gallery_per_subject = 2;
  c.queries_per_subject = 3;
  c.frames_per_query = 3;
  c.modalities = {{"face", core::MetricKind::kCosine, 8, 0.05},
                  {"body", core::MetricKind::kEuclidean, 6, 0.1}};
  c.blocks = 2;
  c.patches = 2;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_CASE("generation is deterministic for a fixed config") {
  const auto config = small_config();
  const auto a = synth::generate(config);
  const auto b = synth::generate(config);
  for (const auto& mod : config.modalities) {
    const auto& sa = a.test.scores.at(mod.modality_id);
    const auto& sb = b.test.scores.at(mod.modality_id);
    CHECK(sa.values == sb.values);
    CHECK((sa.mask == sb.mask).all());
    CHECK(a.train.manifest.gallery_features.at(mod.modality_id) ==
          b.train.manifest.gallery_features.at(mod.modality_id));
  }
  CHECK(a.test.degraded == b.test.degraded);
  REQUIRE(a.test.quality.size() == b.test.quality.size());
  for (std::size_t i = 0; i < a.test.quality.size(); ++i)
    CHECK(a.test.quality[i].quality_factor == b.test.quality[i].quality_factor);

  // a different seed changes the data
  auto other = config;
  other.seed = 8;
  const auto c = synth::generate(other);
  CHECK(c.test.scores.at("face").values != a.test.scores.at("face").values);
}

TEST_CASE("config validation and JSON round trip") {
  auto config = small_config();
  const auto j = config.to_json();
  const auto back = synth::SynthConfig::from_json(j);
  CHECK(back.to_json() == j);

  auto bad_dim = config;
  bad_dim.modalities[0].feature_dim = 1;
  CHECK(error_code([&] { bad_dim.validate(); }) == "DegenerateConfig");

  auto bad_mod = config;
  bad_mod.degraded_modality = "iris";
  bad_mod.degraded_fraction = 0.5;
  CHECK(error_code([&] { bad_mod.validate(); }) == "UnknownModality");

  auto bad_range = config;
  bad_range.degraded_q_min = 0.6;
  bad_range.degraded_q_max = 0.5;
  CHECK(error_code([&] { bad_range.validate(); }) == "DegenerateConfig");
}

TEST_CASE("clean data at q near 1 yields near-perfect per-modality rank-1") {
  synth::SynthConfig config;
  config.train_subjects = 5;
  config.test_subjects = 20;
  config.modalities = {{"face", core::MetricKind::kCosine, 32, 0.05},
                       {"body", core::MetricKind::kCosine, 32, 0.05}};
  config.degraded_fraction = 0.0;
  config.clean_q_min = 1.0;  // every query at q = 1: noise scale is just sigma
  config.seed = 3;
  const auto data = synth::generate(config);
  for (const auto& mod : config.modalities)
    CHECK(modality_rank1(data.test, mod.modality_id) >= 0.95);
}

TEST_CASE("kappa = 0 makes quality irrelevant to the generated scores") {
  auto clean = small_config();
  clean.kappa = 0.0;
  clean.degraded_fraction = 0.0;
  auto degraded = clean;
  degraded.degraded_fraction = 1.0;
  const auto a = synth::generate(clean);
  const auto b = synth::generate(degraded);
  // same RNG draw count per query, zero quality coupling: identical scores
  for (const auto& mod : clean.modalities)
    CHECK(a.test.scores.at(mod.modality_id).values ==
          b.test.scores.at(mod.modality_id).values);
  // but the recorded quality factors do differ
  CHECK(a.test.quality_factor("te000_q0", "face") >= 0.98);
  CHECK(b.test.quality_factor("te000_q0", "face") <= 0.05);
}

TEST_CASE("match score is quality-monotone under noise-only degradation") {
  synth::SynthConfig config;
  config.train_subjects = 120;
  config.test_subjects = 5;
  config.queries_per_subject = 9;  // 1080 train queries
  config.gallery_per_subject = 2;
  config.frames_per_query = 4;
  config.modalities = {{"face", core::MetricKind::kCosine, 16, 0.05}};
  config.degraded_fraction = 1.0;
  config.degraded_q_min = 0.0;
  config.degraded_q_max = 1.0;  // quality spans the full range
  config.kappa = 20.0;  // strong but not fully saturating at q = 0
  config.seed = 11;
  const auto data = synth::generate(config);
  const auto& sm = data.train.scores.at("face");

  std::vector<double> quality, match_mean;
  for (Eigen::Index q = 0; q < sm.values.rows(); ++q) {
    const auto& info = data.train.manifest.queries[static_cast<std::size_t>(q)];
    quality.push_back(data.train.quality_factor(info.query_id, "face"));
    double sum = 0.0;
    int n = 0;
    for (std::size_t t = 0; t < data.train.manifest.templates.size(); ++t) {
      if (data.train.manifest.templates[t].subject_id != info.subject_id) continue;
      sum += sm.values(q, static_cast<Eigen::Index>(t));
      ++n;
    }
    match_mean.push_back(sum / n);
  }
  CHECK(quality.size() >= 1000);
  // raw per-query correlation is positive but noisy near saturation
  CHECK(spearman(quality, match_mean) >= 0.7);
  // decile bin means are strictly increasing in quality
  std::vector<std::size_t> order(quality.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return quality[a] < quality[b]; });
  const std::size_t bin = order.size() / 5;
  double prev_mean = -std::numeric_limits<double>::infinity();
  for (int b = 0; b < 5; ++b) {
    double sum = 0.0;
    for (std::size_t i = bin * static_cast<std::size_t>(b);
         i < bin * static_cast<std::size_t>(b + 1); ++i)
      sum += match_mean[order[i]];
    const double mean = sum / static_cast<double>(bin);
    CHECK(mean > prev_mean);
    prev_mean = mean;
  }
}

TEST_CASE("degraded queries lose rank-1 accuracy on the degraded modality") {
  synth::SynthConfig config;  // defaults: kappa 200, 40% degraded face
  config.train_subjects = 5;
  config.test_subjects = 40;
  config.seed = 5;
  const auto data = synth::generate(config);
  std::vector<bool> degraded = data.test.degraded;
  std::vector<bool> clean(degraded.size());
  for (std::size_t i = 0; i < degraded.size(); ++i) clean[i] = !degraded[i];
  const double r_degraded = modality_rank1(data.test, "face", &degraded);
  const double r_clean = modality_rank1(data.test, "face", &clean);
  CHECK(r_clean - r_degraded >= 0.10);

  // the quality table identifies the same subset
  for (std::size_t q = 0; q < data.test.manifest.queries.size(); ++q) {
    const auto& id = data.test.manifest.queries[q].query_id;
    CHECK((data.test.quality_factor(id, "face") < 0.5) == degraded[q]);
  }
}

TEST_CASE("emit then load reproduces the dataset bit-exactly") {
  auto config = small_config();
  config.missing_fraction = 0.3;
  config.missing_modality = "body";
  const auto data = synth::generate(config);
  const auto dir = temp_dir("roundtrip");
  synth::emit(data, dir);
  const auto loaded = synth::load_dataset(dir);
  CHECK(loaded.config.to_json() == config.to_json());

  const auto check_split = [&](const synth::SynthSplit& a, const synth::SynthSplit& b) {
    REQUIRE(a.manifest.queries.size() == b.manifest.queries.size());
    for (const auto& mod : config.modalities) {
      const auto& sa = a.scores.at(mod.modality_id);
      const auto& sb = b.scores.at(mod.modality_id);
      REQUIRE((sa.mask == sb.mask).all());
      for (Eigen::Index q = 0; q < sa.values.rows(); ++q)
        for (Eigen::Index t = 0; t < sa.values.cols(); ++t)
          if (sa.mask(q, t)) CHECK(sa.values(q, t) == sb.values(q, t));
      CHECK(a.manifest.gallery_features.at(mod.modality_id) ==
            b.manifest.gallery_features.at(mod.modality_id));
      // intermediate patch stacks survive the round trip
      const auto& ia = a.intermediate.at(mod.modality_id);
      const auto& ib = b.intermediate.at(mod.modality_id);
      REQUIRE(ia.size() == ib.size());
      for (const auto& [query_id, stack] : ia) {
        const auto& other = ib.at(query_id);
        CHECK(stack.blocks == other.blocks);
        CHECK(stack.patches == other.patches);
        REQUIRE(stack.frames.size() == other.frames.size());
        for (std::size_t f = 0; f < stack.frames.size(); ++f)
          CHECK(stack.frames[f] == other.frames[f]);
      }
    }
    REQUIRE(a.quality.size() == b.quality.size());
    for (std::size_t i = 0; i < a.quality.size(); ++i) {
      CHECK(a.quality[i].query_id == b.quality[i].query_id);
      CHECK(a.quality[i].modality_id == b.quality[i].modality_id);
      CHECK(a.quality[i].quality_factor == b.quality[i].quality_factor);
    }
  };
  check_split(data.train, loaded.train);
  check_split(data.test, loaded.test);

  // a missing modality shows up as an NA score row and an absent frame matrix
  bool any_missing = false;
  for (std::size_t q = 0; q < data.test.queries.size(); ++q)
    any_missing = any_missing || !data.test.queries[q].frames.count("body");
  REQUIRE(any_missing);
  std::ifstream scores_csv(dir / "test" / "scores_body.csv");
  std::stringstream buffer;
  buffer << scores_csv.rdbuf();
  CHECK(buffer.str().find("NA") != std::string::npos);
  for (std::size_t q = 0; q < data.test.queries.size(); ++q) {
    const bool has = data.test.queries[q].frames.count("body") > 0;
    CHECK(loaded.test.queries[q].frames.count("body") == (has ? 1u : 0u));
    CHECK(bool(loaded.test.scores.at("body").mask.row(
                   static_cast<Eigen::Index>(q)).all()) == has);
  }
}

TEST_CASE("quality rows follow manifest query order with modalities nested") {
  const auto data = synth::generate(small_config());
  const auto& split = data.train;
  // no missing modality in this config: one row per (query, modality) pair
  REQUIRE(split.quality.size() ==
          split.manifest.queries.size() * data.config.modalities.size());
  std::size_t row = 0;
  for (const auto& info : split.manifest.queries) {
    for (const auto& mod : data.config.modalities) {
      CHECK(split.quality[row].query_id == info.query_id);
      CHECK(split.quality[row].modality_id == mod.modality_id);
      ++row;
    }
  }
}
