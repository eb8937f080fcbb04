#ifndef QME_SYNTH_SYNTH_HPP
#define QME_SYNTH_SYNTH_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qme/core/types.hpp"
#include "qme/quality/quality.hpp"

namespace qme::synth {

struct SynthModality {
  std::string modality_id;
  core::MetricKind metric_kind = core::MetricKind::kCosine;
  int feature_dim = 32;
  double sigma = 0.05;  // base feature noise scale
};

// Desk-scale benchmark recipe. Quality only rescales noise: a query frame for
// quality q is identity + sigma * (1 + kappa * (1 - q)) * noise, so ranking
// degrades smoothly as q falls while identities stay fixed.
struct SynthConfig {
  int train_subjects = 100;
  int test_subjects = 50;
  int gallery_per_subject = 4;
  int queries_per_subject = 6;
  int frames_per_query = 8;
  std::vector<SynthModality> modalities = {
      {"face", core::MetricKind::kCosine, 32, 0.015},
      {"body", core::MetricKind::kCosine, 32, 0.16}};
  int blocks = 2;   // U
  int patches = 4;  // P
  // Identities live on a cone around a per-modality mean direction
  // (identity_mean > 0) instead of the whole sphere. Degraded frames drift
  // toward that mean direction with strength bias_kappa * (1 - q), which
  // lifts their similarity to *every* template — the classic low-quality
  // impostor-score shift.
  double identity_mean = 0.0;
  double bias_kappa = 0.0;
  double kappa = 200.0;
  double patch_sigma = 0.02;  // base patch noise in intermediate features
  // Quality mixture: degraded queries draw q ~ U[degraded_q_min, degraded_q_max]
  // on the degraded modality; everything else draws q ~ U[clean_q_min, 1].
  double degraded_fraction = 0.4;
  std::string degraded_modality = "face";
  double degraded_q_min = 0.0;
  double degraded_q_max = 0.05;
  double clean_q_min = 0.98;
  // Fraction of queries whose missing_modality is absent entirely (no frames,
  // NA score row). Zero by default.
  double missing_fraction = 0.0;
  std::string missing_modality;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct QualityRow {
  std::string query_id;
  std::string modality_id;
  double quality_factor = 0.0;
};

// One generated split (train or test).
struct SynthSplit {
  core::GalleryManifest manifest;  // includes gallery_features per modality
  std::vector<core::QueryRecord> queries;
  // modality -> query_id -> intermediate patch stack (absent when missing)
  std::map<std::string, std::map<std::string, quality::FrameStack>> intermediate;
  std::map<std::string, core::ScoreMatrix> scores;  // keyed by modality
  std::vector<QualityRow> quality;                  // manifest query order
  std::vector<bool> degraded;                       // per query

  double quality_factor(const std::string& query_id, const std::string& modality_id) const;
};

struct SynthDataset {
  SynthConfig config;
  SynthSplit train;
  SynthSplit test;
};

SynthDataset generate(const SynthConfig& config);

// Directory layout: <out>/dataset.json plus train/ and test/, each holding
// manifest.json, gallery_<mod>.csv, scores_<mod>.csv, features_<mod>.csv,
// qe_features_<mod>.csv and quality.csv.
void emit(const SynthDataset& dataset, const std::filesystem::path& out_dir);

SynthSplit load_split(const std::filesystem::path& split_dir,
                      const std::vector<SynthModality>& modalities);
SynthDataset load_dataset(const std::filesystem::path& root_dir);

// Patch-stack CSV ("query_id,frame_index,patch_index,f0,..."); row groups per
// query must be contiguous with frame and patch indices ascending from 0.
void save_stack_csv(const std::map<std::string, quality::FrameStack>& stacks,
                    const std::filesystem::path& path);
std::map<std::string, quality::FrameStack> load_stack_csv(
    const std::filesystem::path& path, int blocks, int patches);

void save_quality_csv(const std::vector<QualityRow>& rows,
                      const std::filesystem::path& path);
std::vector<QualityRow> load_quality_csv(const std::filesystem::path& path);

}  // namespace qme::synth

#endif  // QME_SYNTH_SYNTH_HPP
