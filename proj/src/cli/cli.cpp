#include "qme/cli/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "qme/core/io.hpp"
#include "qme/core/ops.hpp"
#include "qme/nn/checkpoint.hpp"

namespace qme::cli {
namespace {

using nlohmann::json;

std::string gating_to_string(fusion::GatingMode mode) {
  return mode == fusion::GatingMode::kQuality ? "quality" : "uniform";
}

fusion::GatingMode gating_from_string(const std::string& s) {
  if (s == "quality") return fusion::GatingMode::kQuality;
  if (s == "uniform") return fusion::GatingMode::kUniform;
  fail("ParseError", "gating mode: " + s);
}

std::string loss_to_string(fusion::LossKind loss) {
  return loss == fusion::LossKind::kScoreTriplet ? "score_triplet" : "triplet";
}

fusion::LossKind loss_from_string(const std::string& s) {
  if (s == "score_triplet") return fusion::LossKind::kScoreTriplet;
  if (s == "triplet") return fusion::LossKind::kTriplet;
  fail("ParseError", "loss kind: " + s);
}

// Score matrices ordered per config.modality_order, for build_concat_scores.
std::vector<core::ScoreMatrix> ordered_scores(const RunConfig& config,
                                              const synth::SynthSplit& split) {
  std::vector<core::ScoreMatrix> out;
  for (const auto& id : config.modality_order) {
    const auto it = split.scores.find(id);
    require(it != split.scores.end(), "UnknownModality", id);
    out.push_back(it->second);
  }
  return out;
}

std::vector<bool> match_labels(const synth::SynthSplit& split, std::size_t query_index) {
  const std::string& subject = split.manifest.queries[query_index].subject_id;
  std::vector<bool> is_match;
  is_match.reserve(split.manifest.templates.size());
  for (const auto& t : split.manifest.templates)
    is_match.push_back(t.subject_id == subject);
  return is_match;
}

// QE quality weight for one query, 0.5 when the gating features are absent.
double query_quality_weight(const quality::QualityEstimator* qe,
                            const synth::SynthSplit& split,
                            const std::string& gating_modality,
                            const std::string& query_id) {
  if (qe == nullptr) return 0.5;
  const auto mod_it = split.intermediate.find(gating_modality);
  if (mod_it == split.intermediate.end()) return 0.5;
  const auto it = mod_it->second.find(query_id);
  if (it == mod_it->second.end()) return 0.5;
  return qe->predict_query_weight(quality::reduce_features(it->second)).query_weight;
}

void append_log(const std::filesystem::path& out_dir, const json& event) {
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "run_log.jsonl", std::ios::app);
  require(log.good(), "IoError", "run log");
  log << event.dump() << "\n";
}

struct EntryView {
  Vector row;    // modality scores at (q, t)
  baselines::BoolVec mask;
};

EntryView entry_view(const std::vector<core::ScoreMatrix>& mats, Eigen::Index q,
                     Eigen::Index t) {
  const auto n = static_cast<Eigen::Index>(mats.size());
  EntryView view{Vector::Zero(n), baselines::BoolVec::Constant(n, false)};
  for (Eigen::Index m = 0; m < n; ++m) {
    if (!mats[static_cast<std::size_t>(m)].mask(q, t)) continue;
    view.mask(m) = true;
    view.row(m) = mats[static_cast<std::size_t>(m)].values(q, t);
  }
  return view;
}

}  // namespace

void RunConfig::validate() const {
  synth.validate();
  require(!modality_order.empty(), "ConfigError", "empty modality order");
  for (const auto& id : modality_order) {
    const bool known = std::any_of(
        synth.modalities.begin(), synth.modalities.end(),
        [&](const synth::SynthModality& m) { return m.modality_id == id; });
    require(known, "ConfigError", "modality_order references unknown " + id);
  }
  const bool gating_known =
      std::find(modality_order.begin(), modality_order.end(), gating_modality) !=
      modality_order.end();
  require(gating_known, "ConfigError", "gating modality not in modality order");
  require(experts >= 1, "ConfigError", "experts < 1");
  require(delta > 1.0, "ConfigError", "delta must exceed 1");
  require(margin > 0.0, "ConfigError", "margin must be positive");
  for (Eigen::Index h : expert_hidden) require(h >= 1, "ConfigError", "expert width");
  require(qe_epochs >= 1 && fusion_epochs >= 1 && batch_queries >= 1, "ConfigError");
  require(qe_peak_lr > 0.0 && fusion_peak_lr > 0.0, "ConfigError");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "ConfigError");
  require(weight_decay >= 0.0 && column_dropout >= 0.0 && column_dropout <= 1.0,
          "ConfigError");
  require(!far_targets.empty(), "ConfigError", "no FAR targets");
  for (double f : far_targets) require(f > 0.0 && f < 1.0, "ConfigError", "FAR target");
  require(fpir > 0.0 && fpir < 1.0, "ConfigError", "fpir");
  require(!cmc_ranks.empty(), "ConfigError", "no CMC ranks");
  require(open_set_subsets >= 1, "ConfigError");
  require(non_mated_fraction > 0.0 && non_mated_fraction < 1.0, "ConfigError");
}

json RunConfig::to_json() const {
  return {{"synth", synth.to_json()},
          {"dataset_dir", dataset_dir},
          {"out_dir", out_dir},
          {"modality_order", modality_order},
          {"gating_modality", gating_modality},
          {"experts", experts},
          {"delta", delta},
          {"margin", margin},
          {"gating", gating_to_string(gating)},
          {"loss", loss_to_string(loss)},
          {"expert_hidden", expert_hidden},
          {"qe_epochs", qe_epochs},
          {"fusion_epochs", fusion_epochs},
          {"batch_queries", batch_queries},
          {"qe_peak_lr", qe_peak_lr},
          {"fusion_peak_lr", fusion_peak_lr},
          {"warmup_fraction", warmup_fraction},
          {"weight_decay", weight_decay},
          {"column_dropout", column_dropout},
          {"seed", seed},
          {"far_targets", far_targets},
          {"fpir", fpir},
          {"cmc_ranks", cmc_ranks},
          {"open_set_subsets", open_set_subsets},
          {"non_mated_fraction", non_mated_fraction}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  if (j.contains("synth")) c.synth = synth::SynthConfig::from_json(j.at("synth"));
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("modality_order"))
    c.modality_order = j.at("modality_order").get<std::vector<std::string>>();
  if (c.modality_order.empty())
    for (const auto& m : c.synth.modalities) c.modality_order.push_back(m.modality_id);
  c.gating_modality = j.value("gating_modality", c.modality_order.front());
  c.experts = j.value("experts", c.experts);
  c.delta = j.value("delta", c.delta);
  c.margin = j.value("margin", c.margin);
  if (j.contains("gating")) c.gating = gating_from_string(j.at("gating").get<std::string>());
  if (j.contains("loss")) c.loss = loss_from_string(j.at("loss").get<std::string>());
  if (j.contains("expert_hidden")) {
    c.expert_hidden.clear();
    for (const auto& h : j.at("expert_hidden"))
      c.expert_hidden.push_back(h.get<Eigen::Index>());
  }
  c.qe_epochs = j.value("qe_epochs", c.qe_epochs);
  c.fusion_epochs = j.value("fusion_epochs", c.fusion_epochs);
  c.batch_queries = j.value("batch_queries", c.batch_queries);
  c.qe_peak_lr = j.value("qe_peak_lr", c.qe_peak_lr);
  c.fusion_peak_lr = j.value("fusion_peak_lr", c.fusion_peak_lr);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.column_dropout = j.value("column_dropout", c.column_dropout);
  c.seed = j.value("seed", c.seed);
  if (j.contains("far_targets"))
    c.far_targets = j.at("far_targets").get<std::vector<double>>();
  c.fpir = j.value("fpir", c.fpir);
  if (j.contains("cmc_ranks")) c.cmc_ranks = j.at("cmc_ranks").get<std::vector<int>>();
  c.open_set_subsets = j.value("open_set_subsets", c.open_set_subsets);
  c.non_mated_fraction = j.value("non_mated_fraction", c.non_mated_fraction);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "ConfigError", "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("ConfigError", path.string() + ": " + e.what());
  }
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

std::string RunConfig::config_hash() const {
  json j = to_json();
  j.erase("dataset_dir");
  j.erase("out_dir");
  const std::string canonical = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

Artifacts fit_baseline_artifacts(const RunConfig& config,
                                 const synth::SynthDataset& dataset) {
  const synth::SynthSplit& train = dataset.train;
  std::map<std::string, std::vector<double>> pool, nonmatch;
  for (const auto& id : config.modality_order) {
    const core::ScoreMatrix& sm = train.scores.at(id);
    auto& all = pool[id];
    auto& nm = nonmatch[id];
    for (Eigen::Index q = 0; q < sm.values.rows(); ++q) {
      const std::string& subject =
          train.manifest.queries[static_cast<std::size_t>(q)].subject_id;
      for (Eigen::Index t = 0; t < sm.values.cols(); ++t) {
        if (!sm.mask(q, t)) continue;
        all.push_back(sm.values(q, t));
        if (train.manifest.templates[static_cast<std::size_t>(t)].subject_id != subject)
          nm.push_back(sm.values(q, t));
      }
    }
  }
  Artifacts art;
  art.stats = baselines::NormalizationStats::fit(pool, nonmatch);

  // Weighted-sum baseline: fit simplex weights on z-scored train scores.
  const auto mats = ordered_scores(config, train);
  std::vector<baselines::WeightedSumTrainExample> examples;
  for (std::size_t qi = 0; qi < train.manifest.queries.size(); ++qi) {
    const auto q = static_cast<Eigen::Index>(qi);
    baselines::WeightedSumTrainExample ex;
    const auto T = mats.front().values.cols();
    const auto N = static_cast<Eigen::Index>(mats.size());
    ex.scores = Matrix::Zero(T, N);
    ex.mask = BoolArray::Constant(T, N, false);
    for (Eigen::Index m = 0; m < N; ++m) {
      const auto& sm = mats[static_cast<std::size_t>(m)];
      for (Eigen::Index t = 0; t < T; ++t) {
        if (!sm.mask(q, t)) continue;
        ex.mask(t, m) = true;
        ex.scores(t, m) =
            baselines::zscore_normalize(art.stats, sm.modality_id, sm.values(q, t));
      }
    }
    if (!ex.mask.any()) continue;
    ex.labels.is_match = match_labels(train, qi);
    examples.push_back(std::move(ex));
  }
  baselines::WeightedSumConfig ws;
  ws.margin = config.margin;
  ws.seed = substream_seed(config.seed, 11);
  art.weighted_sum_weights = baselines::fit_weighted_sum(examples, ws);
  return art;
}

quality::QualityEstimator train_qe_for(const RunConfig& config,
                                       const synth::SynthDataset& dataset,
                                       std::uint64_t seed) {
  const std::string& mod = config.gating_modality;
  const auto mod_cfg = [&] {
    for (const auto& m : config.synth.modalities)
      if (m.modality_id == mod) return m;
    fail("UnknownModality", mod);
  }();
  const quality::TrainingGallery gallery =
      quality::build_training_gallery(dataset.train.manifest, mod);

  std::vector<quality::QeTrainExample> examples;
  const auto stacks_it = dataset.train.intermediate.find(mod);
  require(stacks_it != dataset.train.intermediate.end(), "UnknownModality", mod);
  for (const auto& record : dataset.train.queries) {
    const auto frames_it = record.frames.find(mod);
    const auto stack_it = stacks_it->second.find(record.info.query_id);
    if (frames_it == record.frames.end() || stack_it == stacks_it->second.end())
      continue;
    quality::QeTrainExample ex;
    ex.reduced = quality::reduce_features(stack_it->second);
    ex.ranks = quality::frame_ranks(frames_it->second, gallery,
                                    record.info.subject_id, mod_cfg.metric_kind);
    examples.push_back(std::move(ex));
  }

  quality::QeTrainConfig qc;
  qc.delta = config.delta;
  qc.epochs = config.qe_epochs;
  qc.batch_queries = config.batch_queries;
  qc.peak_lr = config.qe_peak_lr;
  qc.warmup_fraction = config.warmup_fraction;
  qc.adam.weight_decay = config.weight_decay;
  qc.seed = seed;
  return quality::train_qe(examples, mod, qc).model;
}

fusion::FusionModel train_fusion_for(const RunConfig& config,
                                     const synth::SynthDataset& dataset,
                                     const quality::QualityEstimator* qe,
                                     const FusionVariant& variant, std::uint64_t seed) {
  if (variant.gating == fusion::GatingMode::kQuality && variant.experts > 1)
    require(qe != nullptr, "StageOrderViolation", "fusion training needs a QE model");

  const auto mats = ordered_scores(config, dataset.train);
  std::vector<fusion::FusionTrainExample> examples;
  for (std::size_t qi = 0; qi < dataset.train.manifest.queries.size(); ++qi) {
    const std::string& query_id = dataset.train.manifest.queries[qi].query_id;
    fusion::FusionTrainExample ex;
    ex.scores = core::build_concat_scores(mats, query_id);
    if (!ex.scores.mask.any()) continue;
    ex.labels.is_match = match_labels(dataset.train, qi);
    ex.quality_weight =
        query_quality_weight(qe, dataset.train, config.gating_modality, query_id);
    examples.push_back(std::move(ex));
  }

  fusion::FusionTrainConfig fc;
  fc.experts = variant.experts;
  fc.expert_hidden = config.expert_hidden;
  fc.gating = variant.gating;
  fc.loss = variant.loss;
  fc.margin = config.margin;
  fc.epochs = config.fusion_epochs;
  fc.batch_queries = config.batch_queries;
  fc.peak_lr = config.fusion_peak_lr;
  fc.warmup_fraction = config.warmup_fraction;
  fc.adam.weight_decay = config.weight_decay;
  fc.column_dropout = config.column_dropout;
  fc.seed = seed;
  return fusion::train_fusion(examples, config.modality_order, config.gating_modality, fc)
      .model;
}

std::vector<std::string> registered_methods(const RunConfig& config) {
  std::vector<std::string> methods;
  for (const auto& id : config.modality_order) methods.push_back("single_" + id);
  for (const char* m : {"min", "max", "mean", "zscore", "minmax", "rhe",
                        "weighted_sum", "qme"})
    methods.emplace_back(m);
  return methods;
}

MethodOutput score_method(const std::string& method, const RunConfig& config,
                          const synth::SynthSplit& split, const Artifacts& artifacts) {
  const auto mats = ordered_scores(config, split);
  const auto Q = mats.front().values.rows();
  const auto T = mats.front().values.cols();
  MethodOutput out{Matrix::Zero(Q, T), BoolArray::Constant(Q, T, false)};

  if (method.rfind("single_", 0) == 0) {
    const std::string id = method.substr(7);
    const auto it = split.scores.find(id);
    require(it != split.scores.end(), "UnknownMethod", method);
    for (Eigen::Index q = 0; q < Q; ++q)
      for (Eigen::Index t = 0; t < T; ++t)
        if (it->second.mask(q, t)) {
          out.scores(q, t) = it->second.values(q, t);
          out.mask(q, t) = true;
        }
    return out;
  }

  if (method == "qme") {
    require(artifacts.fusion_model.has_value(), "StageOrderViolation",
            "qme evaluation needs a fusion model");
    const quality::QualityEstimator* qe =
        artifacts.qe.has_value() ? &*artifacts.qe : nullptr;
    for (Eigen::Index q = 0; q < Q; ++q) {
      const std::string& query_id = split.manifest.queries[static_cast<std::size_t>(q)].query_id;
      core::ConcatScores concat = core::build_concat_scores(mats, query_id);
      if (!concat.mask.any()) continue;
      const double w =
          query_quality_weight(qe, split, config.gating_modality, query_id);
      const fusion::FusedScores fused = fusion::fuse(*artifacts.fusion_model, concat, w);
      for (Eigen::Index t = 0; t < T; ++t) {
        if (!concat.mask.row(t).any()) continue;
        out.scores(q, t) = fused.fused(t);
        out.mask(q, t) = true;
      }
    }
    return out;
  }

  const bool normalized = method == "zscore" || method == "minmax" || method == "rhe" ||
                          method == "weighted_sum";
  for (Eigen::Index q = 0; q < Q; ++q) {
    for (Eigen::Index t = 0; t < T; ++t) {
      EntryView view = entry_view(mats, q, t);
      if (!view.mask.any()) continue;
      if (normalized) {
        for (Eigen::Index m = 0; m < view.row.size(); ++m) {
          if (!view.mask(m)) continue;
          const std::string& id = config.modality_order[static_cast<std::size_t>(m)];
          if (method == "minmax")
            view.row(m) = baselines::minmax_normalize(artifacts.stats, id, view.row(m));
          else if (method == "rhe")
            view.row(m) = baselines::rhe_normalize(artifacts.stats, id, view.row(m));
          else
            view.row(m) = baselines::zscore_normalize(artifacts.stats, id, view.row(m));
        }
      }
      double fused;
      if (method == "min")
        fused = baselines::min_fusion(view.row, view.mask);
      else if (method == "max")
        fused = baselines::max_fusion(view.row, view.mask);
      else if (method == "weighted_sum")
        fused = baselines::weighted_sum_fusion(artifacts.weighted_sum_weights, view.row,
                                               view.mask);
      else if (method == "mean" || normalized)
        fused = baselines::mean_fusion(view.row, view.mask);
      else
        fail("UnknownMethod", method);
      out.scores(q, t) = fused;
      out.mask(q, t) = true;
    }
  }
  return out;
}

metrics::EvalReport evaluate_method(const std::string& method, const RunConfig& config,
                                    const synth::SynthDataset& dataset,
                                    const Artifacts& artifacts) {
  const synth::SynthSplit& split = dataset.test;
  const MethodOutput output = score_method(method, config, split, artifacts);
  const auto Q = output.scores.rows();
  const auto T = output.scores.cols();

  std::vector<metrics::QueryScores> queries;
  std::vector<double> match_pool, nonmatch_pool;
  for (Eigen::Index q = 0; q < Q; ++q) {
    metrics::QueryScores qs;
    qs.scores = output.scores.row(q).transpose();
    qs.is_match = match_labels(split, static_cast<std::size_t>(q));
    qs.valid.resize(static_cast<std::size_t>(T));
    bool any = false;
    for (Eigen::Index t = 0; t < T; ++t) {
      qs.valid[static_cast<std::size_t>(t)] = output.mask(q, t);
      if (!output.mask(q, t)) continue;
      any = true;
      (qs.is_match[static_cast<std::size_t>(t)] ? match_pool : nonmatch_pool)
          .push_back(output.scores(q, t));
    }
    if (any) queries.push_back(std::move(qs));
  }

  metrics::EvalReport report;
  report.method = method;
  for (int k : config.cmc_ranks) {
    const metrics::CmcResult r = metrics::cmc(queries, k);
    report.cmc_at[k] = r.value;
    report.skipped_queries = r.skipped_queries;
  }
  report.map = metrics::mean_average_precision(queries).value;
  for (double far : config.far_targets)
    report.tar.emplace_back(far, metrics::tar_at_far(match_pool, nonmatch_pool, far));

  metrics::OpenSetInput osi;
  osi.scores = output.scores;
  osi.mask = output.mask;
  for (const auto& qinfo : split.manifest.queries)
    osi.query_subjects.push_back(qinfo.subject_id);
  for (const auto& t : split.manifest.templates)
    osi.template_subjects.push_back(t.subject_id);
  osi.subjects = split.manifest.subjects;
  metrics::OpenSetProtocol proto;
  proto.subsets = config.open_set_subsets;
  proto.non_mated_fraction = config.non_mated_fraction;
  proto.fpir = config.fpir;
  proto.seed = substream_seed(config.seed, 21);
  report.fpir = config.fpir;
  report.open_set = metrics::run_open_set_protocol(osi, proto);

  report.match_mean = std::accumulate(match_pool.begin(), match_pool.end(), 0.0) /
                      static_cast<double>(match_pool.size());
  report.nonmatch_mean =
      std::accumulate(nonmatch_pool.begin(), nonmatch_pool.end(), 0.0) /
      static_cast<double>(nonmatch_pool.size());
  report.nonmatch_p95 = metrics::percentile(nonmatch_pool, 0.95);
  return report;
}

namespace {

constexpr const char* kQeCheckpoint = "qe.json";
constexpr const char* kFusionCheckpoint = "fusion.json";

quality::QualityEstimator load_qe_checkpoint(const RunConfig& config) {
  const std::filesystem::path path = std::filesystem::path(config.out_dir) / kQeCheckpoint;
  require(std::filesystem::exists(path), "StageOrderViolation",
          "missing QE checkpoint " + path.string());
  const json j = nn::load_checkpoint(path, config.config_hash());
  return {nn::dense_from_json(j.at("encoder")), j.at("modality_id").get<std::string>(),
          j.at("delta").get<double>()};
}

fusion::FusionModel load_fusion_checkpoint(const RunConfig& config) {
  const std::filesystem::path path =
      std::filesystem::path(config.out_dir) / kFusionCheckpoint;
  require(std::filesystem::exists(path), "StageOrderViolation",
          "missing fusion checkpoint " + path.string());
  return fusion::FusionModel::from_json(
      nn::load_checkpoint(path, config.config_hash()));
}

synth::SynthDataset load_dataset_checked(const RunConfig& config) {
  const std::filesystem::path root(config.dataset_dir);
  require(std::filesystem::exists(root / "dataset.json"), "StageOrderViolation",
          "dataset not generated at " + root.string());
  return synth::load_dataset(root);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), "IoError", path.string());
  out << text;
  require(out.good(), "IoError", path.string());
}

int cmd_generate(const RunConfig& config) {
  synth::SynthConfig sc = config.synth;
  sc.seed = substream_seed(config.seed, 1);
  const synth::SynthDataset dataset = synth::generate(sc);
  synth::emit(dataset, config.dataset_dir);
  append_log(config.out_dir, {{"event", "generate"},
                              {"config_hash", config.config_hash()},
                              {"seed", config.seed},
                              {"dataset_dir", config.dataset_dir}});
  std::cout << "generated dataset in " << config.dataset_dir << "\n";
  return 0;
}

int cmd_train_qe(const RunConfig& config) {
  const synth::SynthDataset dataset = load_dataset_checked(config);
  const quality::QualityEstimator qe =
      train_qe_for(config, dataset, substream_seed(config.seed, 2));
  std::filesystem::create_directories(config.out_dir);
  json payload;
  payload["encoder"] = nn::dense_to_json(qe.encoder());
  payload["modality_id"] = qe.modality_id();
  payload["delta"] = qe.delta();
  nn::save_checkpoint(payload, config.config_hash(),
                      std::filesystem::path(config.out_dir) / kQeCheckpoint);
  append_log(config.out_dir, {{"event", "train_qe"},
                              {"config_hash", config.config_hash()},
                              {"seed", config.seed},
                              {"modality", qe.modality_id()}});
  std::cout << "wrote " << (std::filesystem::path(config.out_dir) / kQeCheckpoint)
            << "\n";
  return 0;
}

int cmd_train_fusion(const RunConfig& config) {
  const synth::SynthDataset dataset = load_dataset_checked(config);
  std::optional<quality::QualityEstimator> qe;
  if (config.gating == fusion::GatingMode::kQuality) qe = load_qe_checkpoint(config);
  const FusionVariant variant{config.experts, config.gating, config.loss};
  const fusion::FusionModel model =
      train_fusion_for(config, dataset, qe.has_value() ? &*qe : nullptr, variant,
                       substream_seed(config.seed, 3));
  std::filesystem::create_directories(config.out_dir);
  nn::save_checkpoint(model.to_json(), config.config_hash(),
                      std::filesystem::path(config.out_dir) / kFusionCheckpoint);
  append_log(config.out_dir, {{"event", "train_fusion"},
                              {"config_hash", config.config_hash()},
                              {"seed", config.seed},
                              {"experts", config.experts},
                              {"gating", gating_to_string(config.gating)},
                              {"loss", loss_to_string(config.loss)}});
  std::cout << "wrote " << (std::filesystem::path(config.out_dir) / kFusionCheckpoint)
            << "\n";
  return 0;
}

Artifacts artifacts_for(const RunConfig& config, const synth::SynthDataset& dataset,
                        bool need_qme) {
  Artifacts art = fit_baseline_artifacts(config, dataset);
  if (need_qme) {
    if (config.gating == fusion::GatingMode::kQuality) art.qe = load_qe_checkpoint(config);
    art.fusion_model = load_fusion_checkpoint(config);
  }
  return art;
}

int cmd_evaluate(const RunConfig& config, const std::string& method) {
  const synth::SynthDataset dataset = load_dataset_checked(config);
  const Artifacts art = artifacts_for(config, dataset, method == "qme");
  const metrics::EvalReport report = evaluate_method(method, config, dataset, art);
  std::filesystem::create_directories(config.out_dir);
  const std::filesystem::path base(config.out_dir);
  write_text(base / ("report_" + method + ".json"), report.to_json().dump(2) + "\n");
  write_text(base / ("report_" + method + ".csv"), report.to_csv());
  append_log(config.out_dir, {{"event", "evaluate"},
                              {"config_hash", config.config_hash()},
                              {"seed", config.seed},
                              {"method", method}});
  std::cout << report.to_csv();
  return 0;
}

std::string compare_table(const std::vector<metrics::EvalReport>& reports,
                          const RunConfig& config) {
  std::ostringstream out;
  out << "method,rank1,map";
  for (double far : config.far_targets) out << ",tar@far=" << core::format_double(far);
  out << ",fnir_median\n";
  for (const auto& r : reports) {
    out << r.method << "," << core::format_double(r.cmc_at.count(1) ? r.cmc_at.at(1) : 0.0)
        << "," << core::format_double(r.map);
    for (const auto& [far, point] : r.tar) out << "," << core::format_double(point.rate);
    out << "," << core::format_double(r.open_set.median) << "\n";
  }
  return out.str();
}

std::string distribution_table(const std::vector<metrics::EvalReport>& reports) {
  std::ostringstream out;
  out << "method,match_mean,nonmatch_mean,nonmatch_p95,threshold\n";
  for (const auto& r : reports)
    out << r.method << "," << core::format_double(r.match_mean) << ","
        << core::format_double(r.nonmatch_mean) << ","
        << core::format_double(r.nonmatch_p95) << ","
        << core::format_double(r.tar.empty() ? 0.0 : r.tar.front().second.threshold)
        << "\n";
  return out.str();
}

int cmd_compare(const RunConfig& config, const std::string& ablation) {
  const synth::SynthDataset dataset = load_dataset_checked(config);

  if (ablation == "grid") {
    // Tab.-5-style grid: loss x experts x gating.
    const std::vector<std::pair<std::string, FusionVariant>> grid = {
        {"triplet_z1", {1, fusion::GatingMode::kUniform, fusion::LossKind::kTriplet}},
        {"score_z1", {1, fusion::GatingMode::kUniform, fusion::LossKind::kScoreTriplet}},
        {"triplet_z2", {2, fusion::GatingMode::kUniform, fusion::LossKind::kTriplet}},
        {"score_z2", {2, fusion::GatingMode::kUniform, fusion::LossKind::kScoreTriplet}},
        {"score_z2_qe",
         {2, fusion::GatingMode::kQuality, fusion::LossKind::kScoreTriplet}}};
    Artifacts art = fit_baseline_artifacts(config, dataset);
    art.qe = load_qe_checkpoint(config);
    std::ostringstream out;
    out << "config,experts,gating,loss,rank1,tar@far=" << core::format_double(config.far_targets.front())
        << "\n";
    for (const auto& [name, variant] : grid) {
      Artifacts row_art = art;
      if (variant.gating == fusion::GatingMode::kUniform) row_art.qe.reset();
      row_art.fusion_model = train_fusion_for(
          config, dataset, art.qe.has_value() ? &*art.qe : nullptr, variant,
          substream_seed(config.seed, 3));
      const metrics::EvalReport report = evaluate_method("qme", config, dataset, row_art);
      out << name << "," << variant.experts << "," << gating_to_string(variant.gating)
          << "," << loss_to_string(variant.loss) << ","
          << core::format_double(report.cmc_at.at(1)) << ","
          << core::format_double(report.tar.front().second.rate) << "\n";
    }
    std::filesystem::create_directories(config.out_dir);
    write_text(std::filesystem::path(config.out_dir) / "ablation.csv", out.str());
    append_log(config.out_dir, {{"event", "compare"},
                                {"config_hash", config.config_hash()},
                                {"seed", config.seed},
                                {"ablation", "grid"}});
    std::cout << out.str();
    return 0;
  }
  require(ablation.empty(), "ConfigError", "unknown ablation: " + ablation);

  const Artifacts art = artifacts_for(config, dataset, true);
  std::vector<metrics::EvalReport> reports;
  for (const auto& method : registered_methods(config))
    reports.push_back(evaluate_method(method, config, dataset, art));
  std::filesystem::create_directories(config.out_dir);
  write_text(std::filesystem::path(config.out_dir) / "compare.csv",
             compare_table(reports, config));
  write_text(std::filesystem::path(config.out_dir) / "distribution.csv",
             distribution_table(reports));
  append_log(config.out_dir, {{"event", "compare"},
                              {"config_hash", config.config_hash()},
                              {"seed", config.seed},
                              {"methods", reports.size()}});
  std::cout << compare_table(reports, config);
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"quality-guided multimodal score fusion experiments"};
  app.require_subcommand(1);

  std::string config_path, out_override, method = "qme", ablation;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "run configuration JSON")->required();
  app.add_option("--seed", seed_override, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--out", out_override, "override the output directory");

  auto* generate = app.add_subcommand("generate", "emit the synthetic dataset");
  auto* train_qe = app.add_subcommand("train-qe", "train the quality estimator");
  auto* train_fusion = app.add_subcommand("train-fusion", "train the fusion model");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate one method");
  evaluate->add_option("--method", method, "method name");
  auto* compare = app.add_subcommand("compare", "evaluate all methods");
  compare->add_option("--ablation", ablation, "'grid' for the ablation grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig config = RunConfig::load(config_path);
    if (seed_set) config.seed = seed_override;
    if (!out_override.empty()) config.out_dir = out_override;
    if (generate->parsed()) return cmd_generate(config);
    if (train_qe->parsed()) return cmd_train_qe(config);
    if (train_fusion->parsed()) return cmd_train_fusion(config);
    if (evaluate->parsed()) return cmd_evaluate(config, method);
    if (compare->parsed()) return cmd_compare(config, ablation);
    fail("ConfigError", "no subcommand");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == "StageOrderViolation") return 3;
    if (e.code() == "NonFiniteLoss" || e.code() == "NonFiniteGradient" ||
        e.code() == "DegenerateBatch")
      return 4;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace qme::cli
