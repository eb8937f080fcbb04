#include "qme/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "qme/core/io.hpp"

namespace qme::metrics {
namespace {

// Position (1-based) of the best match template under descending-score order
// with pessimistic ties, or -1 when the query has no valid match.
int best_match_position(const QueryScores& q) {
  double best_match = -std::numeric_limits<double>::infinity();
  bool has_match = false;
  for (std::size_t t = 0; t < q.is_match.size(); ++t) {
    if (!q.template_valid(t) || !q.is_match[t]) continue;
    has_match = true;
    best_match = std::max(best_match, q.scores(static_cast<Eigen::Index>(t)));
  }
  if (!has_match) return -1;
  int ahead = 0;
  for (std::size_t t = 0; t < q.is_match.size(); ++t) {
    if (!q.template_valid(t) || q.is_match[t]) continue;
    if (q.scores(static_cast<Eigen::Index>(t)) >= best_match) ++ahead;
  }
  return ahead + 1;
}

void check_query(const QueryScores& q) {
  require(q.is_match.size() == static_cast<std::size_t>(q.scores.size()), "ShapeError");
  require(q.valid.empty() || q.valid.size() == q.is_match.size(), "ShapeError");
}

}  // namespace

CmcResult cmc(const std::vector<QueryScores>& queries, int k) {
  require(k >= 1, "InvalidRank");
  CmcResult out;
  int counted = 0, hits = 0;
  for (const auto& q : queries) {
    check_query(q);
    const int pos = best_match_position(q);
    if (pos < 0) {
      ++out.skipped_queries;
      continue;
    }
    ++counted;
    if (pos <= k) ++hits;
  }
  require(counted > 0, "EmptyScoreSet", "no query has a match template");
  out.value = static_cast<double>(hits) / static_cast<double>(counted);
  return out;
}

CmcResult mean_average_precision(const std::vector<QueryScores>& queries) {
  CmcResult out;
  int counted = 0;
  double ap_sum = 0.0;
  for (const auto& q : queries) {
    check_query(q);
    std::vector<std::size_t> idx;
    int total_matches = 0;
    for (std::size_t t = 0; t < q.is_match.size(); ++t) {
      if (!q.template_valid(t)) continue;
      idx.push_back(t);
      if (q.is_match[t]) ++total_matches;
    }
    if (total_matches == 0) {
      ++out.skipped_queries;
      continue;
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const double sa = q.scores(static_cast<Eigen::Index>(a));
      const double sb = q.scores(static_cast<Eigen::Index>(b));
      if (sa != sb) return sa > sb;
      if (q.is_match[a] != q.is_match[b]) return !q.is_match[a];  // non-match first
      return a < b;
    });
    double ap = 0.0;
    int hits = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (!q.is_match[idx[r]]) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    ap_sum += ap / static_cast<double>(total_matches);
    ++counted;
  }
  require(counted > 0, "EmptyScoreSet", "no query has a match template");
  out.value = ap_sum / static_cast<double>(counted);
  return out;
}

RatePoint tar_at_far(const std::vector<double>& match_scores,
                     const std::vector<double>& nonmatch_scores, double far) {
  require(!match_scores.empty() && !nonmatch_scores.empty(), "EmptyScoreSet");
  require(far > 0.0 && far < 1.0, "InvalidRate");

  std::vector<double> nm_sorted = nonmatch_scores;
  std::sort(nm_sorted.begin(), nm_sorted.end());
  const double nm_count = static_cast<double>(nm_sorted.size());
  auto far_at = [&](double tau) {
    const auto lo = std::lower_bound(nm_sorted.begin(), nm_sorted.end(), tau);
    return static_cast<double>(nm_sorted.end() - lo) / nm_count;
  };

  std::vector<double> candidates = match_scores;
  candidates.insert(candidates.end(), nonmatch_scores.begin(), nonmatch_scores.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  double tau = std::numeric_limits<double>::infinity();
  for (double c : candidates) {
    if (far_at(c) <= far) {
      tau = c;
      break;
    }
  }
  double accepted = 0.0;
  for (double s : match_scores)
    if (s >= tau) accepted += 1.0;
  return {accepted / static_cast<double>(match_scores.size()), tau};
}

RatePoint fnir_at_fpir(const std::vector<ProbeResult>& probes, double fpir) {
  require(fpir > 0.0 && fpir < 1.0, "InvalidRate");
  std::vector<double> non_mated, all_scores;
  double mated_count = 0.0;
  for (const auto& p : probes) {
    all_scores.push_back(p.max_score);
    if (p.mated)
      mated_count += 1.0;
    else
      non_mated.push_back(p.max_score);
  }
  require(!non_mated.empty(), "NoNonMatedProbes");
  require(mated_count > 0.0, "EmptyScoreSet", "no mated probes");

  std::sort(non_mated.begin(), non_mated.end());
  const double nm_count = static_cast<double>(non_mated.size());
  auto fpir_at = [&](double tau) {
    const auto lo = std::lower_bound(non_mated.begin(), non_mated.end(), tau);
    return static_cast<double>(non_mated.end() - lo) / nm_count;
  };

  std::sort(all_scores.begin(), all_scores.end());
  all_scores.erase(std::unique(all_scores.begin(), all_scores.end()), all_scores.end());
  double tau = std::numeric_limits<double>::infinity();
  for (double c : all_scores) {
    if (fpir_at(c) <= fpir) {
      tau = c;
      break;
    }
  }

  double failures = 0.0;
  for (const auto& p : probes) {
    if (!p.mated) continue;
    if (!p.top1_correct || p.max_score < tau) failures += 1.0;
  }
  return {failures / mated_count, tau};
}

OpenSetResult run_open_set_protocol(const OpenSetInput& input,
                                    const OpenSetProtocol& protocol) {
  require(protocol.subsets >= 1, "InvalidProtocol");
  require(protocol.non_mated_fraction > 0.0 && protocol.non_mated_fraction < 1.0,
          "InvalidProtocol");
  const auto subject_count = input.subjects.size();
  require(subject_count >= 5, "InvalidProtocol", "need at least 5 subjects");
  require(input.scores.rows() == static_cast<Eigen::Index>(input.query_subjects.size()),
          "ShapeError");
  require(input.scores.cols() == static_cast<Eigen::Index>(input.template_subjects.size()),
          "ShapeError");

  const auto removed_count = static_cast<std::size_t>(
      std::llround(protocol.non_mated_fraction * static_cast<double>(subject_count)));
  require(removed_count >= 1, "DegenerateSplit", "fraction removes no subject");
  require(removed_count < subject_count, "DegenerateSplit", "fraction removes everything");

  auto entry_valid = [&](Eigen::Index q, Eigen::Index t) {
    return input.mask.size() == 0 || input.mask(q, t);
  };

  OpenSetResult out;
  for (int subset = 0; subset < protocol.subsets; ++subset) {
    std::vector<std::string> pool = input.subjects;
    std::sort(pool.begin(), pool.end());
    Rng rng(substream_seed(protocol.seed, static_cast<std::uint64_t>(subset)));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(removed_count);
    std::sort(pool.begin(), pool.end());
    const std::vector<std::string>& removed = pool;
    auto is_removed = [&](const std::string& s) {
      return std::binary_search(removed.begin(), removed.end(), s);
    };

    std::vector<ProbeResult> probes;
    for (Eigen::Index q = 0; q < input.scores.rows(); ++q) {
      const std::string& probe_subject = input.query_subjects[static_cast<std::size_t>(q)];
      ProbeResult probe;
      probe.mated = !is_removed(probe_subject);
      double best_match = -std::numeric_limits<double>::infinity();
      double best_nonmatch = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (Eigen::Index t = 0; t < input.scores.cols(); ++t) {
        const std::string& gallery_subject =
            input.template_subjects[static_cast<std::size_t>(t)];
        if (is_removed(gallery_subject) || !entry_valid(q, t)) continue;
        any = true;
        if (gallery_subject == probe_subject)
          best_match = std::max(best_match, input.scores(q, t));
        else
          best_nonmatch = std::max(best_nonmatch, input.scores(q, t));
      }
      if (!any) continue;  // probe has no usable score against this gallery
      probe.max_score = std::max(best_match, best_nonmatch);
      probe.top1_correct = best_match > best_nonmatch;  // ties count as wrong
      probes.push_back(probe);
    }

    const RatePoint point = fnir_at_fpir(probes, protocol.fpir);
    out.fnir_values.push_back(point.rate);
    out.thresholds.push_back(point.threshold);
    out.removed_subjects.push_back(removed);
  }
  out.median = median_of(out.fnir_values);
  out.stddev = population_std(out.fnir_values);
  return out;
}

double median_of(std::vector<double> values) {
  require(!values.empty(), "EmptyScoreSet");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double population_std(const std::vector<double>& values) {
  require(!values.empty(), "EmptyScoreSet");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return std::sqrt(sq / n);
}

double percentile(std::vector<double> values, double p) {
  require(!values.empty(), "EmptyScoreSet");
  require(p >= 0.0 && p <= 1.0, "InvalidRate");
  std::sort(values.begin(), values.end());
  if (p == 0.0) return values.front();
  const auto rank = static_cast<std::size_t>(
      std::ceil(p * static_cast<double>(values.size())));
  return values[std::min(rank, values.size()) - 1];
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  for (const auto& [k, v] : cmc_at) j["cmc"]["rank" + std::to_string(k)] = v;
  j["map"] = map;
  j["skipped_queries"] = skipped_queries;
  j["tar_at_far"] = nlohmann::json::array();
  for (const auto& [far, point] : tar)
    j["tar_at_far"].push_back(
        {{"far", far}, {"tar", point.rate}, {"threshold", point.threshold}});
  j["fnir_at_fpir"] = {{"fpir", fpir},
                       {"median", open_set.median},
                       {"std", open_set.stddev},
                       {"values", open_set.fnir_values}};
  j["distribution"] = {{"match_mean", match_mean},
                       {"nonmatch_mean", nonmatch_mean},
                       {"nonmatch_p95", nonmatch_p95}};
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "name,value,std,params\n";
  for (const auto& [k, v] : cmc_at)
    out << "cmc," << core::format_double(v) << ",,k=" << k << "\n";
  out << "map," << core::format_double(map) << ",,\n";
  for (const auto& [far, point] : tar)
    out << "tar," << core::format_double(point.rate) << ",,far=" << core::format_double(far)
        << ";threshold=" << core::format_double(point.threshold) << "\n";
  out << "fnir," << core::format_double(open_set.median) << ","
      << core::format_double(open_set.stddev) << ",fpir=" << core::format_double(fpir)
      << "\n";
  out << "match_mean," << core::format_double(match_mean) << ",,\n";
  out << "nonmatch_mean," << core::format_double(nonmatch_mean) << ",,\n";
  out << "nonmatch_p95," << core::format_double(nonmatch_p95) << ",,\n";
  return out.str();
}

}  // namespace qme::metrics
