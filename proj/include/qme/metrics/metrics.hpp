#ifndef QME_METRICS_METRICS_HPP
#define QME_METRICS_METRICS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qme/common.hpp"

namespace qme::metrics {

// One query's fused score row with per-template labels. Templates with
// valid=false (missing score) are skipped everywhere.
struct QueryScores {
  Vector scores;
  std::vector<bool> is_match;
  std::vector<bool> valid;  // empty means all valid

  bool template_valid(std::size_t t) const { return valid.empty() || valid[t]; }
};

struct CmcResult {
  double value = 0.0;
  int skipped_queries = 0;  // queries without any match template
};

// Fraction of queries whose best match template lands in the top k by
// descending score. Ties break pessimistically: a match tied with a
// non-match ranks after it.
CmcResult cmc(const std::vector<QueryScores>& queries, int k);

// Mean over queries of average precision with pessimistic tie handling.
CmcResult mean_average_precision(const std::vector<QueryScores>& queries);

struct RatePoint {
  double rate = 0.0;       // TAR or FNIR
  double threshold = 0.0;  // tau
};

// Verification: tau is the smallest observed score whose false-accept rate
// (#non-match >= tau / #non-match) is <= far; TAR = #match >= tau / #match.
// If no observed score satisfies the constraint, TAR = 0 at tau = +inf.
RatePoint tar_at_far(const std::vector<double>& match_scores,
                     const std::vector<double>& nonmatch_scores, double far);

// Open-set probe outcome: max gallery score plus whether the top-1 subject is
// correct (only meaningful for mated probes).
struct ProbeResult {
  double max_score = 0.0;
  bool top1_correct = false;
  bool mated = false;
};

// tau calibrated on non-mated probe maxima; FNIR counts mated probes with a
// wrong top-1 subject or a max score below tau.
RatePoint fnir_at_fpir(const std::vector<ProbeResult>& probes, double fpir);

struct OpenSetProtocol {
  int subsets = 10;
  double non_mated_fraction = 0.20;
  double fpir = 0.01;
  std::uint64_t seed = 0;
};

struct OpenSetResult {
  std::vector<double> fnir_values;                       // one per subset
  std::vector<double> thresholds;                        // tau per subset
  std::vector<std::vector<std::string>> removed_subjects;
  double median = 0.0;
  double stddev = 0.0;  // population std over subsets
};

// Fused scores for open-set evaluation: Q x T matrix plus subject labels.
struct OpenSetInput {
  Matrix scores;                             // Q x T
  BoolArray mask;                            // Q x T (empty -> all valid)
  std::vector<std::string> query_subjects;   // length Q
  std::vector<std::string> template_subjects;  // length T
  std::vector<std::string> subjects;         // distinct gallery subjects
};

// Repeats: remove ~non_mated_fraction of subjects from the gallery (seeded),
// treat their probes as non-mated, compute FNIR@FPIR; reports median and
// population std across subsets.
OpenSetResult run_open_set_protocol(const OpenSetInput& input,
                                    const OpenSetProtocol& protocol);

// Aggregated metrics for one method on one test split.
struct EvalReport {
  std::string method;
  std::map<int, double> cmc_at;                    // rank -> value
  double map = 0.0;
  int skipped_queries = 0;
  std::vector<std::pair<double, RatePoint>> tar;   // far -> point
  double fpir = 0.01;
  OpenSetResult open_set;
  double match_mean = 0.0;
  double nonmatch_mean = 0.0;
  double nonmatch_p95 = 0.0;

  nlohmann::json to_json() const;
  // Flat rows: name,value,std,params
  std::string to_csv() const;
};

double median_of(std::vector<double> values);
double population_std(const std::vector<double>& values);
double percentile(std::vector<double> values, double p);  // nearest-rank

}  // namespace qme::metrics

#endif  // QME_METRICS_METRICS_HPP
