#ifndef QME_COMMON_HPP
#define QME_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace qme {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Rng = std::mt19937_64;

/// Error with a stable machine-readable code ("EmptyQuery", "ShapeError", ...)
/// plus an optional human-readable detail.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string code, const std::string& detail = "")
      : std::runtime_error(detail.empty() ? code : code + ": " + detail),
        code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& detail = "") {
  throw Error(std::move(code), detail);
}

inline void require(bool ok, const char* code, const std::string& detail = "") {
  if (!ok) fail(code, detail);
}

// Derives an independent substream seed from (seed, index). Splitmix64 finisher.
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace qme

#endif  // QME_COMMON_HPP
