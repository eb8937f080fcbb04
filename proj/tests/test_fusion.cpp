#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "qme/fusion/model.hpp"

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

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> g;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Single-layer net with zero weights: constant output = bias.
nn::DenseNet constant_expert(Eigen::Index in, double value) {
  nn::DenseLayer layer;
  layer.weights = Matrix::Zero(1, in);
  layer.bias = Vector::Constant(1, value);
  layer.activation = nn::Activation::kIdentity;
  nn::DenseNet net;
  net.set_layers({layer});
  return net;
}

core::ConcatScores random_concat(Eigen::Index t_count, Rng& rng) {
  core::ConcatScores cs;
  cs.values = random_matrix(t_count, 2, rng);
  cs.mask = BoolArray::Constant(t_count, 2, true);
  cs.modality_order = {"a", "b"};
  return cs;
}

}  // namespace

TEST_CASE("route implements the Z=2 complementary-weight rule") {
  const Vector p = fusion::route(0.7, 2);
  CHECK(p(0) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(p(1) == doctest::Approx(0.3).epsilon(1e-12));

  const Vector even = fusion::route(0.5, 2);
  CHECK(even(0) == 0.5);
  CHECK(even(1) == 0.5);

  const Vector one = fusion::route(0.123, 1);
  CHECK(one.size() == 1);
  CHECK(one(0) == 1.0);

  CHECK(error_code([] { fusion::route(0.0, 2); }) == "InvalidQualityWeight");
  CHECK(error_code([] { fusion::route(1.0, 2); }) == "InvalidQualityWeight");
  CHECK(error_code([] { fusion::route(0.5, 3); }) == "RouterRequired");

  // simplex property
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 50; ++i) {
    const Vector v = fusion::route(u(rng), 2);
    CHECK(v.minCoeff() >= 0.0);
    CHECK(v.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("triplet_loss formula") {
  CHECK(fusion::triplet_loss(0.5, 1.0, 0.3) == 0.0);
  CHECK(fusion::triplet_loss(1.0, 0.8, 0.3) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(error_code([] { fusion::triplet_loss(-0.1, 1.0, 0.3); }) == "NegativeDistance");

  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    const double ap = u(rng), an = u(rng), m = u(rng);
    const double expected = std::max(0.0, ap - an + m);
    CHECK(fusion::triplet_loss(ap, an, m) == expected);
  }
}

TEST_CASE("score_triplet_loss fixtures and loop oracle") {
  fusion::ScoreLabels labels;
  labels.is_match = {true, false, false};
  Vector satisfied(3);
  satisfied << 4.0, -1.0, -2.0;
  CHECK(fusion::score_triplet_loss(satisfied, labels, 3.0) == 0.0);

  Vector violated(3);
  violated << 2.0, 0.5, -1.0;
  CHECK(fusion::score_triplet_loss(violated, labels, 3.0) ==
        doctest::Approx(1.25).epsilon(1e-12));

  fusion::ScoreLabels no_match;
  no_match.is_match = {false, false};
  CHECK(error_code([&] {
          fusion::score_triplet_loss(Vector::Zero(2), no_match, 3.0);
        }) == "NoMatchTemplates");

  Rng rng(3);
  std::uniform_real_distribution<double> u(-4.0, 6.0);
  std::bernoulli_distribution is_match(0.3), keep(0.85);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index t_count = 8;
    Vector fused(t_count);
    fusion::ScoreLabels l;
    l.is_match.resize(t_count);
    l.valid.resize(t_count);
    for (Eigen::Index t = 0; t < t_count; ++t) {
      fused(t) = u(rng);
      l.is_match[static_cast<std::size_t>(t)] = is_match(rng);
      l.valid[static_cast<std::size_t>(t)] = keep(rng);
    }
    l.is_match[0] = l.valid[0] = true;  // guarantee a match

    double nm_sum = 0.0, nm_n = 0.0, mat_sum = 0.0, mat_n = 0.0;
    for (Eigen::Index t = 0; t < t_count; ++t) {
      if (!l.valid[static_cast<std::size_t>(t)]) continue;
      if (l.is_match[static_cast<std::size_t>(t)]) {
        mat_sum += std::max(0.0, 3.0 - fused(t));
        mat_n += 1.0;
      } else {
        nm_sum += std::max(0.0, fused(t));
        nm_n += 1.0;
      }
    }
    const double expected = (nm_n > 0 ? nm_sum / nm_n : 0.0) + mat_sum / mat_n;
    CHECK(fusion::score_triplet_loss(fused, l, 3.0) ==
          doctest::Approx(expected).epsilon(1e-12));

    // zero iff every non-match <= 0 and every match >= margin
    bool all_ok = true;
    for (Eigen::Index t = 0; t < t_count; ++t) {
      if (!l.valid[static_cast<std::size_t>(t)]) continue;
      if (l.is_match[static_cast<std::size_t>(t)] ? fused(t) < 3.0 : fused(t) > 0.0)
        all_ok = false;
    }
    CHECK((fusion::score_triplet_loss(fused, l, 3.0) == 0.0) == all_ok);
  }
}

TEST_CASE("pairwise_triplet_loss matches the pair-enumeration oracle") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-2.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index t_count = 7;
    Vector fused(t_count);
    fusion::ScoreLabels l;
    l.is_match = {true, true, false, false, false, false, false};
    for (Eigen::Index t = 0; t < t_count; ++t) fused(t) = u(rng);

    double sum = 0.0;
    int pairs = 0;
    for (Eigen::Index m = 0; m < t_count; ++m) {
      if (!l.is_match[static_cast<std::size_t>(m)]) continue;
      for (Eigen::Index n = 0; n < t_count; ++n) {
        if (l.is_match[static_cast<std::size_t>(n)]) continue;
        sum += std::max(0.0, fused(n) - fused(m) + 3.0);
        ++pairs;
      }
    }
    CHECK(fusion::pairwise_triplet_loss(fused, l, 3.0) ==
          doctest::Approx(sum / pairs).epsilon(1e-12));
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-3.0, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index t_count = 9;
    Vector fused(t_count);
    fusion::ScoreLabels l;
    l.is_match.resize(t_count);
    for (Eigen::Index t = 0; t < t_count; ++t) {
      fused(t) = u(rng);
      l.is_match[static_cast<std::size_t>(t)] = t < 3;
    }
    for (int kind = 0; kind < 2; ++kind) {
      Vector grad;
      const auto loss_fn = [&](const Vector& s) {
        return kind == 0 ? fusion::score_triplet_loss(s, l, 3.0)
                         : fusion::pairwise_triplet_loss(s, l, 3.0);
      };
      if (kind == 0)
        fusion::score_triplet_loss_with_grad(fused, l, 3.0, &grad);
      else
        fusion::pairwise_triplet_loss_with_grad(fused, l, 3.0, &grad);
      const double h = 1e-6;
      for (Eigen::Index t = 0; t < t_count; ++t) {
        Vector plus = fused, minus = fused;
        plus(t) += h;
        minus(t) -= h;
        const double fd = (loss_fn(plus) - loss_fn(minus)) / (2 * h);
        CHECK(std::abs(fd - grad(t)) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("fuse constant-expert arithmetic and Z=1 identity") {
  fusion::FusionModel model;
  model.norm = nn::BatchNorm(2, 0.1, 1e-12);
  model.norm.set_stats(Vector::Zero(2), Vector::Ones(2));
  model.experts = {constant_expert(2, 1.0), constant_expert(2, 2.0)};
  model.modality_order = {"a", "b"};
  model.gating_modality = "a";

  Rng rng(6);
  const core::ConcatScores cs = random_concat(4, rng);
  const fusion::FusedScores out = fusion::fuse(model, cs, 0.7);
  CHECK((out.fused.array() - 1.3).abs().maxCoeff() < 1e-12);  // 0.7*1 + 0.3*2
  CHECK(out.gate(0) == doctest::Approx(0.7).epsilon(1e-12));

  fusion::FusionModel single = model;
  single.experts = {constant_expert(2, 5.0)};
  const fusion::FusedScores one = fusion::fuse(single, cs, 0.9);
  CHECK((one.fused - one.per_expert.col(0)).cwiseAbs().maxCoeff() == 0.0);

  core::ConcatScores wrong = cs;
  wrong.modality_order = {"b", "a"};
  CHECK(error_code([&] { fusion::fuse(model, wrong, 0.5); }) == "ModalityOrderMismatch");
}

TEST_CASE("fuse equals per-row recomputation and the Eq.3 weighted sum") {
  Rng rng(7);
  fusion::FusionModel model;
  model.norm = nn::BatchNorm(2);
  model.norm.forward(random_matrix(20, 2, rng), true);
  model.experts = {
      nn::DenseNet({2, 4, 1}, {nn::Activation::kRelu, nn::Activation::kIdentity}, rng),
      nn::DenseNet({2, 4, 1}, {nn::Activation::kRelu, nn::Activation::kIdentity}, rng)};
  model.modality_order = {"a", "b"};
  model.gating_modality = "a";

  const core::ConcatScores cs = random_concat(6, rng);
  const fusion::FusedScores out = fusion::fuse(model, cs, 0.35);

  const Matrix normalized = model.norm.apply_eval(cs.values, &cs.mask);
  for (Eigen::Index t = 0; t < 6; ++t) {
    const double e0 = model.experts[0].forward(normalized.row(t))(0, 0);
    const double e1 = model.experts[1].forward(normalized.row(t))(0, 0);
    CHECK(out.per_expert(t, 0) == doctest::Approx(e0).epsilon(1e-12));
    CHECK(out.per_expert(t, 1) == doctest::Approx(e1).epsilon(1e-12));
    CHECK(out.fused(t) == doctest::Approx(0.35 * e0 + 0.65 * e1).epsilon(1e-12));
  }

  // w -> 1 convergence bound: |S' - S_1| <= (1-w) max|S_1 - S_2|
  for (double w : {0.9, 0.99, 0.999}) {
    const fusion::FusedScores near = fusion::fuse(model, cs, w);
    const double bound =
        (1.0 - w) * (near.per_expert.col(0) - near.per_expert.col(1)).cwiseAbs().maxCoeff();
    CHECK((near.fused - near.per_expert.col(0)).cwiseAbs().maxCoeff() <= bound + 1e-12);
  }

  // determinism
  const fusion::FusedScores again = fusion::fuse(model, cs, 0.35);
  CHECK(again.fused == out.fused);
}

TEST_CASE("FusionModel JSON round-trip preserves inference") {
  Rng rng(8);
  fusion::FusionModel model;
  model.norm = nn::BatchNorm(2);
  model.norm.forward(random_matrix(16, 2, rng), true);
  model.experts = {
      nn::DenseNet({2, 3, 1}, {nn::Activation::kRelu, nn::Activation::kIdentity}, rng),
      nn::DenseNet({2, 3, 1}, {nn::Activation::kRelu, nn::Activation::kIdentity}, rng)};
  model.modality_order = {"a", "b"};
  model.gating_modality = "b";
  model.margin = 2.5;

  const fusion::FusionModel back = fusion::FusionModel::from_json(model.to_json());
  CHECK(back.gating_modality == "b");
  CHECK(back.margin == 2.5);
  const core::ConcatScores cs = random_concat(5, rng);
  CHECK(fusion::fuse(back, cs, 0.4).fused == fusion::fuse(model, cs, 0.4).fused);
}

TEST_CASE("infer falls back to w=0.5 without gating features") {
  Rng rng(9);
  fusion::FusionModel model;
  model.norm = nn::BatchNorm(2);
  model.norm.forward(random_matrix(16, 2, rng), true);
  model.experts = {constant_expert(2, 1.0), constant_expert(2, 3.0)};
  model.modality_order = {"a", "b"};
  model.gating_modality = "a";

  const core::ConcatScores cs = random_concat(4, rng);
  const fusion::FusedScores out = fusion::infer(model, nullptr, cs, nullptr);
  CHECK(out.quality_fallback);
  CHECK((out.fused.array() - 2.0).abs().maxCoeff() < 1e-12);  // 0.5*1 + 0.5*3
}

namespace {

// Well-separated 2-modality training set: match rows near +1, non-match near
// -1, plus mild noise.
std::vector<fusion::FusionTrainExample> separable_dataset(int queries, Rng& rng) {
  std::normal_distribution<double> g(0.0, 0.1);
  std::vector<fusion::FusionTrainExample> data;
  for (int q = 0; q < queries; ++q) {
    fusion::FusionTrainExample ex;
    const Eigen::Index t_count = 6;
    ex.scores.values = Matrix::Zero(t_count, 2);
    ex.scores.mask = BoolArray::Constant(t_count, 2, true);
    ex.scores.modality_order = {"a", "b"};
    ex.labels.is_match.assign(t_count, false);
    ex.labels.is_match[static_cast<std::size_t>(q % t_count)] = true;
    for (Eigen::Index t = 0; t < t_count; ++t) {
      const double base = ex.labels.is_match[static_cast<std::size_t>(t)] ? 1.0 : -1.0;
      ex.scores.values(t, 0) = base + g(rng);
      ex.scores.values(t, 1) = base + g(rng);
    }
    ex.quality_weight = 0.5;
    data.push_back(std::move(ex));
  }
  return data;
}

}  // namespace

TEST_CASE("train_fusion reduces the loss and attains the margins") {
  Rng rng(10);
  const auto data = separable_dataset(200, rng);
  fusion::FusionTrainConfig cfg;
  cfg.experts = 2;
  cfg.expert_hidden = {8};
  cfg.epochs = 40;
  cfg.peak_lr = 3e-3;
  cfg.column_dropout = 0.0;
  cfg.seed = 11;
  const auto result = fusion::train_fusion(data, {"a", "b"}, "a", cfg);

  // mini-batch losses fluctuate, so compare smoothed start against end
  const auto& losses = result.epoch_losses;
  REQUIRE(losses.size() >= 10);
  double head = 0.0, tail = 0.0;
  for (int e = 0; e < 5; ++e) {
    head += losses[static_cast<std::size_t>(e)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(e)];
  }
  CHECK(tail < 0.5 * head);
  CHECK(losses.back() < losses.front());

  // margin attainment on the training queries
  int nonmatch_total = 0, nonmatch_low = 0;
  bool matches_ok = true;
  for (const auto& ex : data) {
    const fusion::FusedScores out = fusion::fuse(result.model, ex.scores, 0.5);
    for (Eigen::Index t = 0; t < out.fused.size(); ++t) {
      if (ex.labels.is_match[static_cast<std::size_t>(t)]) {
        if (out.fused(t) < cfg.margin - 0.5) matches_ok = false;
      } else {
        ++nonmatch_total;
        if (out.fused(t) <= 0.5) ++nonmatch_low;
      }
    }
  }
  CHECK(matches_ok);
  CHECK(static_cast<double>(nonmatch_low) / nonmatch_total >= 0.9);

  CHECK(error_code([&] { fusion::train_fusion({}, {"a", "b"}, "a", cfg); }) ==
        "EmptyTrainingSet");
}

TEST_CASE("fused ranking is invariant to query order in a batch") {
  Rng rng(12);
  const auto data = separable_dataset(40, rng);
  fusion::FusionTrainConfig cfg;
  cfg.expert_hidden = {4};
  cfg.epochs = 5;
  cfg.peak_lr = 1e-3;
  cfg.seed = 13;
  const auto result = fusion::train_fusion(data, {"a", "b"}, "a", cfg);
  // inference is per query, so order cannot matter; check bit-equality
  std::vector<Vector> forward, backward;
  for (const auto& ex : data) forward.push_back(fusion::fuse(result.model, ex.scores, 0.5).fused);
  for (auto it = data.rbegin(); it != data.rend(); ++it)
    backward.push_back(fusion::fuse(result.model, it->scores, 0.5).fused);
  for (std::size_t i = 0; i < data.size(); ++i)
    CHECK(forward[i] == backward[data.size() - 1 - i]);
}
