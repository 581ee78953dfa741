#include <gtest/gtest.h>

#include "cxrdiff/encoder_bench.hpp"
#include "support.hpp"

using namespace cxrdiff;
using cxrdiff::testing::brute_force_chexpert;
using cxrdiff::testing::error_kind;

namespace {

EncoderOutput output(std::string id, Eigen::MatrixXd states) {
  EncoderOutput o;
  o.id = std::move(id);
  o.encoder_id = "enc";
  o.token_states = std::move(states);
  return o;
}

Eigen::MatrixXd four_points() {
  Eigen::MatrixXd e(4, 2);
  e << 1, 0, 0.99, 0.01, 0, 1, 0.01, 0.99;
  return e;
}

double silhouette(const Eigen::MatrixXd& y, const std::vector<int>& lab) {
  const auto n = y.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double in = 0, out = 0;
    int nin = 0, nout = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = (y.row(i) - y.row(j)).norm();
      if (lab[i] == lab[j]) in += d, ++nin;
      else out += d, ++nout;
    }
    const double a = in / nin, b = out / nout;
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST(Strategy, SingleTokenClsEqualsMean) {
  Eigen::MatrixXd s(1, 3);
  s << 0.1, -2, 5;
  const auto o = output("a", s);
  EXPECT_EQ(extract_embedding(o, ExtractionStrategy::cls_hidden_state),
            extract_embedding(o, ExtractionStrategy::mean_hidden_states));
}

TEST(Strategy, MeanOfRows) {
  const auto o = output("a", Eigen::MatrixXd::Identity(2, 2));
  const Eigen::VectorXd m = extract_embedding(o, ExtractionStrategy::mean_hidden_states);
  EXPECT_EQ(m[0], 0.5);
  EXPECT_EQ(m[1], 0.5);
}

TEST(Strategy, PooledAbsent) {
  const auto o = output("a", Eigen::MatrixXd::Identity(2, 2));
  EXPECT_FALSE(strategy_available(o, ExtractionStrategy::pooler_output));
  EXPECT_EQ(error_kind([&] { extract_embedding(o, ExtractionStrategy::pooler_output); }), "StrategyUnavailable");
  EXPECT_EQ(error_kind([] { parse_strategy("bogus"); }), "UnknownStrategy");
}

TEST(ChexpertAtK, FourPointFixture) {
  const std::vector<int> xy = {0, 0, 1, 1}, alt = {0, 1, 0, 1};
  EXPECT_EQ(chexpert_at_k(four_points(), xy, 1).global, 1.0);
  EXPECT_EQ(chexpert_at_k(four_points(), alt, 1).global, 0.0);
}

TEST(ChexpertAtK, AllSameLabel) {
  Rng rng(1);
  Eigen::MatrixXd e(7, 3);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
  const std::vector<int> same(7, 4);
  for (int k = 1; k <= 6; ++k) EXPECT_EQ(chexpert_at_k(e, same, k).global, 1.0);
}

TEST(ChexpertAtK, KBounds) {
  const std::vector<int> xy = {0, 0, 1, 1};
  EXPECT_EQ(error_kind([&] { chexpert_at_k(four_points(), xy, 4); }), "KTooLarge");
  EXPECT_EQ(error_kind([&] { chexpert_at_k(four_points(), xy, 0); }), "KTooLarge");
}

TEST(ChexpertAtK, MatchesBruteForceWithTies) {
  Rng rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(30));
    const int d = 1 + static_cast<int>(rng.index(6));
    const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(10, n - 1))));
    Eigen::MatrixXd e(n, d);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<double>(rng.index(5)) - 2.0;
    std::vector<int> lab;
    for (int i = 0; i < n; ++i) lab.push_back(static_cast<int>(rng.index(4)));
    const auto got = chexpert_per_class(e, lab, k);
    const auto ref = brute_force_chexpert(e, lab, k);
    EXPECT_EQ(got.global, ref.global);
    EXPECT_EQ(got.per_class, ref.per_class);
    EXPECT_EQ(got.macro, ref.macro);
  }
}

TEST(PerClass, TwoClustersPerfect) {
  Eigen::MatrixXd e(6, 2);
  e << 1, 0, 1, 0.01, 0.99, 0, 0, 1, 0.01, 1, 0, 0.98;
  const std::vector<int> lab = {0, 0, 0, 1, 1, 1};
  const auto r = chexpert_per_class(e, lab, 2);
  EXPECT_EQ(r.per_class.at(0), 1.0);
  EXPECT_EQ(r.per_class.at(1), 1.0);
  EXPECT_EQ(r.macro, 1.0);
}

TEST(PerClass, SingletonScoresZero) {
  Eigen::MatrixXd e(4, 2);
  e << 1, 0, 0.9, 0.1, 0.8, 0.2, 0, 1;
  const std::vector<int> lab = {0, 0, 1, 0};
  const auto r = chexpert_per_class(e, lab, 1);
  EXPECT_EQ(r.per_class.at(1), 0.0);
}

TEST(PerClass, GroupsSeparateFromMatchLabels) {
  const std::vector<int> match = {0, 0, 1, 1}, groups = {5, 6, 5, 6};
  const auto r = chexpert_per_class(four_points(), match, 1, groups);
  EXPECT_EQ(r.per_class.size(), 2u);
  EXPECT_EQ(r.per_class.at(5), 1.0);
}

TEST(LabelModes, FullVectorRequiresEqualVectors) {
  LabelVector a{}, b{};
  a.fill(LabelState::negative);
  b.fill(LabelState::negative);
  a[2] = LabelState::positive;
  b[2] = LabelState::positive;
  b[5] = LabelState::uncertain;
  const std::vector<LabeledReport> reps = {make_report("1", "IMPRESSION: x", a), make_report("2", "IMPRESSION: y", b),
                                           make_report("3", "IMPRESSION: z", a)};
  const auto prim = match_labels(reps, LabelMode::primary_class);
  EXPECT_EQ(prim[0], prim[1]);
  const auto full = match_labels(reps, LabelMode::full_vector);
  EXPECT_NE(full[0], full[1]);
  EXPECT_EQ(full[0], full[2]);
}

TEST(BagOfWords, Iou) {
  EXPECT_DOUBLE_EQ(bow_iou_similarity("pleural effusion", "no pleural effusion"), 2.0 / 3.0);
  EXPECT_EQ(bow_iou_similarity("Small effusion.", "small EFFUSION"), 1.0);
  EXPECT_EQ(bow_iou_similarity("clear lungs", "cardiomegaly"), 0.0);
}

TEST(Embed2d, PcaOnPlanarDataIsRigid) {
  Rng rng(3);
  Eigen::MatrixXd x(12, 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  Embed2dOptions opt;
  opt.method = ProjectionMethod::pca;
  const auto y = embed_2d(x, opt).coords;
  for (Eigen::Index i = 0; i < 12; ++i)
    for (Eigen::Index j = 0; j < 12; ++j)
      EXPECT_NEAR((y.row(i) - y.row(j)).norm(), (x.row(i) - x.row(j)).norm(), 1e-10);
}

TEST(Embed2d, SeparatedClustersAndDeterminism) {
  Rng rng(4);
  const int per = 20, d = 10;
  Eigen::MatrixXd x(2 * per, d);
  std::vector<int> lab;
  for (int i = 0; i < 2 * per; ++i) {
    for (int c = 0; c < d; ++c) x(i, c) = 0.3 * rng.normal() + (i < per ? 0.0 : (c == 0 ? 5.0 : 0.0));
    lab.push_back(i < per ? 0 : 1);
  }
  Embed2dOptions opt;
  opt.seed = 9;
  opt.iterations = 500;
  const auto a = embed_2d(x, opt), b = embed_2d(x, opt);
  EXPECT_EQ(a.method, "tsne");
  EXPECT_GT(silhouette(a.coords, lab), 0.5);
  EXPECT_TRUE(a.coords == b.coords);
  EXPECT_EQ(error_kind([] { embed_2d(Eigen::MatrixXd::Zero(2, 3)); }), "TooFewPoints");
}

TEST(EncoderOutputs, FileRoundTrip) {
  cxrdiff::testing::TempDir dir("enc");
  Rng rng(5);
  std::vector<EncoderOutput> outs;
  for (int i = 0; i < 3; ++i) {
    Eigen::MatrixXd s(2 + i, 4);
    for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = static_cast<float>(rng.normal());
    outs.push_back(output("r" + std::to_string(i), s));
  }
  outs[1].pooled = Eigen::VectorXd::Constant(4, 0.5);
  ArtifactSet art;
  write_encoder_outputs(art, dir / "out.jsonl", outs);
  art.commit();
  const auto back = read_encoder_outputs(dir / "out.jsonl");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_TRUE(back[2].token_states == outs[2].token_states);
  EXPECT_TRUE(back[1].pooled.has_value());
  EXPECT_FALSE(back[0].pooled.has_value());
}
