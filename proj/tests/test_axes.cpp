#include <doctest.h>

#include <cmath>
#include <random>

#include "nfb/axes.hpp"
#include "nfb/error.hpp"
#include "nfb/metrics.hpp"
#include "oracles.hpp"

using namespace nfb;

namespace {

std::vector<SentenceEmbedding> embed(const oracle::Rows& rows, int layer = 1) {
  std::vector<SentenceEmbedding> e;
  for (const auto& r : rows) e.push_back({r, layer, 1});
  return e;
}

double abs_cos(const std::vector<double>& a, const std::vector<double>& b) {
  return std::abs(oracle::dot(a, b)) / std::sqrt(oracle::dot(a, a) * oracle::dot(b, b));
}

}  // namespace

TEST_CASE("fit_pca on a line puts all variance on PC1") {
  const auto e = embed({{2, 0}, {-2, 0}, {1, 0}, {-1, 0}});
  const auto r = fit_pca(e, 1);
  REQUIRE(r.pcs.size() == 1);
  CHECK(std::abs(r.pcs[0].direction[0]) == doctest::Approx(1.0));
  CHECK(r.pcs[0].explained_variance_ratio == doctest::Approx(1.0));
}

TEST_CASE("fit_pca on a symmetric cross splits variance evenly") {
  const auto r = fit_pca(embed({{1, 0}, {-1, 0}, {0, 1}, {0, -1}}), 2);
  CHECK(r.pcs[0].explained_variance_ratio == doctest::Approx(0.5));
  CHECK(r.pcs[1].explained_variance_ratio == doctest::Approx(0.5));
}

TEST_CASE("fit_pca matches a Jacobi eigendecomposition of the covariance") {
  std::mt19937_64 gen(21);
  for (int rep = 0; rep < 20; ++rep) {
    const auto x = oracle::random_rows(gen, 20, 5, 0.7);
    const auto r = fit_pca(embed(x), 4);
    const auto eig = oracle::jacobi(oracle::covariance(x));
    double total = 0.0;
    for (double v : eig.values) total += v;
    for (int g = 0; g < 4; ++g) {
      CHECK(std::abs(r.pcs[g].eigenvalue - eig.values[g]) < 1e-8);
      CHECK(std::abs(r.pcs[g].explained_variance_ratio - eig.values[g] / total) < 1e-8);
      CHECK(abs_cos(r.pcs[g].direction, eig.vectors[g]) > 1 - 1e-8);
    }
    double sum = 0.0;
    for (const auto& pc : r.pcs) sum += pc.explained_variance_ratio;
    CHECK(sum <= 1 + 1e-8);
  }
}

TEST_CASE("PC axes are orthonormal with non-increasing variance and canonical sign") {
  std::mt19937_64 gen(22);
  const auto x = oracle::random_rows(gen, 40, 8, 0.9);
  const auto r = fit_pca(embed(x), 8);
  for (std::size_t a = 0; a < r.pcs.size(); ++a) {
    for (std::size_t b = 0; b < r.pcs.size(); ++b) {
      CHECK(std::abs(oracle::dot(r.pcs[a].direction, r.pcs[b].direction) - (a == b ? 1.0 : 0.0)) < 1e-6);
    }
    if (a > 0) CHECK(r.pcs[a].explained_variance_ratio <= r.pcs[a - 1].explained_variance_ratio);
    const auto& d = r.pcs[a].direction;
    std::size_t big = 0;
    for (std::size_t j = 1; j < d.size(); ++j)
      if (std::abs(d[j]) > std::abs(d[big])) big = j;
    CHECK(d[big] > 0);
  }
}

TEST_CASE("projected sample variance equals the eigenvalue") {
  std::mt19937_64 gen(23);
  const auto x = oracle::random_rows(gen, 50, 6, 0.8);
  const auto r = fit_pca(embed(x), 6);
  for (const auto& pc : r.pcs) {
    std::vector<double> s;
    for (const auto& row : x) s.push_back(oracle::dot(row, pc.direction));
    CHECK(std::abs(oracle::sample_var(s) - pc.eigenvalue) <= 1e-6 * pc.eigenvalue);
  }
}

TEST_CASE("wide data goes through the SVD route and agrees with the Gram matrix") {
  std::mt19937_64 gen(24);
  const std::size_t d = kCovarianceWidthLimit + 4;
  const auto x = oracle::random_rows(gen, 10, d);
  const auto r = fit_pca(embed(x), 3);

  // Nonzero spectrum of the centred covariance = spectrum of the n x n Gram matrix.
  std::vector<double> mean(d, 0.0);
  for (const auto& row : x)
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j] / 10.0;
  oracle::Rows c = x;
  for (auto& row : c)
    for (std::size_t j = 0; j < d; ++j) row[j] -= mean[j];
  oracle::Rows gram(10, std::vector<double>(10));
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = 0; b < 10; ++b) gram[a][b] = oracle::dot(c[a], c[b]) / 9.0;
  const auto eig = oracle::jacobi(gram);
  for (int g = 0; g < 3; ++g) {
    CHECK(std::abs(r.pcs[g].eigenvalue - eig.values[g]) < 1e-8 * eig.values[0]);
    std::vector<double> v(d, 0.0);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < d; ++j) v[j] += eig.vectors[g][i] * c[i][j];
    CHECK(abs_cos(v, r.pcs[g].direction) > 1 - 1e-8);
  }
}

TEST_CASE("fit_pca errors") {
  const auto e = embed({{1, 2}, {3, 4}, {5, 7}});
  auto code = [](auto&& f) {
    try {
      f();
    } catch (const Error& err) {
      return err.code();
    }
    return ErrorCode::BadFormat;
  };
  CHECK(code([&] { fit_pca(e, 3); }) == ErrorCode::BadRank);
  CHECK(code([&] { fit_pca(e, 0); }) == ErrorCode::BadRank);
  CHECK(code([] { fit_pca(embed({{1, 1}, {1, 1}, {1, 1}}), 1); }) == ErrorCode::DegenerateData);
  CHECK(code([] { fit_pca(embed({{1, 1}}), 1); }) == ErrorCode::BadRank);
}

TEST_CASE("fit_logistic on a 1-D sign problem") {
  const auto e = embed({{-1}, {1}});
  const auto f = fit_logistic(e, std::vector<int>{0, 1});
  CHECK(f.axis.direction == std::vector<double>{1.0});
  CHECK(f.training_accuracy == 1.0);
  CHECK(f.converged);
  const auto g = fit_logistic(e, std::vector<int>{1, 0});
  CHECK(g.axis.direction == std::vector<double>{-1.0});
  CHECK(g.training_accuracy == 1.0);
}

TEST_CASE("fit_logistic agrees with gradient descent on the same objective") {
  std::mt19937_64 gen(25);
  for (int rep = 0; rep < 5; ++rep) {
    const auto x = oracle::random_rows(gen, 30, 4);
    const std::vector<double> truth{1.0, -0.5, 0.3, 0.8};
    std::vector<int> y;
    for (const auto& r : x) y.push_back(oracle::dot(r, truth) > 0 ? 1 : 0);
    const double l2 = 0.05;
    LogisticOptions opt;
    opt.l2 = l2;
    const auto f = fit_logistic(embed(x), y, opt);
    CHECK(f.converged);
    const auto [w, b] = oracle::logistic_gd(x, y, l2, 20000, 0.5);
    int agree = 0;
    for (const auto& r : x) agree += (oracle::dot(r, w) + b >= 0) == (f.predict(r) == 1);
    CHECK(agree >= 29);
    CHECK(logistic_loss(embed(x), y, f.weights, f.axis.bias, l2) <=
          logistic_loss(embed(x), y, w, b, l2) + 1e-9);
  }
}

TEST_CASE("fit_logistic loss never increases") {
  std::mt19937_64 gen(26);
  const auto x = oracle::random_rows(gen, 80, 6);
  std::vector<int> y;
  for (const auto& r : x) y.push_back(r[0] + 0.3 * r[1] + 0.5 * std::sin(5 * r[2]) > 0 ? 1 : 0);
  const auto f = fit_logistic(embed(x), y);
  for (std::size_t i = 1; i < f.loss_history.size(); ++i) CHECK(f.loss_history[i] <= f.loss_history[i - 1]);
  CHECK(std::abs(oracle::dot(f.axis.direction, f.axis.direction) - 1.0) < 1e-8);
}

TEST_CASE("fit_logistic with a vanishing penalty reaches accuracy 1 on PC labels") {
  std::mt19937_64 gen(27);
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = oracle::random_rows(gen, 40, 8, 0.85);
    const auto e = embed(x);
    const auto pcs = fit_pca(e, 8);
    for (const auto& pc : pcs.pcs) {
      std::vector<double> s;
      for (const auto& v : e) s.push_back(project(v, pc));
      const double med = oracle::median_by_sort(s);
      std::vector<int> y;
      for (double v : s) y.push_back(v >= med ? 1 : 0);
      CHECK(fit_logistic(e, y, ideal_observer_options()).training_accuracy == 1.0);
    }
  }
}

TEST_CASE("fit_logistic errors") {
  const auto e = embed({{1}, {2}});
  CHECK_THROWS_AS(fit_logistic(e, std::vector<int>{1, 1}), Error);
  LogisticOptions bad;
  bad.l2 = 0;
  CHECK_THROWS_AS(fit_logistic(e, std::vector<int>{0, 1}, bad), Error);
  LogisticOptions short_run;
  short_run.max_iter = 1;
  short_run.tol = 1e-300;
  const auto f = fit_logistic(e, std::vector<int>{0, 1}, short_run);
  CHECK_FALSE(f.converged);
  CHECK(f.weights.size() == 1);
}

TEST_CASE("orient_axis") {
  Axis a;
  a.direction = {-1, 0};
  const auto e = embed({{2, 0}, {-2, 0}});
  const std::vector<int> y{1, 0};
  const auto o = orient_axis(a, e, y);
  CHECK(o.oriented() == std::vector<double>{1, 0});
  CHECK(orient_axis(o, e, y).orientation_sign == o.orientation_sign);

  Axis tie;
  tie.direction = {0, 1};
  CHECK(orient_axis(tie, e, y).orientation_sign == 1);

  std::mt19937_64 gen(28);
  const auto x = oracle::random_rows(gen, 60, 5);
  std::vector<int> labels;
  for (const auto& r : x) labels.push_back(r[1] - r[3] > 0 ? 1 : 0);
  const auto ex = embed(x);
  for (const auto& pc : fit_pca(ex, 5).pcs) {
    const auto oriented = orient_axis(pc, ex, labels);
    double m[2] = {0, 0};
    int n[2] = {0, 0};
    for (std::size_t i = 0; i < ex.size(); ++i) {
      m[labels[i]] += project(ex[i], oriented);
      ++n[labels[i]];
    }
    CHECK(m[1] / n[1] >= m[0] / n[0]);
  }
}

TEST_CASE("axis_overlap") {
  Axis a, b, c;
  a.direction = {1, 0};
  b.direction = {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)};
  c.direction = {0, 1};
  CHECK(axis_overlap(a, a) == doctest::Approx(1.0));
  CHECK(axis_overlap(a, b) == doctest::Approx(0.70710678118654752));
  CHECK(axis_overlap(a, c) == doctest::Approx(0.0));
  Axis d;
  d.direction = {1, 0, 0};
  CHECK_THROWS_AS(axis_overlap(a, d), Error);
}

TEST_CASE("axis ids") {
  CHECK(pc_axis_id(7) == "PC7");
  CHECK(parse_axis_id("PC12") == 12);
  CHECK(parse_axis_id("LR") == 0);
  CHECK_THROWS_AS(parse_axis_id("PC0"), Error);
  CHECK_THROWS_AS(parse_axis_id("pc1"), Error);
  CHECK_THROWS_AS(parse_axis_id("PC1x"), Error);
}

TEST_CASE("axis store JSON round trip is byte stable") {
  std::mt19937_64 gen(29);
  const auto x = oracle::random_rows(gen, 30, 4);
  const auto e = embed(x, 2);
  AxisStore store;
  store.model_id = "m";
  store.layer_count = 3;
  store.width = 4;
  store.seed = 9;
  store.fit_sentence_count = 30;
  AxisBasis basis;
  basis.layer = 2;
  const auto pca = fit_pca(e, 3);
  basis.pcs = pca.pcs;
  basis.data_mean = pca.data_mean;
  basis.total_variance = pca.total_variance;
  std::vector<double> s;
  for (const auto& v : e) s.push_back(project(v, basis.pcs[0]));
  basis.pcs[0].thresholds = fit_thresholds(s);
  std::vector<int> y;
  for (double v : s) y.push_back(v >= basis.pcs[0].thresholds->theta);
  basis.lr = fit_logistic(e, y).axis;
  store.layers.push_back(basis);

  const std::string text = to_json(store);
  const AxisStore back = axis_store_from_json(text);
  CHECK(to_json(back) == text);
  CHECK(back.axis(2, "PC1").direction == store.axis(2, "PC1").direction);
  CHECK(back.axis(2, "PC1").thresholds->ordinal->gammas_pos == basis.pcs[0].thresholds->ordinal->gammas_pos);
  CHECK(back.axis(2, "LR").bias == store.axis(2, "LR").bias);
  CHECK(back.has(2, "PC3"));
  CHECK_FALSE(back.has(2, "PC4"));
  CHECK_THROWS_AS(back.basis(1), Error);
  CHECK_THROWS_AS(axis_store_from_json("{\"version\": 99}"), Error);
}
