#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "dia/errors.hpp"
#include "dia/sampling.hpp"

using namespace dia;

namespace {
Policy fixed(std::initializer_list<double> p) {
  Vec l(p.size());
  int i = 0;
  for (double v : p) l[i++] = std::log(v);
  return Policy::softmax(l);
}

DgpInstance iv2(std::uint64_t seed, double sigma_u = 0.5) {
  DgpConfig c = DgpConfig::defaults(DgpKind::iv);
  c.num_instruments = 2;
  c.sigma_u = sigma_u;
  return make_dgp(c, seed);
}

double accept_rate(const AcceptanceResult& r, std::size_t n) {
  return static_cast<double>(r.accepted.size()) / static_cast<double>(n);
}
}  // namespace

TEST_CASE("multi-importance ratios") {
  PolicyRegistry reg;
  reg.add(Policy::uniform(2), 100);
  reg.add(Policy::softmax(Vec{{0.0, -INFINITY}}), 100);
  Policy target = fixed({0.2, 0.8});
  Sample s0, s1;
  s0.z = 0;
  s1.z = 1;
  CHECK(multi_importance_ratio(s0, target, reg) == doctest::Approx(0.2 / 0.75));
  CHECK(multi_importance_ratio(s1, target, reg) == doctest::Approx(3.2));
  CHECK(*exact_rho_max(target, reg) == doctest::Approx(3.2));

  // empirical acceptance frequencies match ratio / rho_max
  const int n = 100000;
  std::vector<double> ratios(n);
  for (int i = 0; i < n; ++i) ratios[i] = i % 2 ? 3.2 : 0.2 / 0.75;
  Rng r(1);
  AcceptanceResult a = accept_by_ratios(ratios, 3.2, 1, r);
  int acc0 = 0, acc1 = 0;
  for (int i : a.accepted) (i % 2 ? acc1 : acc0)++;
  const double p0 = (0.2 / 0.75) / 3.2;
  CHECK(std::abs(acc0 / (n / 2.0) - p0) < 4 * std::sqrt(p0 * (1 - p0) / (n / 2.0)));
  CHECK(acc1 == n / 2);

  PolicyRegistry same;
  same.add(target, 10);
  CHECK(multi_importance_ratio(s0, target, same) == doctest::Approx(1.0));
  CHECK(multi_importance_ratio(s1, target, same) == doctest::Approx(1.0));

  Policy zero = Policy::softmax(Vec{{-INFINITY, 0.0}});
  CHECK(multi_importance_ratio(s0, zero, reg) == 0.0);
}

TEST_CASE("two-proposal examples") {
  DgpInstance dgp = iv2(1);
  ResampleConfig rc;
  rc.subset_size_override = 1;
  SUBCASE("opposite 0.75/0.25 proposals, uniform target") {
    PolicyRegistry reg;
    int p = reg.add(fixed({0.75, 0.25}), 5000);
    int q = reg.add(fixed({0.25, 0.75}), 5000);
    Dataset d = sample_batch(dgp, reg, p, 5000, Rng(1));
    sample_batch(dgp, reg, q, 5000, Rng(2), d);
    Rng a(3), b(4);
    CHECK(accept_rate(multi_rejection_filter(d, Policy::uniform(2), reg, rc, a), d.size()) == 1.0);
    CHECK(std::abs(accept_rate(single_rejection_filter(d, Policy::uniform(2), reg, rc, b), d.size()) - 0.5) < 0.03);
  }
  SUBCASE("target equals one proposal, the other opposite") {
    PolicyRegistry reg;
    Policy q1 = fixed({0.999, 0.001});
    int p = reg.add(q1, 5000);
    int q = reg.add(fixed({0.001, 0.999}), 5000);
    Dataset d = sample_batch(dgp, reg, p, 5000, Rng(5));
    sample_batch(dgp, reg, q, 5000, Rng(6), d);
    Rng a(7), b(8);
    CHECK(std::abs(accept_rate(multi_rejection_filter(d, q1, reg, rc, a), d.size()) - 0.5) < 0.03);
    CHECK(std::abs(accept_rate(single_rejection_filter(d, q1, reg, rc, b), d.size()) - 0.5) < 0.03);
  }
  SUBCASE("target equals the collection policy") {
    PolicyRegistry reg;
    Policy pi = fixed({0.3, 0.7});
    int p = reg.add(pi, 2000);
    Dataset d = sample_batch(dgp, reg, p, 2000, Rng(9));
    Rng a(10);
    AcceptanceResult r = multi_rejection_filter(d, pi, reg, rc, a);
    CHECK(r.accepted.size() == d.size());
    CHECK(r.rho_max == doctest::Approx(1.0));
  }
}

TEST_CASE("acceptance dominance and supremum bookkeeping") {
  DgpInstance dgp = make_dgp(DgpConfig::defaults(DgpKind::iv), 2);
  Rng g(3);
  ResampleConfig rc;
  rc.subset_size_override = 1;
  for (int t = 0; t < 5; ++t) {
    PolicyRegistry reg;
    Dataset d;
    for (int j = 0; j < 3; ++j) {
      Vec l(10);
      for (int i = 0; i < 10; ++i) l[i] = g.normal();
      int id = reg.add(Policy::softmax(l), 3000);
      sample_batch(dgp, reg, id, 3000, g.split(static_cast<std::uint64_t>(10 * t + j)), d);
    }
    Vec tl(10);
    for (int i = 0; i < 10; ++i) tl[i] = g.normal();
    Policy target = Policy::softmax(tl);
    Rng a(t), b(t + 100);
    AcceptanceResult m = multi_rejection_filter(d, target, reg, rc, a);
    AcceptanceResult s = single_rejection_filter(d, target, reg, rc, b);
    const double se = std::sqrt(0.25 / d.size());
    CHECK(accept_rate(m, d.size()) >= accept_rate(s, d.size()) - 3 * se);
    CHECK(m.rho_max == doctest::Approx(*std::max_element(m.ratios.begin(), m.ratios.end())));
    CHECK(*std::max_element(m.ratios.begin(), m.ratios.end()) / m.rho_max <= 1.0);
    CHECK(m.rho_max <= *m.rho_max_exact + 1e-12);
  }
}

TEST_CASE("accepted instruments follow the target") {
  DgpInstance dgp = make_dgp(DgpConfig::defaults(DgpKind::iv), 4);
  PolicyRegistry reg;
  const int n = 40000;
  int id = reg.add(Policy::uniform(10), n);
  Dataset d = sample_batch(dgp, reg, id, n, Rng(4));
  Vec tl = Vec::LinSpaced(10, -0.6, 0.6);
  Policy target = Policy::softmax(tl);
  ResampleConfig rc;
  rc.rho_max_mode = RhoMaxMode::known;
  rc.subset_size_override = 1;
  Rng a(5);
  AcceptanceResult r = multi_rejection_filter(d, target, reg, rc, a);
  REQUIRE(r.accepted.size() >= 10000);
  std::vector<double> cnt(10, 0.0);
  for (int i = 0; i < 10000; ++i) cnt[d[r.accepted[i]].z] += 1;
  Vec p = target.eval_probs(Vec());
  double chi2 = 0;
  for (int z = 0; z < 10; ++z) chi2 += std::pow(cnt[z] - 10000 * p[z], 2) / (10000 * p[z]);
  CHECK(chi2 < 21.666);  // chi-square(9) upper 1% point
}

TEST_CASE("draw_subsets") {
  std::vector<int> acc{4, 9, 2, 7};
  Rng r(1);
  for (const auto& s : draw_subsets(acc, 4, 3, r)) {
    std::vector<int> t = s, u = acc;
    std::sort(t.begin(), t.end());
    std::sort(u.begin(), u.end());
    CHECK(t == u);
  }
  std::vector<int> three{0, 1, 2};
  std::vector<int> cnt(3, 0);
  for (int t = 0; t < 10000; ++t) ++cnt[draw_subsets(three, 1, 1, r)[0][0]];
  for (int c : cnt) CHECK(std::abs(c / 1e4 - 1.0 / 3) < 0.02);
  std::vector<int> many(50);
  for (int i = 0; i < 50; ++i) many[i] = i;
  for (const auto& s : draw_subsets(many, 20, 30, r)) CHECK(std::set<int>(s.begin(), s.end()).size() == 20);
  CHECK_THROWS_AS(draw_subsets(three, 4, 1, r), AcceptanceError);
}

TEST_CASE("rs_mse_estimate with the full set") {
  DgpInstance dgp = iv2(5);
  PolicyRegistry reg;
  int id = reg.add(Policy::uniform(2), 300);
  Dataset d = sample_batch(dgp, reg, id, 300, Rng(5));
  EstimatorSpec spec = default_estimator(dgp);
  EstimatorState full = fit_estimator(spec, d);
  ResampleConfig rc;
  rc.subset_size_override = 300;
  rc.B = 4;
  Rng r(6);
  MseEstimate e = rs_mse_estimate(
      d, Policy::uniform(2), reg, [&](std::span<const Sample> s) { return fit_estimator(spec, s); }, full,
      dgp.eval_set(), rc, r);
  CHECK(e.value == doctest::Approx(0.0).epsilon(1e-20));
  CHECK(e.subsets_used == 4);
}

TEST_CASE("rejection-sampled MSE matches on-policy Monte Carlo") {
  DgpInstance dgp = iv2(7);
  EstimatorSpec spec = default_estimator(dgp);
  Policy behavior = fixed({0.5, 0.5}), target = fixed({0.4, 0.6});
  auto truth = [&](std::span<const Sample> s) { return true_mse(dgp, fit_estimator(spec, s), dgp.eval_set()); };
  const int n = 2000;
  ResampleConfig rc;
  rc.alpha = 0.75;
  const long k = rc.subset_size(n);
  CHECK(k == static_cast<long>(std::ceil(std::pow(2000.0, 0.75))));

  std::vector<double> rs;
  PolicyRegistry reg;
  int id = reg.add(behavior, n);
  for (int t = 0; t < 40; ++t) {
    Rng tr = Rng(70).split(static_cast<std::uint64_t>(t));
    Dataset d = sample_batch(dgp, reg, id, n, tr.split(0));
    Rng a = tr.split(1);
    rs.push_back(rs_estimate(d, target, reg, truth, rc, a).value);
  }
  std::vector<double> mc;
  PolicyRegistry treg;
  int tid = treg.add(target, static_cast<long>(k));
  for (int t = 0; t < 2000; ++t)
    mc.push_back(truth(sample_batch(dgp, treg, tid, static_cast<int>(k), Rng(71).split(static_cast<std::uint64_t>(t)))));
  auto ms = [](const std::vector<double>& v) {
    double m = 0, s2 = 0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s2 += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s2 / (v.size() - 1) / v.size())};
  };
  auto [mr, sr] = ms(rs);
  auto [mm, sm] = ms(mc);
  CHECK(std::abs(mr - mm) < 3 * std::sqrt(sr * sr + sm * sm));
}

TEST_CASE("importance sampling") {
  DgpInstance dgp = iv2(8);
  PolicyRegistry reg;
  Policy behavior = fixed({0.5, 0.5});
  int id = reg.add(behavior, 400);
  Dataset d = sample_batch(dgp, reg, id, 400, Rng(8));
  ResampleConfig rc;
  rc.subset_size_override = 20;
  rc.B = 50;
  SUBCASE("target equals behavior") {
    Rng r(9);
    MseEstimate e = is_estimate(d, behavior, [](std::span<const Sample> s) { return double(s.size()); }, rc, r);
    for (double v : e.per_subset) CHECK(v == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(e.value == doctest::Approx(20.0));
    CHECK(!e.overflow);
  }
  SUBCASE("weights are unbiased") {
    rc.subset_size_override = 2;
    rc.B = 20000;
    Rng r(10);
    MseEstimate e = is_estimate(d, fixed({0.3, 0.7}), [](std::span<const Sample>) { return 1.0; }, rc, r);
    CHECK(std::abs(e.value - 1.0) < 4 * e.stderr_ + 0.02);
  }
  SUBCASE("overflow is flagged") {
    rc.subset_size_override = 400;
    rc.B = 1;
    for (Sample& x : d) x.z = 1;
    Rng r(11);
    MseEstimate e =
        is_estimate(d, fixed({0.001, 0.999}), [](std::span<const Sample>) { return 1.0; }, rc, r, 5.0);
    CHECK(e.overflow);
  }
}

TEST_CASE("deterministic-DGP importance variance formula") {
  // Target puts all mass on z=1; behavior Pr(z=1)=p; kernel a * prod w.
  const int n = 8, k = 3, B = 10;
  const double p = 0.4, a = 1.7, rho = 1 / p;
  CHECK(is_variance_deterministic(n, k, 1.0, a, 0) == 0.0);
  DgpConfig c = DgpConfig::defaults(DgpKind::iv);
  c.num_instruments = 2;
  c.gamma = Vec{{1.0, 1.0}};
  c.sigma_u = c.sigma0 = c.sigma1 = 0;
  DgpInstance dgp = make_dgp(c, 1);
  PolicyRegistry reg;
  int id = reg.add(fixed({1 - p, p}), n);
  Policy target = Policy::softmax(Vec{{-INFINITY, 0.0}});
  ResampleConfig rc;
  rc.subset_size_override = k;
  rc.B = B;
  const int reps = 40000;
  double s = 0, s2 = 0;
  for (int t = 0; t < reps; ++t) {
    Rng tr = Rng(12).split(static_cast<std::uint64_t>(t));
    Dataset d = sample_batch(dgp, reg, id, n, tr.split(0));
    Rng r = tr.split(1);
    double v = is_estimate(d, target, [&](std::span<const Sample>) { return a; }, rc, r).value;
    s += v;
    s2 += v * v;
  }
  const double mean = s / reps, var = s2 / reps - mean * mean;
  const double expect = is_variance_deterministic(n, k, rho, a, B);
  CHECK(std::abs(mean - a) < 4 * std::sqrt(expect / reps));
  CHECK(std::abs(var / expect - 1) < 0.08);
}

TEST_CASE("binomial") {
  CHECK(binomial(8, 3) == doctest::Approx(56.0));
  CHECK(binomial(5, 0) == doctest::Approx(1.0));
  CHECK(binomial(3, 5) == 0.0);
}
