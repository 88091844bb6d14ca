#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "tsq/grad.hpp"
#include "tsq/ts_layer.hpp"

using namespace tsq;

TEST_CASE("param set bookkeeping") {
  ParamSet<double> p;
  p.insert("b", Tensor<double>({2}, {1.0, 2.0}));
  p.insert("a", Tensor<double>({1}, {3.0}));
  CHECK_THROWS_AS(p.insert("a", Tensor<double>({1})), ConfigError);
  CHECK_THROWS_AS(p.at("missing"), ConfigError);
  CHECK(p.count() == 2);
  CHECK(p.total_size() == 3);
  CHECK(p.contains("b"));

  // Iteration is sorted by name.
  std::vector<std::string> names;
  for (const auto& [name, t] : p) names.push_back(name);
  CHECK(names == std::vector<std::string>({"a", "b"}));

  ParamSet<double> z = ParamSet<double>::zeros_like(p);
  CHECK(z.at("b").shape() == p.at("b").shape());
  CHECK(z.at("b")[0] == 0.0);

  CHECK(p.sum_squares() == doctest::Approx(14.0).epsilon(1e-15));

  p.check_finite();
  p.at("a")[0] = std::nan("");
  CHECK_THROWS_AS(p.check_finite(), NumericalError);
}

TEST_CASE("fd_check validates a quadratic exactly") {
  ParamSet<double> p;
  p.insert("w", Tensor<double>({2}, {1.0, 2.0}));
  ParamSet<double> analytic;
  analytic.insert("w", Tensor<double>({2}, {2.0, 4.0}));
  auto f = [](const ParamSet<double>& q) {
    const Tensor<double>& w = q.at("w");
    return w[0] * w[0] + w[1] * w[1];
  };
  FdReport<double> r = fd_check<double>(f, p, 1e-5, analytic, 1e-9);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-9);
  REQUIRE(r.rows.size() == 1);
  CHECK(r.rows[0].name == "w");
}

TEST_CASE("fd_check flags a wrong gradient") {
  ParamSet<double> p;
  p.insert("w", Tensor<double>({1}, {1.5}));
  ParamSet<double> wrong;
  wrong.insert("w", Tensor<double>({1}, {99.0}));
  auto f = [](const ParamSet<double>& q) { return q.at("w")[0] * q.at("w")[0]; };
  FdReport<double> r = fd_check<double>(f, p, 1e-5, wrong, 1e-5);
  CHECK(!r.pass);
  CHECK(r.max_rel_err > 0.9);
}

TEST_CASE("fd_check preconditions") {
  ParamSet<double> p;
  p.insert("w", Tensor<double>({1}, {1.0}));
  ParamSet<double> g;
  g.insert("w", Tensor<double>({1}, {2.0}));
  auto f = [](const ParamSet<double>& q) { return q.at("w")[0]; };
  CHECK_THROWS_AS(fd_check<double>(f, p, 0.0, g, 1e-5), NumericalError);
  CHECK_THROWS_AS(fd_check<double>(f, p, -1e-5, g, 1e-5), NumericalError);

  auto bad = [](const ParamSet<double>& q) {
    return std::log(-1.0 - q.at("w")[0]);  // NaN for w near 1
  };
  CHECK_THROWS_AS(fd_check<double>(bad, p, 1e-5, g, 1e-5), NumericalError);

  ParamSet<double> mis;
  mis.insert("w", Tensor<double>({2}));
  CHECK_THROWS_AS(fd_check<double>(f, p, 1e-5, mis, 1e-5), ShapeError);
}

TEST_CASE("projection residual through ts_forward passes the oracle run") {
  auto rng = oracle::make_rng(41);
  auto inst = oracle::draw_ts_instance(rng, 3, 1, 2, 2, 1);

  TsForwardCache<double> cache;
  ts_forward(inst.clip, inst.params, &cache);
  Tensor<double> zero_gy({1, 2, 2, 1});
  TsGrads<double> g = ts_backward(cache, inst.params, zero_gy, 1.0);

  ParamSet<double> p;
  p.insert("w1", inst.params.w1);
  p.insert("w2", inst.params.w2);
  ParamSet<double> analytic;
  analytic.insert("w1", g.w1);
  analytic.insert("w2", g.w2);

  auto f = [&](const ParamSet<double>& q) {
    TSLayerParams<double> layer = inst.params;
    layer.w1 = q.at("w1");
    layer.w2 = q.at("w2");
    return ts_forward(inst.clip, layer).residual;
  };
  FdReport<double> r = fd_check<double>(f, p, 1e-5, analytic, 1e-5);
  CHECK(r.pass);
}
