#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "tsq/network.hpp"

using namespace tsq;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.k = 4;
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.beta = 10.0;
  cfg.lambda = 4e-5;
  cfg.conv_blocks = {{3, 3, 2}};
  cfg.ts_placements = {{0, 2, TsPlacement::Kind::kSqueeze}};
  return cfg;
}

template <class T>
std::vector<ClipTensor<T>> random_batch(std::mt19937_64& rng,
                                        const NetworkConfig& cfg,
                                        std::size_t n, std::size_t h,
                                        std::size_t w) {
  std::vector<ClipTensor<T>> batch;
  for (std::size_t i = 0; i < n; ++i) {
    batch.emplace_back(oracle::random_tensor<T>(
        rng, {cfg.k, h, w, cfg.in_channels}, 0.0, 1.0));
  }
  return batch;
}

}  // namespace

TEST_CASE("config validation") {
  NetworkConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  NetworkConfig bad = cfg;
  bad.ts_placements = {{0, 2, TsPlacement::Kind::kSqueeze},
                       {1, 3, TsPlacement::Kind::kSqueeze}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // D grows with depth
  bad.allow_non_pyramidal = true;
  CHECK_NOTHROW(bad.validate());

  bad = cfg;
  bad.ts_placements = {{1, 2, TsPlacement::Kind::kSqueeze},
                       {0, 1, TsPlacement::Kind::kSqueeze}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // out of order

  bad = cfg;
  bad.ts_placements = {{0, 1, TsPlacement::Kind::kMean},
                       {5, 1, TsPlacement::Kind::kSqueeze}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // block out of range

  bad = cfg;
  bad.ts_placements[0].kind = TsPlacement::Kind::kMean;
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // mean with D != 1

  bad = cfg;
  bad.conv_blocks[0].kernel = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // even kernel

  bad = cfg;
  bad.temporal_merge = "stack";
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.leaky_slope = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json round trip") {
  NetworkConfig cfg = tiny_config();
  cfg.ts_placements.push_back({1, 1, TsPlacement::Kind::kMean});
  std::string text = cfg.to_json();
  NetworkConfig back = NetworkConfig::from_json(text);
  CHECK(back.k == cfg.k);
  CHECK(back.in_channels == cfg.in_channels);
  CHECK(back.num_classes == cfg.num_classes);
  CHECK(back.beta == cfg.beta);
  CHECK(back.lambda == cfg.lambda);
  CHECK(back.conv_blocks.size() == cfg.conv_blocks.size());
  CHECK(back.conv_blocks[0].out_channels == 3);
  REQUIRE(back.ts_placements.size() == 2);
  CHECK(back.ts_placements[0].kind == TsPlacement::Kind::kSqueeze);
  CHECK(back.ts_placements[1].kind == TsPlacement::Kind::kMean);
  CHECK(back.temporal_merge == "concat_channels");

  CHECK_THROWS_AS(NetworkConfig::from_json("{\"bogus\": 1}"), ConfigError);
  CHECK_THROWS_AS(NetworkConfig::from_json("not json"), ConfigError);
  CHECK_THROWS_AS(
      NetworkConfig::from_json(
          "{\"ts_placements\": [{\"block\": 0, \"d\": 1, \"kind\": \"max\"}]}"),
      ConfigError);

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tsq_net_cfg";
  fs::create_directories(dir);
  const std::string path = (dir / "cfg.json").string();
  std::ofstream(path) << text;
  NetworkConfig from_disk = NetworkConfig::from_file(path);
  CHECK(from_disk.k == cfg.k);
  CHECK_THROWS_AS(NetworkConfig::from_file((dir / "nope.json").string()),
                  IoError);
  fs::remove_all(dir);
}

TEST_CASE("temporal bookkeeping through placements") {
  // One squeeze at the input with D=3 on a 10-frame clip: the merge hands
  // 3 frames to the conv head.
  NetworkConfig cfg;
  cfg.k = 10;
  cfg.in_channels = 1;
  cfg.conv_blocks = {{4, 3, 2}, {4, 3, 2}};
  cfg.ts_placements = {{0, 3, TsPlacement::Kind::kSqueeze}};
  auto rng = oracle::make_rng(50);
  Network<double> net(cfg, rng);
  CHECK(net.frames_at_merge() == 3);
  CHECK(net.head_channels() == 4);

  // Two squeezes, 64 -> 16 -> 4: the head receives 4 frames.
  NetworkConfig deep;
  deep.k = 64;
  deep.in_channels = 1;
  deep.conv_blocks = {{2, 3, 2}, {2, 3, 2}};
  deep.ts_placements = {{0, 16, TsPlacement::Kind::kSqueeze},
                        {1, 4, TsPlacement::Kind::kSqueeze}};
  Network<double> deep_net(deep, rng);
  CHECK(deep_net.frames_at_merge() == 4);
  CHECK(deep_net.head_channels() == 2);

  // With no placements the frames merge straight into channels at the input.
  NetworkConfig flat;
  flat.k = 5;
  flat.in_channels = 2;
  flat.conv_blocks = {{3, 3, 1}};
  Network<double> flat_net(flat, rng);
  CHECK(flat_net.frames_at_merge() == 5);
  CHECK(flat_net.stages()[0].kind == Network<double>::StageKind::kMerge);
  CHECK(flat_net.stages()[0].c_out == 10);

  // A placement deeper than the temporal length is rejected: after D=2 only
  // two frames remain, so D=3 cannot follow.
  NetworkConfig overdeep;
  overdeep.k = 10;
  overdeep.conv_blocks = {{2, 3, 2}, {2, 3, 2}};
  overdeep.ts_placements = {{0, 2, TsPlacement::Kind::kSqueeze},
                            {1, 3, TsPlacement::Kind::kSqueeze}};
  overdeep.allow_non_pyramidal = true;
  CHECK_THROWS_AS(Network<double>(overdeep, rng), ConfigError);
}

TEST_CASE("single clip with one class: zero cross-entropy") {
  NetworkConfig cfg = tiny_config();
  cfg.num_classes = 1;
  auto rng = oracle::make_rng(51);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 1, 6, 6);
  auto out = net.forward(batch, {0});
  CHECK(out.loss.classif == 0.0);
  REQUIRE(out.loss.proj_terms.size() == 1);
  CHECK(out.loss.proj_terms[0] >= 0.0);
  CHECK(out.scores(0, 0) == 1.0);
}

TEST_CASE("table-style configs produce the right number of proj terms") {
  auto rng = oracle::make_rng(52);

  NetworkConfig row1;
  row1.k = 10;
  row1.in_channels = 1;
  row1.num_classes = 4;
  row1.conv_blocks = {{3, 3, 2}, {4, 3, 2}};
  row1.ts_placements = {{0, 3, TsPlacement::Kind::kSqueeze}};
  Network<double> net1(row1, rng);
  auto batch1 = random_batch<double>(rng, row1, 2, 8, 8);
  auto out1 = net1.forward(batch1, {0, 1});
  CHECK(out1.loss.proj_terms.size() == 1);
  // The stage after the squeeze sees a 3-frame stack.
  CHECK(net1.traces[0].ts_caches[0].y.dim(0) == 3);

  NetworkConfig row5 = row1;
  row5.ts_placements = {{0, 3, TsPlacement::Kind::kSqueeze},
                        {1, 1, TsPlacement::Kind::kSqueeze}};
  Network<double> net5(row5, rng);
  auto batch5 = random_batch<double>(rng, row5, 2, 8, 8);
  auto out5 = net5.forward(batch5, {2, 3});
  CHECK(out5.loss.proj_terms.size() == 2);
}

TEST_CASE("softmax scores sum to one") {
  NetworkConfig cfg = tiny_config();
  cfg.num_classes = 5;
  auto rng = oracle::make_rng(53);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 3, 6, 6);
  Tensor<double> scores = net.infer(batch);
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      sum += scores(i, j);
      CHECK(scores(i, j) >= 0.0);
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("loss recomposes exactly from its parts") {
  NetworkConfig cfg = tiny_config();
  auto rng = oracle::make_rng(54);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 2, 6, 6);
  auto out = net.forward(batch, {0, 1});
  double total = out.loss.classif;
  for (double term : out.loss.proj_terms) total += 10.0 * term;
  total += 4e-5 * out.loss.l2;
  CHECK(out.loss.total == total);  // bitwise: same composition order
  CHECK(out.loss.classif >= 0.0);
  CHECK(out.loss.l2 >= 0.0);
}

TEST_CASE("beta=0 makes gradients independent of the projection path") {
  NetworkConfig cfg = tiny_config();
  cfg.beta = 0.0;
  auto rng = oracle::make_rng(55);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 2, 6, 6);
  net.forward(batch, {0, 1});
  ParamSet<double> before = net.backward();

  // Corrupt everything only the residual path reads; gradients must not move.
  for (auto& trace : net.traces) {
    for (auto& cache : trace.ts_caches) {
      for (auto& n : cache.pixel_norms) n = 1e9;
      for (std::size_t i = 0; i < cache.x_hat.size(); ++i) {
        cache.x_hat[i] = 1e9;
      }
    }
  }
  ParamSet<double> after = net.backward();
  for (const auto& [name, g] : before) {
    const Tensor<double>& g2 = after.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == g2[i]);
  }
}

TEST_CASE("beta path is live: beta=10 vs beta=0 changes the w2 gradient") {
  NetworkConfig cfg = tiny_config();
  auto rng = oracle::make_rng(56);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 2, 6, 6);
  net.forward(batch, {0, 1});
  ParamSet<double> with_beta = net.backward();

  NetworkConfig zero = cfg;
  zero.beta = 0.0;
  Network<double> net0(zero, ParamSet<double>(net.params()));
  net0.forward(batch, {0, 1});
  ParamSet<double> without = net0.backward();

  double diff = 0.0;
  const Tensor<double>& a = with_beta.at("ts0.w2");
  const Tensor<double>& b = without.at("ts0.w2");
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::fabs(a[i] - b[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("gradient of a parameter the loss never sees is exactly zero") {
  // One class: cross-entropy is identically zero, so with lambda=0 the only
  // live path is the projection term, which never touches the conv head or
  // the classifier.
  NetworkConfig cfg = tiny_config();
  cfg.num_classes = 1;
  cfg.lambda = 0.0;
  auto rng = oracle::make_rng(57);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 2, 6, 6);
  net.forward(batch, {0, 0});
  ParamSet<double> grads = net.backward();
  for (const std::string name : {"fc.weight", "fc.bias", "conv0.weight",
                                 "conv0.bias"}) {
    const Tensor<double>& g = grads.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
  }
  double ts_mag = 0.0;
  const Tensor<double>& gw2 = grads.at("ts0.w2");
  for (std::size_t i = 0; i < gw2.size(); ++i) ts_mag += std::fabs(gw2[i]);
  CHECK(ts_mag > 0.0);
}

TEST_CASE("zero linear head: weight gradient is softmax residual times features") {
  NetworkConfig cfg;
  cfg.k = 3;
  cfg.in_channels = 1;
  cfg.num_classes = 3;
  cfg.beta = 0.0;
  cfg.lambda = 0.0;
  cfg.conv_blocks = {};
  cfg.ts_placements = {};  // frames merge straight into channels
  auto rng = oracle::make_rng(58);
  Network<double> net(cfg, rng);
  Tensor<double>& fw = net.params().at("fc.weight");
  Tensor<double>& fb = net.params().at("fc.bias");
  for (std::size_t i = 0; i < fw.size(); ++i) fw[i] = 0.0;
  for (std::size_t i = 0; i < fb.size(); ++i) fb[i] = 0.0;

  auto batch = random_batch<double>(rng, cfg, 1, 2, 2);
  net.forward(batch, {1});
  ParamSet<double> grads = net.backward();

  // Zero weights give uniform softmax 1/3; features are the merged means.
  const Tensor<double>& features = net.traces[0].features;
  const Tensor<double>& gw = grads.at("fc.weight");
  for (std::size_t j = 0; j < 3; ++j) {
    const double resid = (j == 1) ? (1.0 / 3.0 - 1.0) : 1.0 / 3.0;
    for (std::size_t c = 0; c < features.size(); ++c) {
      CHECK(gw(j, c) == doctest::Approx(resid * features[c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward requires a cached forward") {
  NetworkConfig cfg = tiny_config();
  auto rng = oracle::make_rng(59);
  Network<double> net(cfg, rng);
  CHECK_THROWS_AS(net.backward(), StateError);
}

TEST_CASE("forward input validation") {
  NetworkConfig cfg = tiny_config();
  auto rng = oracle::make_rng(60);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 1, 6, 6);
  CHECK_THROWS_AS(net.forward(batch, {7}), DataError);
  CHECK_THROWS_AS(net.forward(batch, {0, 1}), ShapeError);
  CHECK_THROWS_AS(net.forward({}, {}), ShapeError);

  std::vector<ClipTensor<double>> short_batch;
  short_batch.emplace_back(
      oracle::random_tensor<double>(rng, {3, 6, 6, 1}, 0.0, 1.0));
  CHECK_THROWS_AS(net.forward(short_batch, {0}), ShapeError);
}

TEST_CASE("backward is deterministic") {
  NetworkConfig cfg = tiny_config();
  auto rng = oracle::make_rng(61);
  Network<double> net(cfg, rng);
  auto batch = random_batch<double>(rng, cfg, 2, 6, 6);
  net.forward(batch, {0, 1});
  ParamSet<double> g1 = net.backward();
  ParamSet<double> g2 = net.backward();
  for (const auto& [name, t] : g1) {
    const Tensor<double>& u = g2.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == u[i]);
  }
}

TEST_CASE("fuse_streams") {
  Tensor<double> a({2, 2}, {1.0, 0.0, 0.2, 0.8});
  Tensor<double> same = fuse_streams(a, a);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same[i] == a[i]);

  Tensor<double> one_hot_a({1, 2}, {1.0, 0.0});
  Tensor<double> one_hot_b({1, 2}, {0.0, 1.0});
  Tensor<double> fused = fuse_streams(one_hot_a, one_hot_b);
  CHECK(fused(0, 0) == 0.5);
  CHECK(fused(0, 1) == 0.5);
  CHECK(argmax(fused.data(), 2) == 0);  // tie goes to the lowest index

  auto rng = oracle::make_rng(62);
  Tensor<double> sa = oracle::random_tensor<double>(rng, {3, 4}, 0.0, 1.0);
  Tensor<double> sb = oracle::random_tensor<double>(rng, {3, 4}, 0.0, 1.0);
  Tensor<double> f = fuse_streams(sa, sb);
  for (std::size_t i = 0; i < f.size(); ++i) {
    CHECK(f[i] == doctest::Approx((sa[i] + sb[i]) / 2.0).epsilon(1e-15));
  }

  Tensor<double> wrong({2, 3});
  CHECK_THROWS_AS(fuse_streams(a, wrong), ShapeError);
}

TEST_CASE("full network gradients match finite differences") {
  auto outer_rng = oracle::make_rng(63);
  int passed = 0;
  for (int trial = 0; trial < 6; ++trial) {
    NetworkConfig cfg;
    cfg.k = 4;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    cfg.beta = (trial % 2 == 0) ? 10.0 : 0.5;
    cfg.lambda = 4e-5;
    cfg.conv_blocks = {{2, 3, 2}};
    cfg.ts_placements = {{0, 2, TsPlacement::Kind::kSqueeze}};

    // Redraw until every activation sits clear of its kink (so central
    // differences stay on one smooth branch) and every analytic gradient
    // entry is resolvable above the FD round-off floor.
    ParamSet<double> params;
    std::vector<ClipTensor<double>> batch;
    std::vector<int> labels = {0, 1};
    bool found = false;
    for (int attempt = 0; attempt < 64 && !found; ++attempt) {
      Network<double> candidate(cfg, outer_rng);
      batch.clear();
      for (int i = 0; i < 2; ++i) {
        batch.emplace_back(oracle::random_tensor<double>(
            outer_rng, {4, 4, 4, 1}, 0.0, 1.0));
      }
      candidate.forward(batch, labels);
      double min_pre = 1e30, min_norm = 1e30;
      for (const auto& trace : candidate.traces) {
        for (const auto& preact : trace.conv_preacts) {
          for (std::size_t i = 0; i < preact.size(); ++i) {
            min_pre = std::min(min_pre, std::fabs(preact[i]));
          }
        }
        for (const auto& cache : trace.ts_caches) {
          for (std::size_t i = 0; i < cache.v.size(); ++i) {
            min_pre = std::min(min_pre, std::fabs(cache.v[i]));
          }
          for (double n : cache.pixel_norms) min_norm = std::min(min_norm, n);
        }
      }
      if (min_pre <= 1e-3 || min_norm <= 1e-3) continue;
      ParamSet<double> probe_grads = candidate.backward();
      double min_grad = 1e300;
      for (const auto& [name, g] : probe_grads) {
        min_grad = std::min(min_grad, oracle::min_abs_entry(g));
      }
      if (min_grad < oracle::kFdResolvableFloor) continue;
      params = candidate.params();
      found = true;
    }
    REQUIRE(found);

    Network<double> net(cfg, ParamSet<double>(params));
    net.forward(batch, labels);
    ParamSet<double> analytic = net.backward();

    auto f = [&](const ParamSet<double>& q) {
      Network<double> probe(cfg, ParamSet<double>(q));
      return probe.forward(batch, labels).loss.total;
    };
    FdReport<double> report = fd_check<double>(f, params, 1e-5, analytic, 1e-5);
    if (!report.pass) {
      for (const auto& row : report.rows) {
        MESSAGE(row.name << " max rel err " << row.max_rel_err);
      }
    }
    CHECK(report.pass);
    if (report.pass) ++passed;
  }
  CHECK(passed == 6);
}
