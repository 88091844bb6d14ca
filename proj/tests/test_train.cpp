#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "tsq/train.hpp"

using namespace tsq;
namespace fs = std::filesystem;

namespace {

ParamSet<double> scalar_params(double value) {
  ParamSet<double> p;
  Tensor<double> t({1});
  t[0] = value;
  p.insert("w", std::move(t));
  return p;
}

std::vector<VideoRecord<double>> toy_dataset() {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.frames_per_video = 8;
  spec.h = 8;
  spec.w = 8;
  spec.c = 1;
  spec.noise_std = 0.02;
  spec.seed = 3;
  return generate<double>(spec, 10);
}

NetworkConfig toy_net() {
  NetworkConfig cfg;
  cfg.k = 4;
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.conv_blocks = {{4, 3, 2}};
  cfg.ts_placements = {{0, 2, TsPlacement::Kind::kSqueeze}};
  return cfg;
}

TrainConfig toy_train() {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.lr = 0.05;
  cfg.epochs = 6;
  cfg.seed = 11;
  cfg.eval_clips_per_video = 3;
  return cfg;
}

}  // namespace

TEST_CASE("sgd_step without momentum is plain gradient descent") {
  auto p = scalar_params(1.0);
  auto v = ParamSet<double>::zeros_like(p);
  auto g = scalar_params(0.5);
  sgd_step(p, g, v, 0.1, 0.0);
  CHECK(p.at("w")[0] == doctest::Approx(0.95));
  CHECK(v.at("w")[0] == 0.5);
}

TEST_CASE("sgd_step leaves parameters fixed under zero gradients") {
  auto p = scalar_params(2.5);
  auto v = ParamSet<double>::zeros_like(p);
  const auto g = ParamSet<double>::zeros_like(p);
  for (int i = 0; i < 5; ++i) sgd_step(p, g, v, 0.3, 0.9);
  CHECK(p.at("w")[0] == 2.5);
  CHECK(v.at("w")[0] == 0.0);
}

TEST_CASE("sgd_step accumulates momentum over two steps") {
  auto p = scalar_params(1.0);
  auto v = ParamSet<double>::zeros_like(p);
  const auto g = scalar_params(1.0);
  sgd_step(p, g, v, 0.1, 0.9);   // v = 1,    p = 1 - 0.1
  sgd_step(p, g, v, 0.1, 0.9);   // v = 1.9,  p -= 0.19
  CHECK(p.at("w")[0] == doctest::Approx(1.0 - 0.1 - 0.19));
}

TEST_CASE("sgd_step rejects misaligned updates") {
  auto p = scalar_params(1.0);
  auto v = ParamSet<double>::zeros_like(p);
  ParamSet<double> wrong_shape;
  wrong_shape.insert("w", Tensor<double>({2}));
  CHECK_THROWS_AS(sgd_step(p, wrong_shape, v, 0.1, 0.0), ShapeError);
  ParamSet<double> wrong_name;
  wrong_name.insert("other", Tensor<double>({1}));
  CHECK_THROWS_AS(sgd_step(p, wrong_name, v, 0.1, 0.0), ConfigError);
}

TEST_CASE("split_indices carves a deterministic 80/20 partition") {
  std::mt19937_64 rng(5);
  const auto [tr, va] = split_indices(250, rng);
  CHECK(tr.size() == 200);
  CHECK(va.size() == 50);
  std::vector<bool> seen(250, false);
  for (const auto i : tr) seen[i] = true;
  for (const auto i : va) {
    CHECK(!seen[i]);  // disjoint
    seen[i] = true;
  }
  CHECK(std::count(seen.begin(), seen.end(), false) == 0);

  std::mt19937_64 again(5);
  const auto [tr2, va2] = split_indices(250, again);
  CHECK(tr == tr2);
  CHECK(va == va2);

  // Too small to spare a holdout: validation reuses the train videos.
  std::mt19937_64 tiny(5);
  const auto [tr3, va3] = split_indices(4, tiny);
  CHECK(tr3.size() == 4);
  CHECK(va3 == tr3);
}

TEST_CASE("train config validates ranges and round-trips through JSON") {
  TrainConfig cfg;
  cfg.validate();

  TrainConfig bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr_decay_factor = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.threads = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  cfg.lr = 0.25;
  cfg.seed = 99;
  cfg.threads = 2;
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());

  CHECK_THROWS_AS(TrainConfig::from_json("{\"lrate\": 0.1}"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json("{nope"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_file("/nonexistent/train.json"),
                  IoError);
}

TEST_CASE("a frozen run keeps the initialization and still evaluates") {
  const auto videos = toy_dataset();
  TrainConfig tc = toy_train();
  tc.lr = 0.0;
  tc.epochs = 1;
  const auto frozen = train(videos, toy_net(), tc, nullptr);
  REQUIRE(frozen.history.size() == 1);
  CHECK(!frozen.diverged);

  // Same seed, fresh network: parameters must be bitwise the init.
  std::mt19937_64 rng(tc.seed);
  auto [tr, va] = split_indices(videos.size(), rng);
  NetworkConfig ncfg = toy_net();
  ncfg.beta = tc.beta;
  ncfg.lambda = tc.lambda;
  Network<double> init(ncfg, rng);
  for (const auto& [name, t] : init.params()) {
    const auto& trained = frozen.params.at(name);
    REQUIRE(trained.size() == t.size());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(trained[i] == t[i]);
  }

  // And the logged accuracy is the initialization's accuracy.
  std::vector<VideoRecord<double>> val;
  for (const auto i : va) val.push_back(videos[i]);
  const auto ev = evaluate(init, val, tc.eval_clips_per_video);
  CHECK(frozen.history[0].val_acc == ev.accuracy);
}

TEST_CASE("training lowers the epoch-mean loss on the synthetic task") {
  const auto result = train(toy_dataset(), toy_net(), toy_train(), nullptr);
  REQUIRE(result.history.size() == 6);
  CHECK(!result.diverged);
  CHECK(result.history[5].total < result.history[0].total);
  for (const auto& st : result.history) {
    REQUIRE(st.proj_terms.size() == 1);
    CHECK(st.proj_terms[0] >= 0.0);
    CHECK(std::isfinite(st.total));
  }
}

TEST_CASE("the projection weight changes the very first update") {
  const auto videos = toy_dataset();
  TrainConfig tc = toy_train();
  tc.epochs = 1;
  tc.batch_size = videos.size();  // one step total
  TrainConfig tc0 = tc;
  tc0.beta = 0.0;
  const auto with_beta = train(videos, toy_net(), tc, nullptr);
  const auto without = train(videos, toy_net(), tc0, nullptr);
  const auto& a = with_beta.params.at("ts0.w2");
  const auto& b = without.params.at("ts0.w2");
  double max_diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  }
  CHECK(max_diff > 0.0);
}

TEST_CASE("identical seeds reproduce the run bitwise") {
  const auto videos = toy_dataset();
  const auto a = train(videos, toy_net(), toy_train(), nullptr);
  const auto b = train(videos, toy_net(), toy_train(), nullptr);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].total == b.history[e].total);
    CHECK(a.history[e].classif == b.history[e].classif);
    CHECK(a.history[e].val_acc == b.history[e].val_acc);
  }
  for (const auto& [name, t] : a.params) {
    const auto& other = b.params.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == other[i]);
  }
}

TEST_CASE("parallel gradient reduction tracks the single-threaded run") {
  const auto videos = toy_dataset();
  TrainConfig tc = toy_train();
  tc.epochs = 3;
  TrainConfig tc2 = tc;
  tc2.threads = 2;
  const auto solo = train(videos, toy_net(), tc, nullptr);
  const auto dual = train(videos, toy_net(), tc2, nullptr);
  REQUIRE(solo.history.size() == dual.history.size());
  for (std::size_t e = 0; e < solo.history.size(); ++e) {
    CHECK(std::abs(solo.history[e].total - dual.history[e].total) < 1e-6);
  }
  for (const auto& [name, t] : solo.params) {
    const auto& other = dual.params.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(std::abs(t[i] - other[i]) < 1e-6);
    }
  }
}

TEST_CASE("a runaway learning rate aborts with the last finite state") {
  const auto videos = toy_dataset();
  TrainConfig tc = toy_train();
  tc.lr = 1e10;
  tc.epochs = 30;
  const auto result = train(videos, toy_net(), tc, nullptr);
  CHECK(result.diverged);
  CHECK(result.history.size() < 30);
  result.params.check_finite();  // last good state stays usable
}

TEST_CASE("mean-pool baselines train with no projection terms") {
  NetworkConfig ncfg = toy_net();
  ncfg.ts_placements = {{0, 1, TsPlacement::Kind::kMean}};
  TrainConfig tc = toy_train();
  tc.epochs = 1;
  const auto result = train(toy_dataset(), ncfg, tc, nullptr);
  REQUIRE(result.history.size() == 1);
  CHECK(result.history[0].proj_terms.empty());
}

TEST_CASE("evaluate averages clip scores exactly and argmaxes them") {
  const auto videos = toy_dataset();
  NetworkConfig ncfg = toy_net();
  std::mt19937_64 rng(21);
  Network<double> net(ncfg, rng);

  std::vector<VideoRecord<double>> subset(videos.begin(),
                                          videos.begin() + 3);
  const std::size_t n_clips = 2;
  const auto ev = evaluate(net, subset, n_clips);
  REQUIRE(ev.predictions.size() == 3);
  REQUIRE(ev.ids.size() == 3);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    std::vector<ClipTensor<double>> clips;
    for (std::size_t j = 0; j < n_clips; ++j) {
      clips.push_back(sample_clip_uniform(subset[i], ncfg.k, j, n_clips));
    }
    const auto probs = net.infer(clips);
    for (std::size_t c = 0; c < ncfg.num_classes; ++c) {
      const double mean = (probs(0, c) + probs(1, c)) / 2.0;
      CHECK(ev.scores(i, c) == mean);
    }
    const auto pred = argmax(&ev.scores(i, std::size_t{0}),
                             ncfg.num_classes);
    CHECK(ev.predictions[i] == static_cast<int>(pred));
    if (ev.predictions[i] == subset[i].label) ++correct;
  }
  CHECK(ev.accuracy == static_cast<double>(correct) / 3.0);

  // One video whose label matches the model's own prediction: accuracy 1.
  std::vector<VideoRecord<double>> one{subset[0]};
  one[0].label = ev.predictions[0];
  CHECK(evaluate(net, one, 1).accuracy == 1.0);

  CHECK_THROWS_AS(evaluate(net, std::vector<VideoRecord<double>>{}, 1),
                  ConfigError);
  CHECK_THROWS_AS(evaluate(net, subset, 0), ConfigError);
}

TEST_CASE("checkpoints round-trip configs, parameters, and stream state") {
  const fs::path dir = fs::temp_directory_path() / "tsq_train_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  TrainConfig tc = toy_train();
  tc.epochs = 1;
  const auto result = train(toy_dataset(), toy_net(), tc, nullptr);

  Checkpoint<double> ck;
  ck.net_config = result.net_config;
  ck.train_config = tc;
  ck.epoch = 1;
  std::ostringstream state;
  state << result.rng;
  ck.rng_state = state.str();
  ck.params = result.params;
  write_checkpoint(path, ck);

  const auto back = read_checkpoint<double>(path);
  CHECK(back.epoch == 1);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.net_config.to_json() == ck.net_config.to_json());
  CHECK(back.train_config.to_json() == tc.to_json());
  CHECK(back.params.count() == ck.params.count());
  for (const auto& [name, t] : ck.params) {
    const auto& other = back.params.at(name);
    REQUIRE(other.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(other[i] == t[i]);
  }

  // The stored stream state rebuilds the exact engine.
  std::mt19937_64 restored;
  std::istringstream in(back.rng_state);
  in >> restored;
  std::mt19937_64 original = result.rng;
  CHECK(restored() == original());

  CHECK_THROWS_AS(read_checkpoint<double>((dir / "missing").string()),
                  IoError);
  std::ofstream(dir / "garbage") << "not a checkpoint at all\n";
  CHECK_THROWS_AS(read_checkpoint<double>((dir / "garbage").string()),
                  ConfigError);
  {
    std::ifstream src(path, std::ios::binary);
    std::ofstream dst(dir / "padded", std::ios::binary);
    dst << src.rdbuf() << "extra";
  }
  CHECK_THROWS_AS(read_checkpoint<double>((dir / "padded").string()),
                  IoError);
  fs::remove_all(dir);
}

TEST_CASE("metrics logs print one exact row per epoch") {
  const fs::path dir = fs::temp_directory_path() / "tsq_train_csv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string path = (dir / "log.csv").string();

  std::vector<EpochStats> history(2);
  history[0].epoch = 0;
  history[0].classif = 0.5;
  history[0].proj_terms = {0.25};
  history[0].l2 = 2.0;
  history[0].total = 3.0;
  history[0].val_acc = 0.75;
  history[0].lr = 0.01;
  history[1] = history[0];
  history[1].epoch = 1;
  history[1].total = 2.5;
  write_metrics_csv(path, history);

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,classif,proj_0,l2,total,val_acc,lr");
  std::getline(in, line);
  CHECK(line == "0,0.5,0.25,2,3,0.75,0.01");
  std::getline(in, line);
  CHECK(line == "1,0.5,0.25,2,2.5,0.75,0.01");
  CHECK(!std::getline(in, line));
  fs::remove_all(dir);
}

TEST_CASE("training rejects an empty dataset") {
  CHECK_THROWS_AS(
      train(std::vector<VideoRecord<double>>{}, toy_net(), toy_train(),
            nullptr),
      ConfigError);
}
