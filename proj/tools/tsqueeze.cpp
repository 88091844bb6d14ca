#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsq/data.hpp"
#include "tsq/network.hpp"
#include "tsq/train.hpp"

namespace fs = std::filesystem;
using namespace tsq;

namespace {

std::string precision_or(const char* fallback) {
  const char* env = std::getenv("TSQ_PRECISION");
  if (env == nullptr || *env == '\0') return fallback;
  const std::string s = env;
  if (s != "f32" && s != "f64") {
    throw ConfigError("TSQ_PRECISION must be f32 or f64, got " + s);
  }
  return s;
}

struct SqueezeArgs {
  std::string frames;
  std::string weights;
  std::string out;
  std::size_t k = 8;
  std::size_t d = 2;
  int optimize_steps = 0;
  double lr = 0.02;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string data;
  std::string net_config;
  std::string train_config;
  std::string out;
  // Flag-level overrides; negative / empty means "not given".
  double lr = -1.0;
  long epochs = -1;
  long batch_size = -1;
  long threads = -1;
  long eval_clips = -1;
  double beta = -1.0;
  double lambda = -1.0;
  bool seed_given = false;
  std::uint64_t seed = 0;
};

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string scores_out;
  std::string fuse_scores;
  long clips = -1;
};

struct GradcheckArgs {
  std::size_t k = 4;
  std::size_t d = 2;
  std::size_t h = 3;
  std::size_t w = 3;
  std::size_t c = 1;
  std::size_t trials = 5;
  std::uint64_t seed = 0;
};

struct GenArgs {
  std::string out;
  std::size_t per_class = 25;
  SyntheticSpec spec;
};

template <class T>
ClipTensor<T> first_k_frames(const ClipTensor<T>& clip, std::size_t k) {
  Tensor<T> head({k, clip.h(), clip.w(), clip.c()});
  std::copy(clip.frames.data(), clip.frames.data() + k * clip.pixels(),
            head.data());
  return ClipTensor<T>(std::move(head));
}

template <class T>
double mean_pixel_norm(const ClipTensor<T>& clip) {
  const std::size_t k = clip.k(), p = clip.pixels();
  double sum = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    double sq = 0.0;
    for (std::size_t f = 0; f < k; ++f) {
      const double v = static_cast<double>(clip.frames[f * p + i]);
      sq += v * v;
    }
    sum += std::sqrt(sq);
  }
  return sum / static_cast<double>(p);
}

template <class T>
void load_squeeze_weights(const std::string& path, TSLayerParams<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  const auto* data = reinterpret_cast<const std::uint8_t*>(bytes.data());
  std::size_t offset = 0;
  Tensor<T> w1 = parse_tsq1<T>(data, bytes.size(), offset);
  Tensor<T> w2 = parse_tsq1<T>(data, bytes.size(), offset);
  if (offset != bytes.size()) {
    throw IoError("trailing bytes in weights file: " + path);
  }
  if (w1.rank() != 2 || w1.dim(0) != params.k || w1.dim(1) != params.k ||
      w2.rank() != 2 || w2.dim(0) != params.k * params.d ||
      w2.dim(1) != params.k) {
    throw ConfigError("weights in " + path + " do not match --k " +
                      std::to_string(params.k) + " --d " +
                      std::to_string(params.d));
  }
  params.w1 = std::move(w1);
  params.w2 = std::move(w2);
}

template <class T>
void save_squeeze_weights(const std::string& path,
                          const TSLayerParams<T>& params) {
  std::vector<std::uint8_t> blob;
  append_tsq1(blob, params.w1);
  append_tsq1(blob, params.w2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file: " + path);
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write on weights file: " + path);
}

template <class T>
int run_squeeze(const SqueezeArgs& args, const std::string& precision) {
  std::cout << "squeeze: frames=" << args.frames << " k=" << args.k
            << " d=" << args.d << " weights="
            << (args.weights.empty() ? "<fresh init>" : args.weights)
            << " optimize_steps=" << args.optimize_steps << " lr=" << args.lr
            << " seed=" << args.seed << " out=" << args.out
            << " precision=" << precision << "\n";

  if (args.d < 1 || args.d > args.k) {
    throw ConfigError("require 1 <= D <= K, got D=" + std::to_string(args.d) +
                      " K=" + std::to_string(args.k));
  }
  const ClipTensor<T> all = load_frames<T>(args.frames);
  if (all.k() < args.k) {
    throw ConfigError("need at least " + std::to_string(args.k) +
                      " frames, found " + std::to_string(all.k()) + " in " +
                      args.frames);
  }
  const ClipTensor<T> clip = first_k_frames(all, args.k);

  std::mt19937_64 rng(args.seed);
  TSLayerParams<T> params = ts_init_params<T>(args.k, args.d, rng);
  if (!args.weights.empty()) load_squeeze_weights(args.weights, params);

  std::vector<T> history;
  if (args.optimize_steps > 0) {
    history = optimize_projection(clip, params, args.optimize_steps,
                                  static_cast<T>(args.lr));
  }

  const SqueezedClip<T> squeezed = ts_forward(clip, params);
  fs::create_directories(args.out);
  save_squeezed(squeezed, args.out);
  save_squeeze_weights((fs::path(args.out) / "weights.tsq").string(), params);

  const double norm = mean_pixel_norm(clip);
  const double residual = static_cast<double>(squeezed.residual);
  nlohmann::json report;
  report["k"] = args.k;
  report["d"] = args.d;
  report["frames"] = args.frames;
  report["optimize_steps"] = args.optimize_steps;
  report["residual"] = residual;
  report["mean_pixel_norm"] = norm;
  report["residual_over_norm"] = norm > 0.0 ? residual / norm : 0.0;
  if (!history.empty()) {
    report["residual_initial"] = static_cast<double>(history.front());
    nlohmann::json steps = nlohmann::json::array();
    for (const T r : history) steps.push_back(static_cast<double>(r));
    report["residual_history"] = std::move(steps);
  }
  std::ofstream rep(fs::path(args.out) / "report.json");
  if (!rep) throw IoError("cannot write report.json in " + args.out);
  rep << report.dump(2) << "\n";

  std::cout << "wrote " << args.d << " squeezed frames to " << args.out
            << "\n";
  char line[128];
  std::snprintf(line, sizeof(line),
                "residual %.6g (%.4f%% of mean pixel norm %.6g)\n", residual,
                norm > 0.0 ? 100.0 * residual / norm : 0.0, norm);
  std::cout << line;
  return 0;
}

template <class T>
int run_train(const TrainArgs& args, const std::string& precision) {
  NetworkConfig ncfg = NetworkConfig::from_file(args.net_config);
  TrainConfig tcfg;
  if (!args.train_config.empty()) {
    tcfg = TrainConfig::from_file(args.train_config);
  }
  if (args.lr >= 0.0) tcfg.lr = args.lr;
  if (args.epochs > 0) tcfg.epochs = static_cast<std::size_t>(args.epochs);
  if (args.batch_size > 0) {
    tcfg.batch_size = static_cast<std::size_t>(args.batch_size);
  }
  if (args.threads > 0) tcfg.threads = static_cast<std::size_t>(args.threads);
  if (args.eval_clips > 0) {
    tcfg.eval_clips_per_video = static_cast<std::size_t>(args.eval_clips);
  }
  if (args.beta >= 0.0) tcfg.beta = args.beta;
  if (args.lambda >= 0.0) tcfg.lambda = args.lambda;
  if (args.seed_given) tcfg.seed = args.seed;
  tcfg.validate();
  ncfg.beta = tcfg.beta;
  ncfg.lambda = tcfg.lambda;
  ncfg.validate();

  std::cout << "train: data=" << args.data << " out=" << args.out
            << " precision=" << precision << "\n";
  std::cout << "resolved network config:\n" << ncfg.to_json() << "\n";
  std::cout << "resolved train config:\n" << tcfg.to_json() << "\n";

  const auto videos = load_manifest_videos<T>(args.data);
  std::cout << "loaded " << videos.size() << " videos\n";

  const auto result = train(videos, ncfg, tcfg, &std::cout);

  fs::create_directories(args.out);
  write_metrics_csv((fs::path(args.out) / "metrics.csv").string(),
                    result.history);
  Checkpoint<T> ck;
  ck.net_config = result.net_config;
  ck.train_config = tcfg;
  ck.epoch = result.history.size();
  std::ostringstream state;
  state << result.rng;
  ck.rng_state = state.str();
  ck.params = result.params;
  const std::string ckpt = (fs::path(args.out) / "checkpoint.ckpt").string();
  write_checkpoint(ckpt, ck);
  std::cout << "wrote " << ckpt << " and metrics.csv\n";

  if (result.diverged) {
    throw NumericalError(
        "training diverged; kept the last finite state in " + ckpt);
  }
  if (!result.history.empty()) {
    char line[64];
    std::snprintf(line, sizeof(line), "final val_acc %.4f\n",
                  result.history.back().val_acc);
    std::cout << line;
  }
  return 0;
}

void write_scores_csv(const std::string& path,
                      const std::vector<std::string>& ids,
                      const std::vector<int>& labels,
                      const Tensor<double>& scores) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scores file: " + path);
  const std::size_t nc = scores.dim(1);
  out << "id,label";
  for (std::size_t c = 0; c < nc; ++c) out << ",score_" << c;
  out << "\n";
  char cell[64];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << "," << labels[i];
    for (std::size_t c = 0; c < nc; ++c) {
      std::snprintf(cell, sizeof(cell), ",%.17g", scores(i, c));
      out << cell;
    }
    out << "\n";
  }
  if (!out) throw IoError("short write on scores file: " + path);
}

void read_scores_csv(const std::string& path, std::vector<std::string>& ids,
                     Tensor<double>& scores) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty scores file: " + path);
  std::size_t nc = 0;
  for (std::size_t pos = 0; (pos = line.find(",score_", pos)) !=
                            std::string::npos;
       ++pos) {
    ++nc;
  }
  if (nc == 0) throw DataError("no score columns in " + path);

  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    if (!std::getline(cells, cell, ',')) break;
    ids.push_back(cell);
    std::getline(cells, cell, ',');  // label column, unused on fuse
    std::vector<double> row;
    while (std::getline(cells, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != nc) {
      throw DataError("ragged score row for " + ids.back() + " in " + path);
    }
    rows.push_back(std::move(row));
  }
  scores = Tensor<double>({rows.size(), nc});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < nc; ++c) scores(i, c) = rows[i][c];
  }
}

template <class T>
int run_eval(const EvalArgs& args, const std::string& precision) {
  if (!fs::exists(args.checkpoint)) {
    throw ConfigError("missing checkpoint: " + args.checkpoint);
  }
  const auto ck = read_checkpoint<T>(args.checkpoint);
  const std::size_t clips =
      args.clips > 0 ? static_cast<std::size_t>(args.clips)
                     : ck.train_config.eval_clips_per_video;
  std::cout << "eval: data=" << args.data << " checkpoint=" << args.checkpoint
            << " clips_per_video=" << clips << " precision=" << precision
            << "\n";

  const auto videos = load_manifest_videos<T>(args.data);
  for (const auto& v : videos) {
    if (v.label < 0 ||
        static_cast<std::size_t>(v.label) >= ck.net_config.num_classes) {
      throw ConfigError("video " + v.id + " has label " +
                        std::to_string(v.label) +
                        " outside the checkpoint's " +
                        std::to_string(ck.net_config.num_classes) +
                        " classes");
    }
  }

  Network<T> net(ck.net_config, ck.params);
  const auto ev = evaluate(net, videos, clips);

  Tensor<double> scores({videos.size(), ck.net_config.num_classes});
  for (std::size_t i = 0; i < videos.size(); ++i) {
    for (std::size_t c = 0; c < ck.net_config.num_classes; ++c) {
      scores(i, c) = static_cast<double>(ev.scores(i, c));
    }
  }
  std::vector<int> predictions = ev.predictions;
  double accuracy = ev.accuracy;

  if (!args.fuse_scores.empty()) {
    std::vector<std::string> other_ids;
    Tensor<double> other;
    read_scores_csv(args.fuse_scores, other_ids, other);
    if (other_ids != ev.ids) {
      throw DataError("video ids in " + args.fuse_scores +
                      " do not match the evaluated dataset");
    }
    scores = fuse_streams(scores, other);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      predictions[i] = static_cast<int>(
          argmax(&scores(i, std::size_t{0}), ck.net_config.num_classes));
      if (predictions[i] == ev.labels[i]) ++correct;
    }
    accuracy = static_cast<double>(correct) /
               static_cast<double>(videos.size());
    std::cout << "fused with " << args.fuse_scores << "\n";
  }

  if (!args.scores_out.empty()) {
    write_scores_csv(args.scores_out, ev.ids, ev.labels, scores);
    std::cout << "wrote scores to " << args.scores_out << "\n";
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == ev.labels[i]) ++correct;
  }
  char line[64];
  std::snprintf(line, sizeof(line), "accuracy %.4f (%zu/%zu)\n", accuracy,
                correct, predictions.size());
  std::cout << line;
  return 0;
}

// Mirrors the gradient tests' instance hygiene: LeakyReLU kinks and
// residual-norm floors make one-sided differences, and entries whose
// analytic gradient sits below the FD round-off floor cannot be resolved at
// h=1e-5; both kinds of instance are redrawn.
template <class T>
int run_gradcheck(const GradcheckArgs& args, const std::string& precision) {
  const bool wide = precision == "f64";
  const T h = wide ? T(1e-5) : T(1e-2);
  const T tol = wide ? T(1e-5) : T(1e-2);
  std::cout << "gradcheck: k=" << args.k << " d=" << args.d
            << " clip=" << args.h << "x" << args.w << "x" << args.c
            << " trials=" << args.trials << " seed=" << args.seed
            << " precision=" << precision << " h=" << h << " tol=" << tol
            << "\n";
  if (args.d < 1 || args.d > args.k) {
    throw ConfigError("require 1 <= D <= K");
  }

  std::mt19937_64 rng(args.seed);
  std::uniform_real_distribution<double> weight(-0.6, 0.6);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  std::uniform_real_distribution<double> cot(-1.0, 1.0);
  const double kink_floor = 1e-3;
  const double resolvable_floor = 2e-5;

  T worst = T(0);
  bool all_pass = true;
  std::size_t accepted = 0;
  for (std::size_t attempt = 0; attempt < args.trials * 64; ++attempt) {
    if (accepted == args.trials) break;

    TSLayerParams<T> params;
    params.k = args.k;
    params.d = args.d;
    params.w1 = Tensor<T>({args.k, args.k});
    params.w2 = Tensor<T>({args.k * args.d, args.k});
    for (std::size_t i = 0; i < params.w1.size(); ++i) {
      params.w1[i] = static_cast<T>(weight(rng));
    }
    for (std::size_t i = 0; i < params.w2.size(); ++i) {
      params.w2[i] = static_cast<T>(weight(rng));
    }
    Tensor<T> frames({args.k, args.h, args.w, args.c});
    for (std::size_t i = 0; i < frames.size(); ++i) {
      frames[i] = static_cast<T>(pixel(rng));
    }
    const ClipTensor<T> clip(std::move(frames));
    Tensor<T> cotangent({args.d, args.h, args.w, args.c});
    for (std::size_t i = 0; i < cotangent.size(); ++i) {
      cotangent[i] = static_cast<T>(cot(rng));
    }

    TsForwardCache<T> cache;
    ts_forward(clip, params, &cache);
    bool clear = true;
    for (std::size_t i = 0; i < cache.v.size(); ++i) {
      if (std::abs(static_cast<double>(cache.v[i])) <= kink_floor) {
        clear = false;
      }
    }
    for (const T n : cache.pixel_norms) {
      if (static_cast<double>(n) <= kink_floor) clear = false;
    }
    if (!clear) continue;

    const TsGrads<T> grads = ts_backward(cache, params, cotangent, T(1));
    ParamSet<T> analytic;
    analytic.insert("clip", grads.clip);
    analytic.insert("w1", grads.w1);
    analytic.insert("w2", grads.w2);
    bool resolvable = true;
    for (const auto& [name, g] : analytic) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (std::abs(static_cast<double>(g[i])) < resolvable_floor) {
          resolvable = false;
        }
      }
    }
    if (wide && !resolvable) continue;
    ++accepted;

    ParamSet<T> point;
    point.insert("clip", clip.frames);
    point.insert("w1", params.w1);
    point.insert("w2", params.w2);
    const auto objective = [&](const ParamSet<T>& p) {
      TSLayerParams<T> probe = params;
      probe.w1 = p.at("w1");
      probe.w2 = p.at("w2");
      const ClipTensor<T> c2(p.at("clip"));
      const SqueezedClip<T> out = ts_forward(c2, probe);
      T acc = out.residual;
      for (std::size_t i = 0; i < cotangent.size(); ++i) {
        acc += cotangent[i] * out.y[i];
      }
      return acc;
    };
    const FdReport<T> report = fd_check<T>(objective, point, h, analytic, tol);
    std::cout << "trial " << accepted << ":\n";
    for (const auto& row : report.rows) {
      char line[96];
      std::snprintf(line, sizeof(line), "  %-5s max_rel_err %.3e %s\n",
                    row.name.c_str(), static_cast<double>(row.max_rel_err),
                    row.pass ? "PASS" : "FAIL");
      std::cout << line;
    }
    worst = std::max(worst, report.max_rel_err);
    all_pass = all_pass && report.pass;
  }

  if (accepted < args.trials) {
    throw NumericalError(
        "could not draw enough kink-free, resolvable instances");
  }
  char line[96];
  std::snprintf(line, sizeof(line), "gradcheck %s (worst rel err %.3e)\n",
                all_pass ? "PASS" : "FAIL", static_cast<double>(worst));
  std::cout << line;
  return all_pass ? 0 : 1;
}

int run_gen(const GenArgs& args) {
  args.spec.validate();
  std::cout << "gen-data: out=" << args.out
            << " classes=" << args.spec.num_classes
            << " videos_per_class=" << args.per_class
            << " frames=" << args.spec.frames_per_video << " size="
            << args.spec.h << "x" << args.spec.w << "x" << args.spec.c
            << " noise=" << args.spec.noise_std << " seed=" << args.spec.seed
            << "\n";

  // Generated at 64-bit before 8-bit quantization so the written frames do
  // not depend on TSQ_PRECISION.
  const auto videos = generate<double>(args.spec, args.per_class);
  fs::create_directories(args.out);
  std::vector<ManifestEntry> entries;
  for (const auto& v : videos) {
    save_video_frames(v.frames.frames, (fs::path(args.out) / v.id).string());
    entries.push_back({v.id, v.id, v.label});
  }
  write_manifest((fs::path(args.out) / "manifest.json").string(), entries);
  std::cout << "wrote " << videos.size() << " videos and manifest.json to "
            << args.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporal squeeze pooling: least-squares frame compression, "
               "toy classifier training, and synthetic data"};
  app.require_subcommand(1);

  SqueezeArgs sq;
  auto* squeeze = app.add_subcommand(
      "squeeze", "compress the first K frames of a clip into D images");
  squeeze->add_option("--frames", sq.frames,
                      "frame directory (PNG/PGM) or TSQ1 clip file")
      ->required();
  squeeze->add_option("--k", sq.k, "frames per clip")->capture_default_str();
  squeeze->add_option("--d", sq.d, "squeezed images to produce")
      ->capture_default_str();
  squeeze->add_option("--weights", sq.weights,
                      "TSQ1 weight pair written by an earlier run");
  squeeze->add_option("--optimize-steps", sq.optimize_steps,
                      "projection-residual descent steps before squeezing")
      ->capture_default_str();
  squeeze->add_option("--lr", sq.lr, "learning rate for --optimize-steps")
      ->capture_default_str();
  squeeze->add_option("--seed", sq.seed, "weight initialization seed")
      ->capture_default_str();
  squeeze->add_option("--out", sq.out, "output directory")->required();

  TrainArgs tr;
  auto* train_cmd =
      app.add_subcommand("train", "train the toy classifier on a manifest");
  train_cmd->add_option("--data", tr.data, "dataset manifest JSON")
      ->required();
  train_cmd->add_option("--net-config", tr.net_config,
                        "network architecture JSON")
      ->required();
  train_cmd->add_option("--train-config", tr.train_config,
                        "training hyperparameter JSON (defaults when absent)");
  train_cmd->add_option("--out", tr.out,
                        "directory for checkpoint.ckpt and metrics.csv")
      ->required();
  train_cmd->add_option("--lr", tr.lr, "override learning rate");
  train_cmd->add_option("--epochs", tr.epochs, "override epoch count");
  train_cmd->add_option("--batch-size", tr.batch_size,
                        "override batch size");
  train_cmd->add_option("--threads", tr.threads,
                        "override gradient worker count");
  train_cmd->add_option("--eval-clips", tr.eval_clips,
                        "override validation clips per video");
  train_cmd->add_option("--beta", tr.beta,
                        "override projection loss weight");
  train_cmd->add_option("--lambda", tr.lambda, "override weight decay");
  auto* seed_opt =
      train_cmd->add_option("--seed", tr.seed, "override training seed");

  EvalArgs ev;
  auto* eval_cmd =
      app.add_subcommand("eval", "score a manifest with a checkpoint");
  eval_cmd->add_option("--data", ev.data, "dataset manifest JSON")
      ->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")
      ->required();
  eval_cmd->add_option("--clips", ev.clips,
                       "uniform clips per video (default: checkpoint's)");
  eval_cmd->add_option("--scores-out", ev.scores_out,
                       "write per-video scores CSV here");
  eval_cmd->add_option("--fuse-scores", ev.fuse_scores,
                       "average with a previously written scores CSV");

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "compare squeeze-layer gradients to finite differences");
  gradcheck->add_option("--k", gc.k, "frames per clip")
      ->capture_default_str();
  gradcheck->add_option("--d", gc.d, "squeezed images")
      ->capture_default_str();
  gradcheck->add_option("--height", gc.h, "clip height")
      ->capture_default_str();
  gradcheck->add_option("--width", gc.w, "clip width")
      ->capture_default_str();
  gradcheck->add_option("--channels", gc.c, "clip channels")
      ->capture_default_str();
  gradcheck->add_option("--trials", gc.trials, "instances to check")
      ->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "instance seed")
      ->capture_default_str();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-data", "write the synthetic moving-square benchmark");
  gen_cmd->add_option("--out", gen.out, "dataset directory")->required();
  gen_cmd->add_option("--classes", gen.spec.num_classes,
                      "class count (1..4)")
      ->capture_default_str();
  gen_cmd->add_option("--videos-per-class", gen.per_class, "videos per class")
      ->capture_default_str();
  gen_cmd->add_option("--frames", gen.spec.frames_per_video,
                      "frames per video")
      ->capture_default_str();
  gen_cmd->add_option("--height", gen.spec.h, "frame height")
      ->capture_default_str();
  gen_cmd->add_option("--width", gen.spec.w, "frame width")
      ->capture_default_str();
  gen_cmd->add_option("--channels", gen.spec.c, "frame channels")
      ->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise_std,
                      "Gaussian pixel noise sigma")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "generator seed")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    tr.seed_given = seed_opt->count() > 0;
    if (squeeze->parsed()) {
      const std::string precision = precision_or("f32");
      return precision == "f64" ? run_squeeze<double>(sq, precision)
                                : run_squeeze<float>(sq, precision);
    }
    if (train_cmd->parsed()) {
      const std::string precision = precision_or("f32");
      return precision == "f64" ? run_train<double>(tr, precision)
                                : run_train<float>(tr, precision);
    }
    if (eval_cmd->parsed()) {
      const std::string precision = precision_or("f32");
      return precision == "f64" ? run_eval<double>(ev, precision)
                                : run_eval<float>(ev, precision);
    }
    if (gradcheck->parsed()) {
      const std::string precision = precision_or("f64");
      return precision == "f64" ? run_gradcheck<double>(gc, precision)
                                : run_gradcheck<float>(gc, precision);
    }
    if (gen_cmd->parsed()) return run_gen(gen);
  } catch (const Error& e) {
    std::cerr << "error category=" << e.category() << ": " << e.what()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error category=internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
