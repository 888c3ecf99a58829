// tauseg: synthetic-data segmentation trainer and toolkit.
//
// Subcommands: synth, train, eval, predict, gradcheck, export-activations.
// A flat JSON file (--config) can set any model / optimizer / loss /
// synthetic-data / split field; command-line flags override it.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tau/gradsuite.hpp"
#include "tau/io.hpp"
#include "tau/loss.hpp"
#include "tau/model.hpp"
#include "tau/rng.hpp"
#include "tau/train.hpp"

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything a run can configure, with desk-scale defaults.
struct CliConfig {
  tau::ModelConfig model;
  tau::OptimConfig optim;
  tau::LossConfig loss;
  tau::SynthConfig synth;
  tau::SplitFractions split;
  int64_t n = 16;       // synthetic dataset size
  uint64_t seed = 0;    // master seed: model init, data, shuffles
};

CliConfig default_config() {
  CliConfig c;
  c.optim.epochs = 60;  // desk-scale default; longer schedules are a config edit away
  return c;
}

void apply_config_key(CliConfig& c, const std::string& key, const nlohmann::json& v) {
  auto& m = c.model;
  auto& o = c.optim;
  auto& l = c.loss;
  auto& s = c.synth;
  try {
    if (key == "in_channels") m.in_channels = v.get<int64_t>();
    else if (key == "base_channels") m.base_channels = v.get<int64_t>();
    else if (key == "depth") m.depth = v.get<int64_t>();
    else if (key == "heads") m.heads = v.get<int>();
    else if (key == "msc_mode") m.msc_mode = tau::msc_mode_from_string(v.get<std::string>());
    else if (key == "use_tsa") m.use_tsa = v.get<bool>();
    else if (key == "use_gsa") m.use_gsa = v.get<bool>();
    else if (key == "use_norm") m.use_norm = v.get<bool>();
    else if (key == "tsa_out_proj") m.tsa_out_proj = v.get<bool>();
    else if (key == "tsa_share_qkv") m.tsa_share_qkv = v.get<bool>();
    else if (key == "lr0") o.lr0 = v.get<double>();
    else if (key == "momentum") o.momentum = v.get<double>();
    else if (key == "weight_decay") o.weight_decay = v.get<double>();
    else if (key == "decay_factor") o.decay_factor = v.get<double>();
    else if (key == "decay_every_epochs") o.decay_every_epochs = v.get<int64_t>();
    else if (key == "epochs") o.epochs = v.get<int64_t>();
    else if (key == "batch_size") o.batch_size = v.get<int64_t>();
    else if (key == "alpha") l.alpha = v.get<double>();
    else if (key == "beta") l.beta = v.get<double>();
    else if (key == "epsilon") l.epsilon = v.get<double>();
    else if (key == "clamp_eps") l.clamp_eps = v.get<double>();
    else if (key == "dice_numerator_factor") l.dice_numerator_factor = v.get<double>();
    else if (key == "h") s.h = v.get<int64_t>();
    else if (key == "w") s.w = v.get<int64_t>();
    else if (key == "min_shapes") s.min_shapes = v.get<int>();
    else if (key == "max_shapes") s.max_shapes = v.get<int>();
    else if (key == "ellipses") s.ellipses = v.get<bool>();
    else if (key == "rectangles") s.rectangles = v.get<bool>();
    else if (key == "contrast_lo") s.contrast_lo = v.get<double>();
    else if (key == "contrast_hi") s.contrast_hi = v.get<double>();
    else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
    else if (key == "train_frac") c.split.train = v.get<double>();
    else if (key == "val_frac") c.split.val = v.get<double>();
    else if (key == "test_frac") c.split.test = v.get<double>();
    else if (key == "n") c.n = v.get<int64_t>();
    else if (key == "seed") c.seed = v.get<uint64_t>();
    else throw UsageError("unknown config key '" + key + "'");
  } catch (const nlohmann::json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type");
  }
}

CliConfig load_config(const std::string& path, bool seed_given, uint64_t seed_flag) {
  CliConfig c = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config file " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file must hold a flat JSON object");
    for (const auto& [key, value] : j.items()) apply_config_key(c, key, value);
  }
  if (seed_given) c.seed = seed_flag;
  // One master seed; the consumers draw from independent mixed streams.
  c.model.seed = c.seed;
  c.synth.seed = c.seed;
  return c;
}

std::vector<tau::SegSample> fit_to_model(const std::vector<tau::SegSample>& in, int64_t h,
                                         int64_t w, int64_t divisor) {
  std::vector<tau::SegSample> out;
  out.reserve(in.size());
  for (const auto& s : in) out.push_back(tau::resize_pair(s, h, w, divisor, true));
  return out;
}

tau::Dataset load_or_generate(const CliConfig& cfg, const std::string& data_root) {
  if (!data_root.empty()) return tau::load_dataset(data_root);
  return tau::split(tau::synth_generate(cfg.synth, cfg.n), cfg.split, cfg.seed);
}

const std::vector<tau::SegSample>& pick_split(const tau::Dataset& ds, const std::string& which) {
  if (which == "train") return ds.train;
  if (which == "val") return ds.val;
  if (which == "test") return ds.test;
  throw UsageError("unknown split '" + which + "' (want train, val or test)");
}

int cmd_synth(const CliConfig& cfg, const std::string& out_dir) {
  const auto samples = tau::synth_generate(cfg.synth, cfg.n);
  const tau::Dataset ds = tau::split(samples, cfg.split, cfg.seed);
  tau::save_dataset(out_dir, ds);
  std::cout << "wrote " << samples.size() << " samples (" << ds.train.size() << " train, "
            << ds.val.size() << " val, " << ds.test.size() << " test) to " << out_dir << '\n';
  return 0;
}

int cmd_train(const CliConfig& cfg, const std::string& data_root, const std::string& out_dir,
              const std::string& resume) {
  const int64_t divisor = int64_t(1) << cfg.model.depth;
  tau::Dataset ds = load_or_generate(cfg, data_root);
  ds.train = fit_to_model(ds.train, cfg.synth.h, cfg.synth.w, divisor);
  ds.val = fit_to_model(ds.val, cfg.synth.h, cfg.synth.w, divisor);
  ds.test = fit_to_model(ds.test, cfg.synth.h, cfg.synth.w, divisor);

  tau::TrainRun run;
  run.model = cfg.model;
  run.optim = cfg.optim;
  run.loss = cfg.loss;
  run.in_h = cfg.synth.h;
  run.in_w = cfg.synth.w;
  run.seed = cfg.seed;
  run.out_dir = out_dir;
  run.resume = resume;
  run.quiet = false;

  const tau::TrainResult res = tau::train_loop(run, ds.train, ds.val);

  // Score the best checkpoint on the most held-out split available.
  const std::vector<tau::SegSample>& score_on =
      !ds.test.empty() ? ds.test : (!ds.val.empty() ? ds.val : ds.train);
  auto best = tau::model_from_checkpoint(tau::load_checkpoint(res.best_path));
  const auto rows =
      tau::evaluate(best, score_on, out_dir + "/metrics.csv", out_dir + "/metrics.json");
  const tau::MetricsReport agg = tau::aggregate_metrics(rows);
  std::cout << "trained " << res.log.size() << " epochs (" << res.steps_per_epoch
            << " steps each); best val dice " << res.best_val_dice << "; scored dice "
            << agg.dice << " on " << rows.size() << " held-out samples\n"
            << "log: " << res.log_path << "  best: " << res.best_path << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_root, const std::string& which,
             const std::string& out_dir) {
  const tau::Checkpoint ck = tau::load_checkpoint(ckpt);
  auto p = tau::model_from_checkpoint(ck);
  const tau::Dataset ds = tau::load_dataset(data_root);
  const auto samples = fit_to_model(pick_split(ds, which), ck.in_h, ck.in_w,
                                    int64_t(1) << ck.model.depth);
  if (samples.empty()) throw std::runtime_error("eval: split '" + which + "' is empty");
  std::filesystem::create_directories(out_dir);
  const auto rows = tau::evaluate(p, samples, out_dir + "/metrics.csv", out_dir + "/metrics.json");
  const tau::MetricsReport agg = tau::aggregate_metrics(rows);
  std::cout << "evaluated " << rows.size() << " samples: dice " << agg.dice << " iou " << agg.iou
            << " acc " << agg.acc << " rec " << agg.rec << " pre " << agg.pre << '\n'
            << "wrote " << out_dir << "/metrics.csv and metrics.json\n";
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& data_root, const std::string& which,
                const std::string& out_dir) {
  const tau::Checkpoint ck = tau::load_checkpoint(ckpt);
  auto p = tau::model_from_checkpoint(ck);
  const tau::Dataset ds = tau::load_dataset(data_root);
  const auto samples = fit_to_model(pick_split(ds, which), ck.in_h, ck.in_w,
                                    int64_t(1) << ck.model.depth);
  if (samples.empty()) throw std::runtime_error("predict: split '" + which + "' is empty");
  tau::predict_to_dir(p, samples, out_dir);
  std::cout << "wrote " << samples.size() << " probability/mask pairs to " << out_dir << '\n';
  return 0;
}

int cmd_gradcheck() {
  const auto cases = tau::run_gradient_suite();
  return tau::report_gradient_suite(cases, std::cout) ? 0 : 2;
}

int cmd_export_activations(const CliConfig& cfg, const std::string& ckpt,
                           const std::string& out_dir) {
  tau::UNetParams<float> p;
  tau::NormMode mode;
  int64_t h, w;
  if (!ckpt.empty()) {
    const tau::Checkpoint ck = tau::load_checkpoint(ckpt);
    p = tau::model_from_checkpoint(ck);
    h = ck.in_h;
    w = ck.in_w;
    mode = tau::NormMode::eval;  // running statistics from training
  } else {
    p = tau::build_unet<float>(cfg.model, cfg.synth.h, cfg.synth.w);
    h = cfg.synth.h;
    w = cfg.synth.w;
    mode = tau::NormMode::train;  // fresh model has no running statistics yet
  }
  auto sample = tau::synth_generate(cfg.synth, 1)[0];
  sample = tau::resize_pair(sample, h, w, 0, true);
  std::vector<float> x = sample.image.data();
  tau::export_activations(tau::Tensor<float>::from_data({1, 1, h, w}, x), p, mode, out_dir);
  tau::write_pgm(out_dir + "/input.pgm", tau::unit_to_image(sample.image));
  std::cout << "wrote per-stage activation maps to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tauseg: attention U-Net segmentation on synthetic shape data"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir = "run", data_root, ckpt_path, resume_path, device = "cpu";
  std::string split_name = "test";
  uint64_t seed_flag = 0;
  int64_t n_flag = -1, size_flag = -1;

  app.add_option("--config", config_path, "flat JSON config file");
  auto* seed_opt = app.add_option("--seed", seed_flag, "master seed (overrides config)");
  app.add_option("--device", device, "compute device (only 'cpu' exists)");
  app.add_option("--out", out_dir, "output directory");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset on disk");
  synth->add_option("--n", n_flag, "number of samples");
  synth->add_option("--size", size_flag, "square image extent");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", data_root, "dataset root (default: in-memory synthetic data)");
  train->add_option("--resume", resume_path, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_root, "dataset root")->required();
  eval->add_option("--split", split_name, "train|val|test");

  auto* predict = app.add_subcommand("predict", "write probability and mask PGMs");
  predict->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  predict->add_option("--data", data_root, "dataset root")->required();
  predict->add_option("--split", split_name, "train|val|test");

  app.add_subcommand("gradcheck", "run the finite-difference gradient suite");

  auto* exporter = app.add_subcommand("export-activations", "dump decoder stage heatmaps");
  exporter->add_option("--ckpt", ckpt_path, "checkpoint path (default: fresh initialization)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version exit 0; any parse problem is usage
  }

  try {
    if (device != "cpu") throw UsageError("unknown device '" + device + "' (only cpu exists)");
    CliConfig cfg = load_config(config_path, seed_opt->count() > 0, seed_flag);
    if (n_flag >= 0) cfg.n = n_flag;
    if (size_flag >= 0) cfg.synth.h = cfg.synth.w = size_flag;

    if (synth->parsed()) return cmd_synth(cfg, out_dir);
    if (train->parsed()) return cmd_train(cfg, data_root, out_dir, resume_path);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_root, split_name, out_dir);
    if (predict->parsed()) return cmd_predict(ckpt_path, data_root, split_name, out_dir);
    if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
    if (exporter->parsed()) return cmd_export_activations(cfg, ckpt_path, out_dir);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
