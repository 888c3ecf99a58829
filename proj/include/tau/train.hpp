#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tau/io.hpp"
#include "tau/loss.hpp"
#include "tau/model.hpp"

namespace tau {

// ---- optimizer ------------------------------------------------------------------

struct OptimConfig {
  double lr0 = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double decay_factor = 10.0;
  int64_t decay_every_epochs = 40;
  int64_t epochs = 100;
  int64_t batch_size = 4;
};

// lr0 / decay_factor^floor(epoch / decay_every_epochs)
double lr_schedule(int64_t epoch, const OptimConfig& cfg);

// One velocity buffer per parameter, parallel to collect_params order.
template <typename T>
struct OptimState {
  std::vector<std::vector<T>> velocity;
};

// SGD with momentum: v <- momentum*v + (g + weight_decay*theta);
// theta <- theta - lr*v. Parameters flagged decay=false (the fusion lambdas
// and norm affine parameters) are exempt from weight decay. Velocity buffers
// are created on first use; a parameter without a gradient is an error.
template <typename T>
void sgd_step(std::vector<ParamRef<T>>& params, OptimState<T>& state, const OptimConfig& cfg,
              double lr);

// ---- checkpoints ----------------------------------------------------------------

// On-disk format "TAUCKPT1": two ASCII header lines (magic, then a one-line
// JSON echo of model/optimizer config, epoch, rng state, best validation
// score, record count), followed by named binary records of little-endian
// 32-bit floats. Records hold every trainable parameter, the optimizer
// velocity buffers ("momentum.<name>") and norm running statistics, so a
// round trip reproduces both predictions and the training trajectory.
struct Checkpoint {
  ModelConfig model;
  int64_t in_h = 0, in_w = 0;
  OptimConfig optim;
  int64_t epoch = 0;       // completed epochs
  uint64_t rng_state = 0;  // minibatch shuffle stream
  double best_val = -1.0;
  std::vector<std::pair<std::string, std::vector<float>>> records;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot(UNetParams<float>& p, const OptimState<float>& st, const OptimConfig& oc,
                    int64_t epoch, uint64_t rng_state, double best_val);

// Copies record values into an already-built model of the same config.
// Passing st = nullptr skips the optimizer buffers (evaluation-only loads).
void restore(const Checkpoint& ck, UNetParams<float>& p, OptimState<float>* st);

// build_unet from the config echo, then restore the weights.
UNetParams<float> model_from_checkpoint(const Checkpoint& ck);

// ---- training and evaluation ------------------------------------------------------

struct TrainRun {
  ModelConfig model;   // model.seed drives initialization
  OptimConfig optim;
  LossConfig loss;
  int64_t in_h = 64, in_w = 64;
  uint64_t seed = 0;       // minibatch shuffle stream
  std::string out_dir;     // receives log.csv, best.ckpt, last.ckpt; empty = no files
  std::string resume;      // optional checkpoint to continue from
  bool quiet = true;       // echo per-epoch rows to stdout when false
};

struct EpochRow {
  int64_t epoch = 0;
  double lr = 0.0, train_loss = 0.0, val_dice = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> log;  // this process's epochs (excludes resumed history)
  int64_t steps_per_epoch = 0;
  double best_val_dice = -1.0;
  std::string log_path, best_path, last_path;
};

// Deterministic minibatch SGD: per epoch, a seeded shuffle, batches of
// batch_size with the last partial batch kept, forward -> combined_loss ->
// backward -> sgd_step, then macro-averaged validation Dice in eval mode.
// Appends one CSV row per epoch (epoch,lr,train_loss,val_dice), keeps the
// best-validation and last checkpoints, and aborts on a non-finite loss
// naming the first offending tensor. Resuming from a checkpoint of the same
// run replays the remaining epochs exactly as the uninterrupted run would.
TrainResult train_loop(const TrainRun& run, const std::vector<SegSample>& train,
                       const std::vector<SegSample>& val);

// Eval-mode per-image metrics in dataset order; CSV/JSON written when the
// paths are nonempty. Sample extents must match the built model.
std::vector<SampleMetrics> evaluate(UNetParams<float>& p, const std::vector<SegSample>& samples,
                                    const std::string& csv_path = "",
                                    const std::string& json_path = "");

// Writes <id>_prob.pgm (probabilities x255, rounded) and <id>_mask.pgm
// (0/255 at the given threshold) for every sample.
void predict_to_dir(UNetParams<float>& p, const std::vector<SegSample>& samples,
                    const std::string& out_dir, double threshold = 0.5);

}  // namespace tau
