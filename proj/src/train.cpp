#include "tau/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "tau/rng.hpp"

namespace tau {
namespace {

void validate_optim(const OptimConfig& cfg) {
  if (!(cfg.lr0 > 0.0) || !(cfg.momentum >= 0.0) || !(cfg.weight_decay >= 0.0))
    throw std::invalid_argument("optim: lr0 must be positive, momentum/weight_decay nonnegative");
  if (!(cfg.decay_factor > 1.0))
    throw std::invalid_argument("optim: decay_factor must be > 1");
  if (cfg.decay_every_epochs < 1 || cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("optim: decay_every_epochs, epochs and batch_size must be >= 1");
}

}  // namespace

double lr_schedule(int64_t epoch, const OptimConfig& cfg) {
  validate_optim(cfg);
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
  const int64_t k = epoch / cfg.decay_every_epochs;
  return cfg.lr0 / std::pow(cfg.decay_factor, static_cast<double>(k));
}

template <typename T>
void sgd_step(std::vector<ParamRef<T>>& params, OptimState<T>& state, const OptimConfig& cfg,
              double lr) {
  validate_optim(cfg);
  if (state.velocity.empty()) state.velocity.resize(params.size());
  if (state.velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: optimizer state holds " +
                                std::to_string(state.velocity.size()) + " buffers for " +
                                std::to_string(params.size()) + " parameters");
  const T m = static_cast<T>(cfg.momentum);
  const T step = static_cast<T>(lr);
  for (size_t i = 0; i < params.size(); ++i) {
    ParamRef<T>& p = params[i];
    if (!p.tensor.has_grad())
      throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
    const std::vector<T>& g = p.tensor.grad();
    std::vector<T>& theta = p.tensor.data();
    std::vector<T>& v = state.velocity[i];
    if (v.empty()) v.assign(theta.size(), T(0));
    if (v.size() != theta.size() || g.size() != theta.size())
      throw std::invalid_argument("sgd_step: buffer sizes disagree for parameter '" + p.name +
                                  "'");
    const T wd = p.decay ? static_cast<T>(cfg.weight_decay) : T(0);
    for (size_t j = 0; j < theta.size(); ++j) {
      v[j] = m * v[j] + (g[j] + wd * theta[j]);
      theta[j] -= step * v[j];
    }
  }
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

constexpr const char* kMagic = "TAUCKPT1";

nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"in_channels", m.in_channels},
          {"base_channels", m.base_channels},
          {"depth", m.depth},
          {"heads", m.heads},
          {"msc_mode", to_string(m.msc_mode)},
          {"use_tsa", m.use_tsa},
          {"use_gsa", m.use_gsa},
          {"use_norm", m.use_norm},
          {"tsa_out_proj", m.tsa_out_proj},
          {"tsa_share_qkv", m.tsa_share_qkv},
          {"seed", m.seed}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.in_channels = j.at("in_channels").get<int64_t>();
  m.base_channels = j.at("base_channels").get<int64_t>();
  m.depth = j.at("depth").get<int64_t>();
  m.heads = j.at("heads").get<int>();
  m.msc_mode = msc_mode_from_string(j.at("msc_mode").get<std::string>());
  m.use_tsa = j.at("use_tsa").get<bool>();
  m.use_gsa = j.at("use_gsa").get<bool>();
  m.use_norm = j.at("use_norm").get<bool>();
  m.tsa_out_proj = j.at("tsa_out_proj").get<bool>();
  m.tsa_share_qkv = j.at("tsa_share_qkv").get<bool>();
  m.seed = j.at("seed").get<uint64_t>();
  return m;
}

nlohmann::json optim_to_json(const OptimConfig& o) {
  return {{"lr0", o.lr0},
          {"momentum", o.momentum},
          {"weight_decay", o.weight_decay},
          {"decay_factor", o.decay_factor},
          {"decay_every_epochs", o.decay_every_epochs},
          {"epochs", o.epochs},
          {"batch_size", o.batch_size}};
}

OptimConfig optim_from_json(const nlohmann::json& j) {
  OptimConfig o;
  o.lr0 = j.at("lr0").get<double>();
  o.momentum = j.at("momentum").get<double>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.decay_factor = j.at("decay_factor").get<double>();
  o.decay_every_epochs = j.at("decay_every_epochs").get<int64_t>();
  o.epochs = j.at("epochs").get<int64_t>();
  o.batch_size = j.at("batch_size").get<int64_t>();
  return o;
}

// Fixed-width little-endian fields; this codebase targets little-endian
// hosts, so native byte order is written directly.
void put_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t get_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("load_checkpoint: truncated record header in " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  nlohmann::json header = {{"model", model_to_json(ck.model)}, {"in_h", ck.in_h},
                           {"in_w", ck.in_w},                  {"optim", optim_to_json(ck.optim)},
                           {"epoch", ck.epoch},                {"rng_state", ck.rng_state},
                           {"best_val", ck.best_val},          {"records", ck.records.size()}};
  out << kMagic << '\n' << header.dump() << '\n';
  for (const auto& [name, values] : ck.records) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(values.size()));
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kMagic)
    throw std::runtime_error("load_checkpoint: " + path + " is not a " + kMagic + " checkpoint");
  if (!std::getline(in, header_line))
    throw std::runtime_error("load_checkpoint: missing header in " + path);

  Checkpoint ck;
  try {
    const nlohmann::json h = nlohmann::json::parse(header_line);
    ck.model = model_from_json(h.at("model"));
    ck.in_h = h.at("in_h").get<int64_t>();
    ck.in_w = h.at("in_w").get<int64_t>();
    ck.optim = optim_from_json(h.at("optim"));
    ck.epoch = h.at("epoch").get<int64_t>();
    ck.rng_state = h.at("rng_state").get<uint64_t>();
    ck.best_val = h.at("best_val").get<double>();
    ck.records.resize(h.at("records").get<size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: bad header in " + path + ": " + e.what());
  }

  for (auto& [name, values] : ck.records) {
    const uint32_t name_len = get_u32(in, path);
    name.resize(name_len);
    in.read(name.data(), name_len);
    const uint32_t count = get_u32(in, path);
    values.resize(count);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated record '" + name + "' in " + path);
  }
  return ck;
}

Checkpoint snapshot(UNetParams<float>& p, const OptimState<float>& st, const OptimConfig& oc,
                    int64_t epoch, uint64_t rng_state, double best_val) {
  Checkpoint ck;
  ck.model = p.cfg;
  ck.in_h = p.in_h;
  ck.in_w = p.in_w;
  ck.optim = oc;
  ck.epoch = epoch;
  ck.rng_state = rng_state;
  ck.best_val = best_val;

  auto params = collect_params(p);
  if (!st.velocity.empty() && st.velocity.size() != params.size())
    throw std::invalid_argument("snapshot: optimizer state does not match the parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    ck.records.emplace_back(params[i].name, params[i].tensor.data());
    std::vector<float> v = st.velocity.empty() ? std::vector<float>() : st.velocity[i];
    if (v.empty()) v.assign(params[i].tensor.data().size(), 0.0f);
    ck.records.emplace_back("momentum." + params[i].name, std::move(v));
  }
  for (auto& [name, norm] : collect_norms(p)) {
    ck.records.emplace_back(name + ".running_mean", norm->running_mean.data());
    ck.records.emplace_back(name + ".running_var", norm->running_var.data());
    ck.records.emplace_back(name + ".batches_tracked",
                            std::vector<float>{static_cast<float>(norm->batches_tracked)});
  }
  return ck;
}

void restore(const Checkpoint& ck, UNetParams<float>& p, OptimState<float>* st) {
  std::unordered_map<std::string, const std::vector<float>*> by_name;
  for (const auto& [name, values] : ck.records)
    if (!by_name.emplace(name, &values).second)
      throw std::runtime_error("restore: duplicate checkpoint record '" + name + "'");

  auto take = [&by_name](const std::string& name, size_t want) -> const std::vector<float>& {
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("restore: checkpoint is missing record '" + name + "'");
    if (it->second->size() != want)
      throw std::runtime_error("restore: record '" + name + "' holds " +
                               std::to_string(it->second->size()) + " values, expected " +
                               std::to_string(want));
    const std::vector<float>& v = *it->second;
    by_name.erase(it);
    return v;
  };

  auto params = collect_params(p);
  if (st) {
    st->velocity.assign(params.size(), {});
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = params[i].tensor.data().size();
    params[i].tensor.data() = take(params[i].name, n);
    const std::string mname = "momentum." + params[i].name;
    if (st)
      st->velocity[i] = take(mname, n);
    else
      by_name.erase(mname);
  }
  for (auto& [name, norm] : collect_norms(p)) {
    const size_t c = norm->running_mean.data().size();
    norm->running_mean.data() = take(name + ".running_mean", c);
    norm->running_var.data() = take(name + ".running_var", c);
    norm->batches_tracked =
        std::llround(static_cast<double>(take(name + ".batches_tracked", 1)[0]));
  }
  if (!by_name.empty())
    throw std::runtime_error("restore: checkpoint record '" + by_name.begin()->first +
                             "' does not match any model tensor");
}

UNetParams<float> model_from_checkpoint(const Checkpoint& ck) {
  UNetParams<float> p = build_unet<float>(ck.model, ck.in_h, ck.in_w);
  restore(ck, p, nullptr);
  return p;
}

// ---- training and evaluation ------------------------------------------------------

namespace {

// Packs samples[idx[lo..hi)] into [b,1,H,W] image/mask tensors.
std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<SegSample>& samples,
                                                    const std::vector<int64_t>& idx, size_t lo,
                                                    size_t hi) {
  const int64_t h = samples[static_cast<size_t>(idx[lo])].image.dim(1);
  const int64_t w = samples[static_cast<size_t>(idx[lo])].image.dim(2);
  const int64_t b = static_cast<int64_t>(hi - lo);
  std::vector<float> xs, ys;
  xs.reserve(static_cast<size_t>(b * h * w));
  ys.reserve(static_cast<size_t>(b * h * w));
  for (size_t k = lo; k < hi; ++k) {
    const SegSample& s = samples[static_cast<size_t>(idx[k])];
    xs.insert(xs.end(), s.image.data().begin(), s.image.data().end());
    ys.insert(ys.end(), s.mask.data().begin(), s.mask.data().end());
  }
  return {Tensor<float>::from_data({b, 1, h, w}, xs), Tensor<float>::from_data({b, 1, h, w}, ys)};
}

void check_samples(const char* who, const std::vector<SegSample>& samples, int64_t h, int64_t w) {
  for (const SegSample& s : samples) {
    if (!s.image.defined() || s.image.rank() != 3 || s.image.dim(0) != 1 ||
        s.image.dim(1) != h || s.image.dim(2) != w || s.mask.shape() != s.image.shape())
      throw std::invalid_argument(std::string(who) + ": sample '" + s.id +
                                  "' does not match the model's 1x" + std::to_string(h) + "x" +
                                  std::to_string(w) + " input");
  }
}

double val_dice_of(UNetParams<float>& p, const std::vector<SegSample>& val) {
  if (val.empty()) return std::nan("");
  std::vector<SampleMetrics> rows;
  {
    NoGradGuard ng;
    std::vector<int64_t> idx(1, 0);
    for (size_t i = 0; i < val.size(); ++i) {
      idx[0] = static_cast<int64_t>(i);
      auto [x, y] = stack_batch(val, idx, 0, 1);
      const Tensor<float> prob = model_forward(x, p, NormMode::eval);
      SampleMetrics sm;
      sm.id = val[i].id;
      sm.counts = confusion(binarize(prob), y);
      sm.report = metrics(sm.counts);
      rows.push_back(std::move(sm));
    }
  }
  return aggregate_metrics(rows).dice;
}

std::string format_epoch_row(const EpochRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.8f,%.8f", static_cast<long long>(r.epoch), r.lr,
                r.train_loss, r.val_dice);
  return buf;
}

}  // namespace

TrainResult train_loop(const TrainRun& run, const std::vector<SegSample>& train,
                       const std::vector<SegSample>& val) {
  validate_optim(run.optim);
  if (train.empty()) throw std::invalid_argument("train_loop: empty training set");
  check_samples("train_loop", train, run.in_h, run.in_w);
  check_samples("train_loop", val, run.in_h, run.in_w);

  UNetParams<float> p = build_unet<float>(run.model, run.in_h, run.in_w);
  OptimState<float> state;
  Rng shuffle_rng(Rng::mix(run.seed, 0x7261696eull));  // dedicated shuffle stream
  int64_t start_epoch = 0;
  double best_val = -1.0;

  if (!run.resume.empty()) {
    const Checkpoint ck = load_checkpoint(run.resume);
    if (ck.in_h != run.in_h || ck.in_w != run.in_w)
      throw std::invalid_argument("train_loop: checkpoint input extents do not match the run");
    p = build_unet<float>(ck.model, ck.in_h, ck.in_w);
    restore(ck, p, &state);
    shuffle_rng.set_state(ck.rng_state);
    start_epoch = ck.epoch;
    best_val = ck.best_val;
  }

  TrainResult result;
  const int64_t n = static_cast<int64_t>(train.size());
  const int64_t bs = run.optim.batch_size;
  result.steps_per_epoch = (n + bs - 1) / bs;

  std::ofstream log;
  if (!run.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(run.out_dir, ec);
    if (ec)
      throw std::runtime_error("train_loop: cannot create " + run.out_dir + ": " + ec.message());
    result.log_path = run.out_dir + "/log.csv";
    result.best_path = run.out_dir + "/best.ckpt";
    result.last_path = run.out_dir + "/last.ckpt";
    // A resumed run appends to its own earlier rows; a fresh run starts over.
    log.open(result.log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("train_loop: cannot open " + result.log_path);
    if (start_epoch == 0) log << "epoch,lr,train_loss,val_dice\n";
  }

  auto params = collect_params(p);
  for (int64_t epoch = start_epoch; epoch < run.optim.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, run.optim);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (int64_t step = 0; step < result.steps_per_epoch; ++step) {
      const size_t lo = static_cast<size_t>(step * bs);
      const size_t hi = std::min<size_t>(lo + static_cast<size_t>(bs), static_cast<size_t>(n));
      auto [x, y] = stack_batch(train, order, lo, hi);
      const Tensor<float> prob = model_forward(x, p, NormMode::train);
      Tensor<float> loss = combined_loss(prob, y, run.loss);
      const double item = static_cast<double>(loss.item());
      if (!std::isfinite(item))
        throw std::runtime_error("train_loop: non-finite loss at epoch " + std::to_string(epoch) +
                                 " step " + std::to_string(step) + "; first offending tensor: " +
                                 first_nonfinite(loss));
      loss_sum += item * static_cast<double>(hi - lo);
      for (auto& pr : params) pr.tensor.zero_grad();
      backward(loss);
      sgd_step(params, state, run.optim, lr);
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.val_dice = val_dice_of(p, val);
    result.log.push_back(row);
    if (log.is_open()) {
      log << format_epoch_row(row) << '\n';
      log.flush();
    }
    if (!run.quiet) std::printf("%s\n", format_epoch_row(row).c_str());

    const bool improved = !std::isnan(row.val_dice) && row.val_dice > best_val;
    if (improved) best_val = row.val_dice;
    if (!run.out_dir.empty()) {
      const Checkpoint ck =
          snapshot(p, state, run.optim, epoch + 1, shuffle_rng.state(), best_val);
      save_checkpoint(result.last_path, ck);
      if (improved) save_checkpoint(result.best_path, ck);
    }
  }
  result.best_val_dice = best_val;

  // Without a validation set (or when resuming past the end) "best" falls
  // back to the final state so the path is always usable.
  if (!run.out_dir.empty() && !std::filesystem::exists(result.best_path)) {
    save_checkpoint(result.best_path, snapshot(p, state, run.optim, run.optim.epochs,
                                               shuffle_rng.state(), best_val));
  }
  return result;
}

std::vector<SampleMetrics> evaluate(UNetParams<float>& p, const std::vector<SegSample>& samples,
                                    const std::string& csv_path, const std::string& json_path) {
  check_samples("evaluate", samples, p.in_h, p.in_w);
  std::vector<SampleMetrics> rows;
  NoGradGuard ng;
  std::vector<int64_t> idx(1, 0);
  for (size_t i = 0; i < samples.size(); ++i) {
    idx[0] = static_cast<int64_t>(i);
    auto [x, y] = stack_batch(samples, idx, 0, 1);
    const Tensor<float> prob = model_forward(x, p, NormMode::eval);
    SampleMetrics sm;
    sm.id = samples[i].id;
    sm.counts = confusion(binarize(prob), y);
    sm.report = metrics(sm.counts);
    rows.push_back(std::move(sm));
  }
  if (!csv_path.empty()) write_metrics_csv(csv_path, rows);
  if (!json_path.empty()) write_metrics_json(json_path, rows);
  return rows;
}

void predict_to_dir(UNetParams<float>& p, const std::vector<SegSample>& samples,
                    const std::string& out_dir, double threshold) {
  check_samples("predict", samples, p.in_h, p.in_w);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("predict: cannot create " + out_dir + ": " + ec.message());
  NoGradGuard ng;
  std::vector<int64_t> idx(1, 0);
  for (size_t i = 0; i < samples.size(); ++i) {
    idx[0] = static_cast<int64_t>(i);
    auto [x, y] = stack_batch(samples, idx, 0, 1);
    (void)y;
    const Tensor<float> prob = model_forward(x, p, NormMode::eval);
    const Tensor<float> plane = reshape(prob, {1, p.in_h, p.in_w});
    write_pgm(out_dir + "/" + samples[i].id + "_prob.pgm", unit_to_image(plane));
    const Tensor<float> hard = binarize(plane, threshold);
    ImageU8 m;
    m.h = p.in_h;
    m.w = p.in_w;
    m.pixels.resize(static_cast<size_t>(p.in_h * p.in_w));
    for (size_t j = 0; j < m.pixels.size(); ++j)
      m.pixels[j] = hard.data()[j] == 1.0f ? 255 : 0;
    write_pgm(out_dir + "/" + samples[i].id + "_mask.pgm", m);
  }
}

template void sgd_step<float>(std::vector<ParamRef<float>>&, OptimState<float>&,
                              const OptimConfig&, double);
template void sgd_step<double>(std::vector<ParamRef<double>>&, OptimState<double>&,
                               const OptimConfig&, double);

}  // namespace tau
