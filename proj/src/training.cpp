#include "tbub/training.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>

#include "tbub/error.h"

namespace tbub {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kArgument, "train config: " + m); };
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) fail("warmup_frac must lie in (0, 1)");
  if (!(max_lr > 0.0)) fail("max_lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
  if (batch_size == 0 || accum_steps == 0) fail("batch_size and accum_steps must be positive");
  if (eval_interval == 0 || eval_batches == 0) fail("eval_interval and eval_batches must be positive");
  if (threads == 0) fail("threads must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"max_lr", c.max_lr},           {"warmup_frac", c.warmup_frac},
                        {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
                        {"beta2", c.beta2},             {"adam_eps", c.adam_eps},
                        {"grad_clip", c.grad_clip},     {"batch_size", c.batch_size},
                        {"accum_steps", c.accum_steps}, {"total_steps", c.total_steps},
                        {"eval_interval", c.eval_interval}, {"eval_batches", c.eval_batches},
                        {"seed", c.seed},               {"log_timing", c.log_timing}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.max_lr = j.at("max_lr").get<double>();
    c.warmup_frac = j.at("warmup_frac").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.accum_steps = j.at("accum_steps").get<std::size_t>();
    c.total_steps = j.at("total_steps").get<std::size_t>();
    c.eval_interval = j.at("eval_interval").get<std::size_t>();
    c.eval_batches = j.at("eval_batches").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.log_timing = j.at("log_timing").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("train config json: ") + e.what());
  }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const double total = static_cast<double>(cfg.total_steps);
  const double warmup = std::max(1.0, std::round(cfg.warmup_frac * total));
  const double s = static_cast<double>(step);
  if (s <= warmup) return cfg.max_lr * s / warmup;
  const double min_lr = cfg.max_lr / 10.0;
  if (total <= warmup) return min_lr;
  const double progress = std::min(1.0, (s - warmup) / (total - warmup));
  return min_lr + 0.5 * (cfg.max_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(ParamStore& params, const ParamGrads& grads, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  auto& tensors = params.tensors;
  if (grads.size() != tensors.size() || state.m.size() != tensors.size() || state.v.size() != tensors.size())
    throw Error(ErrorKind::kDimension, "adamw_step: parameter, gradient and moment counts differ");
  const std::uint64_t step = state.step + 1;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!grads[i].same_shape(tensors[i].value))
      throw Error(ErrorKind::kDimension, "adamw_step: gradient shape mismatch for '" + tensors[i].name + "'");
    if (!grads[i].all_finite())
      throw Error(ErrorKind::kNonFinite,
                  "non-finite gradient in '" + tensors[i].name + "' at step " + std::to_string(step));
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Matrix& p = tensors[i].value;
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    const double decay = tensors[i].decay ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i].data[k];
      m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * g;
      v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m.data[k] / bc1;
      const double vhat = v.data[k] / bc2;
      p.data[k] -= lr * decay * p.data[k];
      p.data[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
  state.step = step;
}

double clip_grad_norm(ParamGrads& grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix& g : grads)
      for (double& v : g.data) v *= s;
  }
  return norm;
}

namespace {

struct SequenceResult {
  double loss = 0.0;
  std::vector<double> mean_forks;
  ParamGrads grads;
};

SequenceResult run_sequence(const Model& model, const Batch& batch, std::size_t s, double weight, bool with_grads) {
  SequenceResult r;
  ForwardOptions o;
  if (with_grads) {
    r.grads = zero_grads(model.params());
    o.grads = &r.grads;
  }
  ForwardPass p = forward(model, batch.inputs[s], o);
  Var loss = lm_loss(p.log_probs, batch.targets[s]);
  r.loss = loss.scalar();
  for (const auto& lt : p.trace.fork_layers) {
    double f = 0.0;
    for (std::size_t c : lt.forks) f += static_cast<double>(c);
    r.mean_forks.push_back(f / static_cast<double>(lt.forks.size()));
  }
  if (with_grads) p.tape->backward(scale(loss, weight));
  return r;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

GradientStats accumulate_gradients(const Model& model, const Batch& batch, std::size_t first, std::size_t count,
                                   double weight, ParamGrads& into, std::size_t threads) {
  if (first + count > batch.inputs.size()) throw Error(ErrorKind::kArgument, "accumulate_gradients: range past batch");
  if (into.size() != model.params().tensors.size())
    throw Error(ErrorKind::kArgument, "accumulate_gradients: gradient buffer does not match parameters");
  GradientStats st;
  auto reduce = [&](SequenceResult& r) {
    st.loss_sum += r.loss;
    if (st.mean_forks_sum.empty()) st.mean_forks_sum.assign(r.mean_forks.size(), 0.0);
    for (std::size_t k = 0; k < r.mean_forks.size(); ++k) st.mean_forks_sum[k] += r.mean_forks[k];
    for (std::size_t i = 0; i < into.size(); ++i)
      for (std::size_t k = 0; k < into[i].size(); ++k) into[i].data[k] += r.grads[i].data[k];
  };
  if (threads <= 1) {
    for (std::size_t s = first; s < first + count; ++s) {
      SequenceResult r = run_sequence(model, batch, s, weight, true);
      reduce(r);
    }
    return st;
  }
  std::vector<SequenceResult> results(count);
  parallel_for(count, threads, [&](std::size_t i) { results[i] = run_sequence(model, batch, first + i, weight, true); });
  for (auto& r : results) reduce(r);
  return st;
}

double evaluate_loss(const Model& model, const Batch& batch, std::size_t threads) {
  std::vector<double> losses(batch.inputs.size());
  parallel_for(losses.size(), threads,
               [&](std::size_t i) { losses[i] = run_sequence(model, batch, i, 1.0, false).loss; });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(losses.size());
}

std::size_t threads_from_env() {
  const char* v = std::getenv("TBUB_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06zu.tbub", step);
  return out_dir / name;
}

namespace {

std::string fmt(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

std::string csv_header(const ModelConfig& m) {
  std::string h = "step,lr,train_loss,val_loss";
  if (m.forks())
    for (std::size_t l : m.fork_layers) h += ",mean_forks_layer_" + std::to_string(l);
  return h + ",wall_ms";
}

std::string csv_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + fmt(r.lr) + "," + fmt(r.train_loss) + ",";
  if (r.val_loss) s += fmt(*r.val_loss);
  for (double f : r.mean_forks) s += "," + fmt(f);
  return s + "," + fmt(r.wall_ms);
}

// Keeps the header and rows with step <= keep_through.
void truncate_metrics(const std::filesystem::path& path, const std::string& header, std::size_t keep_through) {
  std::vector<std::string> kept = {header};
  std::ifstream is(path);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (first) {
      first = false;
      if (line != header) throw Error(ErrorKind::kFormat, "metrics log header does not match the resumed run");
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= keep_through) kept.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : kept) os << l << '\n';
  if (!os) throw Error(ErrorKind::kIo, "cannot rewrite metrics log '" + path.string() + "'");
}

}  // namespace

TrainResult train(const TrainJob& job, const std::optional<std::filesystem::path>& resume, std::ostream* log) {
  job.model.validate();
  job.train.validate();
  const TrainConfig& tc = job.train;
  const std::size_t L = job.model.block_size;

  const TokenStore train_store = read_token_store(job.train_data);
  const TokenStore val_store = job.val_data.empty() ? train_store : read_token_store(job.val_data);
  if (train_store.vocab_size > job.model.vocab_size)
    throw Error(ErrorKind::kArgument, "token store vocabulary exceeds model vocab_size");

  std::error_code ec;
  std::filesystem::create_directories(job.out_dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create output directory '" + job.out_dir.string() + "'");

  // Fixed validation batches, independent of training progress and resume.
  std::mt19937_64 val_rng(tc.seed ^ 0x76616c6964617465ULL);
  const Batch val_batch = sample_batch(val_store, tc.batch_size * tc.eval_batches, L, val_rng);

  nlohmann::json run = job.run_info;
  run["train"] = to_json(tc);

  Model model(job.model);
  OptimizerState opt = zero_optimizer_state(model.params());
  std::mt19937_64 rng(tc.seed);
  std::size_t step = 0;
  const auto metrics = job.out_dir / "metrics.csv";
  const std::string header = csv_header(job.model);

  auto save = [&](std::size_t s) {
    Checkpoint c;
    c.model = job.model;
    c.run = run;
    c.run["step"] = s;
    c.params = model.params();
    c.optimizer = opt;
    std::ostringstream rs;
    rs << rng;
    c.rng_state = rs.str();
    const auto p = checkpoint_path(job.out_dir, s);
    write_checkpoint(p, c);
    write_checkpoint(job.out_dir / "latest.tbub", c);
    return p;
  };

  TrainResult result;
  if (resume) {
    Checkpoint c = read_checkpoint(*resume);
    if (to_json(c.model) != to_json(job.model))
      throw Error(ErrorKind::kArgument, "resume: checkpoint model config differs from the requested one");
    model = Model(c.model, std::move(c.params));
    opt = std::move(c.optimizer);
    std::istringstream rs(c.rng_state);
    rs >> rng;
    if (!rs) throw Error(ErrorKind::kFormat, "resume: unreadable RNG state");
    step = static_cast<std::size_t>(opt.step);
    truncate_metrics(metrics, header, step);
    result.last_checkpoint = *resume;
    if (log) *log << "resumed from " << resume->string() << " at step " << step << '\n';
  } else {
    std::ofstream os(metrics, std::ios::trunc);
    os << header << '\n';
    if (!os) throw Error(ErrorKind::kIo, "cannot write metrics log '" + metrics.string() + "'");
    result.last_checkpoint = save(0);
  }

  std::ofstream csv(metrics, std::ios::app);
  if (!csv) throw Error(ErrorKind::kIo, "cannot append to metrics log '" + metrics.string() + "'");
  const std::size_t micro = tc.batch_size;
  const std::size_t per_step = micro * tc.accum_steps;
  const double weight = 1.0 / static_cast<double>(per_step);

  while (step < tc.total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t s = step + 1;
    const double lr = lr_at(s, tc);
    const Batch batch = sample_batch(train_store, per_step, L, rng);
    ParamGrads grads = zero_grads(model.params());
    GradientStats st;
    for (std::size_t a = 0; a < tc.accum_steps; ++a) {
      GradientStats part = accumulate_gradients(model, batch, a * micro, micro, weight, grads, tc.threads);
      st.loss_sum += part.loss_sum;
      if (st.mean_forks_sum.empty()) st.mean_forks_sum.assign(part.mean_forks_sum.size(), 0.0);
      for (std::size_t k = 0; k < part.mean_forks_sum.size(); ++k) st.mean_forks_sum[k] += part.mean_forks_sum[k];
    }
    MetricsRow row;
    row.step = s;
    row.lr = lr;
    row.train_loss = st.loss_sum / static_cast<double>(per_step);
    for (double f : st.mean_forks_sum) row.mean_forks.push_back(f / static_cast<double>(per_step));
    if (!std::isfinite(row.train_loss))
      throw Error(ErrorKind::kNonFinite, "non-finite training loss at step " + std::to_string(s) +
                                             "; last good checkpoint: " + result.last_checkpoint.string());
    clip_grad_norm(grads, tc.grad_clip);
    adamw_step(model.params(), grads, opt, lr, tc);
    step = s;
    const bool boundary = s % tc.eval_interval == 0 || s == tc.total_steps;
    if (boundary) {
      row.val_loss = evaluate_loss(model, val_batch, tc.threads);
      if (!std::isfinite(*row.val_loss))
        throw Error(ErrorKind::kNonFinite, "non-finite validation loss at step " + std::to_string(s) +
                                               "; last good checkpoint: " + result.last_checkpoint.string());
    }
    if (tc.log_timing)
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    csv << csv_row(row) << '\n';
    csv.flush();
    if (!csv) throw Error(ErrorKind::kIo, "failed appending to metrics log");
    if (boundary) {
      result.last_checkpoint = save(s);
      result.final_val_loss = row.val_loss;
      if (log) *log << "step " << s << " lr " << fmt(lr) << " train_loss " << fmt(row.train_loss) << " val_loss "
                    << fmt(*row.val_loss) << '\n';
    }
    result.rows.push_back(std::move(row));
  }
  result.final_step = step;
  return result;
}

}  // namespace tbub
