#include "tbub/model.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "tbub/error.h"

namespace tbub {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kOurs: return "ours";
    case Variant::kBaseline: return "baseline";
    case Variant::kCopyK: return "copy_k";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "ours") return Variant::kOurs;
  if (s == "baseline") return Variant::kBaseline;
  if (s == "copy_k" || s == "copy-k") return Variant::kCopyK;
  throw Error(ErrorKind::kArgument, "unknown variant '" + std::string(s) + "'");
}

std::size_t ModelConfig::implied_budget() const {
  switch (variant) {
    case Variant::kOurs: return budget;
    case Variant::kBaseline: return block_size;
    case Variant::kCopyK: return copy_k * block_size;
  }
  return budget;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kArgument, "model config: " + m); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) fail("n_heads must divide d_model");
  if ((d_model / n_heads) % 2 != 0) fail("head width must be even for rotary embedding");
  if (block_size == 0) fail("block_size must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (!(rope_base > 1.0)) fail("rope_base must exceed 1");
  for (std::size_t i = 0; i < fork_layers.size(); ++i) {
    if (fork_layers[i] < 1 || fork_layers[i] > n_layers) fail("fork layer outside [1, n_layers]");
    if (i > 0 && fork_layers[i] <= fork_layers[i - 1]) fail("fork layers must be strictly increasing");
  }
  switch (variant) {
    case Variant::kOurs:
      if (budget < block_size) fail("budget must be at least block_size");
      break;
    case Variant::kBaseline:
      if (budget != block_size) fail("baseline budget must equal block_size");
      break;
    case Variant::kCopyK:
      if (copy_k < 1) fail("copy_k must be at least 1");
      if (budget != copy_k * block_size) fail("copy-k budget must equal k * block_size");
      break;
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                        {"d_model", c.d_model},       {"block_size", c.block_size},
                        {"budget", c.budget},         {"fork_layers", c.fork_layers},
                        {"variant", to_string(c.variant)}, {"copy_k", c.copy_k},
                        {"vocab_size", c.vocab_size}, {"rope_base", c.rope_base},
                        {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.block_size = j.at("block_size").get<std::size_t>();
    c.budget = j.at("budget").get<std::size_t>();
    c.fork_layers = j.at("fork_layers").get<std::vector<std::size_t>>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.copy_k = j.at("copy_k").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("model config json: ") + e.what());
  }
}

std::size_t ParamStore::index(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return i;
  throw Error(ErrorKind::kArgument, "no parameter named '" + std::string(name) + "'");
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

ParamGrads zero_grads(const ParamStore& params) {
  ParamGrads g;
  g.reserve(params.tensors.size());
  for (const auto& t : params.tensors) g.emplace_back(t.value.rows, t.value.cols);
  return g;
}

namespace {

ParamStore init_params(const ModelConfig& c) {
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_w = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
  const std::size_t d = c.d_model;
  ParamStore s;
  auto randn = [&](std::string name, std::size_t r, std::size_t cols, double sd) {
    Matrix m(r, cols);
    for (double& v : m.data) v = sd * normal(rng);
    s.tensors.push_back({std::move(name), std::move(m), true});
  };
  auto fill = [&](std::string name, std::size_t r, std::size_t cols, double v) {
    s.tensors.push_back({std::move(name), Matrix(r, cols, v), false});
  };

  randn("wte", c.vocab_size, d, std_w);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    fill(p + "ln1.gain", 1, d, 1.0);
    fill(p + "ln1.bias", 1, d, 0.0);
    randn(p + "attn.w_qkv", d, 3 * d, std_w);
    fill(p + "attn.b_qkv", 1, 3 * d, 0.0);
    randn(p + "attn.w_out", d, d, std_resid);
    fill(p + "attn.b_out", 1, d, 0.0);
    fill(p + "ln2.gain", 1, d, 1.0);
    fill(p + "ln2.bias", 1, d, 0.0);
    randn(p + "mlp.w_fc", d, 4 * d, std_w);
    fill(p + "mlp.b_fc", 1, 4 * d, 0.0);
    randn(p + "mlp.w_proj", 4 * d, d, std_resid);
    fill(p + "mlp.b_proj", 1, d, 0.0);
  }
  fill("ln_f.gain", 1, d, 1.0);
  fill("ln_f.bias", 1, d, 0.0);
  if (c.forks()) {
    for (std::size_t layer : c.fork_layers) {
      const std::string p = "fork" + std::to_string(layer) + ".";
      randn(p + "weight", d, 2, std_w);
      s.tensors.push_back({p + "bias", Matrix::from_rows(1, 2, {-2.0, 2.0}), false});
      randn(p + "embedding", 1, d, std_w);
      s.tensors.back().decay = false;
    }
  }
  return s;
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  params_ = init_params(config_);
  build_layout();
}

Model::Model(ModelConfig config, ParamStore params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  build_layout();
  const ParamStore expected = init_params(config_);
  if (expected.tensors.size() != params_.tensors.size())
    throw Error(ErrorKind::kFormat, "parameter count does not match config");
  for (std::size_t i = 0; i < expected.tensors.size(); ++i) {
    const auto& e = expected.tensors[i];
    const auto& p = params_.tensors[i];
    if (e.name != p.name || !e.value.same_shape(p.value))
      throw Error(ErrorKind::kFormat, "parameter '" + p.name + "' does not match config layout");
  }
}

void Model::build_layout() {
  const ParamStore& s = params_;
  layout_.wte = s.index("wte");
  layout_.lnf_gain = s.index("ln_f.gain");
  layout_.lnf_bias = s.index("ln_f.bias");
  layout_.blocks.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    layout_.blocks.push_back({s.index(p + "ln1.gain"), s.index(p + "ln1.bias"), s.index(p + "attn.w_qkv"),
                              s.index(p + "attn.b_qkv"), s.index(p + "attn.w_out"), s.index(p + "attn.b_out"),
                              s.index(p + "ln2.gain"), s.index(p + "ln2.bias"), s.index(p + "mlp.w_fc"),
                              s.index(p + "mlp.b_fc"), s.index(p + "mlp.w_proj"), s.index(p + "mlp.b_proj")});
  }
  layout_.forks.clear();
  if (config_.forks()) {
    for (std::size_t layer : config_.fork_layers) {
      const std::string p = "fork" + std::to_string(layer) + ".";
      layout_.forks.push_back({layer, s.index(p + "weight"), s.index(p + "bias"), s.index(p + "embedding")});
    }
  }
}

Var output_average(Var stream_log_probs, Var log_cum, std::span<const StreamMeta> meta, std::size_t n_tokens) {
  if (meta.size() != stream_log_probs.rows() || log_cum.rows() != meta.size())
    throw Error(ErrorKind::kDimension, "output_average: streams, scores and meta disagree");
  std::vector<std::size_t> seg(meta.size());
  for (std::size_t r = 0; r < meta.size(); ++r) seg[r] = meta[r].origin;
  Var norm = segment_logsumexp(log_cum, seg, n_tokens);
  Var log_w = sub(log_cum, gather_rows(norm, seg));
  return segment_logsumexp(add_col(stream_log_probs, log_w), seg, n_tokens);
}

CopyExpansion build_copy_k(std::size_t n_tokens, std::size_t k) {
  if (k < 1) throw Error(ErrorKind::kArgument, "copy-k needs k >= 1");
  CopyExpansion e;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    for (std::size_t p = k; p-- > 0;) {
      e.source.push_back(i);
      e.meta.push_back({i, p, 0.0});
    }
    e.decode_rows.push_back(e.source.size() - 1);
  }
  return e;
}

Var lm_loss(Var log_dists, std::span<const TokenId> targets) { return nll_mean(log_dists, targets); }

ForwardPass forward(const Model& model, std::span<const TokenId> tokens, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = tokens.size();
  if (n == 0) throw Error(ErrorKind::kArgument, "forward: empty input");
  if (n > cfg.block_size)
    throw Error(ErrorKind::kArgument,
                "forward: input length " + std::to_string(n) + " exceeds block size " + std::to_string(cfg.block_size));
  for (TokenId t : tokens)
    if (t >= cfg.vocab_size) throw Error(ErrorKind::kArgument, "forward: token id " + std::to_string(t) + " >= vocab");
  if (options.grads != nullptr && options.grads->size() != model.params().tensors.size())
    throw Error(ErrorKind::kArgument, "forward: gradient buffer does not match parameters");

  ForwardPass out;
  out.tape = std::make_unique<Tape>();
  Tape& tape = *out.tape;
  const ParamStore& store = model.params();
  auto param = [&](std::size_t idx) {
    if (options.grads != nullptr) return tape.param(store.tensors[idx].value, &(*options.grads)[idx]);
    return tape.constant(store.tensors[idx].value);
  };
  const Model::Layout& lay = model.layout();
  Var wte = param(lay.wte);

  auto block_params = [&](std::size_t l) {
    const auto& b = lay.blocks[l];
    return BlockParams{param(b.ln1_gain), param(b.ln1_bias), param(b.w_qkv),    param(b.b_qkv),
                       param(b.w_out),    param(b.b_out),    param(b.ln2_gain), param(b.ln2_bias),
                       param(b.w_fc),     param(b.b_fc),     param(b.w_proj),   param(b.b_proj)};
  };
  auto run_block = [&](std::size_t l, Var x, Var log_p, std::span<const StreamMeta> meta,
                       std::span<const double> positions) {
    AttentionProbe probe;
    if (options.attention_hook) {
      probe = [&, l](std::size_t head, const Matrix& probs) { options.attention_hook(l, head, probs, meta); };
    }
    BlockOptions bo{cfg.n_heads, cfg.rope_base, options.attention_hook ? &probe : nullptr};
    out.trace.stream_updates.push_back(x.rows());
    return block_forward(x, log_p, positions, block_params(l), bo);
  };
  auto decode = [&](Var x) {
    Var h = layernorm(x, param(lay.lnf_gain), param(lay.lnf_bias));
    return log_softmax_rows(matmul_nt(h, wte));
  };

  Var emb = embedding(wte, tokens);

  switch (cfg.variant) {
    case Variant::kBaseline: {
      std::vector<StreamMeta> meta(n);
      std::vector<double> pos(n);
      for (std::size_t i = 0; i < n; ++i) {
        meta[i] = {i, 0, 0.0};
        pos[i] = static_cast<double>(i);
      }
      Var x = emb;
      for (std::size_t l = 0; l < cfg.n_layers; ++l) x = run_block(l, x, Var{}, meta, pos);
      out.trace.budget = n;
      out.trace.final_meta = std::move(meta);
      out.log_probs = decode(x);
      break;
    }
    case Variant::kCopyK: {
      CopyExpansion e = build_copy_k(n, cfg.copy_k);
      const std::vector<double> pos = fork_positions(e.meta);
      Var x = gather_rows(emb, e.source);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) x = run_block(l, x, Var{}, e.meta, pos);
      out.trace.budget = e.meta.size();
      out.log_probs = decode(gather_rows(x, e.decode_rows));
      out.trace.final_meta = std::move(e.meta);
      break;
    }
    case Variant::kOurs: {
      const std::size_t budget = options.budget != 0 ? options.budget : cfg.budget;
      out.trace.budget = budget;
      ResidualSet set;
      set.streams = emb;
      set.log_cum = tape.constant(Matrix(n, 1));
      set.n_tokens = n;
      set.meta.resize(n);
      for (std::size_t i = 0; i < n; ++i) set.meta[i] = {i, 0, 0.0};

      std::size_t next_fork = 0;
      for (std::size_t l = 0; l <= cfg.n_layers; ++l) {
        if (next_fork < lay.forks.size() && lay.forks[next_fork].layer == l) {
          const auto& f = lay.forks[next_fork++];
          ForkParams fp{param(f.weight), param(f.bias), param(f.embedding)};
          ForkLayerTrace lt;
          lt.layer = l;
          lt.n_before = set.size();
          ForkStep step = fork_step(set, fp, budget, l, options.record_events ? &lt.events : nullptr);
          set = std::move(step.set);
          lt.selection = std::move(step.selection);
          lt.meta_after = set.meta;
          lt.forks = forks_per_token(set.meta, n);
          out.trace.fork_layers.push_back(std::move(lt));
        }
        if (l == cfg.n_layers) break;
        const std::vector<double> pos = fork_positions(set.meta);
        set.streams = run_block(l, set.streams, set.log_cum, set.meta, pos);
      }
      out.log_probs = output_average(decode(set.streams), set.log_cum, set.meta, n);
      out.trace.final_meta = std::move(set.meta);
      break;
    }
  }
  return out;
}

std::vector<std::string> structural_violations(const ForwardTrace& trace, std::size_t n_tokens) {
  std::vector<std::string> out;
  std::vector<StreamMeta> prev(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) prev[i] = {i, 0, 0.0};
  for (const ForkLayerTrace& lt : trace.fork_layers) {
    const std::string where = "layer " + std::to_string(lt.layer) + ": ";
    const std::vector<StreamMeta>& next = lt.meta_after;
    if (next.size() > trace.budget) out.push_back(where + "stream count exceeds budget");
    try {
      check_structure(next, n_tokens);
    } catch (const Error& e) {
      out.push_back(where + e.what());
    }
    if (lt.selection.keep.size() != prev.size() || lt.selection.fork.size() != prev.size()) {
      out.push_back(where + "selection does not cover prior rows");
      prev = next;
      continue;
    }
    std::size_t o = 0;
    auto expect = [&](const StreamMeta& parent, std::size_t rank, const char* what) {
      if (o >= next.size()) {
        out.push_back(where + "missing " + what + " row");
        return;
      }
      const StreamMeta& m = next[o++];
      if (m.origin != parent.origin || m.fork_rank != rank)
        out.push_back(where + what + " row not adjacent to its parent");
      if (m.log_cum > parent.log_cum) out.push_back(where + "log_cum increased");
    };
    for (std::size_t r = 0; r < prev.size(); ++r) {
      if (prev[r].fork_rank == 0 && !lt.selection.keep[r]) out.push_back(where + "original dropped");
      if (lt.selection.fork[r]) expect(prev[r], prev[r].fork_rank + 1, "fork");
      if (lt.selection.keep[r]) expect(prev[r], prev[r].fork_rank, "kept");
    }
    if (o != next.size()) out.push_back(where + "unexplained rows after assembly");
    prev = next;
  }
  return out;
}

namespace {

using SelectionSignature = std::vector<std::pair<std::vector<char>, std::vector<char>>>;

SelectionSignature signature(const ForwardTrace& t) {
  SelectionSignature s;
  for (const auto& l : t.fork_layers) s.emplace_back(l.selection.keep, l.selection.fork);
  return s;
}

}  // namespace

GradCheckReport gradient_check(const Model& model, std::span<const TokenId> tokens, std::span<const TokenId> targets,
                               double eps) {
  ParamGrads grads = zero_grads(model.params());
  ForwardOptions fo;
  fo.grads = &grads;
  ForwardPass base = forward(model, tokens, fo);
  Var loss = lm_loss(base.log_probs, targets);
  base.tape->backward(loss);
  const SelectionSignature base_sig = signature(base.trace);

  Model probe = model;
  auto eval = [&](bool& same) {
    ForwardPass p = forward(probe, tokens);
    same = same && signature(p.trace) == base_sig;
    return lm_loss(p.log_probs, targets).scalar();
  };

  GradCheckReport report;
  for (std::size_t g = 0; g < probe.params().tensors.size(); ++g) {
    ParamTensor& t = probe.params().tensors[g];
    GroupGradCheck gc;
    gc.name = t.name;
    double diff2 = 0.0, bp2 = 0.0, fd2 = 0.0;
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      const double orig = t.value.data[i];
      bool same = true;
      t.value.data[i] = orig + eps;
      const double lp = eval(same);
      t.value.data[i] = orig - eps;
      const double lm = eval(same);
      t.value.data[i] = orig;
      if (!same) {
        ++gc.skipped;
        continue;
      }
      const double fd = (lp - lm) / (2.0 * eps);
      const double bp = grads[g].data[i];
      diff2 += (bp - fd) * (bp - fd);
      bp2 += bp * bp;
      fd2 += fd * fd;
      ++gc.checked;
    }
    const double denom = std::max(std::sqrt(bp2), std::sqrt(fd2));
    gc.rel_err = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    gc.grad_norm = std::sqrt(bp2);
    report.max_rel_err = std::max(report.max_rel_err, gc.rel_err);
    report.skipped += gc.skipped;
    report.groups.push_back(std::move(gc));
  }
  return report;
}

}  // namespace tbub
