#include "tbub/analysis.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string>
#include <utility>

#include "tbub/error.h"

namespace tbub {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ForkAction parse_action(const std::string& s) {
  if (s == "keep") return ForkAction::kKeep;
  if (s == "fork") return ForkAction::kFork;
  if (s == "delete") return ForkAction::kDelete;
  throw Error(ErrorKind::kFormat, "unknown fork action '" + s + "'");
}

double row_entropy(const Matrix& log_probs, std::size_t row) {
  double h = 0.0;
  for (std::size_t v = 0; v < log_probs.cols; ++v) {
    const double lp = log_probs(row, v);
    if (std::isfinite(lp)) h -= std::exp(lp) * lp;
  }
  return std::max(0.0, h);
}

std::string xml_escape_byte(TokenId t) {
  if (t >= 256) return t == kBos ? "&#x2402;" : "?";
  const char c = static_cast<char>(t);
  switch (c) {
    case '<': return "&lt;";
    case '>': return "&gt;";
    case '&': return "&amp;";
    case '"': return "&quot;";
    default: break;
  }
  if (t < 32 || t >= 127) return "&#xB7;";
  return std::string(1, c);
}

}  // namespace

// ---- trace I/O ----------------------------------------------------------------

void write_trace(const Model& model, std::span<const TokenId> tokens, const TraceOptions& options, std::ostream& os) {
  const ModelConfig& cfg = model.config();
  const std::size_t L = cfg.block_size;
  const BudgetPolicy policy = BudgetPolicy::for_model(cfg, options.budget);
  for (TokenId t : tokens)
    if (t >= cfg.vocab_size) throw Error(ErrorKind::kArgument, "trace: token id " + std::to_string(t) + " outside vocabulary");

  json header = {{"type", "header"},
                 {"model", to_json(cfg)},
                 {"budget_mode", std::string(to_string(options.budget))},
                 {"n_tokens", tokens.size()},
                 {"block_size", L}};
  os << header.dump() << '\n';

  std::size_t seq = 0;
  for (std::size_t start = 0; start < tokens.size(); start += L, ++seq) {
    const std::size_t n = std::min(L, tokens.size() - start);
    const auto window = tokens.subspan(start, n);
    ForwardOptions fo;
    fo.budget = cfg.forks() ? policy.budget_for(n) : 0;
    fo.record_events = true;
    std::vector<json> attention;
    if (options.attention && seq < options.max_attention_seqs) {
      fo.attention_hook = [&](std::size_t layer, std::size_t head, const Matrix& probs, std::span<const StreamMeta> meta) {
        json rows = json::array();
        for (const StreamMeta& m : meta) rows.push_back({m.origin, m.fork_rank});
        json p = json::array();
        for (std::size_t i = 0; i < probs.rows; ++i) {
          json r = json::array();
          for (std::size_t j = 0; j <= i && j < probs.cols; ++j) r.push_back(probs(i, j));
          p.push_back(std::move(r));
        }
        attention.push_back(
            {{"type", "attention"}, {"seq", seq}, {"layer", layer}, {"head", head}, {"rows", rows}, {"probs", p}});
      };
    }
    ForwardPass pass = forward(model, window, fo);
    const Matrix& lp = pass.log_probs.value();
    for (const ForkLayerTrace& fl : pass.trace.fork_layers)
      for (const ForkEvent& e : fl.events)
        os << json{{"type", "fork"},
                   {"seq", seq},
                   {"layer", e.layer},
                   {"token_index", e.token_index},
                   {"fork_rank", e.fork_rank},
                   {"log_cum", e.log_cum},
                   {"action", std::string(to_string(e.action))}}
                  .dump()
           << '\n';
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t forks = pass.trace.fork_layers.empty() ? 0 : pass.trace.fork_layers.back().forks[i];
      os << json{{"type", "token"},
                 {"seq", seq},
                 {"token_index", i},
                 {"token", window[i]},
                 {"entropy", row_entropy(lp, i)},
                 {"final_forks", forks}}
                .dump()
         << '\n';
    }
    for (const json& a : attention) os << a.dump() << '\n';
  }
  if (!os) throw Error(ErrorKind::kIo, "trace: write failed");
}

TraceData read_trace(std::istream& is) {
  TraceData d;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "trace line " + std::to_string(line_no) + ": ";
    try {
      const json j = json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "header") {
        d.header = j;
        have_header = true;
      } else if (type == "fork") {
        ForkRecord r;
        r.seq = j.at("seq").get<std::size_t>();
        r.event.layer = j.at("layer").get<std::size_t>();
        r.event.token_index = j.at("token_index").get<std::size_t>();
        r.event.fork_rank = j.at("fork_rank").get<std::size_t>();
        r.event.log_cum = j.at("log_cum").get<double>();
        r.event.action = parse_action(j.at("action").get<std::string>());
        d.forks.push_back(r);
      } else if (type == "token") {
        TokenRecord r;
        r.seq = j.at("seq").get<std::size_t>();
        r.token_index = j.at("token_index").get<std::size_t>();
        r.token = j.at("token").get<TokenId>();
        r.entropy = j.at("entropy").get<double>();
        r.final_forks = j.at("final_forks").get<std::size_t>();
        d.tokens.push_back(r);
      } else if (type == "attention") {
        AttentionRecord r;
        r.seq = j.at("seq").get<std::size_t>();
        r.layer = j.at("layer").get<std::size_t>();
        r.head = j.at("head").get<std::size_t>();
        for (const json& m : j.at("rows")) r.rows.push_back({m.at(0).get<std::size_t>(), m.at(1).get<std::size_t>(), 0.0});
        const json& p = j.at("probs");
        const std::size_t n = r.rows.size();
        if (p.size() != n) throw Error(ErrorKind::kFormat, "attention probs row count mismatch");
        r.probs = Matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) {
          if (p[i].size() != i + 1) throw Error(ErrorKind::kFormat, "attention probs row " + std::to_string(i) + " length");
          for (std::size_t k = 0; k <= i; ++k) r.probs(i, k) = p[i][k].get<double>();
        }
        d.attention.push_back(std::move(r));
      } else {
        throw Error(ErrorKind::kFormat, "unknown record type '" + type + "'");
      }
    } catch (const Error& e) {
      throw Error(ErrorKind::kFormat, where + e.what());
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kFormat, where + e.what());
    }
  }
  if (!have_header) throw Error(ErrorKind::kFormat, "trace: missing header record");
  return d;
}

// ---- entropy vs. forks --------------------------------------------------------

EntropyCurve entropy_fork_curve(std::span<const TokenRecord> tokens, std::size_t window, std::size_t n_buckets,
                                std::size_t min_windows, const std::vector<TokenRecord>* surrogate) {
  if (window == 0 || n_buckets == 0) throw Error(ErrorKind::kArgument, "entropy curve: window and buckets must be positive");
  if (tokens.size() < kMinEntropyTokens)
    throw Error(ErrorKind::kArgument, "entropy curve needs at least " + std::to_string(kMinEntropyTokens) +
                                          " tokens, got " + std::to_string(tokens.size()));
  std::map<std::pair<std::size_t, std::size_t>, double> alt;
  if (surrogate != nullptr)
    for (const TokenRecord& r : *surrogate) alt[{r.seq, r.token_index}] = r.entropy;

  // Group by sequence, preserving token order.
  std::map<std::size_t, std::vector<const TokenRecord*>> by_seq;
  for (const TokenRecord& r : tokens) by_seq[r.seq].push_back(&r);

  EntropyCurve c;
  for (auto& [seq, recs] : by_seq) {
    std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) { return a->token_index < b->token_index; });
    for (std::size_t s = 0; s + window <= recs.size(); s += window) {
      EntropyWindow w;
      for (std::size_t i = s; i < s + window; ++i) {
        double h = recs[i]->entropy;
        if (surrogate != nullptr) {
          auto it = alt.find({seq, recs[i]->token_index});
          if (it == alt.end())
            throw Error(ErrorKind::kArgument, "surrogate entropy missing for seq " + std::to_string(seq) + " token " +
                                                  std::to_string(recs[i]->token_index));
          h = it->second;
        }
        w.entropy += h;
        w.forks += static_cast<double>(recs[i]->final_forks);
      }
      w.entropy /= static_cast<double>(window);
      w.forks /= static_cast<double>(window);
      c.windows.push_back(w);
    }
  }
  if (c.windows.empty()) return c;
  for (const EntropyWindow& w : c.windows) c.max_window_forks = std::max(c.max_window_forks, w.forks);
  for (EntropyWindow& w : c.windows) w.norm_forks = c.max_window_forks > 0.0 ? w.forks / c.max_window_forks : 0.0;

  double lo = c.windows.front().entropy, hi = lo;
  for (const EntropyWindow& w : c.windows) {
    lo = std::min(lo, w.entropy);
    hi = std::max(hi, w.entropy);
  }
  const std::size_t nb = hi > lo ? n_buckets : 1;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(nb) : 0.0;
  std::vector<EntropyBucket> buckets(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    buckets[b].lo = lo + width * static_cast<double>(b);
    buckets[b].hi = b + 1 == nb ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (const EntropyWindow& w : c.windows) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((w.entropy - lo) / width) : 0;
    b = std::min(b, nb - 1);
    buckets[b].windows += 1;
    buckets[b].mean_entropy += w.entropy;
    buckets[b].mean_norm_forks += w.norm_forks;
  }
  for (EntropyBucket& b : buckets) {
    if (b.windows < min_windows) continue;
    b.mean_entropy /= static_cast<double>(b.windows);
    b.mean_norm_forks /= static_cast<double>(b.windows);
    c.buckets.push_back(b);
  }
  return c;
}

void write_entropy_csv(std::ostream& os, const EntropyCurve& curve) {
  os << "bucket_lo,bucket_hi,windows,mean_entropy,mean_norm_forks\n";
  for (const EntropyBucket& b : curve.buckets)
    os << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.windows << ',' << fmt(b.mean_entropy) << ','
       << fmt(b.mean_norm_forks) << '\n';
}

void write_entropy_svg(std::ostream& os, const EntropyCurve& curve) {
  const double W = 640, H = 400, M = 50;
  double lo = 0.0, hi = 1.0;
  if (!curve.windows.empty()) {
    lo = hi = curve.windows.front().entropy;
    for (const EntropyWindow& w : curve.windows) {
      lo = std::min(lo, w.entropy);
      hi = std::max(hi, w.entropy);
    }
    if (hi <= lo) hi = lo + 1.0;
  }
  auto x = [&](double e) { return M + (e - lo) / (hi - lo) * (W - 2 * M); };
  auto y = [&](double f) { return H - M - f * (H - 2 * M); };
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">window entropy (nats) ["
     << fmt(lo) << ", " << fmt(hi) << "]</text>\n";
  os << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2
     << ")\" text-anchor=\"middle\" font-size=\"12\">normalized forks</text>\n";
  for (const EntropyWindow& w : curve.windows)
    os << "<circle cx=\"" << x(w.entropy) << "\" cy=\"" << y(w.norm_forks)
       << "\" r=\"1.5\" fill=\"steelblue\" fill-opacity=\"0.2\"/>\n";
  if (!curve.buckets.empty()) {
    os << "<polyline fill=\"none\" stroke=\"crimson\" stroke-width=\"2\" points=\"";
    for (const EntropyBucket& b : curve.buckets) os << x(b.mean_entropy) << ',' << y(b.mean_norm_forks) << ' ';
    os << "\"/>\n";
  }
  os << "</svg>\n";
}

// ---- parent/child attention ---------------------------------------------------

AttentionReport parent_child_attention(std::span<const AttentionRecord> records) {
  std::map<std::string, double> sums;
  AttentionReport rep;
  for (const std::string& c : kAttentionCategories) rep.categories[c] = {};
  for (const AttentionRecord& r : records) {
    const std::size_t n = r.rows.size();
    if (r.probs.rows != n || r.probs.cols != n)
      throw Error(ErrorKind::kDimension, "attention record shape does not match its rows");
    for (std::size_t q = 0; q < n; ++q) {
      const StreamMeta& qm = r.rows[q];
      const bool child = qm.fork_rank > 0;
      rep.any_forks = rep.any_forks || child;
      for (std::size_t k = 0; k < n; ++k) {
        const StreamMeta& km = r.rows[k];
        const bool same = km.origin == qm.origin;
        std::string cat;
        if (k == q) {
          cat = child ? "child_self" : "og_self";
        } else if (!same) {
          if (k > q) continue;  // causally masked and uninformative
          cat = child ? "child_other" : "og_other";
        } else if (!child) {
          cat = "og_child";  // forks of a token sit left of its original
        } else if (k < q) {
          cat = "child_child";
        } else if (km.fork_rank == 0) {
          cat = "child_parent";  // the token's original, always masked
        } else {
          continue;
        }
        rep.categories[cat].pairs += 1;
        sums[cat] += r.probs(q, k);
      }
    }
  }
  for (auto& [name, c] : rep.categories)
    if (c.pairs > 0) c.mean = sums[name] / static_cast<double>(c.pairs);
  return rep;
}

void write_attention_csv(std::ostream& os, const AttentionReport& report) {
  os << "category,pairs,mean_attention\n";
  for (const std::string& c : kAttentionCategories) {
    const AttentionCategory& a = report.categories.at(c);
    os << c << ',' << a.pairs << ',' << (a.pairs > 0 ? fmt(a.mean) : std::string()) << '\n';
  }
}

// ---- fork-location map --------------------------------------------------------

double ForkLocationMap::token_mean(std::size_t token) const {
  if (counts.empty()) return 0.0;
  double s = 0.0;
  for (const auto& row : counts) s += static_cast<double>(row.at(token));
  return s / static_cast<double>(counts.size());
}

ForkLocationMap fork_location_map(const Model& model, std::span<const TokenId> tokens, std::size_t budget) {
  ForwardOptions fo;
  fo.budget = budget;
  ForwardPass pass = forward(model, tokens, fo);
  ForkLocationMap m;
  m.budget = pass.trace.budget;
  m.n_tokens = tokens.size();
  for (const ForkLayerTrace& fl : pass.trace.fork_layers) {
    m.layers.push_back(fl.layer);
    m.counts.push_back(fl.forks);
  }
  return m;
}

void write_forkmap_csv(std::ostream& os, const ForkLocationMap& map) {
  os << "layer";
  for (std::size_t t = 0; t < map.n_tokens; ++t) os << ",t" << t;
  os << '\n';
  for (std::size_t l = 0; l < map.layers.size(); ++l) {
    os << map.layers[l];
    for (std::size_t c : map.counts[l]) os << ',' << c;
    os << '\n';
  }
}

void write_forkmap_svg(std::ostream& os, const ForkLocationMap& map, std::span<const TokenId> tokens) {
  const double cell = 12, left = 60, top = 20;
  const double W = left + cell * static_cast<double>(map.n_tokens) + 20;
  const double H = top + cell * static_cast<double>(map.layers.size()) + 40;
  std::size_t peak = 0;
  for (const auto& row : map.counts)
    for (std::size_t c : row) peak = std::max(peak, c);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t l = 0; l < map.layers.size(); ++l) {
    const double y = top + cell * static_cast<double>(l);
    os << "<text x=\"5\" y=\"" << y + cell - 2 << "\" font-size=\"10\">layer " << map.layers[l] << "</text>\n";
    for (std::size_t t = 0; t < map.n_tokens; ++t) {
      const double v = peak > 0 ? static_cast<double>(map.counts[l][t]) / static_cast<double>(peak) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      os << "<rect x=\"" << left + cell * static_cast<double>(t) << "\" y=\"" << y << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"rgb(255," << shade << ',' << shade << ")\"><title>" << map.counts[l][t]
         << "</title></rect>\n";
    }
  }
  const double ty = top + cell * static_cast<double>(map.layers.size()) + 12;
  for (std::size_t t = 0; t < tokens.size() && t < map.n_tokens; ++t)
    os << "<text x=\"" << left + cell * static_cast<double>(t) + 2 << "\" y=\"" << ty
       << "\" font-size=\"10\" font-family=\"monospace\">" << xml_escape_byte(tokens[t]) << "</text>\n";
  os << "</svg>\n";
}

SpanForkReport lookup_fork_report(const Model& model, std::span<const LookupExample> examples) {
  const std::size_t L = model.config().block_size;
  const BudgetPolicy dynamic = BudgetPolicy::for_model(model.config(), BudgetMode::kDynamic);
  SpanForkReport r;
  double q_sum = 0.0, f_sum = 0.0;
  for (const LookupExample& ex : examples) {
    std::vector<TokenId> toks = {kBos};
    for (unsigned char ch : ex.text) toks.push_back(ch);
    if (toks.size() > L) toks.resize(L);
    const ForkLocationMap m = fork_location_map(model, toks, dynamic.budget_for(toks.size()));
    for (std::size_t i = 1; i < toks.size(); ++i) {
      const std::size_t pos = i - 1;  // offset in ex.text
      const bool in_query = (pos >= ex.query_begin && pos < ex.query_end) || (pos >= ex.answer_begin && pos < ex.answer_end);
      const double v = m.token_mean(i);
      if (in_query) {
        q_sum += v;
        ++r.query_tokens;
      } else {
        f_sum += v;
        ++r.filler_tokens;
      }
    }
    ++r.examples;
  }
  if (r.query_tokens > 0) r.query_mean = q_sum / static_cast<double>(r.query_tokens);
  if (r.filler_tokens > 0) r.filler_mean = f_sum / static_cast<double>(r.filler_tokens);
  return r;
}

// ---- over-forking ablation ----------------------------------------------------

OverforkReport overfork_ablation(const TrainJob& base, const std::vector<std::size_t>& early,
                                 const std::vector<std::size_t>& extended, std::ostream* log) {
  if (base.model.variant != Variant::kOurs) throw Error(ErrorKind::kArgument, "overfork ablation needs the forking variant");
  OverforkReport rep;
  for (const auto& [name, layers] : {std::pair{std::string("early"), early}, std::pair{std::string("extended"), extended}}) {
    TrainJob job = base;
    job.model.fork_layers = layers;
    job.out_dir = base.out_dir / name;
    job.run_info["ablation_arm"] = name;
    if (log) *log << "overfork: training arm '" << name << "'\n";
    const TrainResult res = train(job, std::nullopt, log);
    OverforkArm arm;
    arm.name = name;
    arm.fork_layers = layers;
    if (!res.final_val_loss) throw Error(ErrorKind::kArgument, "overfork ablation: arm '" + name + "' produced no validation loss");
    arm.val_loss = *res.final_val_loss;
    arm.val_perplexity = std::exp(arm.val_loss);
    // Average the per-layer utilization over the final tenth of training.
    arm.fork_utilization.assign(layers.size(), 0.0);
    std::size_t used = 0;
    const std::size_t tail = std::max<std::size_t>(1, res.rows.size() / 10);
    for (std::size_t i = res.rows.size() - std::min(tail, res.rows.size()); i < res.rows.size(); ++i) {
      const MetricsRow& row = res.rows[i];
      if (row.step == 0 || row.mean_forks.size() != layers.size()) continue;
      for (std::size_t l = 0; l < layers.size(); ++l) arm.fork_utilization[l] += row.mean_forks[l];
      ++used;
    }
    if (used > 0)
      for (double& u : arm.fork_utilization) u /= static_cast<double>(used);
    rep.arms.push_back(std::move(arm));
  }
  return rep;
}

void write_overfork_csv(std::ostream& os, const OverforkReport& report) {
  os << "arm,fork_layer,val_loss,val_perplexity,mean_forks_per_token\n";
  for (const OverforkArm& a : report.arms)
    for (std::size_t l = 0; l < a.fork_layers.size(); ++l)
      os << a.name << ',' << a.fork_layers[l] << ',' << fmt(a.val_loss) << ',' << fmt(a.val_perplexity) << ','
         << fmt(a.fork_utilization[l]) << '\n';
}

}  // namespace tbub
