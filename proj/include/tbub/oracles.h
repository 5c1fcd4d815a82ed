#pragma once

// Brute-force reference implementations. None of these call into the
// forking, blocks or model code paths they are used to check.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tbub/numcore.h"

namespace tbub::oracle {

struct Candidate {
  std::size_t row;
  bool keep;
  bool forced;
  double score;
};

// Materializes all 2n candidates, sorts them with a lexicographic key and
// returns per-row (keep, fork) flags of the first `budget`.
struct Selection {
  std::vector<char> keep, fork;
};
Selection topk(std::span<const double> log_fork_hat, std::span<const double> log_keep_forced,
               std::span<const std::size_t> fork_rank, std::size_t budget);

// One full fork step on plain vectors: scores from an affine map and
// log-sigmoid, selection by topk(), assembly with fork embedding.
struct StreamRow {
  std::vector<double> x;
  std::size_t origin;
  std::size_t rank;
  double log_cum;
};
std::vector<StreamRow> fork_step(const std::vector<StreamRow>& rows, const Matrix& weight, const Matrix& bias,
                                 const std::vector<double>& embedding, std::size_t budget);

// Standard 2x2 rotation for the pair (2m, 2m+1) of each head at the given angle scale.
std::vector<double> rotate(std::span<const double> x, double position, std::size_t head_dim, double base);

// log of sum_j w_j softmax_j computed in long-double probability space.
std::vector<double> mixture(const std::vector<std::vector<double>>& stream_log_probs,
                            const std::vector<double>& log_cum);

double naive_logsumexp(std::span<const double> x);

// Randomized oracle suites shared by the CLI and the acceptance run.
struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t mismatches = 0;
  double max_abs_err = 0.0;
};
SuiteResult run_topk_suite(std::size_t cases, std::uint64_t seed);
SuiteResult run_fork_step_suite(std::size_t cases, std::uint64_t seed);
SuiteResult run_logsumexp_suite(std::size_t cases, std::uint64_t seed);
SuiteResult run_rope_suite(std::size_t cases, std::uint64_t seed);

}  // namespace tbub::oracle
