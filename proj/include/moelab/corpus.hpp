#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Fixed symbol table: ids 0-9 are the digits, then operators and markers.
// Ids in [kSymbols, vocab_size) are deliberately unused headroom.
namespace tok {
constexpr int kPlus = 10;
constexpr int kMinus = 11;
constexpr int kTimes = 12;
constexpr int kEquals = 13;
constexpr int kQuestion = 14;  // <q>
constexpr int kAnswer = 15;    // <a>
constexpr int kEos = 16;       // <eos>
constexpr int kPad = 17;       // <pad>
constexpr int kSymbols = 18;
}  // namespace tok

std::string token_name(int id);
std::vector<int> tokenize(const std::string& text);
std::string detokenize(std::span<const int> ids);

// Modular-arithmetic problem: `difficulty` binary ops over single digits,
// evaluated left to right mod `modulus`.
struct Problem {
  int64_t id = 0;
  int difficulty = 1;
  int modulus = 11;
  std::vector<int> prompt;  // "<q> a op b ... ="
  int answer = 0;           // in [0, modulus)
};

// op_tokens are operator token ids (kPlus/kMinus/kTimes); one fewer than operands.
int eval_left_to_right(std::span<const int> operands, std::span<const int> op_tokens,
                       int modulus);

Problem gen_problem(Rng& rng, int difficulty, int modulus = 11, int64_t id = 0);

std::vector<int> canonical_response(const Problem& p);  // "<a> digits <eos>"
std::vector<int> full_sequence(const Problem& p);       // prompt ++ canonical response

// True iff, after the final "=" of prompt+completion (completion truncated at
// its first <eos>), the tokens are exactly "<a> digit+ <eos>" and the digits
// decode to the ground-truth answer. Malformed input is false, never an error.
bool verify(const Problem& p, std::span<const int> completion);

struct Trajectory {
  int64_t problem_id = 0;
  std::vector<int> prompt;
  std::vector<int> response;
  bool verified = false;
  std::vector<uint8_t> response_mask;  // over prompt ++ response
  int answer = 0;
  int modulus = 11;

  std::vector<int> sequence() const;
};

Trajectory make_trajectory(const Problem& p, std::vector<int> response, bool verified);

struct DecodeConfig {
  double temperature = 1.0;  // 0 = greedy argmax
  int max_new_tokens = 8;
};

// Completion generator: given a problem and a dedicated RNG stream, produce
// completion tokens. Tests inject synthetic samplers through this seam.
using Sampler = std::function<std::vector<int>(const Problem&, Rng&)>;

Sampler model_sampler(const Params& params, const DecodeConfig& decode);

struct HarvestStats {
  int64_t problems = 0;
  int64_t samples_drawn = 0;
  int64_t verified_samples = 0;
  int64_t kept = 0;
};

// At most one verified trajectory per problem (the first verified sample).
// Each problem draws from its own child stream keyed by problem id, so the
// result is identical for any thread count.
std::vector<Trajectory> harvest_trajectories(const Sampler& sampler,
                                             std::span<const Problem> problems,
                                             int samples_per_problem, Rng& rng,
                                             int threads = 1, HarvestStats* stats = nullptr);

std::vector<Trajectory> harvest_trajectories(const Params& params,
                                             std::span<const Problem> problems,
                                             int samples_per_problem, Rng& rng,
                                             const DecodeConfig& decode = {}, int threads = 1,
                                             HarvestStats* stats = nullptr);

// Line-delimited JSON files; loaders re-verify every record.
void save_problems(const std::string& path, std::span<const Problem> problems);
std::vector<Problem> load_problems(const std::string& path);
void save_trajectories(const std::string& path, std::span<const Trajectory> trajectories);
std::vector<Trajectory> load_trajectories(const std::string& path);

// Next-token training targets over a raw sequence: targets[t] = seq[t+1],
// masked at every position except the last.
std::pair<std::vector<int>, std::vector<uint8_t>> lm_targets(std::span<const int> seq);

// Targets over a trajectory's concatenated sequence, masked to positions
// that PREDICT a response token (analysis and preference updates only ever
// touch these).
std::pair<std::vector<int>, std::vector<uint8_t>> response_prediction_targets(
    const Trajectory& t);

}  // namespace moelab
