#include "moelab/corpus.hpp"

#include <atomic>
#include <fstream>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "moelab/numerics.hpp"

namespace moelab {

using nlohmann::json;

std::string token_name(int id) {
  if (id >= 0 && id <= 9) return std::string(1, static_cast<char>('0' + id));
  switch (id) {
    case tok::kPlus: return "+";
    case tok::kMinus: return "-";
    case tok::kTimes: return "*";
    case tok::kEquals: return "=";
    case tok::kQuestion: return "<q>";
    case tok::kAnswer: return "<a>";
    case tok::kEos: return "<eos>";
    case tok::kPad: return "<pad>";
    default:
      if (id >= tok::kSymbols) return "<u" + std::to_string(id) + ">";
      throw InvalidInput("token_name: negative token id");
  }
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    if (w.size() == 1 && w[0] >= '0' && w[0] <= '9') {
      out.push_back(w[0] - '0');
    } else if (w == "+") {
      out.push_back(tok::kPlus);
    } else if (w == "-") {
      out.push_back(tok::kMinus);
    } else if (w == "*") {
      out.push_back(tok::kTimes);
    } else if (w == "=") {
      out.push_back(tok::kEquals);
    } else if (w == "<q>") {
      out.push_back(tok::kQuestion);
    } else if (w == "<a>") {
      out.push_back(tok::kAnswer);
    } else if (w == "<eos>") {
      out.push_back(tok::kEos);
    } else if (w == "<pad>") {
      out.push_back(tok::kPad);
    } else if (w.size() > 3 && w.rfind("<u", 0) == 0 && w.back() == '>') {
      out.push_back(std::stoi(w.substr(2, w.size() - 3)));
    } else {
      throw InvalidInput("tokenize: unknown symbol '" + w + "'");
    }
  }
  return out;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token_name(ids[i]);
  }
  return out;
}

int eval_left_to_right(std::span<const int> operands, std::span<const int> op_tokens,
                       int modulus) {
  if (operands.empty()) throw InvalidInput("eval_left_to_right: no operands");
  if (op_tokens.size() + 1 != operands.size())
    throw InvalidInput("eval_left_to_right: need one more operand than operators");
  if (modulus < 2) throw InvalidInput("eval_left_to_right: modulus must be >= 2");
  long acc = operands[0] % modulus;
  if (acc < 0) acc += modulus;
  for (size_t i = 0; i < op_tokens.size(); ++i) {
    long b = operands[i + 1];
    switch (op_tokens[i]) {
      case tok::kPlus: acc = (acc + b) % modulus; break;
      case tok::kMinus: acc = ((acc - b) % modulus + modulus) % modulus; break;
      case tok::kTimes: acc = (acc * b) % modulus; break;
      default: throw InvalidInput("eval_left_to_right: unknown operator token");
    }
  }
  return static_cast<int>(acc);
}

Problem gen_problem(Rng& rng, int difficulty, int modulus, int64_t id) {
  if (difficulty < 1) throw InvalidInput("gen_problem: difficulty must be >= 1");
  if (modulus < 2 || modulus > 99)
    throw InvalidInput("gen_problem: modulus must be in [2, 99]");
  Problem p;
  p.id = id;
  p.difficulty = difficulty;
  p.modulus = modulus;
  std::vector<int> operands(static_cast<size_t>(difficulty) + 1);
  std::vector<int> ops(static_cast<size_t>(difficulty));
  for (auto& v : operands) v = static_cast<int>(rng.uniform_below(10));
  constexpr int kOps[3] = {tok::kPlus, tok::kMinus, tok::kTimes};
  for (auto& o : ops) o = kOps[rng.uniform_below(3)];
  p.answer = eval_left_to_right(operands, ops, modulus);
  p.prompt.push_back(tok::kQuestion);
  for (size_t i = 0; i < operands.size(); ++i) {
    p.prompt.push_back(operands[i]);
    if (i < ops.size()) p.prompt.push_back(ops[i]);
  }
  p.prompt.push_back(tok::kEquals);
  return p;
}

std::vector<int> canonical_response(const Problem& p) {
  std::vector<int> out{tok::kAnswer};
  std::string digits = std::to_string(p.answer);
  for (char c : digits) out.push_back(c - '0');
  out.push_back(tok::kEos);
  return out;
}

std::vector<int> full_sequence(const Problem& p) {
  std::vector<int> out = p.prompt;
  std::vector<int> resp = canonical_response(p);
  out.insert(out.end(), resp.begin(), resp.end());
  return out;
}

bool verify(const Problem& p, std::span<const int> completion) {
  std::vector<int> seq = p.prompt;
  for (int t : completion) {
    seq.push_back(t);
    if (t == tok::kEos) break;
  }
  // span after the final "="
  size_t eq = seq.size();
  for (size_t i = 0; i < seq.size(); ++i)
    if (seq[i] == tok::kEquals) eq = i;
  if (eq == seq.size()) return false;
  size_t i = eq + 1;
  if (i >= seq.size() || seq[i] != tok::kAnswer) return false;
  ++i;
  long value = 0;
  int digits = 0;
  while (i < seq.size() && seq[i] >= 0 && seq[i] <= 9) {
    value = value * 10 + seq[i];
    ++digits;
    if (digits > 6) return false;
    ++i;
  }
  if (digits == 0) return false;
  if (i >= seq.size() || seq[i] != tok::kEos) return false;
  if (i + 1 != seq.size()) return false;
  return value == p.answer;
}

std::vector<int> Trajectory::sequence() const {
  std::vector<int> out = prompt;
  out.insert(out.end(), response.begin(), response.end());
  return out;
}

Trajectory make_trajectory(const Problem& p, std::vector<int> response, bool verified) {
  Trajectory t;
  t.problem_id = p.id;
  t.prompt = p.prompt;
  t.response = std::move(response);
  t.verified = verified;
  t.answer = p.answer;
  t.modulus = p.modulus;
  t.response_mask.assign(t.prompt.size(), 0);
  t.response_mask.insert(t.response_mask.end(), t.response.size(), 1);
  return t;
}

Sampler model_sampler(const Params& params, const DecodeConfig& decode) {
  if (decode.temperature < 0.0)
    throw InvalidConfig("model_sampler: temperature must be >= 0");
  if (decode.max_new_tokens < 1)
    throw InvalidConfig("model_sampler: max_new_tokens must be >= 1");
  const Params* p = &params;
  DecodeConfig dc = decode;
  return [p, dc](const Problem& prob, Rng& rng) {
    std::vector<int> seq = prob.prompt;
    int budget = std::min<int>(dc.max_new_tokens,
                               p->cfg.max_context - static_cast<int>(seq.size()));
    std::vector<int> out;
    for (int step = 0; step < budget; ++step) {
      Trace tr = forward(*p, std::span<const int>(seq));
      const float* row = tr.logits.data() + (seq.size() - 1) * static_cast<size_t>(p->cfg.vocab_size);
      int V = p->cfg.vocab_size;
      int next;
      if (dc.temperature == 0.0) {
        next = 0;
        for (int v = 1; v < V; ++v)
          if (row[v] > row[next]) next = v;
      } else {
        std::vector<double> scaled(static_cast<size_t>(V));
        for (int v = 0; v < V; ++v) scaled[static_cast<size_t>(v)] = row[v] / dc.temperature;
        std::vector<double> probs = softmax<double>(scaled);
        double u = rng.uniform01();
        double cdf = 0.0;
        next = V - 1;
        for (int v = 0; v < V; ++v) {
          cdf += probs[static_cast<size_t>(v)];
          if (u <= cdf) {
            next = v;
            break;
          }
        }
      }
      out.push_back(next);
      seq.push_back(next);
      if (next == tok::kEos) break;
    }
    return out;
  };
}

std::vector<Trajectory> harvest_trajectories(const Sampler& sampler,
                                             std::span<const Problem> problems,
                                             int samples_per_problem, Rng& rng, int threads,
                                             HarvestStats* stats) {
  if (samples_per_problem < 1)
    throw InvalidConfig("harvest_trajectories: samples_per_problem must be >= 1");
  std::vector<Trajectory> kept(problems.size());
  std::vector<uint8_t> has(problems.size(), 0);
  std::atomic<int64_t> drawn{0}, verified{0};
  Rng base = rng;
  parallel_for(static_cast<int64_t>(problems.size()), threads, [&](int64_t i) {
    const Problem& prob = problems[static_cast<size_t>(i)];
    Rng prob_rng = base.child(static_cast<uint64_t>(prob.id));
    for (int s = 0; s < samples_per_problem; ++s) {
      Rng sample_rng = prob_rng.child(static_cast<uint64_t>(s));
      std::vector<int> completion = sampler(prob, sample_rng);
      drawn.fetch_add(1, std::memory_order_relaxed);
      if (verify(prob, completion)) {
        verified.fetch_add(1, std::memory_order_relaxed);
        kept[static_cast<size_t>(i)] = make_trajectory(prob, std::move(completion), true);
        has[static_cast<size_t>(i)] = 1;
        break;
      }
    }
  });
  std::vector<Trajectory> out;
  for (size_t i = 0; i < problems.size(); ++i)
    if (has[i]) out.push_back(std::move(kept[i]));
  if (stats) {
    stats->problems = static_cast<int64_t>(problems.size());
    stats->samples_drawn = drawn.load();
    stats->verified_samples = verified.load();
    stats->kept = static_cast<int64_t>(out.size());
  }
  return out;
}

std::vector<Trajectory> harvest_trajectories(const Params& params,
                                             std::span<const Problem> problems,
                                             int samples_per_problem, Rng& rng,
                                             const DecodeConfig& decode, int threads,
                                             HarvestStats* stats) {
  return harvest_trajectories(model_sampler(params, decode), problems, samples_per_problem,
                              rng, threads, stats);
}

namespace {

json problem_to_json(const Problem& p) {
  return json{{"id", p.id},         {"difficulty", p.difficulty}, {"modulus", p.modulus},
              {"prompt", p.prompt}, {"answer", p.answer},
              {"response", canonical_response(p)}};
}

Problem problem_from_json(const json& j) {
  Problem p;
  p.id = j.at("id").get<int64_t>();
  p.difficulty = j.at("difficulty").get<int>();
  p.modulus = j.at("modulus").get<int>();
  p.prompt = j.at("prompt").get<std::vector<int>>();
  p.answer = j.at("answer").get<int>();
  return p;
}

// answer the prompt's expression actually evaluates to, or nullopt if the
// prompt is not of the form  <q> a (op b)* =
std::optional<int> implied_answer(const Problem& p) {
  const auto& pr = p.prompt;
  if (p.modulus < 2 || pr.size() < 5 || pr.size() % 2 == 0) return std::nullopt;
  if (pr.front() != tok::kQuestion || pr.back() != tok::kEquals) return std::nullopt;
  std::vector<int> operands, ops;
  for (size_t i = 1; i + 1 < pr.size(); ++i) {
    int t = pr[i];
    if (i % 2 == 1) {
      if (t < 0 || t > 9) return std::nullopt;
      operands.push_back(t);
    } else if (t == tok::kPlus || t == tok::kMinus || t == tok::kTimes) {
      ops.push_back(t);
    } else {
      return std::nullopt;
    }
  }
  return eval_left_to_right(operands, ops, p.modulus);
}

std::vector<json> read_jsonl(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw CorruptData(std::string(what) + ": cannot open " + path);
  std::vector<json> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw CorruptData(std::string(what) + ": bad json at " + path + ":" +
                        std::to_string(lineno));
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace

void save_problems(const std::string& path, std::span<const Problem> problems) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("save_problems: cannot open " + path);
  for (const auto& p : problems) out << problem_to_json(p).dump() << '\n';
  if (!out) throw InvalidInput("save_problems: write failed for " + path);
}

std::vector<Problem> load_problems(const std::string& path) {
  std::vector<Problem> out;
  for (const auto& j : read_jsonl(path, "load_problems")) {
    Problem p;
    try {
      p = problem_from_json(j);
    } catch (const json::exception& e) {
      throw CorruptData(std::string("load_problems: ") + e.what());
    }
    std::optional<int> implied = implied_answer(p);
    if (!implied || *implied != p.answer || !verify(p, canonical_response(p)))
      throw CorruptData("load_problems: record fails self-verification, id " +
                        std::to_string(p.id));
    out.push_back(std::move(p));
  }
  return out;
}

void save_trajectories(const std::string& path, std::span<const Trajectory> trajectories) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("save_trajectories: cannot open " + path);
  for (const auto& t : trajectories) {
    json j{{"problem_id", t.problem_id},
           {"prompt", t.prompt},
           {"response", t.response},
           {"verified", t.verified},
           {"response_mask", t.response_mask},
           {"answer", t.answer},
           {"modulus", t.modulus}};
    out << j.dump() << '\n';
  }
  if (!out) throw InvalidInput("save_trajectories: write failed for " + path);
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::vector<Trajectory> out;
  for (const auto& j : read_jsonl(path, "load_trajectories")) {
    Trajectory t;
    try {
      t.problem_id = j.at("problem_id").get<int64_t>();
      t.prompt = j.at("prompt").get<std::vector<int>>();
      t.response = j.at("response").get<std::vector<int>>();
      t.verified = j.at("verified").get<bool>();
      t.response_mask = j.at("response_mask").get<std::vector<uint8_t>>();
      t.answer = j.at("answer").get<int>();
      t.modulus = j.at("modulus").get<int>();
    } catch (const json::exception& e) {
      throw CorruptData(std::string("load_trajectories: ") + e.what());
    }
    Problem p;
    p.id = t.problem_id;
    p.modulus = t.modulus;
    p.prompt = t.prompt;
    p.answer = t.answer;
    if (!t.verified || !verify(p, t.response))
      throw CorruptData("load_trajectories: record fails re-verification, problem " +
                        std::to_string(t.problem_id));
    Trajectory expect = make_trajectory(p, t.response, true);
    if (t.response_mask != expect.response_mask)
      throw CorruptData("load_trajectories: inconsistent response mask, problem " +
                        std::to_string(t.problem_id));
    out.push_back(std::move(t));
  }
  return out;
}

std::pair<std::vector<int>, std::vector<uint8_t>> lm_targets(std::span<const int> seq) {
  size_t L = seq.size();
  std::vector<int> targets(L, 0);
  std::vector<uint8_t> mask(L, 0);
  for (size_t t = 0; t + 1 < L; ++t) {
    targets[t] = seq[t + 1];
    mask[t] = 1;
  }
  return {std::move(targets), std::move(mask)};
}

std::pair<std::vector<int>, std::vector<uint8_t>> response_prediction_targets(
    const Trajectory& tr) {
  std::vector<int> seq = tr.sequence();
  size_t L = seq.size();
  std::vector<int> targets(L, 0);
  std::vector<uint8_t> mask(L, 0);
  for (size_t t = 0; t + 1 < L; ++t) {
    targets[t] = seq[t + 1];
    mask[t] = tr.response_mask[t + 1];
  }
  return {std::move(targets), std::move(mask)};
}

}  // namespace moelab
