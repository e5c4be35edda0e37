#include <fstream>

#include "doctest.h"
#include "moelab/corpus.hpp"
#include "support.hpp"

using namespace moelab;
using testsupport::TempDir;

TEST_CASE("tokenize and detokenize round-trip") {
  std::string text = "<q> 3 + 4 * 2 = <a> 1 0 <eos>";
  auto ids = tokenize(text);
  CHECK(detokenize(ids) == text);
  CHECK(ids.front() == tok::kQuestion);
  CHECK(ids.back() == tok::kEos);
  CHECK_THROWS_AS(tokenize("3 % 4"), InvalidInput);
}

TEST_CASE("eval_left_to_right is strictly left-to-right, mod wraps negatives") {
  std::vector<int> operands{3, 4, 2};
  std::vector<int> ops{tok::kPlus, tok::kTimes};
  CHECK(eval_left_to_right(operands, ops, 11) == (3 + 4) * 2 % 11);  // 14 % 11 = 3

  std::vector<int> sub_ops{tok::kMinus};
  std::vector<int> sub_operands{2, 9};
  CHECK(eval_left_to_right(sub_operands, sub_ops, 11) == 4);  // -7 mod 11

  CHECK_THROWS_AS(eval_left_to_right({}, {}, 11), InvalidInput);
  CHECK_THROWS_AS(eval_left_to_right(operands, ops, 1), InvalidInput);
  std::vector<int> bad_op{tok::kEquals};
  std::vector<int> two{1, 2};
  CHECK_THROWS_AS(eval_left_to_right(two, bad_op, 11), InvalidInput);
}

TEST_CASE("gen_problem is deterministic and well-formed") {
  Rng a(100), b(100);
  Problem p = gen_problem(a, 3, 11, 42);
  Problem q = gen_problem(b, 3, 11, 42);
  CHECK(p.prompt == q.prompt);
  CHECK(p.answer == q.answer);
  CHECK(p.id == 42);
  CHECK(p.prompt.front() == tok::kQuestion);
  CHECK(p.prompt.back() == tok::kEquals);
  // difficulty d => d+1 operands, d operators, plus <q> and =
  CHECK(p.prompt.size() == size_t(2 * 3 + 1) + 2);
  CHECK(p.answer >= 0);
  CHECK(p.answer < 11);
  CHECK(verify(p, canonical_response(p)));
  CHECK_THROWS_AS(gen_problem(a, 0, 11, 1), InvalidInput);
  CHECK_THROWS_AS(gen_problem(a, 1, 1, 1), InvalidInput);
}

TEST_CASE("verify demands exactly '<a> digit+ <eos>' after the final '='") {
  Rng rng(7);
  Problem p = gen_problem(rng, 2, 11, 0);
  auto good = canonical_response(p);
  CHECK(verify(p, good));

  // trailing garbage after <eos> is ignored (completion truncated there)
  auto trailing = good;
  trailing.push_back(5);
  trailing.push_back(tok::kTimes);
  CHECK(verify(p, trailing));

  // wrong answer
  auto wrong = good;
  wrong[1] = (wrong[1] + 1) % 10;
  if (p.answer < 10) CHECK_FALSE(verify(p, wrong));

  // missing <eos>
  std::vector<int> no_eos(good.begin(), good.end() - 1);
  CHECK_FALSE(verify(p, no_eos));

  // missing <a>
  std::vector<int> no_answer(good.begin() + 1, good.end());
  CHECK_FALSE(verify(p, no_answer));

  // no digits at all
  std::vector<int> empty_digits{tok::kAnswer, tok::kEos};
  if (p.answer != 0) CHECK_FALSE(verify(p, empty_digits));

  // interloper between digits and <eos>
  auto interloper = good;
  interloper.insert(interloper.end() - 1, tok::kPlus);
  CHECK_FALSE(verify(p, interloper));

  // empty completion
  CHECK_FALSE(verify(p, std::vector<int>{}));
}

TEST_CASE("verify accepts only the value, not a specific digit string length") {
  // leading zeros change the digit string but not the decoded value
  Rng rng(3);
  Problem p = gen_problem(rng, 1, 11, 0);
  std::vector<int> padded{tok::kAnswer, 0};
  for (char c : std::to_string(p.answer)) padded.push_back(c - '0');
  padded.push_back(tok::kEos);
  CHECK(verify(p, padded));  // "0d" decodes to d

  // but absurdly long digit runs are rejected
  std::vector<int> monster{tok::kAnswer, 0, 0, 0, 0, 0, 0, 0};
  for (char c : std::to_string(p.answer)) monster.push_back(c - '0');
  monster.push_back(tok::kEos);
  CHECK_FALSE(verify(p, monster));
}

TEST_CASE("make_trajectory masks exactly the response tokens") {
  Rng rng(9);
  Problem p = gen_problem(rng, 2, 11, 5);
  auto resp = canonical_response(p);
  Trajectory t = make_trajectory(p, resp, true);
  CHECK(t.sequence().size() == p.prompt.size() + resp.size());
  CHECK(t.response_mask.size() == t.sequence().size());
  for (size_t i = 0; i < p.prompt.size(); ++i) CHECK(t.response_mask[i] == 0);
  for (size_t i = p.prompt.size(); i < t.response_mask.size(); ++i)
    CHECK(t.response_mask[i] == 1);
}

TEST_CASE("lm_targets shifts by one and unmasks all but the last position") {
  std::vector<int> seq{4, 7, 1, 9};
  auto [targets, mask] = lm_targets(std::span<const int>(seq));
  CHECK(targets == std::vector<int>{7, 1, 9, 0});
  CHECK(mask == std::vector<uint8_t>{1, 1, 1, 0});
}

TEST_CASE("response_prediction_targets masks positions that predict response tokens") {
  Rng rng(9);
  Problem p = gen_problem(rng, 1, 11, 5);
  Trajectory t = make_trajectory(p, canonical_response(p), true);
  auto [targets, mask] = response_prediction_targets(t);
  auto seq = t.sequence();
  REQUIRE(mask.size() == seq.size());
  // the position just before <a> predicts it; the last position predicts nothing
  size_t first_resp = p.prompt.size();
  for (size_t i = 0; i + 1 < seq.size(); ++i) {
    CHECK(targets[i] == seq[i + 1]);
    CHECK(mask[i] == (i + 1 >= first_resp ? 1 : 0));
  }
  CHECK(mask.back() == 0);
  // masked target count equals response length
  int masked = 0;
  for (uint8_t m : mask) masked += m;
  CHECK(masked == int(t.response.size()));
}

TEST_CASE("problem files round-trip and reject corruption") {
  TempDir dir("problems");
  Rng rng(11);
  std::vector<Problem> ps;
  for (int i = 0; i < 5; ++i) ps.push_back(gen_problem(rng, 1 + i % 3, 11, i));
  std::string path = dir.file("p.jsonl");
  save_problems(path, ps);
  auto loaded = load_problems(path);
  REQUIRE(loaded.size() == ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    CHECK(loaded[i].id == ps[i].id);
    CHECK(loaded[i].prompt == ps[i].prompt);
    CHECK(loaded[i].answer == ps[i].answer);
  }

  std::string bad = dir.file("bad.jsonl");
  std::ofstream(bad) << "{not json\n";
  CHECK_THROWS_AS(load_problems(bad), CorruptData);

  // a record whose stored answer contradicts its prompt fails self-verification
  std::string lied = dir.file("lied.jsonl");
  Problem liar = ps[0];
  liar.answer = (liar.answer + 1) % liar.modulus;
  save_problems(lied, std::vector<Problem>{liar});
  CHECK_THROWS_AS(load_problems(lied), CorruptData);

  CHECK_THROWS_AS(load_problems(dir.file("missing.jsonl")), CorruptData);
}

TEST_CASE("trajectory files round-trip and re-verify on load") {
  TempDir dir("trajs");
  Rng rng(13);
  std::vector<Trajectory> ts;
  for (int i = 0; i < 4; ++i) {
    Problem p = gen_problem(rng, 2, 11, i);
    ts.push_back(make_trajectory(p, canonical_response(p), true));
  }
  std::string path = dir.file("t.jsonl");
  save_trajectories(path, ts);
  auto loaded = load_trajectories(path);
  REQUIRE(loaded.size() == ts.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    CHECK(loaded[i].problem_id == ts[i].problem_id);
    CHECK(loaded[i].response == ts[i].response);
    CHECK(loaded[i].response_mask == ts[i].response_mask);
  }

  // tamper with a response so it no longer verifies
  Trajectory bad_t = ts[0];
  bad_t.response[1] = (bad_t.response[1] + 1) % 10;
  std::string tampered = dir.file("tampered.jsonl");
  save_trajectories(tampered, std::vector<Trajectory>{bad_t});
  CHECK_THROWS_AS(load_trajectories(tampered), CorruptData);
}

TEST_CASE("harvest keeps at most one verified trajectory per problem") {
  Rng rng(17);
  std::vector<Problem> ps;
  for (int i = 0; i < 10; ++i) ps.push_back(gen_problem(rng, 1, 11, i));

  // synthetic sampler: even ids sometimes answer correctly, odd ids never
  Sampler sampler = [](const Problem& p, Rng& r) -> std::vector<int> {
    bool correct = p.id % 2 == 0 && r.next_u64() % 2 == 0;
    if (correct) return canonical_response(p);
    return {tok::kAnswer, static_cast<int>((p.answer + 1) % 10), tok::kEos};
  };

  Rng h(99);
  HarvestStats stats;
  auto kept = harvest_trajectories(sampler, ps, 8, h, 1, &stats);
  CHECK(stats.problems == 10);
  CHECK(stats.kept == int64_t(kept.size()));
  CHECK(stats.verified_samples == stats.kept);  // stop at first verified sample
  for (const auto& t : kept) {
    CHECK(t.verified);
    CHECK(t.problem_id % 2 == 0);
  }
  // no duplicate problems
  for (size_t i = 1; i < kept.size(); ++i) CHECK(kept[i].problem_id > kept[i - 1].problem_id);
}

TEST_CASE("harvest is identical for any thread count") {
  Rng rng(19);
  std::vector<Problem> ps;
  for (int i = 0; i < 24; ++i) ps.push_back(gen_problem(rng, 1 + i % 3, 11, i));
  auto p_model = testsupport::tiny_params(41);

  DecodeConfig dc;
  dc.temperature = 1.0;
  dc.max_new_tokens = 6;
  Rng r1(7), r4(7);
  auto t1 = harvest_trajectories(p_model, ps, 3, r1, dc, 1);
  auto t4 = harvest_trajectories(p_model, ps, 3, r4, dc, 4);
  REQUIRE(t1.size() == t4.size());
  for (size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].problem_id == t4[i].problem_id);
    CHECK(t1[i].response == t4[i].response);
  }
}

TEST_CASE("greedy decoding is sampler-noise independent") {
  auto p_model = testsupport::tiny_params(43);
  Rng rng(3);
  Problem prob = gen_problem(rng, 1, 11, 0);
  DecodeConfig dc;
  dc.temperature = 0.0;
  dc.max_new_tokens = 5;
  auto sampler = model_sampler(p_model, dc);
  Rng s1(1), s2(999);  // different streams, same greedy result
  CHECK(sampler(prob, s1) == sampler(prob, s2));
  CHECK_THROWS_AS(model_sampler(p_model, DecodeConfig{-1.0, 4}), InvalidConfig);
  CHECK_THROWS_AS(model_sampler(p_model, DecodeConfig{1.0, 0}), InvalidConfig);
}
