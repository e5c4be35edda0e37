#include "moelab/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "moelab/checkpoint.hpp"

namespace moelab {

namespace fs = std::filesystem;
using nlohmann::json;

void CorpusSettings::validate() const {
  if (train_problems < 1) throw InvalidConfig("CorpusSettings: train_problems must be >= 1");
  if (eval_problems < 1) throw InvalidConfig("CorpusSettings: eval_problems must be >= 1");
  if (difficulty_min < 1 || difficulty_max > 6 || difficulty_min > difficulty_max)
    throw InvalidConfig("CorpusSettings: difficulty range must satisfy 1 <= min <= max <= 6");
  if (modulus < 2 || modulus > 99) throw InvalidConfig("CorpusSettings: modulus must be in [2, 99]");
  if (train_problems > 900000) throw InvalidConfig("CorpusSettings: train split too large");
}

void HarvestSettings::validate() const {
  if (samples_per_problem < 1)
    throw InvalidConfig("HarvestSettings: samples_per_problem must be >= 1");
  if (decode.temperature < 0) throw InvalidConfig("HarvestSettings: temperature must be >= 0");
  if (decode.max_new_tokens < 1) throw InvalidConfig("HarvestSettings: max_new_tokens must be >= 1");
}

void PasskSettings::validate() const {
  if (n < 1) throw InvalidConfig("PasskSettings: n must be >= 1");
  if (k_values.empty()) throw InvalidConfig("PasskSettings: empty K grid");
  for (int K : k_values)
    if (K < 1 || K > n) throw InvalidConfig("PasskSettings: K values must be in [1, n]");
  if (bootstrap < 1) throw InvalidConfig("PasskSettings: bootstrap must be >= 1");
  if (decode.temperature < 0) throw InvalidConfig("PasskSettings: temperature must be >= 0");
  if (decode.max_new_tokens < 1) throw InvalidConfig("PasskSettings: max_new_tokens must be >= 1");
}

void Profile::validate() const {
  if (threads < 1) throw InvalidConfig("Profile: threads must be >= 1");
  model.validate();
  corpus.validate();
  train.validate();
  harvest.validate();
  analysis.validate();
  epo.validate();
  passk.validate();
}

void Profile::reseed(uint64_t master) {
  Rng root(master);
  corpus.seed = root.child(1).seed();
  train.seed = root.child(2).seed();
  harvest.seed = root.child(3).seed();
  analysis.seed = root.child(4).seed();
  epo.seed = root.child(5).seed();
  passk.seed = root.child(6).seed();
}

Profile default_profile() {
  Profile p;
  p.name = "default";
  return p;
}

// Calibrated so the trained model sits mid-fit on the harder problems:
// k = 1 makes every route intervention a full expert swap (confident tokens
// stay routing-sensitive), and difficulty up to 6 leaves genuinely hard
// tokens for the preference update to work on.
Profile smoke_profile() {
  Profile p;
  p.name = "smoke";
  p.model.width = 32;
  p.model.active_experts = 1;
  p.model.expert_hidden = 64;
  p.model.max_context = 48;
  p.corpus.train_problems = 200;
  p.corpus.eval_problems = 20;
  p.train.steps = 300;
  p.train.lr = 1e-3;
  p.analysis.alternatives = 16;
  p.analysis.pool_size = 8;
  p.epo.alternatives = 16;
  p.epo.pool_size = 8;
  p.passk.n = 40;
  p.passk.k_values = {1, 2, 4, 8, 16, 32};
  p.passk.bootstrap = 500;
  return p;
}

Profile profile_by_name(const std::string& name) {
  if (name == "default") return default_profile();
  if (name == "smoke") return smoke_profile();
  throw InvalidConfig("unknown profile: " + name + " (expected 'default' or 'smoke')");
}

namespace {

std::string hex16(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string basename_of(const std::string& path) { return fs::path(path).filename().string(); }

json model_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},       {"width", c.width},
          {"blocks", c.blocks},               {"experts_per_layer", c.experts_per_layer},
          {"active_experts", c.active_experts}, {"shared_experts", c.shared_experts},
          {"expert_hidden", c.expert_hidden}, {"max_context", c.max_context},
          {"attention_enabled", c.attention_enabled}};
}

json corpus_json(const CorpusSettings& c) {
  return {{"train_problems", c.train_problems}, {"eval_problems", c.eval_problems},
          {"difficulty_min", c.difficulty_min}, {"difficulty_max", c.difficulty_max},
          {"modulus", c.modulus},               {"seed", c.seed}};
}

json train_json(const TrainConfig& c) {
  return {{"lr", c.lr},           {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
          {"steps", c.steps},     {"lambda_lb", c.lambda_lb},       {"grad_clip", c.grad_clip},
          {"seed", c.seed}};
}

json harvest_json(const HarvestSettings& c) {
  return {{"samples_per_problem", c.samples_per_problem},
          {"temperature", c.decode.temperature},
          {"max_new_tokens", c.decode.max_new_tokens},
          {"seed", c.seed}};
}

json analysis_json(const AnalysisConfig& c) {
  return {{"alternatives", c.alternatives}, {"pool_size", c.pool_size},
          {"noise_scale", c.noise_scale},   {"layer", c.layer},
          {"k_list", c.k_list},             {"hi", c.hi},
          {"lo", c.lo},                     {"seed", c.seed}};
}

json epo_json(const EpoConfig& c) {
  return {{"layer", c.layer},           {"tau", c.tau},
          {"alternatives", c.alternatives}, {"pool_size", c.pool_size},
          {"noise_scale", c.noise_scale}, {"beta", c.beta},
          {"lr", c.lr},                  {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},    {"batch_size", c.batch_size},
          {"epochs", c.epochs},          {"seed", c.seed}};
}

json passk_json(const PasskSettings& c) {
  return {{"n", c.n},
          {"k_values", c.k_values},
          {"bootstrap", c.bootstrap},
          {"temperature", c.decode.temperature},
          {"max_new_tokens", c.decode.max_new_tokens},
          {"seed", c.seed}};
}

struct InputRef {
  std::string role;
  std::string path;
  std::string hash;
  json meta;  // null when no sidecar exists
};

json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PipelineError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptData(path + ": " + e.what());
  }
  return j;
}

// Checks an input artifact against its sidecar: a content hash that no
// longer matches means the file changed after it was produced.
InputRef use_input(const std::string& role, const std::string& path, bool force) {
  if (!fs::exists(path)) throw PipelineError("missing input: " + path);
  InputRef ref{role, path, file_hash_hex(path), json()};
  std::string meta_path = Workspace::meta(path);
  if (fs::exists(meta_path)) {
    ref.meta = load_json_file(meta_path);
    std::string recorded = ref.meta.value("artifact", json::object()).value("content_hash", "");
    if (!recorded.empty() && recorded != ref.hash && !force)
      throw PipelineError(basename_of(path) +
                          " does not match its meta sidecar (pass --force to override)");
  }
  return ref;
}

// Refuses an artifact whose recorded lineage disagrees with the other input
// actually being passed (e.g. trajectories harvested from a different
// checkpoint).
void require_lineage(const InputRef& artifact, const std::string& upstream_role,
                     const InputRef& upstream, bool force) {
  if (artifact.meta.is_null() || force) return;
  for (const auto& rec : artifact.meta.value("inputs", json::array())) {
    if (rec.value("role", "") != upstream_role) continue;
    if (rec.value("content_hash", "") != upstream.hash)
      throw PipelineError(basename_of(artifact.path) + " was produced from a different " +
                          upstream_role + " than " + basename_of(upstream.path) +
                          " (pass --force to override)");
  }
}

void write_meta(const std::string& artifact_path, const std::string& command, const json& config,
                const std::vector<InputRef>& inputs, const json& extra = json()) {
  json meta;
  meta["command"] = command;
  meta["config"] = config;
  std::string canon = config.dump();
  meta["config_hash"] = hex16(hash_bytes(canon.data(), canon.size()));
  meta["artifact"] = {{"file", basename_of(artifact_path)},
                      {"content_hash", file_hash_hex(artifact_path)}};
  json ins = json::array();
  for (const auto& in : inputs)
    ins.push_back({{"role", in.role}, {"file", basename_of(in.path)}, {"content_hash", in.hash}});
  meta["inputs"] = ins;
  if (!extra.is_null()) meta["extra"] = extra;
  std::ofstream out(Workspace::meta(artifact_path), std::ios::binary);
  if (!out) throw PipelineError("cannot write " + Workspace::meta(artifact_path));
  out << meta.dump(2) << "\n";
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PipelineError("cannot write " + path);
  out << text;
}

std::string analysis_comment(const AnalysisConfig& c, int resolved_layer) {
  std::ostringstream os;
  os << "layer=" << resolved_layer << " alternatives=" << c.alternatives
     << " pool_size=" << c.pool_size << " noise_scale=" << c.noise_scale << " hi=" << c.hi
     << " lo=" << c.lo << " seed=" << c.seed;
  return os.str();
}

std::vector<std::string> metric_labels(std::span<const int> k_list) {
  std::vector<std::string> rows;
  rows.push_back("Tokens (%)");
  for (int K : k_list) rows.push_back("Top-" + std::to_string(K) + " (%)");
  rows.push_back("p_std (%)");
  rows.push_back("p_best (%)");
  rows.push_back("Gap (pp)");
  return rows;
}

json summary_json(const AnalysisResult& r, std::span<const int> k_list) {
  json bins = json::object();
  for (const auto& [bin, st] : r.summary.bins) {
    json b;
    b["count"] = st.count;
    b["Tokens (%)"] = st.share_pct;
    for (size_t i = 0; i < k_list.size(); ++i)
      b["Top-" + std::to_string(k_list[i]) + " (%)"] = st.topk_pct[i];
    b["p_std (%)"] = st.mean_p_std_pct;
    b["p_best (%)"] = st.mean_p_best_pct;
    b["Gap (pp)"] = st.mean_gap_pp;
    bins[bin_name(bin)] = b;
  }
  json j;
  j["layer"] = r.layer;
  j["total_tokens"] = r.summary.total_tokens;
  j["k_list"] = std::vector<int>(k_list.begin(), k_list.end());
  j["bins"] = bins;
  return j;
}

}  // namespace

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PipelineError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string bytes = buf.str();
  return hex16(hash_bytes(bytes.data(), bytes.size()));
}

void run_gen_corpus(const Profile& p, const Workspace& ws) {
  p.validate();
  fs::create_directories(ws.dir);
  const CorpusSettings& cs = p.corpus;
  Rng root(cs.seed);
  auto gen_split = [&](int count, int64_t id_base) {
    std::vector<Problem> out;
    out.reserve(static_cast<size_t>(count));
    int span = cs.difficulty_max - cs.difficulty_min + 1;
    for (int i = 0; i < count; ++i) {
      int64_t id = id_base + i;
      Rng prng = root.child(static_cast<uint64_t>(id));
      out.push_back(gen_problem(prng, cs.difficulty_min + i % span, cs.modulus, id));
    }
    return out;
  };
  // Disjoint id ranges keep the splits disjoint by construction.
  auto train_split = gen_split(cs.train_problems, 0);
  auto eval_split = gen_split(cs.eval_problems, 1000000);
  save_problems(ws.corpus_train(), train_split);
  save_problems(ws.corpus_eval(), eval_split);
  json cfg = corpus_json(cs);
  write_meta(ws.corpus_train(), "gen-corpus", cfg, {}, {{"split", "train"}});
  write_meta(ws.corpus_eval(), "gen-corpus", cfg, {}, {{"split", "eval"}});
}

void run_pretrain(const Profile& p, const Workspace& ws, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef corpus_in = use_input("problems", ws.corpus_train(), force);
  auto problems = load_problems(ws.corpus_train());
  std::vector<std::vector<int>> seqs;
  seqs.reserve(problems.size());
  for (const auto& pr : problems) seqs.push_back(full_sequence(pr));

  Rng init_rng = Rng(p.train.seed).child(1);
  Params init = init_params<float>(p.model, init_rng);
  TrainResult tr = train(init, seqs, p.train);
  save_checkpoint(tr.params, ws.checkpoint("standard"));
  save_train_log(ws.train_log(), tr.log);

  json cfg = {{"model", model_json(p.model)}, {"train", train_json(p.train)}};
  json extra = {{"steps", tr.log.size()},
                {"final_lm_loss", tr.log.empty() ? 0.0 : tr.log.back().lm_loss}};
  write_meta(ws.checkpoint("standard"), "pretrain", cfg, {corpus_in}, extra);
  write_meta(ws.train_log(), "pretrain", cfg, {corpus_in});
}

void run_harvest(const Profile& p, const Workspace& ws, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef ckpt_in = use_input("checkpoint", ws.checkpoint("standard"), force);
  InputRef prob_in = use_input("problems", ws.corpus_train(), force);
  require_lineage(ckpt_in, "problems", prob_in, force);

  Params params = load_checkpoint(ws.checkpoint("standard"));
  auto problems = load_problems(ws.corpus_train());
  HarvestStats stats;
  Rng rng(p.harvest.seed);
  auto trajectories = harvest_trajectories(params, problems, p.harvest.samples_per_problem, rng,
                                           p.harvest.decode, p.threads, &stats);
  if (trajectories.empty())
    throw PipelineError("harvest kept no verified trajectories; nothing downstream can run");
  save_trajectories(ws.trajectories(), trajectories);

  json extra = {{"problems", stats.problems},
                {"samples_drawn", stats.samples_drawn},
                {"verified_samples", stats.verified_samples},
                {"kept", stats.kept}};
  write_meta(ws.trajectories(), "harvest", harvest_json(p.harvest), {ckpt_in, prob_in}, extra);
}

void run_analyze(const Profile& p, const Workspace& ws, const std::string& tag, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef ckpt_in = use_input("checkpoint", ws.checkpoint(tag), force);
  InputRef traj_in = use_input("trajectories", ws.trajectories(), force);
  // Cross-checkpoint audits (e.g. the updated router on the same trajectories)
  // are intentional, so lineage is only enforced for the standard tag.
  if (tag == "standard") require_lineage(traj_in, "checkpoint", ckpt_in, force);

  Params params = load_checkpoint(ws.checkpoint(tag));
  auto trajectories = load_trajectories(ws.trajectories());
  AnalysisConfig cfg = p.analysis;
  cfg.threads = p.threads;
  AnalysisResult result = run_analysis(params, trajectories, cfg);

  write_token_reports_csv(ws.analysis_csv(tag), result.reports,
                          analysis_comment(cfg, result.layer));
  write_text_file(ws.analysis_summary(tag), summary_json(result, cfg.k_list).dump(2) + "\n");

  json cfgj = analysis_json(cfg);
  write_meta(ws.analysis_csv(tag), "analyze", cfgj, {ckpt_in, traj_in});
  write_meta(ws.analysis_summary(tag), "analyze", cfgj, {ckpt_in, traj_in},
             {{"total_tokens", result.summary.total_tokens}});
}

void run_epo_stage(const Profile& p, const Workspace& ws, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef ckpt_in = use_input("checkpoint", ws.checkpoint("standard"), force);
  InputRef traj_in = use_input("trajectories", ws.trajectories(), force);
  require_lineage(traj_in, "checkpoint", ckpt_in, force);

  Params params = load_checkpoint(ws.checkpoint("standard"));
  auto trajectories = load_trajectories(ws.trajectories());
  EpoConfig cfg = p.epo;
  cfg.threads = p.threads;
  EpoResult res = epo_train(params, trajectories, cfg);

  save_checkpoint(res.params, ws.checkpoint("epo"));
  save_epo_log(ws.epo_log(), res.log);
  json diff = {{"changed_tensors", res.changed_tensors},
               {"hard_tokens", res.hard_tokens},
               {"hard_ce_before", res.hard_ce_before},
               {"hard_ce_after", res.hard_ce_after}};
  write_text_file(ws.epo_diff(), diff.dump(2) + "\n");

  json cfgj = epo_json(cfg);
  write_meta(ws.checkpoint("epo"), "epo", cfgj, {ckpt_in, traj_in}, diff);
  write_meta(ws.epo_log(), "epo", cfgj, {ckpt_in, traj_in});
  write_meta(ws.epo_diff(), "epo", cfgj, {ckpt_in, traj_in});
}

void run_passk_stage(const Profile& p, const Workspace& ws, const std::string& tag, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef ckpt_in = use_input("checkpoint", ws.checkpoint(tag), force);
  InputRef prob_in = use_input("problems", ws.corpus_eval(), force);

  Params params = load_checkpoint(ws.checkpoint(tag));
  auto problems = load_problems(ws.corpus_eval());
  const PasskSettings& ps = p.passk;
  PassKEval ev = eval_passk(params, problems, ps.n, ps.decode, ps.k_values, ps.bootstrap,
                            Rng(ps.seed), p.threads);

  save_outcomes_csv(ws.passk_outcomes(tag), ev.outcomes);
  save_curve_csv(ws.passk_curve(tag), ev.curve);
  json cfgj = passk_json(ps);
  write_meta(ws.passk_outcomes(tag), "passk", cfgj, {ckpt_in, prob_in}, {{"tag", tag}});
  write_meta(ws.passk_curve(tag), "passk", cfgj, {ckpt_in, prob_in}, {{"tag", tag}});
}

void run_report(const Profile& p, const Workspace& ws, bool force) {
  p.validate();
  fs::create_directories(ws.dir);
  InputRef an_in = use_input("analysis", ws.analysis_csv("standard"), force);
  InputRef std_in = use_input("curve_standard", ws.passk_curve("standard"), force);
  InputRef epo_in = use_input("curve_epo", ws.passk_curve("epo"), force);

  auto reports = load_token_reports_csv(ws.analysis_csv("standard"));
  BinSummary summary = aggregate(reports, p.analysis.k_list);

  static const Bin kBins[] = {Bin::Confident, Bin::Ambiguous, Bin::Fragile};
  auto labels = metric_labels(p.analysis.k_list);
  std::ostringstream bins_csv;
  bins_csv << "metric,Confident,Ambiguous,Fragile\n";
  char cell[64];
  for (size_t row = 0; row < labels.size(); ++row) {
    bins_csv << labels[row];
    for (Bin b : kBins) {
      const BinStats* st = summary.find(b);
      if (!st) {
        bins_csv << ",absent";
        continue;
      }
      double v = 0.0;
      if (labels[row] == "Tokens (%)") v = st->share_pct;
      else if (labels[row] == "p_std (%)") v = st->mean_p_std_pct;
      else if (labels[row] == "p_best (%)") v = st->mean_p_best_pct;
      else if (labels[row] == "Gap (pp)") v = st->mean_gap_pp;
      else v = st->topk_pct[row - 1];  // Top-K rows directly follow Tokens
      std::snprintf(cell, sizeof cell, ",%.2f", v);
      bins_csv << cell;
    }
    bins_csv << "\n";
  }
  write_text_file(ws.report_bins(), bins_csv.str());

  std::ostringstream curves;
  curves << "tag,K,mean,ci_lo,ci_hi\n";
  char line[192];
  for (const auto& [tag, path] :
       {std::pair<std::string, std::string>{"standard", ws.passk_curve("standard")},
        std::pair<std::string, std::string>{"epo", ws.passk_curve("epo")}}) {
    PassKCurve c = load_curve_csv(path);
    for (size_t i = 0; i < c.k_values.size(); ++i) {
      std::snprintf(line, sizeof line, "%s,%d,%.10g,%.10g,%.10g\n", tag.c_str(), c.k_values[i],
                    c.mean[i], c.ci_lo[i], c.ci_hi[i]);
      curves << line;
    }
  }
  write_text_file(ws.report_passk(), curves.str());

  json cfgj = {{"k_list", p.analysis.k_list}};
  write_meta(ws.report_bins(), "report", cfgj, {an_in});
  write_meta(ws.report_passk(), "report", cfgj, {std_in, epo_in});
}

void run_full_pipeline(const Profile& p, const Workspace& ws,
                       const std::function<void(const std::string&)>& on_stage) {
  auto note = [&](const char* stage) {
    if (on_stage) on_stage(stage);
  };
  note("gen-corpus");
  run_gen_corpus(p, ws);
  note("pretrain");
  run_pretrain(p, ws);
  note("harvest");
  run_harvest(p, ws);
  note("analyze standard");
  run_analyze(p, ws, "standard");
  note("epo");
  run_epo_stage(p, ws);
  note("passk standard");
  run_passk_stage(p, ws, "standard");
  note("passk epo");
  run_passk_stage(p, ws, "epo");
  note("report");
  run_report(p, ws);
}

}  // namespace moelab
