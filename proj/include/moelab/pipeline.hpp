#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/counterfactual.hpp"
#include "moelab/epo.hpp"
#include "moelab/model.hpp"
#include "moelab/passk.hpp"
#include "moelab/pretrain.hpp"

namespace moelab {

struct CorpusSettings {
  int train_problems = 500;
  int eval_problems = 100;
  int difficulty_min = 1;
  int difficulty_max = 6;
  int modulus = 11;
  uint64_t seed = 43;

  void validate() const;
};

struct HarvestSettings {
  int samples_per_problem = 4;
  DecodeConfig decode;
  uint64_t seed = 44;

  void validate() const;
};

struct PasskSettings {
  int n = 160;
  std::vector<int> k_values = {1, 2, 4, 8, 16, 32, 64, 128};
  int bootstrap = 2000;
  DecodeConfig decode;
  uint64_t seed = 45;

  void validate() const;
};

// One named bundle of every stage's settings; the unit of reproducibility.
struct Profile {
  std::string name = "default";
  int threads = 1;
  ModelConfig model;
  CorpusSettings corpus;
  TrainConfig train;
  HarvestSettings harvest;
  AnalysisConfig analysis;
  EpoConfig epo;
  PasskSettings passk;

  void validate() const;
  // Re-derives every stage seed from one master seed.
  void reseed(uint64_t master);
};

Profile default_profile();
// Reduced scale for CI: the full pipeline in minutes on one desktop core-set.
Profile smoke_profile();
Profile profile_by_name(const std::string& name);

// Canonical artifact layout inside one output directory. Every artifact gets
// a "<file>.meta.json" sidecar recording the producing command, its effective
// config (hashed), and the content hashes of its inputs.
struct Workspace {
  std::string dir;

  std::string corpus_train() const { return dir + "/corpus_train.jsonl"; }
  std::string corpus_eval() const { return dir + "/corpus_eval.jsonl"; }
  std::string checkpoint(const std::string& tag) const { return dir + "/model_" + tag + ".ckpt"; }
  std::string train_log() const { return dir + "/train_log.jsonl"; }
  std::string trajectories() const { return dir + "/trajectories.jsonl"; }
  std::string analysis_csv(const std::string& tag) const { return dir + "/analysis_" + tag + ".csv"; }
  std::string analysis_summary(const std::string& tag) const {
    return dir + "/analysis_" + tag + "_summary.json";
  }
  std::string epo_log() const { return dir + "/epo_log.jsonl"; }
  std::string epo_diff() const { return dir + "/epo_diff.json"; }
  std::string passk_outcomes(const std::string& tag) const {
    return dir + "/passk_" + tag + "_outcomes.csv";
  }
  std::string passk_curve(const std::string& tag) const {
    return dir + "/passk_" + tag + "_curve.csv";
  }
  std::string report_bins() const { return dir + "/report_bins.csv"; }
  std::string report_passk() const { return dir + "/report_passk.csv"; }
  static std::string meta(const std::string& artifact) { return artifact + ".meta.json"; }
};

// Stage runners shared by the CLI and the tests. Inputs are checked against
// their sidecars (content hash) and against the lineage recorded by upstream
// stages; `force` overrides a mismatch, never a missing file.
void run_gen_corpus(const Profile& p, const Workspace& ws);
void run_pretrain(const Profile& p, const Workspace& ws, bool force = false);
void run_harvest(const Profile& p, const Workspace& ws, bool force = false);
void run_analyze(const Profile& p, const Workspace& ws, const std::string& tag = "standard",
                 bool force = false);
void run_epo_stage(const Profile& p, const Workspace& ws, bool force = false);
void run_passk_stage(const Profile& p, const Workspace& ws, const std::string& tag,
                     bool force = false);
void run_report(const Profile& p, const Workspace& ws, bool force = false);
// gen-corpus -> pretrain -> harvest -> analyze -> epo -> passk both -> report.
// `on_stage`, when set, is called with each stage's name just before it runs.
void run_full_pipeline(const Profile& p, const Workspace& ws,
                       const std::function<void(const std::string&)>& on_stage = {});

// 64-bit content hash of a file as 16 hex digits (sidecar currency).
std::string file_hash_hex(const std::string& path);

}  // namespace moelab
