#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/pipeline.hpp"

namespace {

using moelab::Profile;
using moelab::Workspace;

struct Common {
  std::string out;
  std::string profile = "default";
  int threads = 0;  // 0 = keep the profile's value
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_force = true) {
  cmd->add_option("--out", c.out, "Workspace directory holding all artifacts")->required();
  cmd->add_option("--profile", c.profile, "Settings bundle: default or smoke")
      ->check(CLI::IsMember({"default", "smoke"}));
  cmd->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::NonNegativeNumber);
  if (with_force) cmd->add_flag("--force", c.force, "Override input hash mismatches");
  cmd->set_config("--config", "", "Read option defaults from an INI/TOML file");
}

Profile resolve(const Common& c) {
  Profile p = moelab::profile_by_name(c.profile);
  if (c.threads > 0) p.threads = c.threads;
  return p;
}

std::pair<int, int> parse_range(const std::string& s) {
  int lo = 0, hi = 0;
  if (std::sscanf(s.c_str(), "%d:%d", &lo, &hi) != 2)
    throw moelab::InvalidConfig("--difficulty-range expects LO:HI, got '" + s + "'");
  return {lo, hi};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale MoE language model: router audit, preference update, pass@K"};
  app.require_subcommand(1);

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int problems = 0, eval_problems = 0, modulus = 0;
      std::string range;
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("gen-corpus", "Generate disjoint train/eval problem splits");
    add_common(cmd, *o, false);
    cmd->add_option("--seed", v->seed, "Corpus generation seed");
    cmd->add_option("--problems", v->problems, "Training problems");
    cmd->add_option("--eval-problems", v->eval_problems, "Held-out problems");
    cmd->add_option("--difficulty-range", v->range, "LO:HI operand-count band (1..6)");
    cmd->add_option("--modulus", v->modulus, "Arithmetic modulus");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.corpus.seed = v->seed;
      if (cmd->count("--problems")) p.corpus.train_problems = v->problems;
      if (cmd->count("--eval-problems")) p.corpus.eval_problems = v->eval_problems;
      if (cmd->count("--difficulty-range"))
        std::tie(p.corpus.difficulty_min, p.corpus.difficulty_max) = parse_range(v->range);
      if (cmd->count("--modulus")) p.corpus.modulus = v->modulus;
      moelab::run_gen_corpus(p, Workspace{o->out});
    });
  }

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int steps = 0, batch = 0;
      double lr = 0, lambda_lb = -1, wd = -1, clip = -1;
      int width = 0, blocks = 0, experts = 0, active = 0, hidden = 0;
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("pretrain", "Train the standard checkpoint on the train split");
    add_common(cmd, *o);
    cmd->add_option("--seed", v->seed, "Init/shuffle seed");
    cmd->add_option("--steps", v->steps, "Optimizer steps");
    cmd->add_option("--batch-size", v->batch, "Sequences per step");
    cmd->add_option("--lr", v->lr, "Learning rate");
    cmd->add_option("--lambda-lb", v->lambda_lb, "Load-balance loss weight");
    cmd->add_option("--weight-decay", v->wd, "Decoupled weight decay");
    cmd->add_option("--grad-clip", v->clip, "Global-norm gradient clip (0 disables)");
    cmd->add_option("--width", v->width, "Residual width");
    cmd->add_option("--blocks", v->blocks, "Transformer blocks");
    cmd->add_option("--experts", v->experts, "Experts per layer");
    cmd->add_option("--active-experts", v->active, "Routed experts per token (k)");
    cmd->add_option("--expert-hidden", v->hidden, "Expert hidden width");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.train.seed = v->seed;
      if (cmd->count("--steps")) p.train.steps = v->steps;
      if (cmd->count("--batch-size")) p.train.batch_size = v->batch;
      if (cmd->count("--lr")) p.train.lr = v->lr;
      if (cmd->count("--lambda-lb")) p.train.lambda_lb = v->lambda_lb;
      if (cmd->count("--weight-decay")) p.train.weight_decay = v->wd;
      if (cmd->count("--grad-clip")) p.train.grad_clip = v->clip;
      if (cmd->count("--width")) p.model.width = v->width;
      if (cmd->count("--blocks")) p.model.blocks = v->blocks;
      if (cmd->count("--experts")) p.model.experts_per_layer = v->experts;
      if (cmd->count("--active-experts")) p.model.active_experts = v->active;
      if (cmd->count("--expert-hidden")) p.model.expert_hidden = v->hidden;
      moelab::run_pretrain(p, Workspace{o->out}, o->force);
    });
  }

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int samples = 0, max_new = 0;
      double temperature = -1;
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("harvest", "Sample and keep verified trajectories");
    add_common(cmd, *o);
    cmd->add_option("--seed", v->seed, "Sampling seed");
    cmd->add_option("--samples", v->samples, "Samples per problem");
    cmd->add_option("--temperature", v->temperature, "Decode temperature (0 = greedy)");
    cmd->add_option("--max-new-tokens", v->max_new, "Completion length cap");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.harvest.seed = v->seed;
      if (cmd->count("--samples")) p.harvest.samples_per_problem = v->samples;
      if (cmd->count("--temperature")) p.harvest.decode.temperature = v->temperature;
      if (cmd->count("--max-new-tokens")) p.harvest.decode.max_new_tokens = v->max_new;
      moelab::run_harvest(p, Workspace{o->out}, o->force);
    });
  }

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int layer = -2, alternatives = 0, pool = 0;
      double noise = 0;
      std::string tag = "standard";
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("analyze", "Counterfactual route audit of a checkpoint");
    add_common(cmd, *o);
    cmd->add_option("--seed", v->seed, "Alternative-sampling seed");
    cmd->add_option("--layer", v->layer, "Target block (-1 = last)");
    cmd->add_option("--alternatives", v->alternatives, "Sampled routes per token (G)");
    cmd->add_option("--pool-size", v->pool, "Candidate pool size (m)");
    cmd->add_option("--noise-scale", v->noise, "Gumbel noise scale");
    cmd->add_option("--tag", v->tag, "Checkpoint tag to audit (standard or epo)");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.analysis.seed = v->seed;
      if (cmd->count("--layer")) p.analysis.layer = v->layer;
      if (cmd->count("--alternatives")) p.analysis.alternatives = v->alternatives;
      if (cmd->count("--pool-size")) p.analysis.pool_size = v->pool;
      if (cmd->count("--noise-scale")) p.analysis.noise_scale = v->noise;
      moelab::run_analyze(p, Workspace{o->out}, v->tag, o->force);
    });
  }

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int layer = -2, alternatives = 0, pool = 0, batch = 0, epochs = 0;
      double tau = -1, beta = -1, lr = 0, noise = 0;
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("epo", "Router-only preference update on hard tokens");
    add_common(cmd, *o);
    cmd->add_option("--seed", v->seed, "Pair-sampling seed");
    cmd->add_option("--layer", v->layer, "Router to update (-1 = last block)");
    cmd->add_option("--tau", v->tau, "Hard-token CE threshold, nats");
    cmd->add_option("--alternatives", v->alternatives, "Candidate routes per hard token");
    cmd->add_option("--pool-size", v->pool, "Candidate pool size");
    cmd->add_option("--noise-scale", v->noise, "Gumbel noise scale");
    cmd->add_option("--beta", v->beta, "Preference-loss inverse temperature");
    cmd->add_option("--lr", v->lr, "Router learning rate");
    cmd->add_option("--batch-size", v->batch, "Trajectories per step");
    cmd->add_option("--epochs", v->epochs, "Passes over the trajectory file");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.epo.seed = v->seed;
      if (cmd->count("--layer")) p.epo.layer = v->layer;
      if (cmd->count("--tau")) p.epo.tau = v->tau;
      if (cmd->count("--alternatives")) p.epo.alternatives = v->alternatives;
      if (cmd->count("--pool-size")) p.epo.pool_size = v->pool;
      if (cmd->count("--noise-scale")) p.epo.noise_scale = v->noise;
      if (cmd->count("--beta")) p.epo.beta = v->beta;
      if (cmd->count("--lr")) p.epo.lr = v->lr;
      if (cmd->count("--batch-size")) p.epo.batch_size = v->batch;
      if (cmd->count("--epochs")) p.epo.epochs = v->epochs;
      moelab::run_epo_stage(p, Workspace{o->out}, o->force);
    });
  }

  {
    auto o = std::make_shared<Common>();
    struct V {
      uint64_t seed = 0;
      int n = 0, bootstrap = 0;
      double temperature = -1;
      std::vector<int> k;
      std::string tag = "standard";
    };
    auto v = std::make_shared<V>();
    auto* cmd = app.add_subcommand("passk", "Pass@K curve for a checkpoint on the eval split");
    add_common(cmd, *o);
    cmd->add_option("--seed", v->seed, "Sampling/bootstrap seed");
    cmd->add_option("--tag", v->tag, "Checkpoint tag to evaluate (standard or epo)");
    cmd->add_option("--n", v->n, "Completions per problem");
    cmd->add_option("--k", v->k, "K grid");
    cmd->add_option("--bootstrap", v->bootstrap, "Bootstrap resamples");
    cmd->add_option("--temperature", v->temperature, "Decode temperature");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.passk.seed = v->seed;
      if (cmd->count("--n")) p.passk.n = v->n;
      if (cmd->count("--k")) p.passk.k_values = v->k;
      if (cmd->count("--bootstrap")) p.passk.bootstrap = v->bootstrap;
      if (cmd->count("--temperature")) p.passk.decode.temperature = v->temperature;
      moelab::run_passk_stage(p, Workspace{o->out}, v->tag, o->force);
    });
  }

  {
    auto o = std::make_shared<Common>();
    auto* cmd = app.add_subcommand("report", "Emit bin table and combined pass@K curves");
    add_common(cmd, *o);
    cmd->callback([o] { moelab::run_report(resolve(*o), Workspace{o->out}, o->force); });
  }

  {
    auto o = std::make_shared<Common>();
    auto v = std::make_shared<uint64_t>(0);
    auto* cmd = app.add_subcommand("pipeline", "Run every stage end to end");
    add_common(cmd, *o, false);
    cmd->add_option("--seed", *v, "Master seed; re-derives every stage seed");
    cmd->callback([cmd, o, v] {
      Profile p = resolve(*o);
      if (cmd->count("--seed")) p.reseed(*v);
      moelab::run_full_pipeline(p, Workspace{o->out}, [](const std::string& stage) {
        std::cerr << "[pipeline] " << stage << "\n";
      });
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const moelab::Error& e) {
    std::cerr << nlohmann::json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }
  return 0;
}
