// Python surface for the router-audit laboratory: the scalar math that is
// useful interactively, plus the full pipeline runner.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "moelab/pipeline.hpp"

namespace py = pybind11;
using namespace moelab;

namespace {

std::vector<ProblemOutcome> to_outcomes(const std::vector<std::tuple<int64_t, int, int>>& rows) {
  std::vector<ProblemOutcome> out;
  out.reserve(rows.size());
  for (const auto& [id, n, c] : rows) out.push_back({id, n, c});
  return out;
}

py::dict summary_dict(const CandidateSummary& s) {
  py::dict d;
  d["p_best"] = s.p_best;
  d["gap"] = s.gap;
  d["p_bar"] = s.p_bar;
  d["rank"] = s.rank;
  d["bin"] = std::string(bin_name(s.bin));
  return d;
}

py::dict run_pipeline_py(const std::string& out_dir, const std::string& profile_name,
                         std::optional<uint64_t> master_seed, int threads) {
  Profile p = profile_by_name(profile_name);
  if (master_seed) p.reseed(*master_seed);
  p.threads = threads;
  Workspace ws{out_dir};
  run_full_pipeline(p, ws);
  py::dict d;
  d["corpus_train"] = ws.corpus_train();
  d["corpus_eval"] = ws.corpus_eval();
  d["checkpoint_standard"] = ws.checkpoint("standard");
  d["checkpoint_epo"] = ws.checkpoint("epo");
  d["train_log"] = ws.train_log();
  d["trajectories"] = ws.trajectories();
  d["analysis_csv"] = ws.analysis_csv("standard");
  d["analysis_summary"] = ws.analysis_summary("standard");
  d["epo_log"] = ws.epo_log();
  d["epo_diff"] = ws.epo_diff();
  d["passk_standard_curve"] = ws.passk_curve("standard");
  d["passk_epo_curve"] = ws.passk_curve("epo");
  d["report_bins"] = ws.report_bins();
  d["report_passk"] = ws.report_passk();
  return d;
}

py::dict curve_dict(const PassKCurve& c) {
  py::dict d;
  d["k_values"] = c.k_values;
  d["mean"] = c.mean;
  d["ci_lo"] = c.ci_lo;
  d["ci_hi"] = c.ci_hi;
  d["bootstrap_resamples"] = c.bootstrap_resamples;
  d["seed"] = c.seed;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mixture-of-experts router audit laboratory";

  py::register_exception<Error>(m, "MoelabError");

  m.def("pass_at_k", &pass_at_k, py::arg("n"), py::arg("c"), py::arg("k"),
        "Probability that a uniformly random size-k subset of n samples, of which c are "
        "correct, contains at least one correct sample.");
  m.def("pass_at_k_log", &pass_at_k_log, py::arg("n"), py::arg("c"), py::arg("k"));
  m.def(
      "bootstrap_ci",
      [](const std::vector<std::tuple<int64_t, int, int>>& outcomes, int k, int resamples,
         uint64_t seed) { return bootstrap_ci(to_outcomes(outcomes), k, resamples, Rng(seed)); },
      py::arg("outcomes"), py::arg("k"), py::arg("resamples") = 2000, py::arg("seed") = 42,
      "95% bootstrap interval for mean pass@k over (problem_id, n, c) outcome rows.");
  m.def(
      "passk_curve",
      [](const std::vector<std::tuple<int64_t, int, int>>& outcomes, const std::vector<int>& ks,
         int resamples, uint64_t seed) {
        return curve_dict(passk_curve(to_outcomes(outcomes), ks, resamples, Rng(seed)));
      },
      py::arg("outcomes"), py::arg("k_values"), py::arg("resamples") = 2000, py::arg("seed") = 42);

  m.def(
      "route_log_prob",
      [](const std::vector<double>& scores, const std::vector<int>& route) {
        return route_log_prob<double>(scores, route);
      },
      py::arg("scores"), py::arg("route"),
      "Sum of full-softmax log-probabilities over the route's experts.");
  m.def(
      "epo_loss",
      [](double delta, const std::vector<int>& chosen, const std::vector<int>& rejected,
         const std::vector<double>& theta_scores, const std::vector<double>& ref_scores,
         double beta) {
        return epo_loss<double>(delta, chosen, rejected, theta_scores, ref_scores, beta);
      },
      py::arg("delta"), py::arg("chosen"), py::arg("rejected"), py::arg("theta_scores"),
      py::arg("ref_scores"), py::arg("beta"),
      "Gap-weighted route preference loss against a frozen reference router.");
  m.def(
      "epo_score_grad",
      [](double delta, const std::vector<int>& chosen, const std::vector<int>& rejected,
         const std::vector<double>& theta_scores, const std::vector<double>& ref_scores,
         double beta) {
        return epo_score_grad<double>(delta, chosen, rejected, theta_scores, ref_scores, beta);
      },
      py::arg("delta"), py::arg("chosen"), py::arg("rejected"), py::arg("theta_scores"),
      py::arg("ref_scores"), py::arg("beta"));

  m.def(
      "switch_lb_loss",
      [](const std::vector<double>& slot_fraction, const std::vector<double>& mean_prob,
         int64_t tokens, int k, double lambda) {
        RoutingBatchStats st;
        st.slot_fraction = slot_fraction;
        st.mean_prob = mean_prob;
        st.tokens = tokens;
        st.k = k;
        return switch_lb_loss(st, lambda);
      },
      py::arg("slot_fraction"), py::arg("mean_prob"), py::arg("tokens"), py::arg("k"),
      py::arg("lambda_"), "Load-balance penalty over one batch's routing statistics.");
  m.def(
      "lb_grad",
      [](const std::vector<double>& p, const std::vector<double>& f, double lambda, int64_t tokens) {
        return lb_grad(p, f, lambda, tokens);
      },
      py::arg("token_probs"), py::arg("slot_fraction"), py::arg("lambda_"), py::arg("tokens"));

  m.def(
      "summarize_candidates",
      [](double p_std, const std::vector<double>& p_alts, double hi, double lo) {
        return summary_dict(summarize_candidates(p_std, p_alts, hi, lo));
      },
      py::arg("p_std"), py::arg("p_alts"), py::arg("hi") = 0.9, py::arg("lo") = 0.5,
      "Best/gap/rank/mean statistics of one token's candidate route probabilities.");

  m.def(
      "gumbel_top_k",
      [](const std::vector<double>& scores, int k, uint64_t seed, double scale) {
        Rng rng(seed);
        return gumbel_top_k<double>(scores, k, rng, scale);
      },
      py::arg("scores"), py::arg("k"), py::arg("seed") = 42, py::arg("scale") = 1.0,
      "Perturbed top-k expert selection; vanishing scale is plain top-k.");
  m.def(
      "softmax",
      [](const std::vector<double>& v) { return softmax<double>(v); },
      py::arg("scores"));

  m.def("run_pipeline", &run_pipeline_py, py::arg("out_dir"), py::arg("profile") = "smoke",
        py::arg("master_seed") = py::none(), py::arg("threads") = 1,
        "Corpus -> pretrain -> harvest -> route audit -> router preference update -> pass@K "
        "-> report; returns the artifact paths.");
  m.def(
      "load_curve_csv",
      [](const std::string& path) { return curve_dict(load_curve_csv(path)); },
      py::arg("path"));
  m.def("file_hash_hex", &file_hash_hex, py::arg("path"));
  m.def("profile_names", [] { return std::vector<std::string>{"default", "smoke"}; });
}
