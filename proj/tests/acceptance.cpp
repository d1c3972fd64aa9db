// Acceptance checks for the engine. Each criterion prints one line:
//
//   PASS|FAIL <name>: <measurements> [<seconds> s of <budget> s]
//
// Usage: peva_acceptance [criterion ...]   (all criteria when none are named)

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "peva/encoder.hpp"
#include "peva/feature_store.hpp"
#include "peva/gradient_suite.hpp"
#include "peva/synth.hpp"
#include "peva/trainer.hpp"
#include "peva/zeroshot.hpp"

using namespace peva;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy(t.row(perm[i]).begin(), t.row(perm[i]).end(), out.row(i).begin());
  return out;
}

std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

// ---- criteria ----------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(20240601);
  double worst = 0.0;
  std::size_t prediction_mismatches = 0;
  const int instances = 1000;
  for (int i = 0; i < instances; ++i) {
    const std::size_t n = 2 + rng.below(9), m = 1 + rng.below(8), d = 1 + rng.below(16);
    const Tensor prompts = testutil::random_unit_rows(rng, n, d);
    const Tensor views = testutil::random_unit_rows(rng, m, d);
    const auto o = oracle::zero_shot(oracle::to_mat(prompts), oracle::to_mat(views), kDefaultLogitScale);

    const AggregationResult r = aggregate_peva(prompts, views);
    const auto logits = zero_shot_logits(prompts, r.descriptor, kDefaultLogitScale);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < m; ++b) worst = std::max(worst, std::abs(r.similarity(a, b) - o.similarity[a][b]));
    worst = std::max({worst, testutil::max_abs_diff(r.scores, o.alpha), testutil::max_abs_diff(r.weights, o.weights),
                      testutil::max_abs_diff(r.descriptor, o.descriptor), testutil::max_abs_diff(logits, o.logits)});
    prediction_mismatches += predict(logits) != o.prediction;
  }
  return {worst <= 1e-9 && prediction_mismatches == 0,
          fmt("%d instances, max_abs_dev=%.3e (tol 1e-9), prediction mismatches=%zu", instances, worst,
              prediction_mismatches)};
}

Outcome analytic_invariants() {
  Rng rng(77);
  double shift = 0.0, simplex = 0.0, reduction = 0.0, perm_zero = 0.0, perm_few = 0.0;
  std::size_t argmax_changes = 0;

  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 2 + rng.below(9), m = 1 + rng.below(8), d = 2 + rng.below(15);
    const Tensor prompts = testutil::random_unit_rows(rng, n, d);
    const Tensor views = testutil::random_unit_rows(rng, m, d);
    const AggregationResult r = aggregate_peva(prompts, views);

    Tensor s = r.similarity;
    for (std::size_t j = 0; j < m; ++j) {
      const double c = 3.0 * rng.normal();
      for (std::size_t a = 0; a < n; ++a) s(a, j) += c;
    }
    const auto shifted_alpha = discriminative_scores(s);
    const auto shifted_w = aggregation_weights(shifted_alpha);
    shift = std::max({shift, testutil::max_abs_diff(shifted_alpha, r.scores),
                      testutil::max_abs_diff(shifted_w, r.weights)});
    std::vector<double> shifted_f(d, 0.0);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < d; ++k) shifted_f[k] += shifted_w[j] * views(j, k);
    shift = std::max(shift, testutil::max_abs_diff(shifted_f, r.descriptor));

    double total = 0.0;
    for (double w : r.weights) {
      total += w;
      if (w < 0.0) simplex = std::max(simplex, -w);
    }
    simplex = std::max(simplex, std::abs(total - 1.0));

    const auto unit = zero_shot_logits(prompts, r.descriptor, 1.0);
    for (double k : {1e-6, 0.01, 1.0, 100.0, 1e8}) argmax_changes += predict(zero_shot_logits(prompts, r.descriptor, k)) != predict(unit);

    const auto perm = random_permutation(rng, m);
    perm_zero = std::max(perm_zero, testutil::max_abs_diff(aggregate_peva(prompts, permute_rows(views, perm)).descriptor,
                                                           r.descriptor));

    // Equal scores: prompts are the standard basis, views are coordinate
    // permutations of one vector, so every column has the same max and mean.
    const std::size_t dd = 2 + rng.below(7);
    const Tensor basis = Tensor::identity(dd);
    const Tensor seed_vec = testutil::random_unit_rows(rng, 1, dd);
    Tensor eq({m, dd});
    for (std::size_t j = 0; j < m; ++j) {
      const auto p = random_permutation(rng, dd);
      for (std::size_t k = 0; k < dd; ++k) eq(j, k) = seed_vec[p[k]];
    }
    reduction = std::max(reduction, testutil::max_abs_diff(aggregate_peva(basis, eq).descriptor, aggregate_average(eq)));
  }

  EncoderConfig config;
  config.dim = 16;
  for (int i = 0; i < 6; ++i) {
    EncoderParams params = init_encoder(config, 100 + i);
    testutil::randomize(params, rng, 0.1);
    const std::size_t m = 2 + rng.below(7);
    const Tensor views = testutil::random_unit_rows(rng, m, config.dim);
    const auto f = encode(views, params);
    perm_few = std::max(perm_few, testutil::max_abs_diff(encode(permute_rows(views, random_permutation(rng, m)), params), f));
  }

  const bool ok = shift <= 1e-12 && simplex <= 1e-9 && reduction <= 1e-12 && argmax_changes == 0 &&
                  perm_zero <= 1e-9 && perm_few <= 1e-9;
  return {ok, fmt("alpha_shift=%.2e (1e-12) simplex=%.2e (1e-9) reduction=%.2e (1e-12) argmax_changes=%zu (0) "
                  "perm_f_zero=%.2e perm_f_few=%.2e (1e-9)",
                  shift, simplex, reduction, argmax_changes, perm_zero, perm_few)};
}

Outcome gradient_suite() {
  const GradSuiteReport report = run_gradient_suite(1);
  double worst_op = 0.0, worst_encoder = 0.0;
  std::size_t checked = 0;
  for (const auto& e : report.entries) {
    checked += e.report.checked;
    double& slot = e.name.starts_with("encoder") ? worst_encoder : worst_op;
    slot = std::max(slot, e.report.max_rel_err);
  }
  return {report.passed, fmt("%zu entries over %zu checks, op max_rel_err=%.2e (1e-6), encoder+loss max_rel_err=%.2e "
                             "(1e-4), distill grad err=%.2e (1e-9)",
                             report.entries.size(), checked, worst_op, worst_encoder, report.distill_grad_max_abs_err)};
}

SynthConfig acceptance_fixture(std::uint64_t seed) {
  SynthConfig c;  // N=10, M=8, D=64, K=16, 20 test shapes per class
  c.degenerate_fraction = 0.5;
  c.view_noise = 0.3;
  c.prompt_alignment = 0.9;
  c.seed = seed;
  return c;
}

double few_shot_accuracy(const SynthData& data, std::uint64_t seed, bool distill) {
  TrainConfig config;
  config.shots = 16;
  config.epochs = 50;
  config.seed = seed;
  config.distill = distill;
  const TrainResult result = train(data.train, data.prompts, config);
  EvalOptions opts;
  opts.encoder = &result.params;
  return evaluate(data.test, data.prompts, EvalMode::few, opts).accuracy;
}

Outcome self_distillation() {
  double with_sum = 0.0, without_sum = 0.0;
  int wins = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SynthData data = generate(acceptance_fixture(seed));
    const double with = few_shot_accuracy(data, seed, true);
    const double without = few_shot_accuracy(data, seed, false);
    with_sum += with;
    without_sum += without;
    wins += with > without;
    per_seed << (seed ? " " : "") << fmt("%.3f/%.3f", with, without);
  }
  const double mean_with = with_sum / 10.0, mean_without = without_sum / 10.0;
  return {mean_with >= mean_without && wins >= 7,
          fmt("mean acc with=%.4f without=%.4f (need with>=without), wins=%d/10 (need >=7); per seed with/without: ",
              mean_with, mean_without, wins) +
              per_seed.str()};
}

Outcome aggregation_direction() {
  int wins = 0;
  double peva_sum = 0.0, avg_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SynthData data = generate(acceptance_fixture(seed));
    const double p = evaluate(data.test, data.prompts, EvalMode::zero_peva).accuracy;
    const double a = evaluate(data.test, data.prompts, EvalMode::zero_avg).accuracy;
    peva_sum += p;
    avg_sum += a;
    wins += p > a;
  }
  return {wins >= 8, fmt("PEVA > average pooling in %d/10 seeds (need >=8), mean acc PEVA=%.4f avg=%.4f, 200 test "
                         "shapes per seed",
                         wins, peva_sum / 10.0, avg_sum / 10.0)};
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome format_round_trip() {
  const fs::path dir = fs::temp_directory_path() / "peva_acceptance" / "round_trip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(4242);
  std::size_t mismatches = 0, files = 0;
  auto check = [&](const auto& write_first, const auto& reread) {
    write_first(dir / "a.pevf");
    reread(dir / "a.pevf", dir / "b.pevf");
    mismatches += file_bytes(dir / "a.pevf") != file_bytes(dir / "b.pevf");
    ++files;
  };
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 1 + rng.below(24);
    FeatureSet views;
    views.dim = d;
    const std::size_t shapes = 1 + rng.below(12);
    for (std::size_t s = 0; s < shapes; ++s) {
      std::string id = "shape_" + std::to_string(i) + "_" + std::to_string(s);
      if (rng.below(3) == 0) id += "_\xc3\xa9";  // non-ASCII UTF-8
      views.shapes.push_back({id, static_cast<std::uint32_t>(rng.below(40)), testutil::random_matrix(rng, 1 + rng.below(12), d)});
    }
    check([&](const fs::path& p) { write_container(views, p); },
          [](const fs::path& a, const fs::path& b) { write_container(read_views(a), b); });

    PromptBank prompts;
    const std::size_t n = 2 + rng.below(39);
    for (std::size_t c = 0; c < n; ++c) prompts.categories.push_back("category " + std::to_string(c));
    prompts.features = testutil::random_matrix(rng, n, d);
    check([&](const fs::path& p) { write_container(prompts, p); },
          [](const fs::path& a, const fs::path& b) { write_container(read_prompts(a), b); });

    EncoderConfig config;
    config.dim = d;
    config.heads = 1 + rng.below(4);
    config.proj_width = config.heads * (1 + rng.below(8));
    config.mlp_hidden = 1 + rng.below(16);
    config.layers = 1 + rng.below(2);
    config.use_positional_embedding = rng.below(2) == 1;
    config.max_views = config.use_positional_embedding ? 1 + rng.below(12) : 0;
    EncoderParams params = init_encoder(config, rng.next());
    testutil::randomize(params, rng, 0.5);
    check([&](const fs::path& p) { save_checkpoint(params, p); },
          [](const fs::path& a, const fs::path& b) { save_checkpoint(load_checkpoint(a), b); });
  }
  return {mismatches == 0, fmt("100 fixtures, %zu containers (views, prompts, checkpoints), byte mismatches=%zu", files,
                               mismatches)};
}

Outcome determinism() {
  const SynthData data = generate(acceptance_fixture(3));
  TrainConfig config;
  config.seed = 3;
  auto run = [&] {
    std::string log;
    const TrainResult r = train(data.train, data.prompts, config, &data.test,
                                [&log](const EpochLog& e) { log += e.to_json() + "\n"; });
    return std::make_pair(log, encode_container(to_parameter_set(r.params)));
  };
  const auto a = run(), b = run();
  const bool same_log = a.first == b.first, same_ck = a.second == b.second;
  return {same_log && same_ck, fmt("two 50-epoch runs with seed 3: epoch logs %s (%zu bytes), checkpoints %s "
                                   "(%zu bytes)",
                                   same_log ? "identical" : "DIFFER", a.first.size(), same_ck ? "identical" : "DIFFER",
                                   a.second.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"oracle_equivalence", 5, oracle_equivalence},
      {"analytic_invariants", 5, analytic_invariants},
      {"gradient_suite", 60, gradient_suite},
      {"self_distillation_direction", 300, self_distillation},
      {"aggregation_ablation_direction", 60, aggregation_direction},
      {"format_round_trip", 5, format_round_trip},
      {"determinism", 120, determinism},
  };
  std::vector<std::string> wanted(argv + 1, argv + argc);
  for (const auto& w : wanted) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == w; })) {
      std::cerr << "unknown criterion '" << w << "'; known:";
      for (const auto& c : criteria) std::cerr << " " << c.name;
      std::cerr << "\n";
      return 2;
    }
  }

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.name) == wanted.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = seconds <= c.budget_seconds;
    const bool passed = outcome.passed && in_budget;
    failures += !passed;
    std::cout << (passed ? "PASS " : "FAIL ") << c.name << ": " << outcome.detail
              << fmt(" [%.2f s of %.0f s%s]", seconds, c.budget_seconds, in_budget ? "" : ", OVER BUDGET") << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
