// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "neuronscope/neuronscope.hpp"
#include "support/oracles.hpp"
#include "support/panels.hpp"

namespace {

using namespace nscope;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::size_t jobs() {
  if (const char* env = std::getenv("NEURONSCOPE_JOBS")) {
    const auto v = std::strtoul(env, nullptr, 10);
    if (v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Outcome ap_oracle() {
  std::mt19937_64 rng(20240601);
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto inst = testing::random_ap_instance(rng, 64, i % 2 == 0);
    const double got = average_precision(inst.scores, inst.labels);
    worst = std::max(worst, std::abs(got - testing::brute_force_ap(inst.scores, inst.labels)));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 1e-12 && secs < 10.0,
          "max |diff| " + fmt("%.3g", worst) + ", " + fmt("%.3f", secs) + " s"};
}

Outcome ap_monotone() {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto inst = testing::random_ap_instance(rng, 64, i % 2 == 0);
    const double base = average_precision(inst.scores, inst.labels);
    auto e = inst.scores, a = inst.scores;
    for (auto& v : e) v = std::exp(v);
    for (auto& v : a) v = 2.0 * v + 1.0;
    worst = std::max({worst, std::abs(average_precision(e, inst.labels) - base),
                      std::abs(average_precision(a, inst.labels) - base)});
  }
  return {worst <= 1e-12, "max |diff| " + fmt("%.3g", worst)};
}

Outcome table_identity() {
  struct Row {
    const char* model;
    double sense, homograph, combined;
  };
  const Row rows[] = {{"BERT-B", 1.04, 5.72, 1.89},      {"BERT-L", 7.51, 5.72, 7.19},
                      {"Distilbert", 3.65, 5.72, 4.02},  {"GPT2-S", 1.79, 1.35, 1.71},
                      {"GPT2-M", 3.65, 3.03, 3.53},      {"GPT2-L", 15.03, 3.37, 12.92},
                      {"RoBERTa-B", 1.71, 3.70, 2.07},   {"RoBERTa-L", 14.66, 5.05, 12.92},
                      {"RoBERTa-Lm", 17.86, 4.04, 15.36}, {"XLM", 9.30, 5.39, 8.59}};
  double worst = 0.0;
  std::string worst_model;
  for (const auto& r : rows) {
    const double got = 100.0 * combined_expertise({r.sense / 100.0, 1344}, {r.homograph / 100.0, 297});
    if (std::abs(got - r.combined) > worst) {
      worst = std::abs(got - r.combined);
      worst_model = r.model;
    }
  }
  return {worst <= 0.01, "10 rows, max deviation " + fmt("%.4f", worst) + " pp (" + worst_model + ")"};
}

Outcome gamma_recovery() {
  const auto planted = testing::planted_panel(3);
  const GammaSearchOptions opts;
  const auto a = gamma_search(planted, ConceptCategory::Sense, opts);
  const auto b = gamma_search(planted, ConceptCategory::Sense, opts);
  const bool found = std::abs(a.gamma_star - 0.9) <= opts.grid_step + 1e-12;
  const double rmse = gamma_robustness(planted, ConceptCategory::Sense, opts, {.seed = 5});
  const double rmse2 = gamma_robustness(planted, ConceptCategory::Sense, opts, {.seed = 5});
  const auto noisy = testing::noisy_panel(3);
  const double n1 = gamma_robustness(noisy, ConceptCategory::Sense, opts, {.seed = 11});
  const double n2 = gamma_robustness(noisy, ConceptCategory::Sense, opts, {.seed = 11});
  const bool deterministic = a.gamma_star == b.gamma_star && a.curve == b.curve && rmse == rmse2 && n1 == n2;
  return {found && rmse == 0.0 && deterministic,
          "gamma* " + fmt("%.3f", a.gamma_star) + ", identical-task RMSE " + fmt("%g", rmse) +
              (deterministic ? ", deterministic" : ", NOT deterministic")};
}

Outcome overlap_properties() {
  std::mt19937_64 rng(9);
  auto random_set = [&](const char* id) {
    std::set<std::uint64_t> s;
    const auto n = rng() % 25;
    while (s.size() < n) s.insert(rng() % 80);
    return ExpertSet{id, 0.0, 80, {s.begin(), s.end()}};
  };
  std::size_t violations = 0;
  for (int i = 0; i < 500; ++i) {
    const auto q = random_set("q"), v = random_set("v");
    const double o = overlap(q, v);
    if (o != overlap(v, q) || o < 0.0 || o > 1.0) ++violations;
    if (!q.members.empty() && overlap(q, q) != 1.0) ++violations;
    // Adding a unit to both sets never lowers the overlap.
    const std::uint64_t extra = rng() % 80;
    auto q2 = q, v2 = v;
    for (auto* s : {&q2, &v2})
      if (!std::binary_search(s->members.begin(), s->members.end(), extra))
        s->members.insert(std::upper_bound(s->members.begin(), s->members.end(), extra), extra);
    if (overlap(q2, v2) < o) ++violations;
  }
  const ExpertSet a{"a", 0.0, 10, {1, 2, 3}}, b{"b", 0.0, 10, {2, 3, 4}};
  const double hand = overlap(a, b);
  return {violations == 0 && hand == 0.5,
          std::to_string(violations) + " violations over 500 pairs, {1,2,3}/{2,3,4} -> " + fmt("%g", hand)};
}

Outcome forcing_causality() {
  const auto start = std::chrono::steady_clock::now();
  ToyCorpusOptions copts;
  copts.sentences_per_topic = 300;
  copts.topic_prob = 0.6;
  copts.stray_prob = 0.05;
  copts.seed = 7;
  const auto corpus = make_toy_corpus(copts);
  tlm::TlmConfig cfg;
  cfg.vocab_size = static_cast<std::uint32_t>(corpus.tokenizer.size());
  cfg.model_dim = 64;
  cfg.num_blocks = 4;
  cfg.num_heads = 4;
  cfg.context_length = 16;
  cfg.seed = 11;
  auto model = tlm::Tlm<float>::initialized(cfg);
  const auto seqs = corpus.sequences();
  tlm::TrainOptions topts;
  topts.steps = 2000;
  topts.learning_rate = 3e-3;
  topts.batch_size = 16;
  topts.seed = 3;
  topts.jobs = jobs();
  const auto report = tlm::train(model, std::span<const std::vector<std::int32_t>>(seqs), topts);

  const auto concept_ = toy_concept(corpus, 0, 200, 1);
  const auto matrix = tlm::probe_matrix(model, corpus.tokenizer, concept_, {.jobs = jobs()});
  const auto table = ap_sweep(matrix, {.jobs = jobs()});
  const auto best = best_ap(table);

  SweepOptions sopts;
  sopts.ks = {0, 8, 32, 128};
  for (std::uint64_t s = 0; s < 200; ++s) sopts.seeds.push_back(s);
  sopts.decode.max_new_tokens = 12;
  sopts.jobs = jobs();
  const ConceptEvaluator evaluator(toy_topic_words(0));
  const auto cells = condition_sweep(model, corpus.tokenizer, table, matrix, evaluator, sopts);
  const auto means = mean_frequency_by_k(cells, sopts.ks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] >= means[i - 1];
  const bool ratio = means[2] >= 3.0 * means[0];
  std::ostringstream d;
  d << "final loss " << fmt("%.3f", report.losses.back()) << ", best AP " << fmt("%.4f", best.best_ap)
    << " (" << to_string(best.best_unit) << "), freq K=0/8/32/128 " << fmt("%.3f", means[0]) << "/"
    << fmt("%.3f", means[1]) << "/" << fmt("%.3f", means[2]) << "/" << fmt("%.3f", means[3])
    << ", K32/K0 " << fmt("%.2f", means[0] > 0 ? means[2] / means[0] : INFINITY) << ", "
    << fmt("%.0f", secs) << " s";
  return {best.best_ap >= 0.9 && monotone && ratio && secs < 1800.0, d.str()};
}

Outcome zero_k_noop() {
  ToyCorpusOptions copts;
  copts.sentences_per_topic = 20;
  const auto corpus = make_toy_corpus(copts);
  tlm::TlmConfig cfg;
  cfg.vocab_size = static_cast<std::uint32_t>(corpus.tokenizer.size());
  cfg.model_dim = 64;
  cfg.num_blocks = 4;
  cfg.num_heads = 4;
  cfg.context_length = 16;
  cfg.seed = 21;
  const auto model = tlm::Tlm<float>::initialized(cfg);
  const auto concept_ = toy_concept(corpus, 2, 20, 1);
  const auto matrix = tlm::probe_matrix(model, corpus.tokenizer, concept_);
  const auto table = ap_sweep(matrix);
  std::size_t logit_mismatch = 0, text_mismatch = 0;
  for (const auto& s : corpus.sentences) {
    auto ids = corpus.tokenizer.encode(s, true);
    ids.resize(std::min<std::size_t>(ids.size(), cfg.context_length));
    tlm::ForwardCache<float> cache;
    model.forward(ids, cache);
    if (tlm::force_and_forward(model, ids, top_k_plan(table, matrix, 0)) != cache.logits) ++logit_mismatch;
    if (logit_mismatch > 0) break;
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tlm::DecodeConfig dc;
    dc.seed = seed;
    dc.max_new_tokens = 12;
    const auto forced = condition(model, corpus.tokenizer, table, matrix, 0, "the", dc);
    const auto plain = tlm::generate(model, corpus.tokenizer.encode("the", true), {}, dc);
    if (forced.text != corpus.tokenizer.decode(plain) || forced.tokens != plain) ++text_mismatch;
  }
  return {logit_mismatch == 0 && text_mismatch == 0,
          std::to_string(corpus.sentences.size()) + " sequences, " + std::to_string(logit_mismatch) +
              " logit mismatches; 20 seeds, " + std::to_string(text_mismatch) + " text mismatches"};
}

Outcome gradient_check() {
  tlm::TlmConfig cfg;
  cfg.vocab_size = 13;
  cfg.model_dim = 8;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.context_length = 7;
  tlm::Tlm<double> model(cfg);
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 0.5);
  model.weights().visit([&](const std::string& name, tlm::Tensor<double>& t) {
    for (auto& v : t.data) v = (name.ends_with(".g") ? 1.0 : 0.0) + n(rng);
  });
  const std::vector<std::int32_t> tokens{0, 4, 12, 4, 7, 1, 9};
  tlm::TlmWeights<double> grads(cfg);
  tlm::ForwardCache<double> cache;
  model.loss_and_grad(tokens, 1.0, grads, cache);
  std::vector<double> analytic;
  grads.visit([&](const std::string&, const tlm::Tensor<double>& t) {
    analytic.insert(analytic.end(), t.data.begin(), t.data.end());
  });
  const double scale = static_cast<double>(tokens.size() - 1);
  const double h = 1e-5;
  double worst = 0.0, worst_abs = 0.0;
  std::size_t idx = 0, failures = 0;
  model.weights().visit([&](const std::string&, tlm::Tensor<double>& t) {
    for (auto& w : t.data) {
      const double keep = w;
      w = keep + h;
      const double up = model.loss(tokens) * scale;
      w = keep - h;
      const double down = model.loss(tokens) * scale;
      w = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[idx++];
      const double denom = std::max(std::abs(a), std::abs(numeric));
      if (denom > 1e-6) {
        const double rel = std::abs(a - numeric) / denom;
        worst = std::max(worst, rel);
        failures += rel < 1e-4 ? 0 : 1;
      } else {
        worst_abs = std::max(worst_abs, std::abs(a - numeric));
        failures += std::abs(a - numeric) < 1e-9 ? 0 : 1;
      }
    }
  });
  return {failures == 0, std::to_string(idx) + " parameters, max relative error " + fmt("%.3g", worst) +
                             ", max abs error on near-zero gradients " + fmt("%.3g", worst_abs)};
}

// Returns the number of mutations that did not raise a typed error.
std::size_t fuzz(const std::string& bytes, const std::function<void(const std::string&)>& load,
                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t silent = 0;
  for (int i = 0; i < 100; ++i) {
    auto damaged = bytes;
    const auto pos = rng() % bytes.size();
    damaged[pos] = static_cast<char>(damaged[pos] ^ static_cast<char>(1 + rng() % 255));
    try {
      load(damaged);
      ++silent;
    } catch (const Error&) {
    } catch (...) {
      ++silent;
    }
  }
  return silent;
}

Outcome format_round_trips() {
  ActivationMatrix m;
  m.concept_id = "bird%1:05:00";
  m.catalog = UnitCatalog(8, 2);
  std::mt19937_64 rng(41);
  std::normal_distribution<float> n(0.0f, 2.0f);
  for (int r = 0; r < 50; ++r) m.labels.push_back(r < 20 ? 1 : 0);
  m.responses.resize(50 * m.catalog.total_units());
  for (auto& v : m.responses) v = n(rng);
  std::stringstream nsac;
  write_activations(m, nsac, 16);
  const auto nsac_bytes = nsac.str();
  const bool nsac_ok = read_activations(nsac) == m;

  tlm::TlmConfig cfg;
  cfg.vocab_size = 50;
  cfg.model_dim = 16;
  cfg.num_blocks = 2;
  cfg.num_heads = 2;
  cfg.context_length = 8;
  cfg.seed = 4;
  const auto model = tlm::Tlm<float>::initialized(cfg);
  std::stringstream nsck;
  tlm::save_checkpoint(model, nsck);
  const auto nsck_bytes = nsck.str();
  const auto back = tlm::load_checkpoint<float>(nsck);
  std::ostringstream again;
  tlm::save_checkpoint(back, again);
  const bool nsck_ok = back.weights() == model.weights() && back.config() == cfg && again.str() == nsck_bytes;

  const auto nsac_silent = fuzz(nsac_bytes, [](const std::string& b) {
    std::istringstream in(b);
    read_activations(in);
  }, 1);
  const auto nsck_silent = fuzz(nsck_bytes, [](const std::string& b) {
    std::istringstream in(b);
    tlm::load_checkpoint<float>(in);
  }, 2);
  return {nsac_ok && nsck_ok && nsac_silent == 0 && nsck_silent == 0,
          std::string("NSAC round trip ") + (nsac_ok ? "exact" : "DIFFERS") + ", NSCK round trip " +
              (nsck_ok ? "exact" : "DIFFERS") + "; untyped or silent mutations: NSAC " +
              std::to_string(nsac_silent) + "/100, NSCK " + std::to_string(nsck_silent) + "/100"};
}

Outcome unit_count() {
  bool ok = true;
  for (std::uint64_t d : {1u, 8u, 64u, 768u, 1024u, 1280u})
    for (std::uint64_t b : {1u, 4u, 12u, 24u, 36u}) ok = ok && UnitCatalog(d, b).total_units() == b * 9 * d;
  const auto gpt2_l = UnitCatalog(1280, 36).total_units();
  const auto gpt2_s = UnitCatalog(768, 12).total_units();
  return {ok && gpt2_l == 414720 && gpt2_s == 82944,
          "GPT2-L shape -> " + std::to_string(gpt2_l) + ", GPT2-S shape -> " + std::to_string(gpt2_s)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"AP oracle equivalence", ap_oracle},
      {"AP monotone invariance", ap_monotone},
      {"Table 1 combined expertise identity", table_identity},
      {"gamma* search recovery and robustness", gamma_recovery},
      {"Overlap properties", overlap_properties},
      {"Forcing causality on the toy model", forcing_causality},
      {"K = 0 no-op", zero_k_noop},
      {"Gradient check", gradient_check},
      {"Format round-trips and fuzzing", format_round_trips},
      {"Unit-count formula", unit_count},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %zu: %s (%s)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
