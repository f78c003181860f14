// neuronscope command line tool.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cli_support.hpp"
#include "neuronscope/neuronscope.hpp"

namespace nscope::cli {
namespace {

using Model = tlm::Tlm<float>;

// ---------------------------------------------------------------------------
// corpus-build

struct CorpusBuildArgs {
  std::vector<std::string> onesec;
  bool toy = false;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t min_sentences = 100;
  std::size_t max_per_side = 1000;
  std::size_t min_negatives = 100;
  bool no_inflections = false;
  bool no_homographs = false;
  std::size_t toy_sentences = 400;
  double topic_prob = ToyCorpusOptions{}.topic_prob;
  double stray_prob = ToyCorpusOptions{}.stray_prob;
  std::size_t toy_max_per_side = 200;
  std::string manifest;
};

void run_corpus_build(const CorpusBuildArgs& a) {
  require(a.toy != !a.onesec.empty(), ErrorCode::InvalidArgument,
          "give either --onesec inputs or --toy");
  Manifest man("corpus-build");
  man.seed(a.seed);
  std::vector<Concept> concepts;
  if (a.toy) {
    man.config() = {{"toy", true},
                    {"sentences_per_topic", a.toy_sentences},
                    {"topic_prob", a.topic_prob},
                    {"stray_prob", a.stray_prob},
                    {"max_per_side", a.toy_max_per_side}};
    const auto corpus = make_toy_corpus({.sentences_per_topic = a.toy_sentences,
                                         .topic_prob = a.topic_prob,
                                         .stray_prob = a.stray_prob,
                                         .seed = a.seed});
    for (std::size_t t = 0; t < kToyTopics.size(); ++t)
      concepts.push_back(toy_concept(corpus, t, a.toy_max_per_side, a.seed));
  } else {
    ConceptBuildOptions opts;
    opts.min_sentences = a.min_sentences;
    opts.max_per_side = a.max_per_side;
    opts.min_negatives = a.min_negatives;
    opts.lemma_match.inflections = !a.no_inflections;
    opts.homographs = !a.no_homographs;
    man.config() = {{"min_sentences", a.min_sentences},
                    {"max_per_side", a.max_per_side},
                    {"min_negatives", a.min_negatives},
                    {"inflections", !a.no_inflections},
                    {"homographs", !a.no_homographs}};
    std::vector<AnnotatedSentence> sentences;
    std::size_t malformed = 0;
    for (const auto& path : a.onesec) {
      man.input(path);
      auto r = parse_onesec_file(path);
      malformed += r.malformed;
      sentences.insert(sentences.end(), std::make_move_iterator(r.sentences.begin()),
                       std::make_move_iterator(r.sentences.end()));
    }
    ConceptBuildStats stats;
    concepts = build_concepts(sentences, a.seed, opts, &stats);
    man.summary()["sentences"] = sentences.size();
    man.summary()["malformed_records"] = malformed;
    man.summary()["qualifying_senses"] = stats.qualifying_senses;
    man.summary()["dropped_for_negatives"] = stats.dropped_for_negatives;
  }
  std::size_t senses = 0, homographs = 0;
  json ratios = json::array();
  for (const auto& c : concepts) {
    if (c.category == ConceptCategory::Sense) {
      ++senses;
    } else {
      ++homographs;
      ratios.push_back({{"id", c.id},
                        {"positives", c.positives.size()},
                        {"negatives", c.negatives.size()}});
    }
  }
  man.summary()["sense_concepts"] = senses;
  man.summary()["homograph_concepts"] = homographs;
  man.summary()["homograph_counts"] = ratios;
  const fs::path out(a.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_atomically(out, [&](std::ostream& os) { save_corpus(concepts, os); });
  man.output(out);
  man.path(a.manifest.empty() ? fs::path(a.out + ".manifest.json") : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainToyArgs {
  std::string out_dir;
  std::uint32_t blocks = 4, dim = 64, heads = 4, context = 16;
  std::size_t steps = 2000, batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  std::size_t sentences = 300;
  double topic_prob = ToyCorpusOptions{}.topic_prob;
  double stray_prob = ToyCorpusOptions{}.stray_prob;
  std::size_t max_per_side = 200;
  std::size_t jobs = 1;
  std::string manifest;
};

void run_train_toy(const TrainToyArgs& a) {
  Manifest man("train-toy");
  man.seed(a.seed);
  man.config() = {{"blocks", a.blocks},   {"dim", a.dim},          {"heads", a.heads},
                  {"context", a.context}, {"steps", a.steps},      {"batch", a.batch},
                  {"lr", a.lr},           {"sentences", a.sentences}, {"topic_prob", a.topic_prob},
                  {"stray_prob", a.stray_prob}, {"max_per_side", a.max_per_side}};
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  const auto corpus = make_toy_corpus({.sentences_per_topic = a.sentences,
                                       .topic_prob = a.topic_prob,
                                       .stray_prob = a.stray_prob,
                                       .seed = a.seed});
  tlm::TlmConfig cfg{.vocab_size = static_cast<std::uint32_t>(corpus.tokenizer.size()),
                     .model_dim = a.dim,
                     .num_blocks = a.blocks,
                     .num_heads = a.heads,
                     .context_length = a.context,
                     .seed = a.seed};
  auto model = Model::initialized(cfg);
  const auto seqs = corpus.sequences();
  tlm::TrainOptions opts;
  opts.steps = a.steps;
  opts.batch_size = a.batch;
  opts.learning_rate = a.lr;
  opts.seed = a.seed;
  opts.jobs = a.jobs;
  const auto report = tlm::train(model, std::span<const std::vector<std::int32_t>>(seqs), opts);

  write_atomically(dir / "model.nsck", [&](std::ostream& os) { tlm::save_checkpoint(model, os); });
  write_atomically(dir / "vocab.txt", [&](std::ostream& os) { corpus.tokenizer.save(os); });
  std::vector<Concept> concepts;
  for (std::size_t t = 0; t < kToyTopics.size(); ++t)
    concepts.push_back(toy_concept(corpus, t, a.max_per_side, a.seed));
  write_atomically(dir / "corpus.jsonl", [&](std::ostream& os) { save_corpus(concepts, os); });
  write_atomically(dir / "loss.csv", [&](std::ostream& os) {
    os << "step,loss\n";
    for (std::size_t i = 0; i < report.losses.size(); ++i)
      os << i << ',' << detail::format_double(report.losses[i]) << '\n';
  });
  json topics = json::object();
  for (const auto& t : kToyTopics) topics[std::string(t.name)] = toy_topic_words(toy_topic_index(t.name));
  write_atomically(dir / "topics.json", [&](std::ostream& os) { os << topics.dump(2) << '\n'; });
  for (auto f : {"model.nsck", "vocab.txt", "corpus.jsonl", "loss.csv", "topics.json"})
    man.output(dir / f);
  man.summary()["first_loss"] = report.losses.empty() ? 0.0 : report.losses.front();
  man.summary()["final_loss"] = report.losses.empty() ? 0.0 : report.losses.back();
  man.summary()["parameters"] = model.weights().parameter_count();
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string model, vocab, corpus, out_dir;
  std::vector<std::string> concepts;
  std::size_t jobs = 1;
  std::uint32_t chunk_width = kDefaultChunkWidth;
  bool no_bos = false;
  std::string manifest;
};

void run_probe(const ProbeArgs& a) {
  Manifest man("probe");
  man.config() = {{"concepts", a.concepts}, {"chunk_width", a.chunk_width}, {"bos", !a.no_bos}};
  man.input(a.model);
  man.input(a.vocab);
  man.input(a.corpus);
  const auto model = tlm::load_checkpoint_file<float>(a.model);
  const auto tok = Tokenizer::load_file(a.vocab);
  const auto corpus = load_corpus_file(a.corpus);
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  std::size_t written = 0;
  for (const auto& c : corpus) {
    if (!a.concepts.empty() &&
        std::find(a.concepts.begin(), a.concepts.end(), c.id) == a.concepts.end())
      continue;
    const auto path = dir / (concept_stem(c.id) + ".nsac");
    tlm::ProbeOptions opts;
    opts.add_bos = !a.no_bos;
    opts.jobs = a.jobs;
    write_atomically(path, [&](std::ostream& os) {
      tlm::probe_concept(model, tok, c, os, opts, a.chunk_width);
    });
    man.output(path);
    ++written;
  }
  require(a.concepts.empty() || written == a.concepts.size(), ErrorCode::InvalidArgument,
          "some requested concepts are not in the corpus");
  man.summary()["concepts"] = written;
  man.summary()["M"] = model.catalog().total_units();
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// ap

struct ApArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
  std::size_t chunk = kDefaultChunkWidth;
  std::size_t jobs = 1;
  bool force = false;
  std::string manifest;
};

bool ap_outputs_valid(const fs::path& csv, const fs::path& js, const std::string& concept_id) {
  if (!fs::exists(csv) || !fs::exists(js)) return false;
  try {
    return load_ap_table(csv.string(), js.string()).concept_id == concept_id;
  } catch (const Error&) {
    return false;
  }
}

void run_ap(const ApArgs& a) {
  Manifest man("ap");
  man.config() = {{"chunk", a.chunk}, {"force", a.force}};
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  const auto files = expand_inputs(a.inputs, ".nsac");
  require(!files.empty(), ErrorCode::EmptyInput, "no activation files given");
  std::vector<ConceptBestAp> best;
  std::size_t resumed = 0;
  for (const auto& f : files) {
    man.input(f);
    const ActivationFile file(f.string());
    const auto stem = strip_suffix(f.filename().string(), ".nsac");
    const auto csv = dir / (stem + ".ap.csv");
    const auto js = dir / (stem + ".ap.json");
    ApTable table;
    if (!a.force && ap_outputs_valid(csv, js, file.concept_id())) {
      table = load_ap_table(csv.string(), js.string());
      ++resumed;
    } else {
      table = ap_sweep(file, {.chunk_columns = a.chunk, .jobs = a.jobs});
      write_atomically(js, [&](std::ostream& os) { os << ap_sidecar(table).dump(2) << '\n'; });
      write_atomically(csv, [&](std::ostream& os) { write_ap_csv(table, os); });
    }
    best.push_back(best_ap(table));
    man.output(csv);
    man.output(js);
  }
  const auto summary = dir / "best_aps.csv";
  write_atomically(summary, [&](std::ostream& os) {
    os << "concept_id,category,best_ap\n";
    for (const auto& b : best)
      os << b.concept_id << ',' << to_string(category_from_id(b.concept_id)) << ','
         << detail::format_double(b.best_ap) << '\n';
  });
  man.output(summary);
  man.summary()["concepts"] = files.size();
  man.summary()["resumed"] = resumed;
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// expertise

struct ExpertiseArgs {
  std::string best_aps, out;
  double gamma_sense = 0.997;
  double gamma_homograph = 0.985;
  std::string manifest;
};

void run_expertise(const ExpertiseArgs& a) {
  Manifest man("expertise");
  man.config() = {{"gamma_sense", a.gamma_sense}, {"gamma_homograph", a.gamma_homograph}};
  man.input(a.best_aps);
  std::ifstream in(a.best_aps);
  if (!in) fail(ErrorCode::Io, "cannot open " + a.best_aps);
  const auto aps = parse_best_aps(in);
  json j;
  std::vector<CategoryExpertise> parts;
  for (auto [cat, gamma] : {std::pair{ConceptCategory::Sense, a.gamma_sense},
                            std::pair{ConceptCategory::Homograph, a.gamma_homograph}}) {
    const auto it = aps.find(cat);
    if (it == aps.end() || it->second.empty()) continue;
    const auto e = concept_expertise(it->second, gamma);
    j[std::string(to_string(cat))] = {{"gamma", gamma},
                                      {"fraction", e.fraction},
                                      {"acquired", e.acquired},
                                      {"concepts", e.concepts}};
    parts.push_back({e.fraction, e.concepts});
  }
  require(!parts.empty(), ErrorCode::EmptyInput, "no AP* values in " + a.best_aps);
  j["combined"] = combined_expertise(parts);
  const auto text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_atomically(a.out, [&](std::ostream& os) { os << text; });
    man.output(a.out);
  }
  man.path(!a.manifest.empty() ? fs::path(a.manifest)
           : a.out.empty()     ? fs::path("neuronscope.expertise.manifest.json")
                               : fs::path(a.out + ".manifest.json"));
  man.write();
}

// ---------------------------------------------------------------------------
// gamma-search

struct GammaArgs {
  std::string panel, out_dir, category = "sense";
  std::vector<std::string> model_aps;
  std::vector<std::string> tasks;
  double step = 0.001, lo = 0.5, hi = 0.999;
  std::size_t splits = 10;
  double ratio = 0.6;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string manifest;
};

void run_gamma_search(const GammaArgs& a) {
  Manifest man("gamma-search");
  man.seed(a.seed);
  man.config() = {{"category", a.category}, {"tasks", a.tasks}, {"step", a.step},
                  {"min", a.lo},            {"max", a.hi},      {"splits", a.splits},
                  {"ratio", a.ratio}};
  man.input(a.panel);
  auto panel = load_task_panel(a.panel);
  for (const auto& spec : a.model_aps) {
    const auto eq = spec.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::InvalidArgument,
            "--model-aps expects MODEL=PATH, got '" + spec + "'");
    const auto id = spec.substr(0, eq);
    const auto path = spec.substr(eq + 1);
    man.input(path);
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot open " + path);
    panel.models[panel.model_index(id)].best_aps = parse_best_aps(in);
  }
  const auto category = parse_category(a.category);
  GammaSearchOptions opts;
  opts.grid_step = a.step;
  opts.grid_min = a.lo;
  opts.grid_max = a.hi;
  opts.include_tasks = a.tasks;
  opts.jobs = a.jobs;
  auto result = gamma_search(panel, category, opts);
  if (a.splits > 0)
    result.split_rmse = gamma_robustness(panel, category, opts,
                                         {.splits = a.splits, .reference_ratio = a.ratio, .seed = a.seed});
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  json j;
  j["category"] = a.category;
  j["gamma_star"] = result.gamma_star;
  double best_r2 = 0.0;
  for (const auto& [g, r2] : result.curve)
    if (g == result.gamma_star) best_r2 = r2;
  j["mean_r2"] = best_r2;
  if (result.split_rmse) j["split_rmse"] = *result.split_rmse;
  else j["split_rmse"] = nullptr;
  write_atomically(dir / "gamma.json", [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  write_atomically(dir / "curve.csv", [&](std::ostream& os) {
    os << "gamma,mean_r2\n";
    for (const auto& [g, r2] : result.curve)
      os << detail::format_double(g) << ',' << detail::format_double(r2) << '\n';
  });
  man.output(dir / "gamma.json");
  man.output(dir / "curve.csv");
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// layer-dist, hist

std::vector<ApTable> filter_category(std::vector<ApTable> tables, const std::string& category) {
  if (category == "all") return tables;
  const auto cat = parse_category(category);
  std::erase_if(tables, [&](const ApTable& t) { return category_from_id(t.concept_id) != cat; });
  require(!tables.empty(), ErrorCode::EmptyInput, "no " + category + " concepts among the inputs");
  return tables;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out, category = "all";
  double gamma = 0.95;
  std::size_t bins = 50;
  std::string manifest;
};

void run_layer_dist(const ReportArgs& a) {
  Manifest man("layer-dist");
  man.config() = {{"gamma", a.gamma}, {"category", a.category}};
  std::vector<fs::path> paths;
  const auto tables = filter_category(load_ap_tables(a.inputs, &paths), a.category);
  for (const auto& p : paths) man.input(p);
  const auto dist = layer_distribution(tables, a.gamma);
  write_atomically(a.out, [&](std::ostream& os) { write_layer_distribution_csv(dist, os); });
  man.output(a.out);
  man.path(a.manifest.empty() ? fs::path(a.out + ".manifest.json") : fs::path(a.manifest));
  man.write();
}

void run_hist(const ReportArgs& a) {
  Manifest man("hist");
  man.config() = {{"gamma", a.gamma}, {"category", a.category}, {"bins", a.bins}};
  std::vector<fs::path> paths;
  const auto tables = filter_category(load_ap_tables(a.inputs, &paths), a.category);
  for (const auto& p : paths) man.input(p);
  HistogramOptions opts;
  opts.gamma = a.gamma;
  opts.ap_bins = a.bins;
  const auto h = expert_histograms(tables, opts);
  json j;
  j["gamma"] = a.gamma;
  j["best_ap"] = {{"edges", h.best_ap.edges}, {"counts", h.best_ap.counts}};
  j["expert_count"] = {{"edges", h.expert_count.edges}, {"counts", h.expert_count.counts}};
  j["median_experts"] = h.median_experts;
  json per = json::array();
  for (std::size_t i = 0; i < tables.size(); ++i)
    per.push_back({{"concept_id", tables[i].concept_id},
                   {"best_ap", best_ap(tables[i]).best_ap},
                   {"experts", h.experts_per_concept[i]}});
  j["concepts"] = per;
  write_atomically(a.out, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  man.output(a.out);
  man.path(a.manifest.empty() ? fs::path(a.out + ".manifest.json") : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// expert-sets, neighbors

struct ExpertSetArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
  std::string manifest;
};

void run_expert_sets(const ExpertSetArgs& a) {
  Manifest man("expert-sets");
  std::vector<fs::path> paths;
  const auto tables = load_ap_tables(a.inputs, &paths);
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    man.input(paths[i]);
    const auto set = expert_set(tables[i]);
    const auto out =
        dir / (strip_suffix(paths[i].filename().string(), ".ap.csv") + ".experts.json");
    write_atomically(out, [&](std::ostream& os) { os << to_json(set).dump() << '\n'; });
    man.output(out);
  }
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

struct NeighborArgs {
  std::vector<std::string> inputs;
  std::string concept_id, out;
  std::size_t top = 10;
  std::string manifest;
};

void run_neighbors(const NeighborArgs& a) {
  Manifest man("neighbors");
  man.config() = {{"concept", a.concept_id}, {"top", a.top}};
  std::vector<ExpertSet> sets;
  for (const auto& p : expand_inputs(a.inputs, ".experts.json")) {
    man.input(p);
    std::ifstream in(p);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::FormatError, p.string() + ": " + e.what());
    }
    sets.push_back(expert_set_from_json(j));
  }
  const auto it = std::find_if(sets.begin(), sets.end(),
                               [&](const ExpertSet& s) { return s.concept_id == a.concept_id; });
  require(it != sets.end(), ErrorCode::InvalidArgument, "concept '" + a.concept_id + "' not found");
  const auto n = nearest_concepts(*it, sets, a.top);
  write_atomically(a.out, [&](std::ostream& os) { write_neighbors_csv(n, os); });
  man.output(a.out);
  man.path(a.manifest.empty() ? fs::path(a.out + ".manifest.json") : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// condition, generate

struct GenerateArgs {
  std::string model, vocab, out_dir, context;
  std::string ap_table, activations;
  std::vector<std::size_t> ks{0};
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  double p = 0.9, temperature = 1.0;
  std::size_t max_new = 32;
  bool generated_only = false;
  bool median_active = false;
  std::string concept_words, toy_topic;
  std::size_t jobs = 1;
  std::string manifest;
};

void write_generation(Manifest& man, const fs::path& dir, std::size_t k, std::uint64_t seed,
                      const ConditionResult& r, SweepCell* cell) {
  const auto base = "gen_k" + std::to_string(k) + "_s" + std::to_string(seed);
  const auto txt = dir / (base + ".txt");
  const auto js = dir / (base + ".json");
  write_atomically(txt, [&](std::ostream& os) { os << r.text << '\n'; });
  write_atomically(js, [&](std::ostream& os) { os << r.trace.dump() << '\n'; });
  man.output(txt);
  man.output(js);
  if (cell) cell->text_path = txt.filename().string();
}

void run_generation(const GenerateArgs& a, bool conditioned) {
  Manifest man(conditioned ? "condition" : "generate");
  man.seed(a.seed);
  man.config() = {{"context", a.context},       {"seeds", a.seeds},
                  {"p", a.p},                   {"temperature", a.temperature},
                  {"max_new", a.max_new},       {"force_generated_only", a.generated_only}};
  if (conditioned) {
    man.config()["K"] = a.ks;
    man.config()["median_active"] = a.median_active;
    man.config()["concept_words"] = a.concept_words;
    man.config()["toy_topic"] = a.toy_topic;
  }
  man.input(a.model);
  man.input(a.vocab);
  const auto model = tlm::load_checkpoint_file<float>(a.model);
  const auto tok = Tokenizer::load_file(a.vocab);
  const fs::path dir(a.out_dir);
  ensure_dir(dir);

  tlm::DecodeConfig cfg;
  cfg.nucleus_p = a.p;
  cfg.temperature = a.temperature;
  cfg.max_new_tokens = a.max_new;
  cfg.force_generated_only = a.generated_only;
  cfg.validate();

  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + i);

  if (!conditioned) {
    std::vector<ConditionResult> results(seeds.size());
    detail::parallel_for(seeds.size(), a.jobs, [&](std::size_t i) {
      auto c = cfg;
      c.seed = seeds[i];
      results[i] = condition_with_plan(model, tok, {}, a.context, c);
    });
    for (std::size_t i = 0; i < seeds.size(); ++i)
      write_generation(man, dir, 0, seeds[i], results[i], nullptr);
  } else {
    man.input(a.ap_table);
    man.input(a.activations);
    const auto table = load_ap_table(a.ap_table, ap_sidecar_path(a.ap_table).string());
    const auto matrix = read_activations_file(a.activations);
    require(table.concept_id == matrix.concept_id, ErrorCode::InvalidArgument,
            "AP table and activations describe different concepts");
    require(table.catalog == model.catalog(), ErrorCode::MismatchedCatalog,
            "AP table does not describe this model");
    std::optional<ConceptEvaluator> evaluator;
    if (!a.toy_topic.empty())
      evaluator.emplace(toy_topic_words(toy_topic_index(a.toy_topic)));
    else if (!a.concept_words.empty())
      evaluator.emplace(split_list(a.concept_words));
    ForcingValueOptions fopts{.active_only = a.median_active};
    std::vector<tlm::ForcingPlan> plans;
    for (auto k : a.ks) plans.push_back(top_k_plan(table, matrix, k, fopts));
    std::vector<ConditionResult> results(a.ks.size() * seeds.size());
    detail::parallel_for(results.size(), a.jobs, [&](std::size_t i) {
      auto c = cfg;
      c.seed = seeds[i % seeds.size()];
      results[i] = condition_with_plan(model, tok, plans[i / seeds.size()], a.context, c);
    });
    std::vector<SweepCell> cells;
    for (std::size_t i = 0; i < results.size(); ++i) {
      SweepCell cell;
      cell.k = a.ks[i / seeds.size()];
      cell.seed = seeds[i % seeds.size()];
      cell.percent_forced = results[i].percent_forced;
      cell.text = results[i].text;
      if (evaluator && !cell.text.empty()) cell.frequency = concept_frequency(cell.text, *evaluator);
      write_generation(man, dir, cell.k, cell.seed, results[i], &cell);
      cells.push_back(std::move(cell));
    }
    write_atomically(dir / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(cells, os); });
    man.output(dir / "sweep.csv");
    if (evaluator) {
      const auto means = mean_frequency_by_k(cells, a.ks);
      json m = json::object();
      for (std::size_t i = 0; i < a.ks.size(); ++i) m[std::to_string(a.ks[i])] = means[i];
      man.summary()["mean_concept_frequency"] = m;
    }
  }
  man.path(a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest));
  man.write();
}

// ---------------------------------------------------------------------------
// verify-formats

json verify_one(const fs::path& p) {
  json r;
  r["path"] = p.string();
  std::string format = "unknown";
  try {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + p.string());
    char magic[4] = {};
    in.read(magic, 4);
    const std::string m(magic, static_cast<std::size_t>(in.gcount()));
    in.close();
    if (m == "NSAC") {
      format = "NSAC";
      const ActivationFile file(p.string());
      for_each_column(file, kDefaultChunkWidth, [](const UnitId&, std::span<const float>) {});
      r["concept_id"] = file.concept_id();
      r["rows"] = file.rows();
      r["M"] = file.cols();
    } else if (m == "NSCK") {
      format = "NSCK";
      const auto model = tlm::load_checkpoint_file<float>(p.string());
      const auto& c = model.config();
      r["config"] = {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},
                     {"num_blocks", c.num_blocks}, {"num_heads", c.num_heads},
                     {"context_length", c.context_length}};
    } else if (p.string().ends_with(".ap.csv")) {
      format = "ap-table";
      const auto t = load_ap_table(p.string(), ap_sidecar_path(p).string());
      r["concept_id"] = t.concept_id;
    } else if (!m.empty() && m[0] == '{') {
      format = "corpus";
      r["concepts"] = load_corpus_file(p.string()).size();
    } else {
      fail(ErrorCode::FormatError, "unrecognized file format");
    }
    r["format"] = format;
    r["ok"] = true;
  } catch (const Error& e) {
    r["format"] = format;
    r["ok"] = false;
    r["error"] = {{"category", to_string(e.category())},
                  {"code", to_string(e.code())},
                  {"message", e.what()}};
  }
  return r;
}

struct VerifyArgs {
  std::vector<std::string> inputs;
  std::string report;
  std::string manifest;
};

int run_verify(const VerifyArgs& a) {
  Manifest man("verify-formats");
  std::vector<fs::path> files;
  for (const auto& i : a.inputs) {
    if (fs::is_directory(i)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(i)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && (name.ends_with(".nsac") || name.ends_with(".nsck") ||
                                    name.ends_with(".jsonl") || name.ends_with(".ap.csv")))
          found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(i);
    }
  }
  require(!files.empty(), ErrorCode::EmptyInput, "nothing to verify");
  json report = json::array();
  std::size_t failures = 0;
  for (const auto& f : files) {
    man.input(f);
    auto r = verify_one(f);
    if (!r["ok"].get<bool>()) ++failures;
    report.push_back(std::move(r));
  }
  json out = {{"files", report}, {"errors", failures}};
  std::cout << out.dump(2) << '\n';
  if (!a.report.empty()) {
    write_atomically(a.report, [&](std::ostream& os) { os << out.dump(2) << '\n'; });
    man.output(a.report);
  }
  man.summary()["errors"] = failures;
  man.path(!a.manifest.empty() ? fs::path(a.manifest)
           : a.report.empty()  ? fs::path("neuronscope.verify-formats.manifest.json")
                               : fs::path(a.report + ".manifest.json"));
  man.write();
  return failures == 0 ? 0 : exit_code(ErrorCategory::FormatError);
}

}  // namespace
}  // namespace nscope::cli

int main(int argc, char** argv) {
  using namespace nscope::cli;
  CLI::App app{"neuronscope: expert units, concept expertise and conditioned generation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  const auto jobs_default = default_jobs();
  int status = 0;

  CorpusBuildArgs cb;
  auto* c_cb = app.add_subcommand("corpus-build", "Build concept datasets");
  c_cb->add_option("--onesec", cb.onesec, "Annotated instance files (plain or gzip)");
  c_cb->add_flag("--toy", cb.toy, "Build the synthetic topic concepts instead");
  c_cb->add_option("--out", cb.out, "Output corpus (JSON Lines)")->required();
  c_cb->add_option("--seed", cb.seed, "Sampling seed");
  c_cb->add_option("--min-sentences", cb.min_sentences, "Sense keys need more sentences than this");
  c_cb->add_option("--max-per-side", cb.max_per_side, "Cap on positives and negatives");
  c_cb->add_option("--min-negatives", cb.min_negatives, "Drop concepts with fewer negatives");
  c_cb->add_flag("--no-inflections", cb.no_inflections, "Exact lemma match only");
  c_cb->add_flag("--no-homographs", cb.no_homographs, "Skip homograph concepts");
  c_cb->add_option("--toy-sentences", cb.toy_sentences, "Sentences per toy topic");
  c_cb->add_option("--topic-prob", cb.topic_prob, "Toy: probability of a topic word");
  c_cb->add_option("--stray-prob", cb.stray_prob, "Toy: probability of an off-topic word");
  c_cb->add_option("--toy-max-per-side", cb.toy_max_per_side, "Toy: cap per side");
  c_cb->add_option("--manifest", cb.manifest, "Manifest path");
  c_cb->callback([&] { run_corpus_build(cb); });

  TrainToyArgs tt;
  tt.jobs = jobs_default;
  auto* c_tt = app.add_subcommand("train-toy", "Train the toy language model on topic sentences");
  c_tt->add_option("--out-dir", tt.out_dir, "Output directory")->required();
  c_tt->add_option("--blocks", tt.blocks, "Transformer blocks");
  c_tt->add_option("--dim", tt.dim, "Model dimension D");
  c_tt->add_option("--heads", tt.heads, "Attention heads");
  c_tt->add_option("--context", tt.context, "Context length");
  c_tt->add_option("--steps", tt.steps, "Optimizer steps");
  c_tt->add_option("--batch", tt.batch, "Sequences per step");
  c_tt->add_option("--lr", tt.lr, "Adam learning rate");
  c_tt->add_option("--seed", tt.seed, "Seed for corpus, init and batches");
  c_tt->add_option("--sentences", tt.sentences, "Sentences per topic");
  c_tt->add_option("--topic-prob", tt.topic_prob, "Probability of a topic word");
  c_tt->add_option("--stray-prob", tt.stray_prob, "Probability of an off-topic word");
  c_tt->add_option("--max-per-side", tt.max_per_side, "Concept cap per side");
  c_tt->add_option("--jobs", tt.jobs, "Worker threads");
  c_tt->add_option("--manifest", tt.manifest, "Manifest path");
  c_tt->callback([&] { run_train_toy(tt); });

  ProbeArgs pr;
  pr.jobs = jobs_default;
  auto* c_pr = app.add_subcommand("probe", "Record max-pooled unit responses per concept");
  c_pr->add_option("--model", pr.model, "NSCK checkpoint")->required();
  c_pr->add_option("--vocab", pr.vocab, "Vocabulary file")->required();
  c_pr->add_option("--corpus", pr.corpus, "Concept corpus")->required();
  c_pr->add_option("--out-dir", pr.out_dir, "Output directory")->required();
  c_pr->add_option("--concept", pr.concepts, "Only these concept ids");
  c_pr->add_option("--chunk-width", pr.chunk_width, "Column chunk width of the footer index");
  c_pr->add_flag("--no-bos", pr.no_bos, "Do not prepend <bos>");
  c_pr->add_option("--jobs", pr.jobs, "Worker threads");
  c_pr->add_option("--manifest", pr.manifest, "Manifest path");
  c_pr->callback([&] { run_probe(pr); });

  ApArgs ap;
  ap.jobs = jobs_default;
  auto* c_ap = app.add_subcommand("ap", "Average precision of every unit for every concept");
  c_ap->add_option("inputs", ap.inputs, "Activation files or directories")->required();
  c_ap->add_option("--out-dir", ap.out_dir, "Output directory")->required();
  c_ap->add_option("--chunk", ap.chunk, "Columns per read chunk");
  c_ap->add_flag("--force", ap.force, "Recompute tables that already exist");
  c_ap->add_option("--jobs", ap.jobs, "Worker threads");
  c_ap->add_option("--manifest", ap.manifest, "Manifest path");
  c_ap->callback([&] { run_ap(ap); });

  ExpertiseArgs ex;
  auto* c_ex = app.add_subcommand("expertise", "Concept expertise per category and combined");
  c_ex->add_option("--best-aps", ex.best_aps, "CSV concept_id,category,best_ap")->required();
  c_ex->add_option("--gamma-sense", ex.gamma_sense, "Threshold for sense concepts");
  c_ex->add_option("--gamma-homograph", ex.gamma_homograph, "Threshold for homograph concepts");
  c_ex->add_option("--out", ex.out, "Output JSON (stdout when omitted)");
  c_ex->add_option("--manifest", ex.manifest, "Manifest path");
  c_ex->callback([&] { run_expertise(ex); });

  GammaArgs gs;
  gs.jobs = jobs_default;
  auto* c_gs = app.add_subcommand("gamma-search", "Threshold maximizing expertise/task correlation");
  c_gs->add_option("--panel", gs.panel, "CSV model,task,metric,value")->required();
  c_gs->add_option("--model-aps", gs.model_aps, "MODEL=best_aps.csv, one per model")->required();
  c_gs->add_option("--category", gs.category, "sense or homograph");
  c_gs->add_option("--task", gs.tasks, "Restrict to these task/metric names");
  c_gs->add_option("--step", gs.step, "Grid step");
  c_gs->add_option("--min", gs.lo, "Grid start");
  c_gs->add_option("--max", gs.hi, "Grid end");
  c_gs->add_option("--splits", gs.splits, "Reference/test splits (0 disables)");
  c_gs->add_option("--ratio", gs.ratio, "Reference share of tasks per split");
  c_gs->add_option("--seed", gs.seed, "Split seed");
  c_gs->add_option("--out-dir", gs.out_dir, "Output directory")->required();
  c_gs->add_option("--jobs", gs.jobs, "Worker threads");
  c_gs->add_option("--manifest", gs.manifest, "Manifest path");
  c_gs->callback([&] { run_gamma_search(gs); });

  ReportArgs ld;
  auto* c_ld = app.add_subcommand("layer-dist", "Acquired concepts per block and layer kind");
  c_ld->add_option("inputs", ld.inputs, "AP tables or directories")->required();
  c_ld->add_option("--gamma", ld.gamma, "Acquisition threshold");
  c_ld->add_option("--category", ld.category, "all, sense or homograph");
  c_ld->add_option("--out", ld.out, "Output CSV")->required();
  c_ld->add_option("--manifest", ld.manifest, "Manifest path");
  c_ld->callback([&] { run_layer_dist(ld); });

  ReportArgs hi;
  auto* c_hi = app.add_subcommand("hist", "Histograms of AP* and experts per concept");
  c_hi->add_option("inputs", hi.inputs, "AP tables or directories")->required();
  c_hi->add_option("--gamma", hi.gamma, "Expert threshold");
  c_hi->add_option("--bins", hi.bins, "AP* bins on [0, 1]");
  c_hi->add_option("--category", hi.category, "all, sense or homograph");
  c_hi->add_option("--out", hi.out, "Output JSON")->required();
  c_hi->add_option("--manifest", hi.manifest, "Manifest path");
  c_hi->callback([&] { run_hist(hi); });

  ExpertSetArgs es;
  auto* c_es = app.add_subcommand("expert-sets", "Top-percentile expert sets per concept");
  c_es->add_option("inputs", es.inputs, "AP tables or directories")->required();
  c_es->add_option("--out-dir", es.out_dir, "Output directory")->required();
  c_es->add_option("--manifest", es.manifest, "Manifest path");
  c_es->callback([&] { run_expert_sets(es); });

  NeighborArgs nb;
  auto* c_nb = app.add_subcommand("neighbors", "Concepts sharing the most experts with one concept");
  c_nb->add_option("inputs", nb.inputs, "Expert set files or directories")->required();
  c_nb->add_option("--concept", nb.concept_id, "Query concept id")->required();
  c_nb->add_option("--top", nb.top, "Number of neighbors");
  c_nb->add_option("--out", nb.out, "Output CSV")->required();
  c_nb->add_option("--manifest", nb.manifest, "Manifest path");
  c_nb->callback([&] { run_neighbors(nb); });

  GenerateArgs cd;
  cd.jobs = jobs_default;
  auto* c_cd = app.add_subcommand("condition", "Generate with the top-K experts forced");
  GenerateArgs gn;
  gn.jobs = jobs_default;
  auto* c_gn = app.add_subcommand("generate", "Generate without forcing");
  for (auto [cmd, args] : {std::pair{c_cd, &cd}, std::pair{c_gn, &gn}}) {
    cmd->add_option("--model", args->model, "NSCK checkpoint")->required();
    cmd->add_option("--vocab", args->vocab, "Vocabulary file")->required();
    cmd->add_option("--context", args->context, "Context text");
    cmd->add_option("--seed", args->seed, "First sampling seed");
    cmd->add_option("--seeds", args->seeds, "Number of consecutive seeds");
    cmd->add_option("--p", args->p, "Nucleus mass");
    cmd->add_option("--temperature", args->temperature, "Softmax temperature");
    cmd->add_option("--max-new", args->max_new, "Tokens to generate");
    cmd->add_option("--out-dir", args->out_dir, "Output directory")->required();
    cmd->add_option("--jobs", args->jobs, "Worker threads");
    cmd->add_option("--manifest", args->manifest, "Manifest path");
  }
  c_cd->add_option("--ap-table", cd.ap_table, "AP CSV (sidecar JSON alongside)")->required();
  c_cd->add_option("--activations", cd.activations, "NSAC file of the same concept")->required();
  c_cd->add_option("--k", cd.ks, "Experts to force; repeat for a sweep");
  c_cd->add_flag("--force-generated-only", cd.generated_only, "Leave the context unforced");
  c_cd->add_flag("--median-active", cd.median_active, "Median over positive rows above zero");
  c_cd->add_option("--concept-words", cd.concept_words, "Comma-separated concept tokens");
  c_cd->add_option("--toy-topic", cd.toy_topic, "Use a toy topic's words as concept tokens");
  c_cd->callback([&] { run_generation(cd, true); });
  c_gn->callback([&] { run_generation(gn, false); });

  VerifyArgs vf;
  auto* c_vf = app.add_subcommand("verify-formats", "Validate NSAC, NSCK, corpus and AP files");
  c_vf->add_option("inputs", vf.inputs, "Files or directories")->required();
  c_vf->add_option("--report", vf.report, "Also write the report here");
  c_vf->add_option("--manifest", vf.manifest, "Manifest path");
  c_vf->callback([&] { status = run_verify(vf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << '\n';
    print_error("BadInput", "InvalidArgument", e.what());
    return exit_code(nscope::ErrorCategory::BadInput);
  } catch (const nscope::Error& e) {
    print_error(to_string(e.category()), to_string(e.code()), e.what());
    return exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    print_error("BadInput", "Io", e.what());
    return exit_code(nscope::ErrorCategory::BadInput);
  } catch (const std::exception& e) {
    print_error("Internal", "Internal", e.what());
    return exit_code(nscope::ErrorCategory::Internal);
  }
  return status;
}
