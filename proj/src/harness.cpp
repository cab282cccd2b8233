#include "eas/harness.h"

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "eas/evaluate.h"

namespace eas {
namespace {

using Clock = std::chrono::steady_clock;

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Runs one stage, timing it and tagging any failure with the stage name.
template <typename F>
auto stage(const std::string& name, std::map<std::string, double>& seconds, std::ostream* progress, F&& f) {
  if (progress) *progress << "[" << name << "] start" << std::endl;
  const auto t0 = Clock::now();
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      seconds[name] = std::chrono::duration<double>(Clock::now() - t0).count();
    } else {
      auto r = f();
      seconds[name] = std::chrono::duration<double>(Clock::now() - t0).count();
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

nlohmann::json DatasetSource::to_json() const {
  if (kind == Kind::kDirectory)
    return {{"directory", directory.string()}, {"train_fraction", fractions.train}, {"val_fraction", fractions.val}};
  return {{"synthetic", synthetic.to_json()}};
}

DatasetSource DatasetSource::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  DatasetSource s;
  if (j.contains("directory")) {
    s.kind = Kind::kDirectory;
    s.directory = resolve(j.at("directory").get<std::string>(), base_dir);
    s.fractions.train = j.value("train_fraction", s.fractions.train);
    s.fractions.val = j.value("val_fraction", s.fractions.val);
  } else {
    s.kind = Kind::kSynthetic;
    s.synthetic = SyntheticSpec::from_json(j.value("synthetic", nlohmann::json::object()));
  }
  return s;
}

Dataset ingest_dataset(const DatasetSource& source, const SuperclassPartition& partition, std::uint64_t seed) {
  Dataset d;
  if (source.kind == DatasetSource::Kind::kDirectory) {
    d = load_image_directory(source.directory, source.fractions, seed);
  } else {
    SyntheticSpec spec = source.synthetic;
    spec.seed = seed;
    d = make_synthetic(spec);
  }
  d.check_partition(partition);
  return d;
}

std::uint64_t dataset_seed(std::uint64_t root_seed) { return Rng(root_seed).split("dataset").seed(); }

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("EAS_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || v[0] == '-')
    throw std::invalid_argument(std::string("EAS_SEED must be a non-negative integer, got '") + v + "'");
  return static_cast<std::uint64_t>(s);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.supernet = TrainSchedule::progressive(12);
  c.supernet.batch_size = 32;
  c.supernet.lr0 = 0.05;
  c.supernet_steps_per_epoch = 40;
  c.generator.steps = 600;
  c.generator.batch_size = 8;
  c.deploy.pool_size = 8;
  c.selection_per_superclass = 150;
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["space_file"] = space_file.string();
  j["partition_file"] = partition_file.string();
  j["dataset"] = dataset.to_json();
  j["supernet"] = supernet.to_json();
  j["dropout_q"] = dropout.q;
  j["dropout"] = dropout.enabled;
  j["supernet_steps_per_epoch"] = supernet_steps_per_epoch;
  j["generator"] = generator.to_json();
  j["generator_budgets_from_space"] = generator_budgets_from_space;
  j["deploy"] = deploy.to_json();
  j["selection_per_superclass"] = selection_per_superclass;
  j["budget_levels"] = budget_levels;
  j["seed"] = seed;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  c.space_file = resolve(j.value("space_file", std::string()), base_dir);
  c.partition_file = resolve(j.value("partition_file", std::string()), base_dir);
  if (j.contains("dataset")) c.dataset = DatasetSource::from_json(j.at("dataset"), base_dir);
  if (j.contains("supernet")) c.supernet = TrainSchedule::from_json(j.at("supernet"));
  c.dropout.q = j.value("dropout_q", c.dropout.q);
  c.dropout.enabled = j.value("dropout", c.dropout.enabled);
  c.supernet_steps_per_epoch = j.value("supernet_steps_per_epoch", c.supernet_steps_per_epoch);
  if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
  c.generator_budgets_from_space = j.value("generator_budgets_from_space", c.generator_budgets_from_space);
  if (j.contains("deploy")) c.deploy = DeployConfig::from_json(j.at("deploy"));
  c.selection_per_superclass = j.value("selection_per_superclass", c.selection_per_superclass);
  c.budget_levels = j.value("budget_levels", c.budget_levels);
  c.seed = j.value("seed", c.seed);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  ExperimentConfig c = from_json(read_json(path), path.parent_path());
  if (auto s = seed_from_env()) c.seed = *s;
  return c;
}

void ExperimentConfig::validate() const {
  if (!space_file.empty() && !std::filesystem::exists(space_file))
    throw std::invalid_argument("space file " + space_file.string() + " does not exist");
  if (!partition_file.empty() && !std::filesystem::exists(partition_file))
    throw std::invalid_argument("partition file " + partition_file.string() + " does not exist");
  if (dataset.kind == DatasetSource::Kind::kDirectory) {
    if (!std::filesystem::is_directory(dataset.directory))
      throw std::invalid_argument("dataset directory " + dataset.directory.string() + " does not exist");
    if (partition_file.empty())
      throw std::invalid_argument("an image directory needs an explicit partition file");
  }
  supernet.validate();
  dropout.validate();
  generator.validate();
  for (double b : budget_levels)
    if (!(b > 0)) throw std::invalid_argument("budget levels must be positive");
  if (selection_per_superclass == 0) throw std::invalid_argument("selection_per_superclass must be positive");
}

SearchSpace ExperimentConfig::load_space() const {
  SearchSpace s = space_file.empty() ? SearchSpace::default_space(dataset.synthetic.classes)
                                     : SearchSpace::from_json(read_json(space_file));
  s.validate();
  return s;
}

SuperclassPartition ExperimentConfig::load_partition() const {
  if (!partition_file.empty()) return SuperclassPartition::load(partition_file);
  return SuperclassPartition::contiguous(dataset.synthetic.classes, dataset.synthetic.superclasses);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::vector<SimilarityPoint> similarity_report(const std::map<double, std::vector<DiscreteArch>>& archs_by_level,
                                               const SearchSpace& space, std::vector<std::string>* warnings) {
  std::vector<SimilarityPoint> out;
  for (const auto& [budget, archs] : archs_by_level) {  // std::map iterates ascending
    if (archs.size() < 2) {
      if (warnings)
        warnings->push_back("similarity: budget level " + fixed(budget, 4) + " has fewer than two superclasses; skipped");
      continue;
    }
    std::vector<std::vector<std::uint8_t>> enc;
    for (const auto& a : archs) enc.push_back(one_hot(a, space));
    SimilarityPoint p{budget, 0.0, 0};
    for (std::size_t i = 0; i < enc.size(); ++i)
      for (std::size_t k = i + 1; k < enc.size(); ++k) {
        p.mean_cosine += cosine_similarity(enc[i], enc[k]);
        ++p.pairs;
      }
    p.mean_cosine /= static_cast<double>(p.pairs);
    out.push_back(p);
  }
  return out;
}

std::string similarity_csv(const std::vector<SimilarityPoint>& points) {
  std::ostringstream os;
  os << "budget_madds_m,mean_cosine,pairs\n" << std::setprecision(10);
  for (const auto& p : points) os << p.budget << ',' << p.mean_cosine << ',' << p.pairs << '\n';
  return os.str();
}

double Report::average_accuracy(double budget) const {
  double s = 0;
  int n = 0;
  for (const auto& r : rows)
    if (r.budget == budget) {
      s += r.test_accuracy;
      ++n;
    }
  return n ? s / n : 0.0;
}

double Report::average_madds(double budget) const {
  double s = 0;
  int n = 0;
  for (const auto& r : rows)
    if (r.budget == budget) {
      s += r.madds;
      ++n;
    }
  return n ? s / n : 0.0;
}

nlohmann::json Report::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows)
    rj.push_back({{"superclass", r.superclass},
                  {"superclass_name", r.superclass_name},
                  {"budget_madds_m", r.budget},
                  {"arch", r.arch.to_json()},
                  {"arch_key", r.arch.key()},
                  {"madds_m", r.madds},
                  {"val_accuracy", r.val_accuracy},
                  {"test_accuracy", r.test_accuracy}});
  nlohmann::json levels = nlohmann::json::array();
  for (double b : budget_levels)
    levels.push_back({{"budget_madds_m", b}, {"avg_accuracy", average_accuracy(b)}, {"avg_madds_m", average_madds(b)}});
  nlohmann::json sim = nlohmann::json::array();
  for (const auto& p : similarity)
    sim.push_back({{"budget_madds_m", p.budget}, {"mean_cosine", p.mean_cosine}, {"pairs", p.pairs}});
  return {{"seed", seed},       {"superclasses", superclasses}, {"levels", levels},
          {"rows", rj},         {"similarity", sim},            {"warnings", warnings}};
}

std::string Report::accuracy_csv() const {
  std::ostringstream os;
  os << "superclass";
  for (double b : budget_levels) os << ",B=" << fixed(b, 4);
  os << '\n';
  for (std::size_t t = 0; t < superclasses.size(); ++t) {
    os << superclasses[t];
    for (double b : budget_levels)
      for (const auto& r : rows)
        if (r.superclass == static_cast<int>(t) && r.budget == b) os << ',' << fixed(r.test_accuracy, 6);
    os << '\n';
  }
  os << "Avg. Acc.";
  for (double b : budget_levels) os << ',' << fixed(average_accuracy(b), 6);
  os << "\nAvg. #MAdds";
  for (double b : budget_levels) os << ',' << fixed(average_madds(b), 6);
  os << '\n';
  return os.str();
}

Report build_report(const std::vector<DeploymentResult>& results, const std::vector<double>& test_accuracy,
                    const SuperclassPartition& partition, const std::vector<double>& levels,
                    const SearchSpace& space, std::uint64_t seed) {
  if (results.size() != test_accuracy.size())
    throw std::invalid_argument("build_report: one test accuracy per result required");
  Report rep;
  rep.seed = seed;
  for (const auto& s : partition.superclasses) rep.superclasses.push_back(s.name);
  rep.budget_levels = levels;
  std::sort(rep.budget_levels.begin(), rep.budget_levels.end());
  std::map<double, std::vector<DiscreteArch>> by_level;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    rep.rows.push_back({r.request.superclass, partition.superclasses.at(static_cast<std::size_t>(r.request.superclass)).name,
                        r.request.budget, r.arch, r.madds, r.accuracy, test_accuracy[i]});
    by_level[r.request.budget].push_back(r.arch);
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.superclass != b.superclass ? a.superclass < b.superclass : a.budget < b.budget;
  });
  rep.similarity = similarity_report(by_level, space, &rep.warnings);
  return rep;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                std::ostream* progress) {
  ExperimentResult res;
  auto& sec = res.seconds;
  const Rng root(config.seed);

  stage("config", sec, progress, [&] {
    config.validate();
    res.space = config.load_space();
    res.partition = config.load_partition();
    if (res.space.head.classes != res.partition.num_classes())
      throw std::invalid_argument("space has " + std::to_string(res.space.head.classes) + " outputs but partition covers " +
                                  std::to_string(res.partition.num_classes()) + " classes");
    res.table = build_cost_table(res.space);
    std::filesystem::create_directories(out_dir / "archs");
    write_text(out_dir / "config.json", config.to_json().dump(2) + "\n");
  });

  stage("dataset", sec, progress, [&] {
    res.data = ingest_dataset(config.dataset, res.partition, dataset_seed(config.seed));
    if (progress)
      *progress << "  train " << res.data.train.size() << ", val " << res.data.val.size() << ", test "
                << res.data.test.size() << std::endl;
  });

  stage("supernet", sec, progress, [&] {
    Rng init = root.split("supernet-init");
    res.supernet = Supernet::create(res.space, init);
    TrainOptions o;
    o.divergence_checkpoint = out_dir / "supernet_diverged.ckpt";
    o.max_steps_per_epoch = config.supernet_steps_per_epoch;
    if (progress)
      o.on_epoch = [&](const EpochMetrics& m) {
        *progress << "  epoch " << m.epoch << " (" << m.phase << ") loss " << m.loss << std::endl;
      };
    res.supernet_log = train_supernet(res.supernet, res.data, res.partition, config.supernet, config.dropout,
                                      root.split("supernet-train"), o);
    save_supernet(out_dir / "supernet.ckpt", res.supernet, {{"seed", std::to_string(config.seed)}});
    res.supernet_log.write_csv(out_dir / "supernet_log.csv");
  });

  stage("generator", sec, progress, [&] {
    GeneratorConfig gc = config.generator;
    if (config.generator_budgets_from_space) {
      const GeneratorConfig placed = GeneratorConfig::for_space(res.space, res.table);
      gc.budget_low = placed.budget_low;
      gc.budget_high = placed.budget_high;
      gc.lambda = placed.lambda;
    }
    Rng init = root.split("generator-init");
    res.generator = Generator::create(res.space, gc, res.partition.size(), init);
    GeneratorTrainOptions o;
    o.divergence_checkpoint = out_dir / "generator_diverged.ckpt";
    if (progress)
      o.on_step = [&](const GeneratorStep& s) {
        if (s.step % 100 == 0)
          *progress << "  step " << s.step << " ce " << s.ce << " cost " << s.cost << " budget " << s.budget
                    << std::endl;
      };
    res.generator_log =
        train_generator(res.generator, res.supernet, res.data, res.partition, res.table, root.split("generator-train"), o);
    save_generator(out_dir / "generator.ckpt", res.generator, {{"seed", std::to_string(config.seed)}});
    res.generator_log.write_csv(out_dir / "generator_log.csv");
  });

  std::vector<DeploymentResult> results;
  std::vector<double> levels = config.budget_levels;
  stage("deployment", sec, progress, [&] {
    if (levels.empty()) {
      const auto& gc = res.generator.config;
      for (int i = 1; i <= 4; ++i) levels.push_back(gc.budget_low + i * (gc.budget_high - gc.budget_low) / 5.0);
    }
    std::vector<DeploymentRequest> reqs;
    for (int t = 0; t < res.partition.size(); ++t)
      for (double b : levels) reqs.push_back({t, b});
    AccuracyEvaluator eval(res.supernet, res.data.val, res.partition, config.selection_per_superclass, config.seed);
    results = generate_batch(reqs, res.generator, eval, res.table, config.deploy, root.split("deployment"));
  });

  stage("report", sec, progress, [&] {
    std::vector<double> test_acc;
    for (const auto& r : results) {
      const auto idx = res.data.test.indices_of(res.partition.classes(r.request.superclass));
      test_acc.push_back(
          superclass_accuracy(res.supernet, r.arch, res.data.test, idx, res.partition.classes(r.request.superclass)));
    }
    res.report = build_report(results, test_acc, res.partition, levels, res.space, config.seed);
    for (const auto& row : res.report.rows) {
      nlohmann::json j = {{"superclass", row.superclass_name}, {"budget_madds_m", row.budget},
                          {"arch", row.arch.to_json()},        {"madds_m", row.madds},
                          {"val_accuracy", row.val_accuracy},  {"test_accuracy", row.test_accuracy},
                          {"seed", config.seed}};
      write_text(out_dir / "archs" / (row.superclass_name + "_B" + fixed(row.budget, 3) + ".json"), j.dump(2) + "\n");
    }
    write_text(out_dir / "report.json", res.report.to_json().dump(2) + "\n");
    write_text(out_dir / "report.csv", res.report.accuracy_csv());
    write_text(out_dir / "similarity.csv", similarity_csv(res.report.similarity));
    for (const auto& w : res.report.warnings)
      if (progress) *progress << "  warning: " << w << std::endl;
  });

  nlohmann::json timing = sec;
  timing["seed"] = config.seed;
  write_text(out_dir / "timing.json", timing.dump(2) + "\n");
  return res;
}

}  // namespace eas
