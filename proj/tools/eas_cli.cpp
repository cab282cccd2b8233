// Command-line front end: one subcommand per pipeline stage plus `run`.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "eas/evaluate.h"
#include "eas/harness.h"
#include "eas/runtime.h"

using namespace eas;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

/// Options shared by every stage that touches data.
struct DataArgs {
  std::string space;
  std::string partition;
  std::string data;  // class-folder directory or synthetic-spec JSON; empty: desk synthetic data
  std::uint64_t seed = 2024;

  void add(CLI::App* app, bool need_space = true) {
    auto* s = app->add_option("--space", space, "search space JSON (default: built-in space)");
    if (need_space) s->check(CLI::ExistingFile);
    app->add_option("--partition", partition, "superclass partition JSON")->check(CLI::ExistingFile);
    app->add_option("--data", data, "image directory or synthetic spec JSON");
    app->add_option("--seed", seed, "root seed (EAS_SEED overrides the default)");
  }

  SearchSpace load_space(int classes) const {
    return space.empty() ? SearchSpace::default_space(classes) : SearchSpace::from_json(read_json(space));
  }

  DatasetSource source() const {
    DatasetSource src;
    if (data.empty()) return src;
    if (std::filesystem::is_directory(data)) {
      src.kind = DatasetSource::Kind::kDirectory;
      src.directory = data;
    } else {
      src.synthetic = SyntheticSpec::from_json(read_json(data));
    }
    return src;
  }

  SuperclassPartition load_partition(const DatasetSource& src) const {
    if (!partition.empty()) return SuperclassPartition::load(partition);
    if (src.kind == DatasetSource::Kind::kDirectory) throw std::runtime_error("--partition is required with an image directory");
    return SuperclassPartition::contiguous(src.synthetic.classes, src.synthetic.superclasses);
  }
};

std::uint64_t default_seed() { return seed_from_env().value_or(2024); }

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Elastic architecture search: supernet, generator and deployment"};
  app.require_subcommand(1);

  // run ---------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "full pipeline from an experiment config");
  std::string run_config, run_out = "eas_run";
  run->add_option("--config", run_config, "experiment config JSON (default: desk benchmark)");
  run->add_option("--out", run_out, "output directory");

  // train-supernet ----------------------------------------------------------
  auto* ts = app.add_subcommand("train-supernet", "train the weight-sharing supernet");
  DataArgs ts_data;
  ts_data.seed = default_seed();
  ts_data.add(ts);
  std::string ts_out, ts_log;
  int ts_epochs = 12;
  std::size_t ts_batch = 32, ts_steps = 0;
  double ts_q = 0.0, ts_lr = 0.01;
  bool ts_distill = false;
  ts->add_option("--out", ts_out, "checkpoint path")->required();
  ts->add_option("--log", ts_log, "per-epoch CSV log");
  ts->add_option("--epochs", ts_epochs, "total epochs over the four phases");
  ts->add_option("--batch", ts_batch, "mini-batch size");
  ts->add_option("--steps-per-epoch", ts_steps, "cap on steps per epoch (0: full pass)");
  ts->add_option("--q", ts_q, "superclass dropout rate");
  ts->add_option("--lr", ts_lr, "initial learning rate");
  ts->add_flag("--distill", ts_distill, "distil every sub-network from the largest one");

  // train-generator ---------------------------------------------------------
  auto* tg = app.add_subcommand("train-generator", "train the architecture generator");
  DataArgs tg_data;
  tg_data.seed = default_seed();
  tg_data.add(tg);
  std::string tg_supernet, tg_out, tg_log, tg_config;
  tg->add_option("--supernet", tg_supernet, "trained supernet checkpoint")->required()->check(CLI::ExistingFile);
  tg->add_option("--out", tg_out, "checkpoint path")->required();
  tg->add_option("--log", tg_log, "per-step CSV log");
  tg->add_option("--config", tg_config, "generator config JSON (default: budgets placed in the space's cost range)");

  // generate ----------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "architectures for (superclass, budget) requests");
  DataArgs gen_data;
  gen_data.seed = default_seed();
  gen_data.add(gen, false);
  std::string gen_ckpt, gen_supernet, gen_requests, gen_out;
  DeployConfig gen_deploy;
  std::size_t gen_selection = 512;
  gen->add_option("--gen", gen_ckpt, "generator checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--supernet", gen_supernet, "supernet checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--requests", gen_requests, "requests JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "results JSON")->required();
  gen->add_option("--pool", gen_deploy.pool_size, "feasible candidates compared per request");
  gen->add_option("--attempt-cap", gen_deploy.attempt_cap, "draws before giving up on a request");
  gen->add_option("--selection", gen_selection, "validation samples per superclass used for selection");

  // evaluate ----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "superclass accuracy of one architecture");
  DataArgs ev_data;
  ev_data.seed = default_seed();
  ev_data.add(ev, false);
  std::string ev_supernet, ev_arch, ev_split = "test";
  ev->add_option("--supernet", ev_supernet, "supernet checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--arch", ev_arch, "architecture JSON (default: largest)");
  ev->add_option("--split", ev_split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  // cost --------------------------------------------------------------------
  auto* co = app.add_subcommand("cost", "MAdds of an architecture and the space's range");
  std::string co_space, co_arch;
  int co_classes = 12;
  co->add_option("--space", co_space, "search space JSON")->check(CLI::ExistingFile);
  co->add_option("--classes", co_classes, "classes of the built-in space");
  co->add_option("--arch", co_arch, "architecture JSON");

  // report ------------------------------------------------------------------
  auto* rp = app.add_subcommand("report", "per-level averages and similarity curve from generate results");
  std::string rp_results, rp_space, rp_out = ".";
  int rp_classes = 12;
  rp->add_option("--results", rp_results, "results JSON written by `generate`")->required()->check(CLI::ExistingFile);
  rp->add_option("--space", rp_space, "search space JSON")->check(CLI::ExistingFile);
  rp->add_option("--classes", rp_classes, "classes of the built-in space");
  rp->add_option("--out", rp_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ExperimentConfig cfg = run_config.empty() ? ExperimentConfig::desk() : ExperimentConfig::load(run_config);
      if (run_config.empty())
        if (auto s = seed_from_env()) cfg.seed = *s;
      const auto res = run_experiment(cfg, run_out, &std::cerr);
      std::cout << res.report.accuracy_csv();
    } else if (*ts) {
      const DatasetSource src = ts_data.source();
      const auto part = ts_data.load_partition(src);
      const SearchSpace space = ts_data.load_space(part.num_classes());
      const Dataset data = ingest_dataset(src, part, dataset_seed(ts_data.seed));
      TrainSchedule sched = TrainSchedule::progressive(ts_epochs);
      sched.batch_size = ts_batch;
      sched.lr0 = ts_lr;
      sched.distill = ts_distill;
      const Rng root(ts_data.seed);
      Rng init = root.split("supernet-init");
      Supernet net = Supernet::create(space, init);
      TrainOptions o;
      o.max_steps_per_epoch = ts_steps;
      o.divergence_checkpoint = ts_out + ".diverged";
      o.on_epoch = [](const EpochMetrics& m) {
        std::cerr << "epoch " << m.epoch << " (" << m.phase << ") loss " << m.loss << '\n';
      };
      const auto log = train_supernet(net, data, part, sched, DropoutConfig{ts_q, true}, root.split("supernet-train"), o);
      save_supernet(ts_out, net, {{"seed", std::to_string(ts_data.seed)}});
      if (!ts_log.empty()) log.write_csv(ts_log);
    } else if (*tg) {
      const SearchSpace* expected = nullptr;
      SearchSpace given;
      if (!tg_data.space.empty()) {
        given = SearchSpace::from_json(read_json(tg_data.space));
        expected = &given;
      }
      const Supernet net = load_supernet(tg_supernet, expected);
      const DatasetSource src = tg_data.source();
      const auto part = tg_data.load_partition(src);
      const Dataset data = ingest_dataset(src, part, dataset_seed(tg_data.seed));
      const CostTable table = build_cost_table(net.space);
      GeneratorConfig gc = GeneratorConfig::for_space(net.space, table);
      if (!tg_config.empty()) {
        const auto j = read_json(tg_config);
        const GeneratorConfig placed = gc;
        gc = GeneratorConfig::from_json(j);
        if (!j.contains("budget_low")) {
          gc.budget_low = placed.budget_low;
          gc.budget_high = placed.budget_high;
          if (!j.contains("lambda")) gc.lambda = placed.lambda;
        }
      }
      const Rng root(tg_data.seed);
      Rng init = root.split("generator-init");
      Generator g = Generator::create(net.space, gc, part.size(), init);
      GeneratorTrainOptions o;
      o.divergence_checkpoint = tg_out + ".diverged";
      o.on_step = [](const GeneratorStep& s) {
        if (s.step % 100 == 0) std::cerr << "step " << s.step << " ce " << s.ce << " cost " << s.cost << " budget " << s.budget << '\n';
      };
      const auto log = train_generator(g, net, data, part, table, root.split("generator-train"), o);
      save_generator(tg_out, g, {{"seed", std::to_string(tg_data.seed)}});
      if (!tg_log.empty()) log.write_csv(tg_log);
    } else if (*gen) {
      const Supernet net = load_supernet(gen_supernet);
      const Generator g = load_generator(gen_ckpt, &net.space);
      const DatasetSource src = gen_data.source();
      const auto part = gen_data.load_partition(src);
      const Dataset data = ingest_dataset(src, part, dataset_seed(gen_data.seed));
      const CostTable table = build_cost_table(net.space);
      const auto reqs = load_requests(gen_requests);
      for (const auto& r : reqs)
        if (budget_weights(g.config, r.budget).clamped)
          std::cerr << "warning: budget " << r.budget << "M lies outside the trained range [" << g.config.budget_low
                    << ", " << g.config.budget_high << "]; its embedding is clamped\n";
      AccuracyEvaluator eval(net, data.val, part, gen_selection, gen_data.seed);
      double rollout = 0;
      const auto results = generate_batch(reqs, g, eval, table, gen_deploy, Rng(gen_data.seed).split("deployment"), &rollout);
      nlohmann::json out = nlohmann::json::array();
      for (const auto& r : results) out.push_back(r.to_json());
      write_json(gen_out, out);
      std::cerr << "batched rollout for " << reqs.size() << " requests: " << rollout << " s\n";
    } else if (*ev) {
      const Supernet net = load_supernet(ev_supernet);
      const DatasetSource src = ev_data.source();
      const auto part = ev_data.load_partition(src);
      const Dataset data = ingest_dataset(src, part, dataset_seed(ev_data.seed));
      const DiscreteArch arch = ev_arch.empty() ? largest_arch(net.space) : DiscreteArch::from_json(read_json(ev_arch));
      validate_arch(arch, net.space);
      const Split& split = ev_split == "train" ? data.train : ev_split == "val" ? data.val : data.test;
      std::cout << "superclass,accuracy\n";
      for (int t = 0; t < part.size(); ++t) {
        const auto idx = split.indices_of(part.classes(t));
        std::cout << part.superclasses[static_cast<std::size_t>(t)].name << ','
                  << superclass_accuracy(net, arch, split, idx, part.classes(t)) << '\n';
      }
    } else if (*co) {
      const SearchSpace space = co_space.empty() ? SearchSpace::default_space(co_classes) : SearchSpace::from_json(read_json(co_space));
      const CostTable table = build_cost_table(space);
      std::cout << "gates " << space.gate_count() << "\narchitectures " << to_string(count_architectures(space))
                << "\nminimal_madds_m " << arch_madds(minimal_arch(space), table, space) << "\nlargest_madds_m "
                << arch_madds(largest_arch(space), table, space) << '\n';
      if (!co_arch.empty()) {
        const DiscreteArch arch = DiscreteArch::from_json(read_json(co_arch));
        std::cout << "arch_madds " << arch_madds_exact(arch, table, space) << "\narch_madds_m " << arch_madds(arch, table, space) << '\n';
      }
    } else if (*rp) {
      const SearchSpace space = rp_space.empty() ? SearchSpace::default_space(rp_classes) : SearchSpace::from_json(read_json(rp_space));
      const auto results = read_json(rp_results);
      std::map<double, std::vector<DiscreteArch>> by_level;
      std::map<double, std::pair<double, int>> madds;
      for (const auto& r : results) {
        const double b = r.at("budget_madds_m").get<double>();
        by_level[b].push_back(DiscreteArch::from_json(r.at("arch")));
        madds[b].first += r.at("madds_m").get<double>();
        madds[b].second += 1;
      }
      std::vector<std::string> warnings;
      const auto points = similarity_report(by_level, space, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      std::filesystem::create_directories(rp_out);
      std::ofstream(std::filesystem::path(rp_out) / "similarity.csv") << similarity_csv(points);
      std::ofstream lv(std::filesystem::path(rp_out) / "levels.csv");
      lv << "budget_madds_m,avg_madds_m,requests\n";
      for (const auto& [b, m] : madds) lv << b << ',' << m.first / m.second << ',' << m.second << '\n';
      std::cout << similarity_csv(points);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
