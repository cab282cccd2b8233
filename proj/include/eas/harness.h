#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eas/deployment.h"
#include "eas/trainer.h"

namespace eas {

/// Failure inside one pipeline stage; what() starts with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DatasetSource {
  enum class Kind { kSynthetic, kDirectory };
  Kind kind = Kind::kSynthetic;
  SyntheticSpec synthetic;
  std::filesystem::path directory;
  SplitFractions fractions;

  nlohmann::json to_json() const;
  static DatasetSource from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Loads or synthesises the data and checks it against the partition. The
/// seed replaces the synthetic spec's own seed and drives directory splits.
Dataset ingest_dataset(const DatasetSource& source, const SuperclassPartition& partition, std::uint64_t seed);

/// Seed handed to ingest_dataset for a given root seed, shared by the
/// pipeline and the individual CLI stages so they all see the same split.
std::uint64_t dataset_seed(std::uint64_t root_seed);

/// Reads EAS_SEED; nullopt when unset. Malformed values throw.
std::optional<std::uint64_t> seed_from_env();

struct ExperimentConfig {
  std::filesystem::path space_file;      // empty: default space
  std::filesystem::path partition_file;  // empty: contiguous groups of the synthetic spec
  DatasetSource dataset;
  TrainSchedule supernet = TrainSchedule::progressive(12);
  DropoutConfig dropout{0.0, true};
  std::size_t supernet_steps_per_epoch = 0;  // 0: full passes
  /// Budget range and lambda are placed inside the space's cost range unless
  /// `generator_budgets_from_space` is false.
  GeneratorConfig generator;
  bool generator_budgets_from_space = true;
  DeployConfig deploy;
  std::size_t selection_per_superclass = 512;  // validation samples used to pick among candidates
  /// Reporting budgets (M MAdds). Empty: 4 levels evenly spaced strictly
  /// inside the generator's budget range.
  std::vector<double> budget_levels;
  std::uint64_t seed = 2024;

  /// Desk-scale benchmark: 12 synthetic classes in 4 superclasses, default space.
  static ExperimentConfig desk();
  nlohmann::json to_json() const;
  /// Relative file paths are resolved against `base_dir`.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  /// Reads a JSON file and applies EAS_SEED.
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Referenced files exist and every section is consistent.
  void validate() const;

  SearchSpace load_space() const;
  SuperclassPartition load_partition() const;
};

struct SimilarityPoint {
  double budget = 0;
  double mean_cosine = 0;
  std::size_t pairs = 0;
};

/// Mean pairwise one-hot cosine between the architectures of different
/// superclasses at each budget level, ascending by budget. Levels with fewer
/// than two architectures are skipped and named in `warnings`.
std::vector<SimilarityPoint> similarity_report(const std::map<double, std::vector<DiscreteArch>>& archs_by_level,
                                               const SearchSpace& space,
                                               std::vector<std::string>* warnings = nullptr);
std::string similarity_csv(const std::vector<SimilarityPoint>& points);

struct ReportRow {
  int superclass = 0;
  std::string superclass_name;
  double budget = 0;
  DiscreteArch arch;
  double madds = 0;
  double val_accuracy = 0;
  double test_accuracy = 0;
};

struct Report {
  std::uint64_t seed = 0;
  std::vector<std::string> superclasses;
  std::vector<double> budget_levels;
  std::vector<ReportRow> rows;  // superclass-major, levels ascending
  std::vector<SimilarityPoint> similarity;
  std::vector<std::string> warnings;

  double average_accuracy(double budget) const;
  double average_madds(double budget) const;
  nlohmann::json to_json() const;
  /// Accuracy grid: one row per superclass, one column per level, then the
  /// Avg. Acc. and Avg. #MAdds rows.
  std::string accuracy_csv() const;
};

/// Builds the report from deployment results and test-split accuracies.
Report build_report(const std::vector<DeploymentResult>& results, const std::vector<double>& test_accuracy,
                    const SuperclassPartition& partition, const std::vector<double>& levels,
                    const SearchSpace& space, std::uint64_t seed);

struct ExperimentResult {
  Report report;
  std::map<std::string, double> seconds;  // per stage
  SearchSpace space;
  SuperclassPartition partition;
  Dataset data;
  CostTable table;
  Supernet supernet;
  Generator generator;
  TrainLog supernet_log;
  GeneratorLog generator_log;
};

/// dataset -> supernet -> generator -> deployment -> report. Writes into
/// `out_dir`: config.json, supernet.ckpt, supernet_log.csv, generator.ckpt,
/// generator_log.csv, archs/*.json, report.json, report.csv, similarity.csv
/// and timing.json (the only file that differs between identical runs).
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                std::ostream* progress = nullptr);

}  // namespace eas
