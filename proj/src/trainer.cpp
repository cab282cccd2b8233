#include "eas/trainer.h"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "eas/evaluate.h"
#include "eas/optim.h"

namespace eas {

void DropoutConfig::validate() const {
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("drop rate q must lie in [0, 1], got " + std::to_string(q));
}

TensorF sample_mask(const SuperclassPartition& partition, std::span<const int> targets, double q, Rng& rng) {
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("drop rate q must lie in [0, 1]");
  const int classes = partition.num_classes();
  const auto C = static_cast<std::size_t>(classes);
  TensorF keep(Shape{targets.size(), C}, 1.0f);
  for (std::size_t n = 0; n < targets.size(); ++n) {
    if (targets[n] < 0 || targets[n] >= partition.size())
      throw PartitionError("sample " + std::to_string(n) + " has unknown superclass " + std::to_string(targets[n]));
    for (int t = 0; t < partition.size(); ++t) {
      const double u = rng.uniform();
      if (t == targets[n] || u >= q) continue;
      for (int c : partition.classes(t)) keep[n * C + static_cast<std::size_t>(c)] = 0.0f;
    }
  }
  return keep;
}

TrainSchedule TrainSchedule::progressive(int total_epochs) {
  if (total_epochs < 4) throw std::invalid_argument("progressive schedule needs at least 4 epochs");
  TrainSchedule s;
  const int base = total_epochs / 4, extra = total_epochs % 4;
  const ElasticDims dims[4] = {ElasticDims::none(), {true, false, false}, {true, true, false}, ElasticDims::all()};
  const char* names[4] = {"largest", "kernel", "depth", "width"};
  for (int i = 0; i < 4; ++i) s.phases.push_back({names[i], dims[i], base + (i < extra ? 1 : 0)});
  return s;
}

int TrainSchedule::total_epochs() const {
  int n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

void TrainSchedule::validate() const {
  if (phases.empty()) throw std::invalid_argument("training schedule has no phases");
  for (const auto& p : phases)
    if (p.epochs < 0) throw std::invalid_argument("phase '" + p.name + "' has negative epochs");
  if (total_epochs() <= 0) throw std::invalid_argument("training schedule has zero epochs");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(lr0 > 0)) throw std::invalid_argument("learning rate must be positive");
}

nlohmann::json TrainSchedule::to_json() const {
  nlohmann::json ph = nlohmann::json::array();
  for (const auto& p : phases)
    ph.push_back({{"name", p.name},
                  {"epochs", p.epochs},
                  {"kernel", p.dims.kernel},
                  {"depth", p.dims.depth},
                  {"expand", p.dims.expand}});
  return {{"phases", ph},
          {"batch_size", batch_size},
          {"lr0", lr0},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"distill", distill},
          {"distill_weight", distill_weight},
          {"eval_per_superclass", eval_per_superclass}};
}

TrainSchedule TrainSchedule::from_json(const nlohmann::json& j) {
  TrainSchedule s;
  if (j.contains("phases")) {
    for (const auto& p : j.at("phases"))
      s.phases.push_back({p.value("name", std::string("phase")),
                          {p.value("kernel", true), p.value("depth", true), p.value("expand", true)},
                          p.at("epochs").get<int>()});
  } else {
    s = progressive(j.value("epochs", 120));
  }
  s.batch_size = j.value("batch_size", s.batch_size);
  s.lr0 = j.value("lr0", s.lr0);
  s.momentum = j.value("momentum", s.momentum);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.distill = j.value("distill", s.distill);
  s.distill_weight = j.value("distill_weight", s.distill_weight);
  s.eval_per_superclass = j.value("eval_per_superclass", s.eval_per_superclass);
  return s;
}

std::string TrainLog::csv() const {
  std::ostringstream os;
  os << "epoch,phase,loss,lr";
  for (const auto& n : superclass_names) os << ",val_acc_" << n;
  os << '\n' << std::setprecision(8);
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.phase << ',' << e.loss << ',' << e.lr;
    for (double a : e.superclass_acc) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write training log " + path.string());
  out << csv();
}

namespace {

[[noreturn]] void diverged(const Supernet& net, const TrainOptions& options, int epoch, std::size_t step,
                           const std::string& why) {
  auto path = options.divergence_checkpoint;
  if (path.empty()) path = std::filesystem::temp_directory_path() / "eas_supernet_diverged.ckpt";
  save_supernet(path, net, {{"diverged_epoch", std::to_string(epoch)}, {"diverged_step", std::to_string(step)}});
  throw TrainingDiverged("supernet training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ": " + why + "; weights saved to " + path.string(),
                         path);
}

}  // namespace

TrainLog train_supernet(Supernet& net, const Dataset& data, const SuperclassPartition& partition,
                        const TrainSchedule& schedule, const DropoutConfig& dropout, const Rng& rng,
                        const TrainOptions& options) {
  schedule.validate();
  dropout.validate();
  data.check_partition(partition);
  if (net.space.head.classes != data.num_classes())
    throw std::invalid_argument("supernet has " + std::to_string(net.space.head.classes) +
                                " outputs but the dataset has " + std::to_string(data.num_classes()) + " classes");
  if (data.train.size() == 0) throw DatasetError("training split is empty");

  const SearchSpace& space = net.space;
  const std::vector<int> group_of = partition.class_to_superclass();
  Rng order_rng = rng.split("data-order");
  Rng arch_rng = rng.split("arch-sampling");
  Rng mask_rng = rng.split("superclass-dropout");

  OptimizerConfig oc = OptimizerConfig::sgd(schedule.lr0, schedule.momentum);
  oc.weight_decay = schedule.weight_decay;
  Optimizer opt(oc);

  TrainLog log;
  for (const auto& s : partition.superclasses) log.superclass_names.push_back(s.name);
  std::vector<std::vector<std::size_t>> eval_sets;
  for (int t = 0; t < partition.size(); ++t)
    eval_sets.push_back(superclass_subset(data.val, partition, t, schedule.eval_per_superclass, rng.seed()));

  const DiscreteArch largest = largest_arch(space);
  std::vector<std::size_t> order(data.train.size());
  const int total = schedule.total_epochs();
  int epoch = 0;
  for (const auto& phase : schedule.phases) {
    for (int pe = 0; pe < phase.epochs; ++pe, ++epoch) {
      const double lr = cosine_learning_rate(schedule.lr0, epoch, total);
      opt.set_learning_rate(lr);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), order_rng.engine());

      double loss_sum = 0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
        if (options.max_steps_per_epoch && steps == options.max_steps_per_epoch) break;
        const std::span<const std::size_t> idx(order.data() + start,
                                               std::min(schedule.batch_size, order.size() - start));
        const TensorF x = data.train.batch(idx);
        const std::vector<int> labels = data.train.batch_labels(idx);
        std::vector<int> targets(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) targets[i] = group_of[static_cast<std::size_t>(labels[i])];

        const TensorF keep = dropout.enabled
                                 ? sample_mask(partition, targets, dropout.q, mask_rng)
                                 : TensorF(Shape{labels.size(), static_cast<std::size_t>(data.num_classes())}, 1.0f);
        const DiscreteArch arch = sample_arch(space, phase.dims, arch_rng);

        Graph<float> g;
        const auto p = bind_weights(g, net.weights, true);
        const auto logits = forward_arch(space, p, g.constant(x), arch);
        auto loss = masked_cross_entropy(logits, keep, std::span<const int>(labels));
        if (schedule.distill && !(arch == largest)) {
          const TensorF teacher = infer(net, x, largest);
          loss = add(loss, scale(distillation_kl(logits, teacher, keep), static_cast<float>(schedule.distill_weight)));
        }
        const float value = loss.value().item();
        if (!std::isfinite(value)) diverged(net, options, epoch, steps, "loss is " + std::to_string(value));
        const auto grads = g.backward(loss);
        try {
          opt.step(net.weights, grads);
        } catch (const NonFiniteGradient& e) {
          diverged(net, options, epoch, steps, e.what());
        }
        loss_sum += value;
        ++steps;
      }

      EpochMetrics m;
      m.epoch = epoch;
      m.phase = phase.name;
      m.loss = loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1));
      m.lr = lr;
      for (int t = 0; t < partition.size(); ++t)
        m.superclass_acc.push_back(eval_sets[static_cast<std::size_t>(t)].empty()
                                       ? 0.0
                                       : superclass_accuracy(net, largest, data.val, eval_sets[static_cast<std::size_t>(t)],
                                                             partition.classes(t)));
      log.epochs.push_back(m);
      if (options.on_epoch) options.on_epoch(m);
    }
  }
  return log;
}

}  // namespace eas
