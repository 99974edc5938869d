#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/attack.hpp"
#include "dpsplit/checkpoint.hpp"
#include "dpsplit/common.hpp"
#include "dpsplit/data/loaders.hpp"
#include "dpsplit/io/image_grid.hpp"
#include "dpsplit/metrics.hpp"
#include "dpsplit/privacy.hpp"
#include "dpsplit/splitnet.hpp"
#include "dpsplit/training.hpp"

namespace dpsplit {

inline const std::vector<double>& default_epsilon_grid() {
  static const std::vector<double> kGrid{0.1, 0.2, 0.5, 1,   2,    5,    10,  20,
                                         50,  100, 200, 500, 1000, 2000, 5000};
  return kGrid;
}

struct ExperimentConfig {
  DatasetSpec dataset = DatasetSpec::defaults(DatasetName::kSynthetic);
  int split_case = 1;
  std::vector<double> epsilon_grid = default_epsilon_grid();
  int runs = 5;
  int attack_sample_size = 100;
  int bound_sample_size = 100;
  AttackConfig attack;
  TrainConfig train = TrainConfig::defaults(DatasetName::kSynthetic);
  TrainConfig pretrain = TrainConfig::defaults(DatasetName::kSynthetic);
  std::string output_dir = "out";
  std::string data_root = "data-cache";
  double desk_scale = 1.0;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    dataset.validate();
    check(split_case >= 1 && split_case <= 3, "split case must be 1, 2, or 3");
    check(!epsilon_grid.empty(), "epsilon grid must be non-empty");
    for (double e : epsilon_grid) check(e > 0.0, "epsilon grid values must be positive");
    check(runs >= 1, "runs must be at least 1");
    check(attack_sample_size >= 1, "attack sample size must be at least 1");
    check(bound_sample_size >= 1, "bound sample size must be at least 1");
    check(desk_scale > 0.0 && desk_scale <= 1.0, "desk scale must lie in (0, 1]");
    check(workers >= 1, "worker count must be at least 1");
    attack.validate();
    train.validate();
    pretrain.validate();
  }

  // Grid entries are numbers when finite and the string "inf" for the
  // no-noise sentinel, since JSON numbers cannot carry infinity.
  nlohmann::json to_json() const {
    nlohmann::json eps = nlohmann::json::array();
    for (double e : epsilon_grid) {
      if (std::isfinite(e))
        eps.push_back(e);
      else
        eps.push_back(format_value(e));
    }
    return {{"dataset", dataset.to_json()},
            {"split_case", split_case},
            {"epsilon_grid", eps},
            {"runs", runs},
            {"attack_sample_size", attack_sample_size},
            {"bound_sample_size", bound_sample_size},
            {"attack", attack.to_json()},
            {"train", train.to_json()},
            {"pretrain", pretrain.to_json()},
            {"output_dir", output_dir},
            {"data_root", data_root},
            {"desk_scale", desk_scale},
            {"seed", seed},
            {"workers", workers}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) c.dataset = DatasetSpec::from_json(j.at("dataset"));
    c.split_case = j.value("split_case", c.split_case);
    if (j.contains("epsilon_grid")) {
      c.epsilon_grid.clear();
      for (const auto& e : j.at("epsilon_grid"))
        c.epsilon_grid.push_back(e.is_string() ? parse_value(e.get<std::string>())
                                               : e.get<double>());
    }
    c.runs = j.value("runs", c.runs);
    c.attack_sample_size = j.value("attack_sample_size", c.attack_sample_size);
    c.bound_sample_size = j.value("bound_sample_size", c.bound_sample_size);
    if (j.contains("attack")) c.attack = AttackConfig::from_json(j.at("attack"));
    if (j.contains("train"))
      c.train = TrainConfig::from_json(j.at("train"));
    else
      c.train = TrainConfig::defaults(c.dataset.name);
    if (j.contains("pretrain")) c.pretrain = TrainConfig::from_json(j.at("pretrain"));
    c.output_dir = j.value("output_dir", c.output_dir);
    c.data_root = j.value("data_root", c.data_root);
    c.desk_scale = j.value("desk_scale", c.desk_scale);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.validate();
    return c;
  }
};

struct ExperimentRecord {
  std::string dataset;
  int split_case = 1;
  double epsilon = std::numeric_limits<double>::infinity();
  int run = 0;  // number of accuracy runs averaged into `accuracy`
  double accuracy = 0.0;
  double normalized_accuracy_loss = 0.0;
  double mean_mse = 0.0;
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;
  bool failed = false;
  std::string failure_stage;
  std::string diagnostic;
  std::vector<std::string> artifact_paths;

  // In-memory only: tiles for the combined sweep grid.
  std::vector<Tensor<float>> grid_originals;
  std::vector<Tensor<float>> grid_reconstructions;
};

inline std::string epsilon_label(double eps) { return format_value(eps); }

// ---------------------------------------------------------------------------
// Shared per-(dataset, case) state: data, pretrained backbone, frozen split,
// trained baseline, clipping bound. Built once, read-only during a sweep.
template <typename T>
struct ExperimentContext {
  ExperimentConfig config;
  Dataset data;
  SplitModel<T> baseline;     // local frozen, remote trained on clean features
  BoundEstimate bound;
  AccuracyReport baseline_accuracy;
  std::vector<std::size_t> attack_indices;  // fixed across the whole grid
};

template <typename T>
ExperimentContext<T> prepare_context(const ExperimentConfig& config) {
  config.validate();
  ExperimentContext<T> ctx;
  ctx.config = config;

  namespace fs = std::filesystem;
  const fs::path out(config.output_dir);
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "cells");
  fs::create_directories(out / "grids");

  ctx.data = load_dataset(config.dataset, config.data_root, config.desk_scale);
  check(!ctx.data.train.empty() && !ctx.data.test.empty(), "dataset loaded empty");

  ArchitectureSpec arch = default_architecture();
  arch.num_classes = config.dataset.n_classes;
  arch.in_channels = config.dataset.channels;
  arch.in_height = config.dataset.height;
  arch.in_width = config.dataset.width;

  // Pretrained backbone donates the frozen local layers. The pretraining
  // task is disjoint from the evaluation task (20-class corpus).
  const fs::path backbone_path = out / "checkpoints" / "backbone.ckpt";
  nn::Network<T> backbone;
  const int pretrain_classes = 20;
  if (fs::exists(backbone_path)) {
    auto loaded = load_backbone<T>(backbone_path.string());
    check(loaded.classes == pretrain_classes, "backbone checkpoint has unexpected class count");
    check(loaded.spec.to_json() == arch.to_json(),
          "backbone checkpoint was built for a different architecture");
    backbone = std::move(loaded.net);
  } else {
    backbone = build_network<T>(arch, pretrain_classes, derive_seed(config.seed, "backbone-init"));
    Dataset pre = load_pretrain_dataset(config.data_root, config.desk_scale,
                                        derive_seed(config.seed, "pretrain-data"));
    TrainConfig pc = config.pretrain;
    pc.seed = derive_seed(config.seed, "pretrain");
    train_backbone(backbone, pre.train, pc);
    save_backbone<T>(backbone_path.string(), arch, pretrain_classes, backbone,
                     {{"seed", config.seed}, {"pretrain_examples", pre.train.size()}});
  }

  SplitModel<T> split =
      make_split_model<T>(backbone, arch, config.split_case, derive_seed(config.seed, "split"));

  const fs::path baseline_path = out / "checkpoints" / "baseline.ckpt";
  if (fs::exists(baseline_path)) {
    ctx.baseline = load_split_model<T>(baseline_path.string());
  } else {
    TrainConfig tc = config.train;
    tc.noisy = false;
    tc.seed = derive_seed(config.seed, "train-baseline");
    ctx.baseline = train_baseline(split, ctx.data.train, tc);
    save_split_model<T>(baseline_path.string(), ctx.baseline, {{"seed", config.seed}});
  }

  ctx.bound = estimate_bound(sample_local_features(
      ctx.baseline, ctx.data.train,
      std::min<int>(config.bound_sample_size, static_cast<int>(ctx.data.train.size())),
      derive_seed(config.seed, "bound")));

  ctx.baseline_accuracy =
      evaluate(ctx.baseline, ctx.data.test, nullptr, config.runs, derive_seed(config.seed, "eval"));

  const int want = std::min<int>(config.attack_sample_size, static_cast<int>(ctx.data.test.size()));
  std::vector<std::size_t> idx(ctx.data.test.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, "attack-sample"));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(want));
  ctx.attack_indices = std::move(idx);
  return ctx;
}

// ---------------------------------------------------------------------------
// One epsilon cell: fine-tune (or reuse) the model for this epsilon,
// evaluate accuracy, attack the fixed image sample, persist record + grid.
template <typename T>
ExperimentRecord run_cell_in_context(const ExperimentContext<T>& ctx, double epsilon) {
  const ExperimentConfig& config = ctx.config;
  ExperimentRecord rec;
  rec.dataset = to_string(config.dataset.name);
  rec.split_case = config.split_case;
  rec.epsilon = epsilon;
  rec.run = config.runs;

  namespace fs = std::filesystem;
  const std::string label = epsilon_label(epsilon);
  const fs::path cell_dir = fs::path(config.output_dir) / "cells" / ("eps_" + label);
  std::string stage = "setup";
  try {
    fs::create_directories(cell_dir);
    const bool sentinel = !std::isfinite(epsilon);
    PrivacyParams privacy;
    privacy.epsilon = epsilon;
    privacy.bound = ctx.bound.bound;

    SplitModel<T> model;
    if (sentinel) {
      model = ctx.baseline;
    } else {
      stage = "finetune";
      const fs::path ck = fs::path(config.output_dir) / "checkpoints" / ("finetune_eps_" + label + ".ckpt");
      if (fs::exists(ck)) {
        model = load_split_model<T>(ck.string());
      } else {
        TrainConfig tc = config.train;
        tc.noisy = true;
        tc.noise_params = privacy;
        tc.seed = derive_seed(config.seed, "finetune", label);
        model = noisy_finetune(ctx.baseline, ctx.data.train, tc);
        save_split_model<T>(ck.string(), model,
                            {{"seed", config.seed}, {"epsilon", epsilon}, {"bound", ctx.bound.bound}});
      }
    }

    stage = "evaluate";
    const AccuracyReport acc =
        sentinel ? ctx.baseline_accuracy
                 : evaluate(model, ctx.data.test, &privacy, config.runs,
                            derive_seed(config.seed, "eval-cell", label));
    rec.accuracy = acc.accuracy;
    rec.normalized_accuracy_loss =
        100.0 * (ctx.baseline_accuracy.accuracy - acc.accuracy) / ctx.baseline_accuracy.accuracy;

    stage = "attack";
    std::vector<Tensor<float>> images;
    images.reserve(ctx.attack_indices.size());
    for (std::size_t i : ctx.attack_indices) images.push_back(ctx.data.test[i].image);
    std::vector<Tensor<T>> typed;
    typed.reserve(images.size());
    for (const auto& im : images) typed.push_back(im.template cast<T>());

    AttackConfig ac = config.attack;
    ac.seed = derive_seed(config.seed, "attack", label);
    const auto items = attack_batch<T>(ctx.baseline, typed, sentinel ? nullptr : &privacy, ac);

    double sum_mse = 0.0, sum_ssim = 0.0, sum_psnr = 0.0;
    int ok = 0;
    for (const auto& item : items) {
      if (!item.ok) continue;
      sum_mse += item.metrics.mse;
      sum_ssim += item.metrics.ssim;
      sum_psnr += item.metrics.psnr;
      ++ok;
    }
    check(ok > 0, "every attack image diverged");
    rec.mean_mse = sum_mse / ok;
    rec.mean_ssim = sum_ssim / ok;
    rec.mean_psnr = sum_psnr / ok;

    stage = "persist";
    const int show = std::min<std::size_t>(4, items.size());
    std::vector<std::vector<Tensor<float>>> recon_rows;
    for (int i = 0; i < show; ++i) {
      rec.grid_originals.push_back(images[static_cast<std::size_t>(i)]);
      Tensor<float> r = items[static_cast<std::size_t>(i)].reconstructed.template cast<float>();
      rec.grid_reconstructions.push_back(r);
      recon_rows.push_back({std::move(r)});
    }
    const fs::path grid_path = fs::path(config.output_dir) / "grids" / ("eps_" + label + ".png");
    io::export_grid(rec.grid_originals, recon_rows, {label}, grid_path.string());
    rec.artifact_paths.push_back(grid_path.string());

    nlohmann::json rj = {{"dataset", rec.dataset},
                         {"case", rec.split_case},
                         {"epsilon", label},
                         {"bound", ctx.bound.bound},
                         {"runs", config.runs},
                         {"accuracy", rec.accuracy},
                         {"per_run", acc.per_run},
                         {"normalized_accuracy_loss", rec.normalized_accuracy_loss},
                         {"mean_mse", rec.mean_mse},
                         {"mean_ssim", rec.mean_ssim},
                         {"mean_psnr", format_value(rec.mean_psnr)},
                         {"attack_images", static_cast<int>(items.size())},
                         {"attack_failures", static_cast<int>(items.size()) - ok},
                         {"config", config.to_json()}};
    std::ofstream rf(cell_dir / "record.json", std::ios::trunc);
    if (!rf) throw IoError("cannot write " + (cell_dir / "record.json").string());
    rf << rj.dump(2) << "\n";
    rec.artifact_paths.push_back((cell_dir / "record.json").string());
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.failure_stage = stage;
    rec.diagnostic = e.what();
  }
  return rec;
}

template <typename T>
ExperimentRecord run_cell(const ExperimentConfig& config, double epsilon) {
  const ExperimentContext<T> ctx = prepare_context<T>(config);
  return run_cell_in_context(ctx, epsilon);
}

// ---------------------------------------------------------------------------
inline void write_results(const std::vector<ExperimentRecord>& records, const std::string& dir) {
  check(!records.empty(), "no records to write");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<const ExperimentRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const ExperimentRecord* a, const ExperimentRecord* b) { return a->epsilon < b->epsilon; });

  std::ofstream csv(fs::path(dir) / "results.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write results.csv under " + dir);
  csv << "dataset,case,epsilon,run,accuracy,norm_acc_loss,mse,ssim,psnr\n";
  for (const ExperimentRecord* r : sorted) {
    if (r->failed) continue;
    csv << r->dataset << "," << r->split_case << "," << format_value(r->epsilon) << "," << r->run
        << "," << format_value(r->accuracy) << "," << format_value(r->normalized_accuracy_loss)
        << "," << format_value(r->mean_mse) << "," << format_value(r->mean_ssim) << ","
        << format_value(r->mean_psnr) << "\n";
  }
  if (!csv) throw IoError("results.csv write failed under " + dir);

  nlohmann::json failures = nlohmann::json::array();
  for (const ExperimentRecord* r : sorted)
    if (r->failed)
      failures.push_back({{"epsilon", format_value(r->epsilon)},
                          {"stage", r->failure_stage},
                          {"diagnostic", r->diagnostic}});
  if (!failures.empty()) {
    std::ofstream ff(fs::path(dir) / "failures.json", std::ios::trunc);
    ff << failures.dump(2) << "\n";
  }
}

template <typename T>
std::vector<ExperimentRecord> sweep(const ExperimentConfig& config) {
  const ExperimentContext<T> ctx = prepare_context<T>(config);

  // The baseline row rides along as the epsilon = +inf sentinel.
  std::vector<double> grid = config.epsilon_grid;
  if (std::none_of(grid.begin(), grid.end(), [](double e) { return std::isinf(e); }))
    grid.push_back(std::numeric_limits<double>::infinity());
  std::sort(grid.begin(), grid.end());

  std::vector<ExperimentRecord> records(grid.size());
  std::atomic<std::size_t> next{0};
  const int workers = std::max(1, std::min<int>(config.workers, static_cast<int>(grid.size())));
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= grid.size()) return;
      records[i] = run_cell_in_context(ctx, grid[i]);
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  write_results(records, config.output_dir);

  std::ofstream lock(std::filesystem::path(config.output_dir) / "config.lock", std::ios::trunc);
  if (!lock) throw IoError("cannot write config.lock under " + config.output_dir);
  nlohmann::json lj = ctx.config.to_json();
  lj["resolved"] = {{"bound", ctx.bound.bound},
                    {"bound_samples", ctx.bound.sample_count},
                    {"baseline_accuracy", ctx.baseline_accuracy.accuracy},
                    {"train_examples", ctx.data.train.size()},
                    {"test_examples", ctx.data.test.size()}};
  lock << lj.dump(2) << "\n";

  // Combined grid: originals plus one reconstruction column per epsilon.
  std::vector<const ExperimentRecord*> with_tiles;
  for (const auto& r : records)
    if (!r.failed && !r.grid_originals.empty()) with_tiles.push_back(&r);
  if (!with_tiles.empty()) {
    std::sort(with_tiles.begin(), with_tiles.end(),
              [](const ExperimentRecord* a, const ExperimentRecord* b) { return a->epsilon < b->epsilon; });
    const std::size_t rows = with_tiles.front()->grid_originals.size();
    bool uniform = true;
    for (const auto* r : with_tiles) uniform = uniform && r->grid_originals.size() == rows;
    if (uniform) {
      std::vector<std::string> labels;
      std::vector<std::vector<Tensor<float>>> recon(rows);
      for (const auto* r : with_tiles) {
        labels.push_back(epsilon_label(r->epsilon));
        for (std::size_t i = 0; i < rows; ++i) recon[i].push_back(r->grid_reconstructions[i]);
      }
      io::export_grid(with_tiles.front()->grid_originals, recon, labels,
                      (std::filesystem::path(config.output_dir) / "grids" / "sweep.png").string());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Pivot of results.csv in the published table layout: one row per metric,
// one column per epsilon, baseline (inf) last.
inline std::string pivot_report(const std::string& results_csv) {
  std::ifstream in(results_csv);
  if (!in) throw IoError("cannot open " + results_csv);
  std::string line;
  if (!std::getline(in, line) || line != "dataset,case,epsilon,run,accuracy,norm_acc_loss,mse,ssim,psnr")
    throw InputError("unexpected results header in " + results_csv);

  struct Row {
    double eps;
    double acc, loss, mse, ssim, psnr;
  };
  std::map<std::pair<std::string, int>, std::vector<Row>> groups;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 9) throw InputError("malformed results row: " + line);
    Row r{parse_value(f[2]), parse_value(f[4]), parse_value(f[5]),
          parse_value(f[6]), parse_value(f[7]), parse_value(f[8])};
    groups[{f[0], std::stoi(f[1])}].push_back(r);
  }

  std::ostringstream out;
  for (auto& [key, rows] : groups) {
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.eps < b.eps; });
    out << "dataset " << key.first << ", case " << key.second << "\n";
    const auto emit = [&](const char* name, auto pick) {
      out << name;
      for (const Row& r : rows) out << "\t" << format_value(pick(r));
      out << "\n";
    };
    out << "epsilon";
    for (const Row& r : rows) out << "\t" << format_value(r.eps);
    out << "\n";
    emit("accuracy", [](const Row& r) { return r.acc; });
    emit("norm_acc_loss", [](const Row& r) { return r.loss; });
    emit("mse", [](const Row& r) { return r.mse; });
    emit("ssim", [](const Row& r) { return r.ssim; });
    emit("psnr", [](const Row& r) { return r.psnr; });
    out << "\n";
  }
  return out.str();
}

}  // namespace dpsplit
