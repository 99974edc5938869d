// Command-line front end: dataset acquisition, backbone pretraining, baseline
// and noisy training, reconstruction attacks, epsilon sweeps, and result
// reports. Every verb resolves its configuration as defaults, then an
// optional JSON config file, then explicit flags, in that order.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

// Library headers must precede httplib: its resolver include defines a _res
// macro that corrupts identifiers inside later-parsed linear algebra headers.
#include "dpsplit/harness.hpp"

#include <CLI11.hpp>
#include <httplib.h>

namespace fs = std::filesystem;
using namespace dpsplit;

// Model arithmetic for the CLI. Tests exercise double precision separately.
using Real = float;

namespace {

struct RemoteFile {
  const char* dataset;
  const char* file;
  const char* url;
};

// cifar100 is the pretraining corpus for the frozen feature extractor; the
// other archives are the evaluation datasets.
constexpr RemoteFile kRemoteFiles[] = {
    {"svhn", "train_32x32.mat", "http://ufldl.stanford.edu/housenumbers/train_32x32.mat"},
    {"svhn", "test_32x32.mat", "http://ufldl.stanford.edu/housenumbers/test_32x32.mat"},
    {"cifar10", "cifar-10-binary.tar.gz", "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"},
    {"cifar100", "cifar-100-binary.tar.gz",
     "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz"},
    {"stl10", "stl10_binary.tar.gz", "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz"},
    {"gtsrb", "GTSRB_Final_Training_Images.zip",
     "https://sid.erda.dk/public/archives/daaeac0d7ce1152aea9b61d9f1e19370/"
     "GTSRB_Final_Training_Images.zip"},
};

bool download_file(const std::string& url, const fs::path& dest) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    std::cerr << "  malformed url: " << url << "\n";
    return false;
  }
  const auto host_end = url.find('/', scheme_end + 3);
  const std::string base = url.substr(0, host_end);
  const std::string path = host_end == std::string::npos ? "/" : url.substr(host_end);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (base.rfind("https", 0) == 0) {
    std::cerr << "  built without TLS support, cannot fetch " << url << "\n";
    return false;
  }
#endif
  httplib::Client client(base);
  client.set_follow_location(true);
  client.set_connection_timeout(30);
  client.set_read_timeout(120);

  const fs::path partial = dest.string() + ".part";
  std::ofstream out(partial, std::ios::binary | std::ios::trunc);
  if (!out) {
    std::cerr << "  cannot write " << partial << "\n";
    return false;
  }
  std::uint64_t received = 0;
  auto res = client.Get(
      path,
      [&](const char* data, size_t len) {
        out.write(data, static_cast<std::streamsize>(len));
        received += len;
        return static_cast<bool>(out);
      },
      [&](std::uint64_t cur, std::uint64_t total) {
        if (total > 0 && cur % (1 << 24) < (1 << 16))
          std::cout << "  " << dest.filename().string() << ": " << cur / (1 << 20) << "/"
                    << total / (1 << 20) << " MiB\r" << std::flush;
        return true;
      });
  out.close();
  if (!res || res->status != 200) {
    std::cerr << "  fetch failed for " << url
              << (res ? " (http " + std::to_string(res->status) + ")"
                      : " (" + httplib::to_string(res.error()) + ")")
              << "\n";
    fs::remove(partial);
    return false;
  }
  fs::rename(partial, dest);
  std::cout << "  fetched " << dest.filename().string() << " (" << received / (1 << 20)
            << " MiB)\n";
  return true;
}

int cmd_fetch_data(const std::vector<std::string>& datasets, const std::string& data_root) {
  const fs::path raw_dir = fs::path(data_root) / "raw";
  fs::create_directories(raw_dir);
  const auto wanted = [&](const char* name) {
    if (datasets.empty()) return true;
    for (const auto& d : datasets)
      if (d == name || d == "all") return true;
    return false;
  };

  int failures = 0;
  std::vector<std::string> touched;
  for (const RemoteFile& rf : kRemoteFiles) {
    if (!wanted(rf.dataset)) continue;
    const fs::path dest = raw_dir / rf.file;
    if (fs::exists(dest)) {
      std::cout << "  " << rf.file << " already present\n";
    } else if (!download_file(rf.url, dest)) {
      std::cerr << "  place the archive manually at " << dest << " and rerun\n";
      ++failures;
      continue;
    }
    touched.push_back(rf.dataset);
  }
  for (const auto& d : datasets)
    if (d == "synthetic") std::cout << "  synthetic corpus is generated on demand, nothing to fetch\n";

  // Ingest whatever landed so later runs start from the decoded cache.
  for (const auto& name : touched) {
    try {
      if (name == "cifar100")
        loaders::ingest_cifar(fs::path(data_root), /*hundred=*/true);
      else
        loaders::ingest(fs::path(data_root), dataset_from_string(name));
      std::cout << "  ingested " << name << "\n";
    } catch (const std::exception& e) {
      std::cerr << "  ingest failed for " << name << ": " << e.what() << "\n";
      ++failures;
    }
  }
  return failures;
}

// Flags shared by the model-running verbs. Each field mirrors a config key;
// only flags the user actually passed override the config file.
struct CommonFlags {
  std::string config_path;
  std::string dataset;
  int split_case = 1;
  std::string epsilon_grid;
  int runs = 5;
  int attack_samples = 100;
  int bound_samples = 100;
  double desk_scale = 1.0;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string data_root = "data-cache";
  int workers = 1;
  double lr = 0.0;
  int batch_size = 0;
  int epochs = -1;
  int attack_iters = 5000;
  double step_size = 0.01;
  double tv_weight = 0.02;
  std::string attack_init = "uniform_random";
  bool no_project = false;
};

void add_common_flags(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config_path, "JSON config file; flags override its values");
  sub->add_option("--dataset", f.dataset, "svhn, gtsrb, stl10, cifar10, or synthetic");
  sub->add_option("--case", f.split_case, "split depth: 1, 2, or 3")->check(CLI::Range(1, 3));
  sub->add_option("--epsilon-grid", f.epsilon_grid, "comma-separated privacy budgets");
  sub->add_option("--runs", f.runs, "accuracy evaluation repetitions per cell");
  sub->add_option("--attack-samples", f.attack_samples, "test images attacked per cell");
  sub->add_option("--bound-samples", f.bound_samples, "training feature maps for the clipping bound");
  sub->add_option("--desk-scale", f.desk_scale, "fraction of the full-scale dataset and schedule");
  sub->add_option("--seed", f.seed, "root seed; all stage seeds derive from it");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--data-root", f.data_root, "dataset cache directory");
  sub->add_option("--workers", f.workers, "concurrent sweep cells");
  sub->add_option("--lr", f.lr, "training learning rate override");
  sub->add_option("--batch-size", f.batch_size, "training batch size override");
  sub->add_option("--epochs", f.epochs, "training epoch count override");
  sub->add_option("--attack-iters", f.attack_iters, "attack iteration count");
  sub->add_option("--step-size", f.step_size, "attack gradient step size");
  sub->add_option("--tv-weight", f.tv_weight, "attack total-variation weight");
  sub->add_option("--attack-init", f.attack_init,
                  "attack start point: uniform_random, zeros, or constant_half");
  sub->add_flag("--no-project", f.no_project, "skip clamping iterates to the pixel range");
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> grid;
  std::string tok;
  std::istringstream ss(s);
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) grid.push_back(parse_value(tok));
  }
  if (grid.empty()) throw ConfigError("epsilon grid is empty");
  return grid;
}

ExperimentConfig resolve_config(const CLI::App* sub, const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    if (!in) throw IoError("cannot open config file " + f.config_path);
    nlohmann::json j;
    in >> j;
    cfg = ExperimentConfig::from_json(j);
  }

  const auto given = [&](const char* name) { return sub->count(name) > 0; };
  if (given("--dataset")) cfg.dataset = DatasetSpec::defaults(dataset_from_string(f.dataset));
  if (given("--case")) cfg.split_case = f.split_case;
  if (given("--epsilon-grid")) cfg.epsilon_grid = parse_grid(f.epsilon_grid);
  if (given("--runs")) cfg.runs = f.runs;
  if (given("--attack-samples")) cfg.attack_sample_size = f.attack_samples;
  if (given("--bound-samples")) cfg.bound_sample_size = f.bound_samples;
  if (given("--desk-scale")) cfg.desk_scale = f.desk_scale;
  if (given("--seed")) cfg.seed = f.seed;
  if (given("--out")) cfg.output_dir = f.out;
  if (given("--data-root")) cfg.data_root = f.data_root;
  if (given("--workers")) cfg.workers = f.workers;

  // Without an explicit training section the published per-dataset schedule
  // applies, shortened in proportion to the desk scale.
  if (f.config_path.empty()) {
    cfg.train = TrainConfig::defaults(cfg.dataset.name, cfg.desk_scale);
    cfg.pretrain = TrainConfig::defaults(DatasetName::kSynthetic, cfg.desk_scale);
  }
  if (given("--lr")) cfg.train.learning_rate = f.lr;
  if (given("--batch-size")) cfg.train.batch_size = f.batch_size;
  if (given("--epochs")) cfg.train.epochs = f.epochs;
  if (given("--attack-iters")) cfg.attack.max_iters = f.attack_iters;
  if (given("--step-size")) cfg.attack.step_size = f.step_size;
  if (given("--tv-weight")) cfg.attack.tv_weight = f.tv_weight;
  if (given("--attack-init")) cfg.attack.init_mode = attack_init_from_string(f.attack_init);
  if (f.no_project) cfg.attack.project = false;

  cfg.validate();
  return cfg;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  ArchitectureSpec arch = default_architecture();
  arch.num_classes = cfg.dataset.n_classes;
  arch.in_channels = cfg.dataset.channels;
  arch.in_height = cfg.dataset.height;
  arch.in_width = cfg.dataset.width;
  const int pretrain_classes = 20;

  const fs::path path = fs::path(cfg.output_dir) / "checkpoints" / "backbone.ckpt";
  if (fs::exists(path)) {
    std::cout << "backbone already present at " << path << "\n";
    return 0;
  }
  fs::create_directories(path.parent_path());

  Dataset pre =
      load_pretrain_dataset(cfg.data_root, cfg.desk_scale, derive_seed(cfg.seed, "pretrain-data"));
  std::cout << "pretraining corpus: " << pre.train.size() << " train / " << pre.test.size()
            << " test, " << pre.spec.n_classes << " classes\n";

  nn::Network<Real> net =
      build_network<Real>(arch, pretrain_classes, derive_seed(cfg.seed, "backbone-init"));
  TrainConfig pc = cfg.pretrain;
  pc.seed = derive_seed(cfg.seed, "pretrain");
  train_backbone(net, pre.train, pc);
  save_backbone<Real>(path.string(), arch, pretrain_classes, net,
                      {{"seed", cfg.seed}, {"pretrain_examples", pre.train.size()}});
  std::cout << "saved " << path << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, double epsilon) {
  ExperimentContext<Real> ctx = prepare_context<Real>(cfg);
  std::cout << "dataset " << to_string(cfg.dataset.name) << ": " << ctx.data.train.size()
            << " train / " << ctx.data.test.size() << " test\n";
  std::cout << "clipping bound (" << ctx.bound.sample_count
            << " samples): " << format_value(ctx.bound.bound) << "\n";
  std::cout << "baseline accuracy: " << format_value(ctx.baseline_accuracy.accuracy) << "%\n";
  if (!std::isfinite(epsilon)) return 0;

  PrivacyParams privacy;
  privacy.epsilon = epsilon;
  privacy.bound = ctx.bound.bound;
  const std::string label = epsilon_label(epsilon);
  const fs::path ck =
      fs::path(cfg.output_dir) / "checkpoints" / ("finetune_eps_" + label + ".ckpt");
  SplitModel<Real> model;
  if (fs::exists(ck)) {
    model = load_split_model<Real>(ck.string());
    std::cout << "loaded " << ck << "\n";
  } else {
    TrainConfig tc = cfg.train;
    tc.noisy = true;
    tc.noise_params = privacy;
    tc.seed = derive_seed(cfg.seed, "finetune", label);
    model = noisy_finetune(ctx.baseline, ctx.data.train, tc);
    save_split_model<Real>(ck.string(), model,
                           {{"seed", cfg.seed}, {"epsilon", epsilon}, {"bound", ctx.bound.bound}});
    std::cout << "saved " << ck << "\n";
  }
  const AccuracyReport acc = evaluate(model, ctx.data.test, &privacy, cfg.runs,
                                      derive_seed(cfg.seed, "eval-cell", label));
  const double loss =
      100.0 * (ctx.baseline_accuracy.accuracy - acc.accuracy) / ctx.baseline_accuracy.accuracy;
  std::cout << "epsilon " << label << ": accuracy " << format_value(acc.accuracy)
            << "% (normalized loss " << format_value(loss) << "%)\n";
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg, double epsilon) {
  ExperimentContext<Real> ctx = prepare_context<Real>(cfg);
  const bool sentinel = !std::isfinite(epsilon);
  PrivacyParams privacy;
  privacy.epsilon = epsilon;
  privacy.bound = ctx.bound.bound;
  const std::string label = epsilon_label(epsilon);

  std::vector<Tensor<Real>> images;
  std::vector<Tensor<float>> originals;
  images.reserve(ctx.attack_indices.size());
  for (std::size_t i : ctx.attack_indices) {
    originals.push_back(ctx.data.test[i].image);
    images.push_back(ctx.data.test[i].image.cast<Real>());
  }

  AttackConfig ac = cfg.attack;
  ac.seed = derive_seed(cfg.seed, "attack", label);
  const auto items = attack_batch<Real>(ctx.baseline, images, sentinel ? nullptr : &privacy, ac);

  double mse = 0.0, ssim = 0.0, psnr = 0.0;
  int ok = 0;
  for (const auto& item : items) {
    if (!item.ok) continue;
    mse += item.metrics.mse;
    ssim += item.metrics.ssim;
    psnr += item.metrics.psnr;
    ++ok;
  }
  check(ok > 0, "every attack image diverged");
  std::cout << "epsilon " << label << " over " << ok << "/" << items.size()
            << " images: mse " << format_value(mse / ok) << ", ssim " << format_value(ssim / ok)
            << ", psnr " << format_value(psnr / ok) << "\n";

  const int show = static_cast<int>(std::min<std::size_t>(4, items.size()));
  std::vector<Tensor<float>> orig_rows;
  std::vector<std::vector<Tensor<float>>> recon_rows;
  for (int i = 0; i < show; ++i) {
    orig_rows.push_back(originals[static_cast<std::size_t>(i)]);
    recon_rows.push_back({items[static_cast<std::size_t>(i)].reconstructed.cast<float>()});
  }
  const fs::path grid = fs::path(cfg.output_dir) / "grids" / ("attack_eps_" + label + ".png");
  fs::create_directories(grid.parent_path());
  io::export_grid(orig_rows, recon_rows, {label}, grid.string());
  std::cout << "wrote " << grid << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  const auto records = sweep<Real>(cfg);
  int failures = 0;
  for (const auto& r : records) {
    if (r.failed) {
      ++failures;
      std::cout << "epsilon " << epsilon_label(r.epsilon) << ": FAILED at " << r.failure_stage
                << " (" << r.diagnostic << ")\n";
    } else {
      std::cout << "epsilon " << epsilon_label(r.epsilon) << ": accuracy "
                << format_value(r.accuracy) << "%, mse " << format_value(r.mean_mse) << ", ssim "
                << format_value(r.mean_ssim) << ", psnr " << format_value(r.mean_psnr) << "\n";
    }
  }
  std::cout << "results under " << cfg.output_dir << "\n";
  return std::min(failures, 100);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differential privacy for split DNN inference: protection, attack, evaluation"};
  app.require_subcommand(1);

  auto* fetch = app.add_subcommand("fetch-data", "download and ingest dataset archives");
  std::vector<std::string> fetch_datasets;
  std::string fetch_root = "data-cache";
  fetch->add_option("--dataset", fetch_datasets,
                    "svhn, gtsrb, stl10, cifar10, cifar100, synthetic, or all");
  fetch->add_option("--data-root", fetch_root, "dataset cache directory");

  CommonFlags pf, tf, af, sf;
  auto* pretrain = app.add_subcommand("pretrain", "train the shared feature-extractor backbone");
  add_common_flags(pretrain, pf);
  auto* train = app.add_subcommand("train", "train the baseline, optionally fine-tune for one epsilon");
  add_common_flags(train, tf);
  std::string train_eps = "inf";
  train->add_option("--epsilon", train_eps, "privacy budget; inf trains only the baseline");
  auto* attack = app.add_subcommand("attack", "reconstruct inputs from released feature maps");
  add_common_flags(attack, af);
  std::string attack_eps = "inf";
  attack->add_option("--epsilon", attack_eps, "privacy budget applied to the released features");
  auto* swp = app.add_subcommand("sweep", "run the full epsilon grid and write result tables");
  add_common_flags(swp, sf);
  auto* report = app.add_subcommand("report", "pivot results.csv into per-metric rows");
  std::string results_path = "out/results.csv";
  report->add_option("--results", results_path, "results.csv produced by sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fetch->parsed()) return cmd_fetch_data(fetch_datasets, fetch_root);
    if (pretrain->parsed()) return cmd_pretrain(resolve_config(pretrain, pf));
    if (train->parsed()) return cmd_train(resolve_config(train, tf), parse_value(train_eps));
    if (attack->parsed()) return cmd_attack(resolve_config(attack, af), parse_value(attack_eps));
    if (swp->parsed()) return cmd_sweep(resolve_config(swp, sf));
    if (report->parsed()) {
      std::cout << pivot_report(results_path);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
