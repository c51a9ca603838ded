// Command-line front end: train, pursue, inpaint, fuse, psnr subcommands over
// binary PGM images and LBCD dictionary files.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lobcod/lobcod.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliOptions {
  std::string dict_path;
  std::string out_path;
  std::string trace_path;
  std::string mask_path;
  std::string reference_path;
  std::string needles_path;
  std::string activity_prefix;
  std::string mode = "stochastic";
  std::string optimizer = "adam";
  std::string base_rule = "argmax";
  double lambda = 1.0;
  double mu = 5.0;
  double rel_tol = 1e-6;
  double dual_tol = 1e-6;
  double eta = 0.02;
  double gamma = 0.8;
  double decay_factor = 0.0;
  int decay_period = 0;
  int epochs = 30;
  int smooth = 9;
  int iters = 3;
  int threads = 0;
  int filters = 81;
  int filter_side = 8;
  int mean_kernel = 8;
  std::uint64_t seed = 0;
  bool sequential = false;
  bool layered = false;
  bool train_on_image = false;
  bool auto_eta = false;
  std::vector<std::string> inputs;
};

void require_readable(const std::string& path, const std::string& what) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw lobcod::IOError("missing " + what + ": " + path);
}

void require_writable(const std::string& path, const std::string& what) {
  if (path.empty()) return;
  std::ofstream probe(path, std::ios::binary | std::ios::app);
  if (!probe) throw lobcod::IOError("cannot write " + what + ": " + path);
}

lobcod::OptimizerState make_optimizer(const CliOptions& o) {
  lobcod::OptimizerState opt;
  if (o.optimizer == "sgd")
    opt.kind = lobcod::OptimizerState::Kind::sgd;
  else if (o.optimizer == "momentum")
    opt.kind = lobcod::OptimizerState::Kind::momentum;
  else if (o.optimizer == "adam")
    opt.kind = lobcod::OptimizerState::Kind::adam;
  else
    throw lobcod::ConfigError("unknown optimizer: " + o.optimizer);
  opt.eta = o.eta;
  opt.gamma = o.gamma;
  return opt;
}

std::vector<std::string> config_comments(const CliOptions& o, const std::string& command) {
  std::vector<std::string> lines;
  lines.push_back("command: " + command);
  lines.push_back("lambda: " + std::to_string(o.lambda));
  lines.push_back("epochs: " + std::to_string(o.epochs));
  lines.push_back("threads: " + std::to_string(o.threads));
  lines.push_back("seed: " + std::to_string(o.seed));
  lines.push_back("rel_tol: " + std::to_string(o.rel_tol));
  lines.push_back("dual_tol: " + std::to_string(o.dual_tol));
  lines.push_back("mean_kernel: " + std::to_string(o.mean_kernel));
  return lines;
}

lobcod::Plane load_image(const std::string& path) { return lobcod::read_pgm(path); }

int run_train(const CliOptions& o) {
  std::vector<fs::path> files;
  if (o.inputs.size() != 1) throw lobcod::ConfigError("train expects one input directory");
  if (!fs::is_directory(o.inputs[0]))
    throw lobcod::IOError("not a directory: " + o.inputs[0]);
  for (const auto& e : fs::directory_iterator(o.inputs[0]))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::cerr << "error: no training images in " << o.inputs[0] << "\n";
    return 2;
  }
  if (!o.dict_path.empty()) require_readable(o.dict_path, "dictionary");
  require_writable(o.out_path, "output dictionary");
  require_writable(o.trace_path, "trace");

  std::vector<lobcod::Plane> images;
  for (const fs::path& f : files) {
    lobcod::Plane raw = load_image(f.string());
    if (o.mean_kernel > 0) raw = lobcod::mean_subtract(raw, o.mean_kernel).detail;
    images.push_back(std::move(raw));
  }

  std::mt19937_64 rng(o.seed);
  lobcod::LocalDictionary dict =
      o.dict_path.empty()
          ? lobcod::init_dictionary_from_patches(images, o.filter_side, o.filters, rng)
          : lobcod::read_dictionary(o.dict_path);

  lobcod::TrainConfig cfg;
  cfg.lambda = o.lambda;
  cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  cfg.dual_tol = o.dual_tol;
  cfg.auto_eta = o.auto_eta;
  cfg.lr_decay_factor = o.decay_factor;
  cfg.lr_decay_period = o.decay_period;
  cfg.schedule.push_back({1, o.epochs, make_optimizer(o)});

  lobcod::TrainResult res = o.mode == "batch" ? lobcod::train_batch(images, dict, cfg)
                                              : lobcod::train_stochastic(images, dict, cfg);

  lobcod::write_dictionary(o.out_path, res.dict);
  json meta;
  meta["epoch"] = o.epochs;
  meta["optimizer"] = o.optimizer;
  meta["eta"] = o.eta;
  meta["seed"] = o.seed;
  std::ofstream(o.out_path + ".json") << meta.dump(2) << "\n";

  if (!o.trace_path.empty()) {
    auto comments = config_comments(o, "train");
    comments.push_back("mode: " + o.mode);
    comments.push_back("optimizer: " + o.optimizer);
    comments.push_back("eta: " + std::to_string(o.eta));
    lobcod::write_train_trace_csv(o.trace_path, res.trace, comments);
  }
  std::cout << "trained " << res.dict.num_filters() << " filters on " << images.size()
            << " images; final objective "
            << (res.trace.empty() ? 0.0 : res.trace.back().objective.total) << "\n";
  return 0;
}

int run_pursue(const CliOptions& o) {
  if (o.inputs.size() != 1) throw lobcod::ConfigError("pursue expects one input image");
  require_readable(o.inputs[0], "input image");
  require_readable(o.dict_path, "dictionary");
  require_writable(o.out_path, "reconstruction");
  require_writable(o.needles_path, "needle dump");
  require_writable(o.trace_path, "trace");

  lobcod::LocalDictionary dict = lobcod::read_dictionary(o.dict_path);
  lobcod::Plane raw = load_image(o.inputs[0]);
  lobcod::Plane mean = lobcod::Plane::Zero(raw.rows(), raw.cols());
  if (o.mean_kernel > 0) {
    lobcod::MeanSubtractResult split = lobcod::mean_subtract(raw, o.mean_kernel);
    raw = split.detail;
    mean = split.mean;
  }

  lobcod::PursuitConfig cfg;
  cfg.lambda = o.lambda;
  cfg.max_epochs = o.epochs;
  cfg.threads = o.threads;
  cfg.rel_obj_tol = o.rel_tol;
  cfg.dual_tol = o.dual_tol;

  lobcod::WorkImage wi = lobcod::pad_image(raw, dict.filter_side());
  lobcod::NeedleField needles =
      lobcod::init_needles(wi, dict, cfg.lasso(), cfg.parallel ? cfg.threads : 1);
  lobcod::PursuitResult res;
  if (o.sequential) {
    res = lobcod::pursue_sequential(wi, dict, std::move(needles), cfg);
  } else {
    lobcod::LayerSchedule schedule =
        lobcod::build_layers(static_cast<int>(wi.original.rows()),
                             static_cast<int>(wi.original.cols()), dict.filter_side());
    res = lobcod::pursue_layered(wi, dict, std::move(needles), schedule, cfg);
  }

  if (!o.out_path.empty()) {
    lobcod::Plane recon =
        lobcod::crop_result(wi.reconstruction, dict.filter_side()) + mean;
    lobcod::write_pgm(o.out_path, recon);
  }
  if (!o.needles_path.empty()) lobcod::write_needles(o.needles_path, res.needles);
  if (!o.trace_path.empty())
    lobcod::write_trace_csv(o.trace_path, res.trace, config_comments(o, "pursue"));
  std::cout << "pursuit finished: objective " << res.trace.back().total << ", nnz "
            << res.trace.back().nnz << "\n";
  return 0;
}

int run_inpaint(const CliOptions& o) {
  if (o.inputs.size() != 1) throw lobcod::ConfigError("inpaint expects one input image");
  require_readable(o.inputs[0], "input image");
  require_readable(o.mask_path, "mask");
  require_readable(o.dict_path, "dictionary");
  if (!o.reference_path.empty()) require_readable(o.reference_path, "reference");
  require_writable(o.out_path, "restored image");
  require_writable(o.trace_path, "trace");

  lobcod::Plane corrupted = load_image(o.inputs[0]);
  lobcod::Plane mask = load_image(o.mask_path);
  if (mask.rows() != corrupted.rows() || mask.cols() != corrupted.cols())
    throw lobcod::ShapeError("mask size does not match image");
  lobcod::LocalDictionary dict = lobcod::read_dictionary(o.dict_path);

  lobcod::PursuitConfig cfg;
  cfg.lambda = o.lambda;
  cfg.max_epochs = o.epochs;
  cfg.threads = o.threads;
  cfg.rel_obj_tol = o.rel_tol;
  cfg.dual_tol = o.dual_tol;

  lobcod::TrainConfig tc;
  tc.dual_tol = o.dual_tol;
  tc.seed = o.seed;
  tc.auto_eta = o.auto_eta;
  tc.schedule.push_back({1, o.epochs, make_optimizer(o)});

  lobcod::InpaintResult res = lobcod::inpaint(corrupted, mask, dict, cfg, o.mean_kernel,
                                              o.train_on_image ? &tc : nullptr);

  if (!o.out_path.empty()) lobcod::write_pgm(o.out_path, res.restored);
  if (!o.trace_path.empty())
    lobcod::write_trace_csv(o.trace_path, res.trace, config_comments(o, "inpaint"));
  if (!o.reference_path.empty()) {
    lobcod::Plane ref = load_image(o.reference_path);
    std::cout << "psnr: " << lobcod::psnr(ref, res.restored) << " dB\n";
  } else {
    std::cout << "inpainting finished\n";
  }
  return 0;
}

int run_fuse(const CliOptions& o) {
  if (o.inputs.size() < 2) {
    std::cerr << "error: fuse needs at least two input images\n";
    return 2;
  }
  for (const std::string& p : o.inputs) require_readable(p, "input image");
  require_readable(o.dict_path, "dictionary");
  require_writable(o.out_path, "fused image");

  std::vector<lobcod::Plane> sources;
  for (const std::string& p : o.inputs) sources.push_back(load_image(p));
  lobcod::LocalDictionary dict = lobcod::read_dictionary(o.dict_path);

  lobcod::PursuitConfig inner;
  inner.lambda = o.lambda;
  inner.max_epochs = o.epochs;
  inner.threads = o.threads;
  inner.rel_obj_tol = o.rel_tol;
  inner.dual_tol = o.dual_tol;

  lobcod::FusionResult res = lobcod::fuse(sources, dict, o.lambda, o.mu, o.smooth, o.iters,
                                          inner, o.base_rule == "average");
  if (!o.out_path.empty()) lobcod::write_pgm(o.out_path, res.fused);
  if (!o.activity_prefix.empty()) {
    for (std::size_t k = 0; k < res.sources.size(); ++k) {
      lobcod::Plane a = res.sources[k].activity;
      const double peak = a.maxCoeff();
      if (peak > 0.0) a *= 255.0 / peak;
      lobcod::write_pgm(o.activity_prefix + "_" + std::to_string(k) + ".pgm", a);
    }
  }
  std::cout << "fused " << sources.size() << " sources\n";
  return 0;
}

int run_psnr(const CliOptions& o) {
  if (o.inputs.size() != 2) throw lobcod::ConfigError("psnr expects two images");
  require_readable(o.inputs[0], "reference");
  require_readable(o.inputs[1], "estimate");
  const double db = lobcod::psnr(load_image(o.inputs[0]), load_image(o.inputs[1]));
  std::cout << db << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional sparse coding toolkit"};
  app.require_subcommand(1);
  CliOptions o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--lambda", o.lambda, "sparsity weight");
    cmd->add_option("--epochs", o.epochs, "epoch count");
    cmd->add_option("--seed", o.seed, "RNG seed");
    cmd->add_option("--threads", o.threads, "worker threads (0 = auto)")
        ->envname("LOBCOD_THREADS");
    cmd->add_option("--rel-tol", o.rel_tol, "per-epoch relative objective stop");
    cmd->add_option("--dual-tol", o.dual_tol, "local solve optimality tolerance");
    cmd->add_option("--out", o.out_path, "output path");
    cmd->add_option("--trace", o.trace_path, "trace CSV path");
  };

  CLI::App* train = app.add_subcommand("train", "learn a dictionary from a directory of PGMs");
  train->add_option("dir", o.inputs, "training image directory")->required();
  add_common(train);
  train->add_option("--dict", o.dict_path, "initial dictionary");
  train->add_option("--mode", o.mode, "batch or stochastic")
      ->check(CLI::IsMember({"batch", "stochastic"}));
  train->add_option("--optimizer", o.optimizer, "sgd, momentum or adam")
      ->check(CLI::IsMember({"sgd", "momentum", "adam"}));
  train->add_option("--eta", o.eta, "step size");
  train->add_option("--gamma", o.gamma, "momentum coefficient");
  train->add_flag("--auto-eta", o.auto_eta, "step size from the gradient norm");
  train->add_option("--decay-factor", o.decay_factor, "step decay factor");
  train->add_option("--decay-period", o.decay_period, "step decay period (epochs)");
  train->add_option("--filters", o.filters, "number of filters");
  train->add_option("--filter-side", o.filter_side, "filter side in pixels");
  train->add_option("--mean-kernel", o.mean_kernel, "mean-subtraction kernel (0 = off)");

  CLI::App* pursue = app.add_subcommand("pursue", "sparse-code one image");
  pursue->add_option("image", o.inputs, "input image")->required();
  add_common(pursue);
  pursue->add_option("--dict", o.dict_path, "dictionary")->required();
  pursue->add_option("--needles", o.needles_path, "needle dump path");
  pursue->add_option("--mean-kernel", o.mean_kernel, "mean-subtraction kernel (0 = off)");
  auto* seq = pursue->add_flag("--sequential", o.sequential, "needle-at-a-time updates");
  pursue->add_flag("--layered", o.layered, "layer-parallel updates (default)")->excludes(seq);

  CLI::App* inpaint = app.add_subcommand("inpaint", "fill masked pixels");
  inpaint->add_option("image", o.inputs, "corrupted image")->required();
  add_common(inpaint);
  inpaint->add_option("--dict", o.dict_path, "dictionary")->required();
  inpaint->add_option("--mask", o.mask_path, "mask PGM (0 = missing)")->required();
  inpaint->add_option("--reference", o.reference_path, "clean reference for PSNR");
  inpaint->add_flag("--train-on-image", o.train_on_image,
                    "update the dictionary on the corrupted image");
  inpaint->add_option("--eta", o.eta, "step size for --train-on-image");
  inpaint->add_option("--optimizer", o.optimizer, "optimizer for --train-on-image")
      ->check(CLI::IsMember({"sgd", "momentum", "adam"}));
  inpaint->add_option("--mean-kernel", o.mean_kernel, "mean-subtraction kernel");

  CLI::App* fuse = app.add_subcommand("fuse", "multi-focus fusion of registered images");
  fuse->add_option("images", o.inputs, "two or more source images");
  add_common(fuse);
  fuse->add_option("--dict", o.dict_path, "dictionary")->required();
  fuse->add_option("--mu", o.mu, "base smoothness weight");
  fuse->add_option("--smooth", o.smooth, "activity smoothing kernel side");
  fuse->add_option("--iters", o.iters, "base/edge alternations");
  fuse->add_option("--base", o.base_rule, "base fusion rule: argmax or average")
      ->check(CLI::IsMember({"argmax", "average"}));
  fuse->add_option("--activity", o.activity_prefix, "write per-source activity maps");

  CLI::App* psnr_cmd = app.add_subcommand("psnr", "peak signal-to-noise ratio of two images");
  psnr_cmd->add_option("images", o.inputs, "reference and estimate");

  // pursue defaults to a smaller epoch budget than training
  pursue->parse_complete_callback([&] {
    if (!pursue->count("--epochs")) o.epochs = 30;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return run_train(o);
    if (pursue->parsed()) return run_pursue(o);
    if (inpaint->parsed()) return run_inpaint(o);
    if (fuse->parsed()) return run_fuse(o);
    if (psnr_cmd->parsed()) return run_psnr(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
