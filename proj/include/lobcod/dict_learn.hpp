#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lobcod/core.hpp"
#include "lobcod/pursuit.hpp"

namespace lobcod {

/// Gradient of the fit term with respect to the dictionary, restricted to the
/// given needle positions: minus the sum of (residual patch) x (needle)^T.
/// The residual plane must be current for the supplied needles; for masked
/// problems pass the observed-pixels residual (zeros where unobserved).
inline void dict_gradient_accumulate(const Plane& residual, const NeedleField& needles,
                                     const std::vector<int>& positions, Eigen::MatrixXd& grad) {
  const int side = needles.filter_side();
  if (residual.rows() != needles.height() || residual.cols() != needles.width())
    throw ShapeError("residual does not match needle field");
  if (grad.rows() != static_cast<Eigen::Index>(side) * side)
    throw ShapeError("gradient rows != filter_side^2");
  Eigen::VectorXd patch;
  for (int f : positions) {
    const Needle& a = needles.at(f);
    if (a.empty()) continue;
    extract_patch_into(residual, needles.position(f), side, patch);
    for (int k = 0; k < a.nnz(); ++k) grad.col(a.idx[k]) -= a.val[k] * patch;
  }
}

inline Eigen::MatrixXd dict_gradient(const Plane& residual, const NeedleField& needles,
                                     const std::vector<int>& positions, int num_filters) {
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(needles.filter_side()) * needles.filter_side(), num_filters);
  dict_gradient_accumulate(residual, needles, positions, grad);
  return grad;
}

inline std::vector<int> all_positions(const NeedleField& needles) {
  std::vector<int> all(static_cast<std::size_t>(needles.count()));
  for (int f = 0; f < needles.count(); ++f) all[static_cast<std::size_t>(f)] = f;
  return all;
}

inline Eigen::MatrixXd dict_gradient(const Plane& residual, const NeedleField& needles,
                                     int num_filters) {
  return dict_gradient(residual, needles, all_positions(needles), num_filters);
}

/// Masked counterpart: identical arithmetic on the masked residual plane,
/// which already carries the zeros of the unobserved pixels.
inline Eigen::MatrixXd dict_gradient_masked(const Plane& masked_residual,
                                            const NeedleField& needles,
                                            const std::vector<int>& positions, int num_filters) {
  return dict_gradient(masked_residual, needles, positions, num_filters);
}

inline Eigen::MatrixXd dict_gradient_masked(const Plane& masked_residual,
                                            const NeedleField& needles, int num_filters) {
  return dict_gradient(masked_residual, needles, num_filters);
}

/// Rescales every column to unit Euclidean norm. A column whose norm falls
/// under 1e-12 is degenerate: with an RNG it is reinitialized to a random
/// unit vector (with a warning), otherwise this is an error.
inline void project_columns(Eigen::MatrixXd& atoms, std::mt19937_64* rng = nullptr) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index j = 0; j < atoms.cols(); ++j) {
    double norm = atoms.col(j).norm();
    if (norm < 1e-12) {
      if (rng == nullptr)
        throw NumericError("degenerate atom " + std::to_string(j) + " (norm < 1e-12)");
      do {
        for (Eigen::Index r = 0; r < atoms.rows(); ++r) atoms(r, j) = gauss(*rng);
        norm = atoms.col(j).norm();
      } while (norm < 1e-12);
      std::cerr << "warning: reinitialized degenerate atom " << j << "\n";
    }
    atoms.col(j) /= norm;
  }
}

inline void project_columns(LocalDictionary& dict, std::mt19937_64* rng = nullptr) {
  Eigen::MatrixXd atoms = dict.atoms();
  project_columns(atoms, rng);
  dict.set_atoms(std::move(atoms));
}

struct OptimizerState {
  enum class Kind { sgd, momentum, adam };
  Kind kind = Kind::adam;
  double eta = 0.02;
  double gamma = 0.8;  // momentum coefficient
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  Eigen::MatrixXd velocity;
  Eigen::MatrixXd first_moment;
  Eigen::MatrixXd second_moment;
  long step_count = 0;

  void validate() const {
    if (eta < 0.0) throw ConfigError("eta must be >= 0");
    if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("gamma must be in [0,1)");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
      throw ConfigError("adam betas must be in (0,1)");
    if (epsilon <= 0.0) throw ConfigError("epsilon must be > 0");
  }

  /// Returns the update to subtract from the filters. `eta_eff` is the step
  /// size after the decay schedule or the gradient-norm heuristic.
  Eigen::MatrixXd step(const Eigen::MatrixXd& grad, double eta_eff) {
    switch (kind) {
      case Kind::sgd:
        return eta_eff * grad;
      case Kind::momentum:
        if (velocity.size() == 0) velocity = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
        velocity = gamma * velocity + eta_eff * grad;
        return velocity;
      case Kind::adam: {
        if (first_moment.size() == 0) {
          first_moment = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
          second_moment = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
        }
        ++step_count;
        first_moment = beta1 * first_moment + (1.0 - beta1) * grad;
        second_moment = beta2 * second_moment + (1.0 - beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        return (eta_eff / c1) *
               (first_moment.array() / ((second_moment.array() / c2).sqrt() + epsilon)).matrix();
      }
    }
    throw ConfigError("unknown optimizer kind");
  }
};

inline const char* optimizer_name(OptimizerState::Kind k) {
  switch (k) {
    case OptimizerState::Kind::sgd: return "sgd";
    case OptimizerState::Kind::momentum: return "momentum";
    case OptimizerState::Kind::adam: return "adam";
  }
  return "?";
}

/// One optimizer active over an inclusive 1-based epoch range.
struct ScheduleEntry {
  int first_epoch = 1;
  int last_epoch = 1;
  OptimizerState optimizer;
};

struct TrainConfig {
  double lambda = 1.0;
  int epochs = 30;
  /// Non-overlapping epoch ranges; epochs outside every range run pursuit
  /// without a dictionary update.
  std::vector<ScheduleEntry> schedule;
  /// Per-step size from the gradient norm (1.5% of its Frobenius norm)
  /// instead of the configured eta.
  bool auto_eta = false;
  /// Step decay eta / (1 + factor/t), re-evaluated every `period` epochs.
  double lr_decay_factor = 0.0;
  int lr_decay_period = 0;
  std::uint64_t seed = 0;
  bool parallel = true;
  int threads = 0;
  double dual_tol = 1e-8;
  int max_nnz = 0;
  long max_sweeps = 10000;
  bool check_monotone = kDebugChecksDefault;
  int refresh_epochs = 10;
  int log_every = 1;
  /// Full layer sweeps per image between batch-mode dictionary updates.
  int batch_pursuit_epochs = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    std::vector<std::pair<int, int>> ranges;
    for (const ScheduleEntry& e : schedule) {
      e.optimizer.validate();
      if (e.first_epoch < 1 || e.last_epoch < e.first_epoch)
        throw ConfigError("bad optimizer schedule range");
      ranges.emplace_back(e.first_epoch, e.last_epoch);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].first <= ranges[i - 1].second)
        throw ConfigError("overlapping optimizer schedule ranges");
  }

  PursuitConfig pursuit() const {
    PursuitConfig p;
    p.lambda = lambda;
    p.parallel = parallel;
    p.threads = threads;
    p.dual_tol = dual_tol;
    p.max_nnz = max_nnz;
    p.max_sweeps = max_sweeps;
    p.check_monotone = check_monotone;
    p.refresh_epochs = refresh_epochs;
    return p;
  }
};

struct TrainReport {
  ObjectiveReport objective;
  double grad_norm = 0.0;
};

struct TrainResult {
  LocalDictionary dict;
  std::vector<NeedleField> needle_fields;
  std::vector<TrainReport> trace;
  std::int64_t monotone_violations = 0;
};

/// Unit-normalized random patches sampled from the training images; patches
/// with negligible energy are skipped in favor of random unit vectors.
inline LocalDictionary init_dictionary_from_patches(const std::vector<Plane>& images,
                                                    int filter_side, int num_filters,
                                                    std::mt19937_64& rng) {
  if (images.empty()) throw ConfigError("no training images");
  const int n = filter_side * filter_side;
  Eigen::MatrixXd atoms(n, num_filters);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_img(0, images.size() - 1);
  for (int j = 0; j < num_filters; ++j) {
    Eigen::VectorXd col(n);
    bool ok = false;
    for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
      const Plane& img = images[pick_img(rng)];
      if (img.rows() < filter_side || img.cols() < filter_side) continue;
      std::uniform_int_distribution<int> pr(0, static_cast<int>(img.rows()) - filter_side);
      std::uniform_int_distribution<int> pc(0, static_cast<int>(img.cols()) - filter_side);
      const int r = pr(rng), c = pc(rng);
      extract_patch_into(img, Position{r, c}, filter_side, col);
      ok = col.norm() > 1e-8;
    }
    if (!ok)
      for (int r = 0; r < n; ++r) col[r] = gauss(rng);
    atoms.col(j) = col / col.norm();
  }
  return LocalDictionary(filter_side, std::move(atoms));
}

namespace detail {

inline double decay_scale(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_decay_factor <= 0.0 || cfg.lr_decay_period <= 0) return 1.0;
  const int t = (epoch / cfg.lr_decay_period) * cfg.lr_decay_period;
  if (t < 1) return 1.0;
  return 1.0 / (1.0 + cfg.lr_decay_factor / static_cast<double>(t));
}

inline OptimizerState* active_optimizer(TrainConfig& cfg, int epoch) {
  for (ScheduleEntry& e : cfg.schedule)
    if (epoch >= e.first_epoch && epoch <= e.last_epoch) return &e.optimizer;
  return nullptr;
}

/// Stochastic training over a set of prepared work images (masked or not):
/// per image and per layer, pursue the layer, then take one optimizer step on
/// that layer's gradient and re-normalize the filters.
inline TrainResult stochastic_train_loop(std::vector<WorkImage>& work,
                                         std::vector<NeedleField>& fields, LocalDictionary dict,
                                         TrainConfig cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  const PursuitConfig pcfg = cfg.pursuit();
  const LayerSchedule schedule =
      build_layers(fields.front().height(), fields.front().width(), dict.filter_side());
  for (const NeedleField& f : fields)
    if (f.height() != fields.front().height() || f.width() != fields.front().width())
      throw ShapeError("training images must share dimensions");

  std::vector<std::unique_ptr<PursuitEngine>> engines;
  engines.reserve(work.size());
  std::vector<std::uint64_t> engine_version(work.size(), 0);
  for (std::size_t i = 0; i < work.size(); ++i) {
    engines.push_back(std::make_unique<PursuitEngine>(work[i], fields[i], pcfg));
    engines[i]->reset_consistency(dict);
  }
  std::uint64_t dict_version = 0;

  std::mt19937_64 rng(cfg.seed);
  TrainResult result{std::move(dict), {}, {}, 0};

  {
    TrainReport init;
    for (std::size_t i = 0; i < work.size(); ++i) {
      ObjectiveReport r = engines[i]->make_report(0, 0.0);
      init.objective.data_term += r.data_term;
      init.objective.l1_term += r.l1_term;
      init.objective.nnz += r.nnz;
      engines[i]->set_objective_scale(r.total);
    }
    init.objective.total = init.objective.data_term + init.objective.l1_term;
    init.objective.wall_time = elapsed();
    result.trace.push_back(init);
  }

  Eigen::MatrixXd grad(result.dict.patch_size(), result.dict.num_filters());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    OptimizerState* opt = active_optimizer(cfg, epoch);
    const double scale = decay_scale(cfg, epoch);
    double gnorm_sum = 0.0;
    long gnorm_count = 0;

    for (std::size_t i = 0; i < work.size(); ++i) {
      PursuitEngine& eng = *engines[i];
      if (engine_version[i] != dict_version) {
        eng.reset_consistency(result.dict);
        eng.mark_all_dirty();
        engine_version[i] = dict_version;
      }
      for (int k = 0; k < schedule.layer_count(); ++k) {
        eng.run_layer(result.dict, schedule.layer(k));
        if (opt == nullptr) continue;
        grad.setZero();
        dict_gradient_accumulate(work[i].residual, fields[i], schedule.layer(k), grad);
        const double gnorm = grad.norm();
        gnorm_sum += gnorm;
        ++gnorm_count;
        const double eta_eff = cfg.auto_eta ? 0.015 * gnorm : opt->eta * scale;
        Eigen::MatrixXd delta = opt->step(grad, eta_eff);
        if (!delta.isZero(0.0)) {
          Eigen::MatrixXd atoms = result.dict.atoms() - delta;
          project_columns(atoms, &rng);
          result.dict.set_atoms(std::move(atoms));
          ++dict_version;
          eng.mark_all_dirty();
        }
      }
    }

    if (cfg.refresh_epochs > 0 && epoch % cfg.refresh_epochs == 0)
      for (auto& eng : engines) eng->refresh_residual_and_mark();

    TrainReport rep;
    rep.objective.epoch = epoch;
    rep.objective.wall_time = elapsed();
    for (std::size_t i = 0; i < work.size(); ++i) {
      ObjectiveReport r = engines[i]->make_report(epoch, 0.0);
      rep.objective.data_term += r.data_term;
      rep.objective.l1_term += r.l1_term;
      rep.objective.nnz += r.nnz;
      engines[i]->set_objective_scale(r.total);
    }
    rep.objective.total = rep.objective.data_term + rep.objective.l1_term;
    rep.grad_norm = gnorm_count > 0 ? gnorm_sum / static_cast<double>(gnorm_count) : 0.0;
    if (epoch % cfg.log_every == 0 || epoch == cfg.epochs) result.trace.push_back(rep);
  }

  for (const auto& eng : engines) result.monotone_violations += eng->violations();
  result.needle_fields = std::move(fields);
  return result;
}

}  // namespace detail

/// Online dictionary learning: interleaves layer pursuits with per-layer
/// projected gradient steps. Works on one image or many; the images are
/// padded internally and their needles initialized by spreading each patch.
inline TrainResult train_stochastic(const std::vector<Plane>& images, LocalDictionary dict,
                                    const TrainConfig& cfg) {
  cfg.validate();
  if (images.empty()) throw ConfigError("no training images");
  std::vector<WorkImage> work;
  std::vector<NeedleField> fields;
  work.reserve(images.size());
  fields.reserve(images.size());
  for (const Plane& raw : images) {
    work.push_back(pad_image(raw, dict.filter_side()));
    fields.push_back(init_needles(work.back(), dict,
                                  LassoConfig{cfg.lambda, cfg.dual_tol, cfg.max_nnz,
                                              cfg.max_sweeps},
                                  cfg.parallel ? cfg.threads : 1));
  }
  return detail::stochastic_train_loop(work, fields, std::move(dict), cfg);
}

/// Batch alternation: full layered pursuit on every image, then one projected
/// step along the summed gradient, halving the step while the fit worsens.
inline TrainResult train_batch(const std::vector<Plane>& images, LocalDictionary dict,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (images.empty()) throw ConfigError("no training images");
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainConfig c = cfg;
  const PursuitConfig pcfg = c.pursuit();
  std::vector<WorkImage> work;
  std::vector<NeedleField> fields;
  for (const Plane& raw : images) {
    work.push_back(pad_image(raw, dict.filter_side()));
    fields.push_back(init_needles(work.back(), dict,
                                  LassoConfig{c.lambda, c.dual_tol, c.max_nnz, c.max_sweeps},
                                  c.parallel ? c.threads : 1));
  }
  const LayerSchedule schedule =
      build_layers(fields.front().height(), fields.front().width(), dict.filter_side());

  std::vector<std::unique_ptr<detail::PursuitEngine>> engines;
  for (std::size_t i = 0; i < work.size(); ++i) {
    engines.push_back(std::make_unique<detail::PursuitEngine>(work[i], fields[i], pcfg));
    engines[i]->reset_consistency(dict);
  }
  std::mt19937_64 rng(c.seed);
  TrainResult result{std::move(dict), {}, {}, 0};

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    for (std::size_t i = 0; i < work.size(); ++i) {
      engines[i]->reset_consistency(result.dict);
      engines[i]->mark_all_dirty();
      for (int sweep = 0; sweep < c.batch_pursuit_epochs; ++sweep)
        for (int k = 0; k < schedule.layer_count(); ++k)
          engines[i]->run_layer(result.dict, schedule.layer(k));
    }

    double data_now = 0.0;
    for (std::size_t i = 0; i < work.size(); ++i)
      data_now += 0.5 * work[i].residual.squaredNorm();

    Eigen::MatrixXd grad =
        Eigen::MatrixXd::Zero(result.dict.patch_size(), result.dict.num_filters());
    for (std::size_t i = 0; i < work.size(); ++i)
      dict_gradient_accumulate(work[i].residual, fields[i], all_positions(fields[i]), grad);
    const double gnorm = grad.norm();

    OptimizerState* opt = detail::active_optimizer(c, epoch);
    double data_after = data_now;
    if (opt != nullptr && gnorm > 0.0) {
      double eta_eff =
          c.auto_eta ? 0.015 * gnorm : opt->eta * detail::decay_scale(c, epoch);
      for (int tries = 0; tries < 30 && eta_eff > 0.0; ++tries, eta_eff *= 0.5) {
        Eigen::MatrixXd atoms = result.dict.atoms() - eta_eff * grad;
        project_columns(atoms, &rng);
        LocalDictionary candidate(result.dict.filter_side(), std::move(atoms));
        double data_cand = 0.0;
        for (std::size_t i = 0; i < work.size(); ++i)
          data_cand +=
              0.5 * (work[i].original - reconstruct(fields[i], candidate)).squaredNorm();
        if (data_cand <= data_now) {
          result.dict = std::move(candidate);
          data_after = data_cand;
          break;
        }
      }
    }

    TrainReport rep;
    rep.objective.epoch = epoch;
    rep.objective.wall_time = elapsed();
    rep.objective.data_term = data_after;
    for (std::size_t i = 0; i < work.size(); ++i) {
      rep.objective.l1_term += c.lambda * fields[i].l1();
      rep.objective.nnz += fields[i].nnz();
    }
    rep.objective.total = rep.objective.data_term + rep.objective.l1_term;
    rep.grad_norm = gnorm;
    if (epoch % c.log_every == 0 || epoch == c.epochs) result.trace.push_back(rep);
    for (std::size_t i = 0; i < work.size(); ++i)
      engines[i]->set_objective_scale(rep.objective.total);
  }

  for (const auto& eng : engines) result.monotone_violations += eng->violations();
  result.needle_fields = std::move(fields);
  return result;
}

}  // namespace lobcod
