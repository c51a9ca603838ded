#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lobcod/core.hpp"
#include "lobcod/lasso.hpp"
#include "lobcod/parallel.hpp"

namespace lobcod {

inline constexpr bool kDebugChecksDefault =
#ifdef NDEBUG
    false;
#else
    true;
#endif

struct PursuitConfig {
  double lambda = 1.0;
  int max_epochs = 30;
  /// Stop when (previous - current) / |previous| objective drops below this
  /// between epochs. Zero disables early stopping.
  double rel_obj_tol = 1e-6;
  bool parallel = true;
  int threads = 0;  // 0 = hardware concurrency; ignored unless parallel
  int log_every = 1;
  double dual_tol = 1e-8;
  int max_nnz = 0;
  long max_sweeps = 10000;
  /// Verify per-needle descent on every update (always on per-epoch).
  bool check_monotone = kDebugChecksDefault;
  /// Recompute the residual from scratch every so many epochs to bound
  /// floating-point drift of the incremental updates.
  int refresh_epochs = 10;

  LassoConfig lasso() const { return LassoConfig{lambda, dual_tol, max_nnz, max_sweeps}; }
};

struct PursuitResult {
  NeedleField needles;
  std::vector<ObjectiveReport> trace;
  std::int64_t monotone_violations = 0;
  int epochs_run = 0;
};

namespace detail {

struct EngineStats {
  long changed = 0;
  long violations = 0;
};

/// Shared machinery of the pursuit variants: residual bookkeeping, per-needle
/// updates with warm starts, dirty-flag short-circuiting, and deterministic
/// objective accounting. The dictionary is passed into each call so training
/// loops can swap it between layers.
class PursuitEngine {
 public:
  PursuitEngine(WorkImage& img, NeedleField& needles, const PursuitConfig& cfg)
      : img_(img),
        needles_(needles),
        cfg_(cfg),
        lasso_cfg_(cfg.lasso()),
        masked_(img.has_mask()),
        dirty_(static_cast<std::size_t>(needles.count())),
        pool_(cfg.parallel ? cfg.threads : 1) {
    if (needles_.height() != img_.original.rows() || needles_.width() != img_.original.cols())
      throw ShapeError("needle field does not match image shape");
    mark_all_dirty();
  }

  /// Rebuilds reconstruction and residual from the current needles so the
  /// incremental updates start from a consistent state.
  void reset_consistency(const LocalDictionary& dict) {
    img_.reconstruction = reconstruct(needles_, dict);
    img_.refresh_residual();
  }

  void mark_all_dirty() {
    for (auto& d : dirty_) d.store(1, std::memory_order_relaxed);
  }

  void refresh_residual_and_mark() {
    img_.refresh_residual();
    mark_all_dirty();
  }

  /// Solves every needle of one non-overlapping layer, in parallel when the
  /// pool has more than one worker. Updates are applied to disjoint patch
  /// regions, so the outcome is identical for any worker count.
  EngineStats run_layer(const LocalDictionary& dict, const std::vector<int>& layer) {
    EngineStats stats;
    std::atomic<long> changed{0}, violations{0};
    pool_.parallel_for(static_cast<int>(layer.size()), [&](int begin, int end) {
      LassoWorkspace ws;
      Buffers buf;
      long local_changed = 0, local_viol = 0;
      for (int k = begin; k < end; ++k)
        update_needle(dict, layer[static_cast<std::size_t>(k)], ws, buf, local_changed,
                      local_viol);
      changed.fetch_add(local_changed, std::memory_order_relaxed);
      violations.fetch_add(local_viol, std::memory_order_relaxed);
    });
    stats.changed = changed.load();
    stats.violations = violations.load();
    violations_ += stats.violations;
    return stats;
  }

  /// Strict row-major single-needle sweep: the residual refresh after each
  /// update is visible to the next needle.
  EngineStats run_all_sequential(const LocalDictionary& dict) {
    EngineStats stats;
    LassoWorkspace ws;
    Buffers buf;
    for (int f = 0; f < needles_.count(); ++f)
      update_needle(dict, f, ws, buf, stats.changed, stats.violations);
    violations_ += stats.violations;
    return stats;
  }

  ObjectiveReport make_report(int epoch, double wall) const {
    ObjectiveReport rep;
    rep.epoch = epoch;
    rep.wall_time = wall;
    rep.data_term = 0.5 * img_.residual.squaredNorm();
    rep.l1_term = cfg_.lambda * needles_.l1();
    rep.total = rep.data_term + rep.l1_term;
    rep.nnz = needles_.nnz();
    return rep;
  }

  void set_objective_scale(double total) { obj_scale_ = std::abs(total); }
  std::int64_t violations() const { return violations_; }
  void add_violations(std::int64_t v) { violations_ += v; }
  ThreadPool& pool() { return pool_; }

 private:
  struct Buffers {
    Eigen::VectorXd target;
    Eigen::VectorXd patch_residual;
    Eigen::VectorXd mask_patch;
    Eigen::VectorXd delta;
    Eigen::VectorXd tmp;
  };

  void update_needle(const LocalDictionary& dict, int f, LassoWorkspace& ws, Buffers& buf,
                     long& changed, long& viol) {
    if (!dirty_[static_cast<std::size_t>(f)].load(std::memory_order_relaxed)) return;
    const int side = dict.filter_side();
    const Position pos = needles_.position(f);
    Needle& current = needles_.at(f);

    extract_patch_into(img_.residual, pos, side, buf.patch_residual);
    buf.target = buf.patch_residual;
    if (!current.empty()) {
      buf.tmp.setZero(dict.patch_size());
      dict.add_synthesis(current, 1.0, buf.tmp);
      if (masked_) {
        extract_patch_into(img_.mask, pos, side, buf.mask_patch);
        buf.target += buf.mask_patch.cwiseProduct(buf.tmp);
      } else {
        buf.target += buf.tmp;
      }
    } else if (masked_) {
      extract_patch_into(img_.mask, pos, side, buf.mask_patch);
    }
    Needle fresh;
    try {
      if (masked_)
        fresh = solve_local_masked(buf.target, buf.mask_patch, dict, lasso_cfg_, ws, &current);
      else
        fresh = solve_local(buf.target, dict, lasso_cfg_, ws, &current);
    } catch (SolverError& e) {
      throw SolverError("needle (" + std::to_string(pos.row) + "," + std::to_string(pos.col) +
                            "): " + e.what(),
                        std::move(e.best_iterate));
    } catch (NumericError& e) {
      throw NumericError("needle (" + std::to_string(pos.row) + "," + std::to_string(pos.col) +
                         "): " + e.what());
    }

    dirty_[static_cast<std::size_t>(f)].store(0, std::memory_order_relaxed);
    if (fresh == current) return;

    buf.delta.setZero(dict.patch_size());
    dict.add_synthesis(fresh, 1.0, buf.delta);
    dict.add_synthesis(current, -1.0, buf.delta);

    if (cfg_.check_monotone) {
      // The global objective change of one needle update equals the local
      // one, so descent is checked on patch-sized vectors only.
      const double before = 0.5 * buf.patch_residual.squaredNorm() + cfg_.lambda * current.l1();
      double after;
      if (masked_)
        after = 0.5 * (buf.patch_residual - buf.mask_patch.cwiseProduct(buf.delta)).squaredNorm();
      else
        after = 0.5 * (buf.patch_residual - buf.delta).squaredNorm();
      after += cfg_.lambda * fresh.l1();
      if (after - before > 1e-10 * (1.0 + obj_scale_)) ++viol;
    }

    place_add_patch(img_.reconstruction, buf.delta, pos, side);
    apply_residual_update(pos, side, buf);
    mark_overlaps_dirty(f, pos, side);
    current = std::move(fresh);
    ++changed;
  }

  void apply_residual_update(Position pos, int side, Buffers& buf) {
    if (masked_) {
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          img_.residual(pos.row + r, pos.col + c) -=
              buf.mask_patch[r * side + c] * buf.delta[r * side + c];
    } else {
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          img_.residual(pos.row + r, pos.col + c) -= buf.delta[r * side + c];
    }
  }

  void mark_overlaps_dirty(int f, Position pos, int side) {
    const int rows = needles_.grid_rows();
    const int cols = needles_.grid_cols();
    const int r0 = std::max(0, pos.row - side + 1);
    const int r1 = std::min(rows - 1, pos.row + side - 1);
    const int c0 = std::max(0, pos.col - side + 1);
    const int c1 = std::min(cols - 1, pos.col + side - 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const int g = r * cols + c;
        if (g != f) dirty_[static_cast<std::size_t>(g)].store(1, std::memory_order_relaxed);
      }
  }

  WorkImage& img_;
  NeedleField& needles_;
  const PursuitConfig& cfg_;
  LassoConfig lasso_cfg_;
  bool masked_;
  std::vector<std::atomic<std::uint8_t>> dirty_;
  ThreadPool pool_;
  double obj_scale_ = 0.0;
  std::int64_t violations_ = 0;
};

enum class PursuitMode { sequential, layered, masked };

inline PursuitResult run_pursuit(WorkImage& img, const LocalDictionary& dict,
                                 NeedleField needles, const LayerSchedule* schedule,
                                 const PursuitConfig& cfg, PursuitMode mode) {
  if (cfg.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (cfg.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (mode == PursuitMode::masked && !img.has_mask())
    throw ConfigError("pursue_masked requires a mask");
  if (mode != PursuitMode::masked && img.has_mask())
    throw ConfigError("masked image passed to an unmasked pursuit");
  if (schedule != nullptr &&
      (schedule->height() != needles.height() || schedule->width() != needles.width() ||
       schedule->filter_side() != needles.filter_side()))
    throw ShapeError("layer schedule does not match needle field");

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  PursuitResult result;
  PursuitEngine engine(img, needles, cfg);
  engine.reset_consistency(dict);

  ObjectiveReport rep = engine.make_report(0, elapsed());
  engine.set_objective_scale(rep.total);
  result.trace.push_back(rep);
  double prev_total = rep.total;

  int epoch = 1;
  for (; epoch <= cfg.max_epochs; ++epoch) {
    if (mode == PursuitMode::sequential) {
      engine.run_all_sequential(dict);
    } else {
      for (const auto& layer : schedule->layers()) engine.run_layer(dict, layer);
    }
    if (cfg.refresh_epochs > 0 && epoch % cfg.refresh_epochs == 0)
      engine.refresh_residual_and_mark();

    rep = engine.make_report(epoch, elapsed());
    engine.set_objective_scale(rep.total);
    if (rep.total - prev_total > 1e-10 * (1.0 + std::abs(prev_total))) engine.add_violations(1);

    const bool last = epoch == cfg.max_epochs;
    const double rel_drop = (prev_total - rep.total) / std::max(std::abs(prev_total), 1e-300);
    const bool converged = cfg.rel_obj_tol > 0.0 && rel_drop < cfg.rel_obj_tol;
    if (epoch % cfg.log_every == 0 || last || converged) result.trace.push_back(rep);
    prev_total = rep.total;
    if (converged || last) break;
  }

  result.epochs_run = std::min(epoch, cfg.max_epochs);
  result.monotone_violations = engine.violations();
  result.needles = std::move(needles);
  return result;
}

}  // namespace detail

/// One-needle-at-a-time block coordinate descent in fixed row-major order.
/// Each needle is re-solved against the residual with its own contribution
/// added back, then the reconstruction and residual absorb the change.
inline PursuitResult pursue_sequential(WorkImage& img, const LocalDictionary& dict,
                                       NeedleField needles, const PursuitConfig& cfg) {
  return detail::run_pursuit(img, dict, std::move(needles), nullptr, cfg,
                             detail::PursuitMode::sequential);
}

/// Layer-parallel variant: needles of one layer have disjoint footprints, so
/// they are solved concurrently without changing the result; the residual is
/// synchronized between layers.
inline PursuitResult pursue_layered(WorkImage& img, const LocalDictionary& dict,
                                    NeedleField needles, const LayerSchedule& schedule,
                                    const PursuitConfig& cfg) {
  return detail::run_pursuit(img, dict, std::move(needles), &schedule, cfg,
                             detail::PursuitMode::layered);
}

/// Layered pursuit against a partially observed image: every needle solve
/// sees the dictionary with its unobserved rows zeroed, and the residual is
/// maintained on observed pixels only.
inline PursuitResult pursue_masked(WorkImage& img, const LocalDictionary& dict,
                                   NeedleField needles, const LayerSchedule& schedule,
                                   const PursuitConfig& cfg) {
  return detail::run_pursuit(img, dict, std::move(needles), &schedule, cfg,
                             detail::PursuitMode::masked);
}

}  // namespace lobcod
