#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "lobcod/core.hpp"
#include "lobcod/parallel.hpp"

namespace lobcod {

/// Parameters of the per-needle l1 subproblem
///   min_a 0.5*||t - D a||^2 + lambda*||a||_1.
/// Solutions are certified against the optimality conditions: on the support
/// the residual correlation equals lambda*sign(a_j) within dual_tol, off the
/// support it is bounded by lambda + dual_tol.
struct LassoConfig {
  double lambda = 1.0;
  double dual_tol = 1e-8;
  /// Optional cap on the support size (0 = unlimited). When the solution at
  /// `lambda` is denser than the cap, the weight is raised by bisection to
  /// the smallest tested value whose solution fits; the certificate then
  /// holds at that effective weight.
  int max_nnz = 0;
  long max_sweeps = 10000;
};

/// Scratch buffers reused across solves. One per worker thread.
struct LassoWorkspace {
  Eigen::VectorXd corr;
  Eigen::VectorXd theta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_saved;
  Eigen::VectorXd masked_patch;
  Eigen::MatrixXd masked_atoms;
  Eigen::MatrixXd masked_gram;
};

namespace detail {

constexpr double kDegenerateDiag = 1e-12;

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

/// theta = corr - G * alpha, accumulated over the nonzero coefficients only.
inline void refresh_theta(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr,
                          const Eigen::VectorXd& alpha, Eigen::VectorXd& theta) {
  theta = corr;
  for (Eigen::Index j = 0; j < alpha.size(); ++j)
    if (alpha[j] != 0.0) theta.noalias() -= alpha[j] * gram.col(j);
}

inline double kkt_violation(const Eigen::VectorXd& theta, const Eigen::VectorXd& alpha,
                            double lambda, bool active_only = false) {
  double v = 0.0;
  for (Eigen::Index j = 0; j < alpha.size(); ++j) {
    const double t = theta[j];
    if (alpha[j] > 0.0)
      v = std::max(v, std::abs(t - lambda));
    else if (alpha[j] < 0.0)
      v = std::max(v, std::abs(t + lambda));
    else if (!active_only)
      v = std::max(v, std::abs(t) - lambda);
  }
  return v;
}

/// Objective of the subproblem up to the constant 0.5*||p||^2, evaluated
/// from the Gram matrix and correlations only.
inline double subproblem_objective(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr,
                                   double lambda, const Eigen::VectorXd& x) {
  double quad = 0.0, lin = 0.0, l1 = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    if (x[j] == 0.0) continue;
    lin += corr[j] * x[j];
    l1 += std::abs(x[j]);
    double gx = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (x[i] != 0.0) gx += gram(j, i) * x[i];
    quad += x[j] * gx;
  }
  return 0.5 * quad - lin + lambda * l1;
}

/// Attempts to finish a solve with a small active-set method seeded by the
/// current iterate: solve the sign-fixed stationarity system on the working
/// support, drop sign-violating or inconsistent coordinates, add the worst
/// off-support violator, repeat. A candidate is accepted only when it
/// passes the full optimality check at dual_tol without increasing the
/// subproblem objective, so the per-update descent guarantee is kept.
inline bool polish_support(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr,
                           double lambda, double dual_tol, Eigen::VectorXd& alpha,
                           Eigen::VectorXd& theta) {
  const Eigen::Index m = corr.size();
  std::vector<Eigen::Index> support;
  std::vector<double> signs;
  for (Eigen::Index j = 0; j < m; ++j)
    if (alpha[j] != 0.0) {
      support.push_back(j);
      signs.push_back(alpha[j] > 0.0 ? 1.0 : -1.0);
    }
  if (support.empty()) return false;

  const long round_cap = 4 * static_cast<long>(m) + 16;
  for (long round = 0; round < round_cap && !support.empty(); ++round) {
    const Eigen::Index k = static_cast<Eigen::Index>(support.size());
    Eigen::MatrixXd g(k, k);
    Eigen::VectorXd rhs(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      rhs[i] = corr[support[static_cast<std::size_t>(i)]] -
               lambda * signs[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < k; ++j)
        g(i, j) =
            gram(support[static_cast<std::size_t>(i)], support[static_cast<std::size_t>(j)]);
    }
    // Rank-revealing solve: for singular restricted systems (duplicate atoms
    // under masking, supports larger than the rank) this yields the minimum-
    // norm stationary point of the sign-fixed problem.
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(g);
    Eigen::VectorXd xs = cod.solve(rhs);
    if (!xs.allFinite()) return false;

    Eigen::Index worst = -1;
    double worst_value = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double oriented = xs[i] * signs[static_cast<std::size_t>(i)];
      if (oriented <= 0.0 && (worst < 0 || oriented < worst_value)) {
        worst = i;
        worst_value = oriented;
      }
    }
    if (worst < 0) {
      // No sign mismatch; an inconsistent sign-fixed system still cannot be
      // optimal, so retire its worst equation.
      Eigen::VectorXd resid = g * xs - rhs;
      if (resid.norm() > 1e-10 * (1.0 + rhs.norm())) {
        Eigen::Index imax = 0;
        resid.cwiseAbs().maxCoeff(&imax);
        worst = imax;
      }
    }
    if (worst >= 0) {
      support.erase(support.begin() + worst);
      signs.erase(signs.begin() + worst);
      continue;
    }

    Eigen::VectorXd trial = Eigen::VectorXd::Zero(m);
    for (Eigen::Index i = 0; i < k; ++i) trial[support[static_cast<std::size_t>(i)]] = xs[i];
    Eigen::VectorXd trial_theta;
    refresh_theta(gram, corr, trial, trial_theta);

    // Most violated off-support coordinate joins the working set.
    Eigen::Index enter = -1;
    double enter_violation = dual_tol;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (trial[j] != 0.0 || gram(j, j) <= kDegenerateDiag) continue;
      const double v = std::abs(trial_theta[j]) - lambda;
      if (v > enter_violation) {
        enter_violation = v;
        enter = j;
      }
    }
    if (enter >= 0) {
      support.push_back(enter);
      signs.push_back(trial_theta[enter] > 0.0 ? 1.0 : -1.0);
      continue;
    }

    if (kkt_violation(trial_theta, trial, lambda) > dual_tol) return false;
    const double before = subproblem_objective(gram, corr, lambda, alpha);
    const double after = subproblem_objective(gram, corr, lambda, trial);
    if (after > before) return false;
    alpha = trial;
    theta = std::move(trial_theta);
    return true;
  }
  return false;
}

/// Homotopy fallback: walks the regularization path from the empty solution
/// down to the target weight, tracking the active set through enter/leave
/// events. Exact on every segment; used for the degenerate instances where
/// coordinate sweeps converge too slowly to certify. Returns true only when
/// the end point passes the optimality check at dual_tol.
inline bool homotopy_solve(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr,
                           double lambda, double dual_tol, Eigen::VectorXd& alpha,
                           Eigen::VectorXd& theta) {
  const Eigen::Index m = corr.size();
  std::vector<Eigen::Index> active;
  std::vector<double> signs;

  double lam = 0.0;
  Eigen::Index first = -1;
  for (Eigen::Index j = 0; j < m; ++j) {
    if (gram(j, j) <= kDegenerateDiag) continue;
    if (std::abs(corr[j]) > lam) {
      lam = std::abs(corr[j]);
      first = j;
    }
  }
  if (first < 0 || lam <= lambda) return false;  // zero solution, caller handles
  active.push_back(first);
  signs.push_back(corr[first] > 0.0 ? 1.0 : -1.0);

  Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
  const long event_cap = 24 * static_cast<long>(m) + 64;
  for (long ev = 0; ev < event_cap; ++ev) {
    const Eigen::Index k = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd g(k, k);
    Eigen::VectorXd ca(k), sa(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      ca[i] = corr[active[static_cast<std::size_t>(i)]];
      sa[i] = signs[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < k; ++j)
        g(i, j) = gram(active[static_cast<std::size_t>(i)], active[static_cast<std::size_t>(j)]);
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(g);
    const Eigen::VectorXd x0 = cod.solve(ca);   // solution at weight 0
    const Eigen::VectorXd w = cod.solve(sa);    // d x / d(-weight)
    if (!x0.allFinite() || !w.allFinite()) return false;

    // Along the segment: x_A(t) = x0 - t*w for weight t in (next_lam, lam].
    // Affine off-active correlations theta_j(t) = a_j + t*b_j.
    double next_lam = lambda;
    int kind = 0;  // 0 = reach target, 1 = leave, 2 = enter
    Eigen::Index which = -1;
    double enter_sign = 0.0;
    const double tie = 1e-12 * (1.0 + lam);
    for (Eigen::Index i = 0; i < k; ++i) {
      if (w[i] == 0.0) continue;
      const double t = x0[i] / w[i];
      if (t > next_lam + tie && t < lam - tie) {
        next_lam = t;
        kind = 1;
        which = i;
      }
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      bool in_active = false;
      for (Eigen::Index i = 0; i < k; ++i)
        if (active[static_cast<std::size_t>(i)] == j) in_active = true;
      if (in_active || gram(j, j) <= kDegenerateDiag) continue;
      double a = corr[j], b = 0.0;
      for (Eigen::Index i = 0; i < k; ++i) {
        a -= gram(j, active[static_cast<std::size_t>(i)]) * x0[i];
        b += gram(j, active[static_cast<std::size_t>(i)]) * w[i];
      }
      for (double sgn : {1.0, -1.0}) {
        const double denom = sgn - b;
        if (denom == 0.0) continue;
        const double t = a / denom;
        if (t > next_lam + tie && t < lam - tie) {
          next_lam = t;
          kind = 2;
          which = j;
          enter_sign = sgn;
        }
      }
    }

    if (kind == 0) {
      x.setZero();
      for (Eigen::Index i = 0; i < k; ++i)
        x[active[static_cast<std::size_t>(i)]] = x0[i] - lambda * w[i];
      Eigen::VectorXd fresh;
      refresh_theta(gram, corr, x, fresh);
      if (kkt_violation(fresh, x, lambda) > dual_tol) return false;
      alpha = x;
      theta = std::move(fresh);
      return true;
    }
    if (kind == 1) {
      active.erase(active.begin() + which);
      signs.erase(signs.begin() + which);
      if (active.empty()) return false;
    } else {
      active.push_back(which);
      signs.push_back(enter_sign);
    }
    lam = next_lam;
  }
  return false;
}

/// Cyclic coordinate descent with exact coordinate minimization. Sweeps the
/// full index range, then iterates on the current support until it settles,
/// trying an exact restricted solve on the stabilized support; a solution is
/// only accepted after the optimality check passes on a freshly recomputed
/// correlation vector. Coordinates whose Gram diagonal vanishes (fully
/// masked atoms) are pinned to zero.
inline void cd_solve(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr, double lambda,
                     double dual_tol, long max_sweeps, Eigen::VectorXd& alpha,
                     Eigen::VectorXd& theta) {
  const Eigen::Index m = corr.size();
  refresh_theta(gram, corr, alpha, theta);

  auto sweep = [&](bool active_only) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (active_only && alpha[j] == 0.0) continue;
      const double d = gram(j, j);
      if (d <= kDegenerateDiag) {
        alpha[j] = 0.0;  // zero column: no data support, penalty pins it
        continue;
      }
      const double u = theta[j] + d * alpha[j];
      const double a = soft_threshold(u, lambda) / d;
      if (a != alpha[j]) {
        theta.noalias() -= (a - alpha[j]) * gram.col(j);
        alpha[j] = a;
      }
    }
  };

  long sweeps = 0;
  auto spend_sweep = [&](bool active_only) {
    if (sweeps >= max_sweeps) {
      std::vector<double> best(alpha.data(), alpha.data() + alpha.size());
      char tol[32];
      std::snprintf(tol, sizeof tol, "%g", dual_tol);
      throw SolverError("local solve did not converge in " + std::to_string(max_sweeps) +
                            " sweeps (dual_tol " + tol + ")",
                        std::move(best));
    }
    ++sweeps;
    sweep(active_only);
    if (sweeps % 64 == 0) refresh_theta(gram, corr, alpha, theta);
  };

  bool homotopy_tried = false;
  for (;;) {
    refresh_theta(gram, corr, alpha, theta);
    if (kkt_violation(theta, alpha, lambda) <= dual_tol) return;
    if (polish_support(gram, corr, lambda, dual_tol, alpha, theta)) return;
    if (!homotopy_tried) {
      homotopy_tried = true;
      Eigen::VectorXd hx, hth;
      if (homotopy_solve(gram, corr, lambda, dual_tol, hx, hth) &&
          subproblem_objective(gram, corr, lambda, hx) <=
              subproblem_objective(gram, corr, lambda, alpha)) {
        alpha = std::move(hx);
        theta = std::move(hth);
        return;
      }
    }
    spend_sweep(false);
    for (long inner = 0; inner < 500; ++inner) {
      if (kkt_violation(theta, alpha, lambda, /*active_only=*/true) <= 0.5 * dual_tol) break;
      spend_sweep(true);
    }
  }
}

inline Needle harvest_needle(const Eigen::VectorXd& alpha) {
  Needle a;
  for (Eigen::Index j = 0; j < alpha.size(); ++j) {
    if (alpha[j] != 0.0) {
      a.idx.push_back(static_cast<std::uint16_t>(j));
      a.val.push_back(alpha[j]);
    }
  }
  return a;
}

inline void scatter_needle(const Needle* warm, Eigen::Index m, Eigen::VectorXd& alpha) {
  alpha.setZero(m);
  if (warm != nullptr)
    for (int k = 0; k < warm->nnz(); ++k) alpha[warm->idx[k]] = warm->val[k];
}

inline int dense_nnz(const Eigen::VectorXd& alpha) {
  int c = 0;
  for (Eigen::Index j = 0; j < alpha.size(); ++j)
    if (alpha[j] != 0.0) ++c;
  return c;
}

/// Shared body of the masked/unmasked solves: optional support-cap handling
/// around cd_solve. `corr` must already be in ws.corr.
inline Needle solve_with_gram(const Eigen::MatrixXd& gram, const LassoConfig& cfg,
                              LassoWorkspace& ws, const Needle* warm) {
  const Eigen::Index m = ws.corr.size();
  scatter_needle(warm, m, ws.alpha);
  cd_solve(gram, ws.corr, cfg.lambda, cfg.dual_tol, cfg.max_sweeps, ws.alpha, ws.theta);
  if (cfg.max_nnz > 0 && dense_nnz(ws.alpha) > cfg.max_nnz && cfg.max_nnz < m) {
    double lo = cfg.lambda;
    double hi = ws.corr.lpNorm<Eigen::Infinity>();  // solution is empty there
    ws.alpha_saved.setZero(m);
    for (int it = 0; it < 48 && hi - lo > 1e-12 * (1.0 + hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      cd_solve(gram, ws.corr, mid, cfg.dual_tol, cfg.max_sweeps, ws.alpha, ws.theta);
      if (dense_nnz(ws.alpha) <= cfg.max_nnz) {
        hi = mid;
        ws.alpha_saved = ws.alpha;
      } else {
        lo = mid;
      }
    }
    ws.alpha = ws.alpha_saved;
  }
  return harvest_needle(ws.alpha);
}

}  // namespace detail

/// Solves the needle subproblem for one extracted patch against the shared
/// dictionary Gram matrix. Optional warm start; stateless otherwise, safe to
/// call concurrently with distinct workspaces.
inline Needle solve_local(const Eigen::VectorXd& patch, const LocalDictionary& dict,
                          const LassoConfig& cfg, LassoWorkspace& ws,
                          const Needle* warm = nullptr) {
  if (cfg.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (cfg.dual_tol <= 0.0) throw ConfigError("dual_tol must be > 0");
  if (patch.size() != dict.patch_size()) throw ShapeError("patch length != filter_side^2");
  if (!patch.allFinite()) throw NumericError("non-finite patch");
  ws.corr.noalias() = dict.atoms().transpose() * patch;
  return detail::solve_with_gram(dict.gram(), cfg, ws, warm);
}

inline Needle solve_local(const Eigen::VectorXd& patch, const LocalDictionary& dict,
                          const LassoConfig& cfg) {
  LassoWorkspace ws;
  return solve_local(patch, dict, cfg, ws);
}

/// Masked variant: rows of the dictionary at mask = 0 are zeroed, so the fit
/// only sees observed pixels. Each patch carries its own mask, so the Gram
/// matrix is rebuilt per call instead of shared. An all-ones mask takes the
/// shared-Gram path and reproduces solve_local exactly.
inline Needle solve_local_masked(const Eigen::VectorXd& patch, const Eigen::VectorXd& patch_mask,
                                 const LocalDictionary& dict, const LassoConfig& cfg,
                                 LassoWorkspace& ws, const Needle* warm = nullptr) {
  if (patch_mask.size() != dict.patch_size()) throw ShapeError("mask length != filter_side^2");
  if ((patch_mask.array() == 1.0).all()) return solve_local(patch, dict, cfg, ws, warm);
  if (cfg.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (cfg.dual_tol <= 0.0) throw ConfigError("dual_tol must be > 0");
  if (patch.size() != dict.patch_size()) throw ShapeError("patch length != filter_side^2");
  if (!patch.allFinite() || !patch_mask.allFinite()) throw NumericError("non-finite input");
  ws.masked_patch = patch_mask.cwiseProduct(patch);
  ws.masked_atoms = patch_mask.asDiagonal() * dict.atoms();
  ws.masked_gram.noalias() = ws.masked_atoms.transpose() * ws.masked_atoms;
  ws.corr.noalias() = ws.masked_atoms.transpose() * ws.masked_patch;
  return detail::solve_with_gram(ws.masked_gram, cfg, ws, warm);
}

inline Needle solve_local_masked(const Eigen::VectorXd& patch, const Eigen::VectorXd& patch_mask,
                                 const LocalDictionary& dict, const LassoConfig& cfg) {
  LassoWorkspace ws;
  return solve_local_masked(patch, patch_mask, dict, cfg, ws);
}

/// Spreads the signal evenly over the overlapping patches: every needle is
/// initialized to the sparse code of 1/n of its patch, with the masked solve
/// where a mask is present.
inline NeedleField init_needles(const WorkImage& img, const LocalDictionary& dict,
                                const LassoConfig& cfg, int threads = 1) {
  const int side = dict.filter_side();
  NeedleField nf(static_cast<int>(img.original.rows()), static_cast<int>(img.original.cols()),
                 side);
  const double scale = 1.0 / dict.patch_size();
  ThreadPool pool(threads);
  pool.parallel_for(nf.count(), [&](int begin, int end) {
    LassoWorkspace ws;
    Eigen::VectorXd target, mask_patch;
    for (int f = begin; f < end; ++f) {
      const Position pos = nf.position(f);
      extract_patch_into(img.original, pos, side, target);
      target *= scale;
      if (img.has_mask()) {
        extract_patch_into(img.mask, pos, side, mask_patch);
        nf.at(f) = solve_local_masked(target, mask_patch, dict, cfg, ws);
      } else {
        nf.at(f) = solve_local(target, dict, cfg, ws);
      }
    }
  });
  return nf;
}

}  // namespace lobcod
