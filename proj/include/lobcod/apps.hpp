#pragma once

#include <cmath>
#include <iostream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lobcod/core.hpp"
#include "lobcod/dict_learn.hpp"
#include "lobcod/lasso.hpp"
#include "lobcod/pursuit.hpp"

namespace lobcod {

struct MeanSubtractResult {
  Plane detail;
  Plane mean;
};

/// Local-average split img = detail + mean. The mean at a pixel is the
/// average of the valid (in-range, unmasked) pixels in its kernel window;
/// pixels whose window holds no valid neighbor get mean 0. The detail part is
/// zeroed at masked pixels. Window rows are [r-(s-1)/2, r+s/2], matching the
/// usual anchor for even kernel sides.
inline MeanSubtractResult mean_subtract(const Plane& img, int kernel_side,
                                        const Plane* mask = nullptr) {
  if (kernel_side < 1) throw ConfigError("kernel_side must be >= 1");
  const int h = static_cast<int>(img.rows());
  const int w = static_cast<int>(img.cols());
  if (mask != nullptr && (mask->rows() != h || mask->cols() != w))
    throw ShapeError("mask shape does not match image");

  Plane ones;
  const Plane* m = mask;
  if (m == nullptr) {
    ones = Plane::Ones(h, w);
    m = &ones;
  }

  // Summed-area tables of the masked values and of the mask itself.
  Eigen::MatrixXd sat_v = Eigen::MatrixXd::Zero(h + 1, w + 1);
  Eigen::MatrixXd sat_c = Eigen::MatrixXd::Zero(h + 1, w + 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double mv = (*m)(r, c);
      sat_v(r + 1, c + 1) = img(r, c) * mv + sat_v(r, c + 1) + sat_v(r + 1, c) - sat_v(r, c);
      sat_c(r + 1, c + 1) = mv + sat_c(r, c + 1) + sat_c(r + 1, c) - sat_c(r, c);
    }

  const int lo = (kernel_side - 1) / 2;
  const int hi = kernel_side / 2;
  MeanSubtractResult out;
  out.mean = Plane::Zero(h, w);
  for (int r = 0; r < h; ++r) {
    const int r0 = std::max(0, r - lo), r1 = std::min(h - 1, r + hi);
    for (int c = 0; c < w; ++c) {
      const int c0 = std::max(0, c - lo), c1 = std::min(w - 1, c + hi);
      const double cnt = sat_c(r1 + 1, c1 + 1) - sat_c(r0, c1 + 1) - sat_c(r1 + 1, c0) +
                         sat_c(r0, c0);
      if (cnt > 0.0) {
        const double sum = sat_v(r1 + 1, c1 + 1) - sat_v(r0, c1 + 1) - sat_v(r1 + 1, c0) +
                           sat_v(r0, c0);
        out.mean(r, c) = sum / cnt;
      }
    }
  }
  out.detail = m->cwiseProduct(img - out.mean);
  return out;
}

/// Peak signal-to-noise ratio 20*log10(255*sqrt(N)/||ref - est||), +inf for
/// identical planes.
inline double psnr(const Plane& ref, const Plane& est) {
  if (ref.rows() != est.rows() || ref.cols() != est.cols())
    throw ShapeError("psnr: shape mismatch");
  const double err = (ref - est).norm();
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(ref.size());
  return 20.0 * std::log10(255.0 * std::sqrt(n) / err);
}

namespace detail {

// Forward differences with zero padding outside the plane. The last row or
// column differences against an implicit zero sample.
inline void apply_grad_x(const Plane& v, Plane& out) {
  const int h = static_cast<int>(v.rows()), w = static_cast<int>(v.cols());
  out.resize(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c + 1 < w; ++c) out(r, c) = v(r, c + 1) - v(r, c);
    out(r, w - 1) = -v(r, w - 1);
  }
}

inline void apply_grad_x_adjoint(const Plane& u, Plane& out) {
  const int h = static_cast<int>(u.rows()), w = static_cast<int>(u.cols());
  out.resize(h, w);
  for (int r = 0; r < h; ++r) {
    out(r, 0) = -u(r, 0);
    for (int c = 1; c < w; ++c) out(r, c) = u(r, c - 1) - u(r, c);
  }
}

inline void apply_grad_y(const Plane& v, Plane& out) {
  const int h = static_cast<int>(v.rows()), w = static_cast<int>(v.cols());
  out.resize(h, w);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r + 1 < h; ++r) out(r, c) = v(r + 1, c) - v(r, c);
    out(h - 1, c) = -v(h - 1, c);
  }
}

inline void apply_grad_y_adjoint(const Plane& u, Plane& out) {
  const int h = static_cast<int>(u.rows()), w = static_cast<int>(u.cols());
  out.resize(h, w);
  for (int c = 0; c < w; ++c) {
    out(0, c) = -u(0, c);
    for (int r = 1; r < h; ++r) out(r, c) = u(r - 1, c) - u(r, c);
  }
}

/// y = (I + mu*(Gx^T Gx + Gy^T Gy)) x
inline void apply_base_operator(const Plane& x, double mu, Plane& tmp1, Plane& tmp2, Plane& y) {
  apply_grad_x(x, tmp1);
  apply_grad_x_adjoint(tmp1, tmp2);
  y = x + mu * tmp2;
  apply_grad_y(x, tmp1);
  apply_grad_y_adjoint(tmp1, tmp2);
  y += mu * tmp2;
}

inline double gradient_energy(const Plane& v) {
  Plane g;
  apply_grad_x(v, g);
  double e = g.squaredNorm();
  apply_grad_y(v, g);
  e += g.squaredNorm();
  return e;
}

}  // namespace detail

/// Solves (I + mu*(Gx^T Gx + Gy^T Gy)) Y_b = target by conjugate gradients.
/// The operator is symmetric positive definite for mu >= 0; the returned
/// plane satisfies the system to a relative residual of 1e-8 or better.
inline Plane solve_base(const Plane& target, double mu) {
  if (mu < 0.0) throw ConfigError("mu must be >= 0");
  if (mu == 0.0) return target;
  const double tnorm = target.norm();
  if (tnorm == 0.0) return Plane::Zero(target.rows(), target.cols());

  Plane x = Plane::Zero(target.rows(), target.cols());
  Plane r = target;  // residual of the zero start
  Plane p = r;
  Plane ap, tmp1, tmp2;
  double rr = r.squaredNorm();
  const double stop = 1e-13 * tnorm;
  const long cap = 20 * target.size() + 100;
  for (long it = 0; it < cap && std::sqrt(rr) > stop; ++it) {
    detail::apply_base_operator(p, mu, tmp1, tmp2, ap);
    const double alpha = rr / p.cwiseProduct(ap).sum();
    x += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  detail::apply_base_operator(x, mu, tmp1, tmp2, ap);
  if ((ap - target).norm() > 1e-8 * tnorm)
    throw SolverError("base solve did not reach the required residual");
  return x;
}

/// Per-position sum of absolute needle coefficients, smoothed by a uniform
/// s x s kernel (entries 1/s^2, zero padding, same size). The map lives on
/// the needle grid of the padded plane.
inline Plane activity_map(const NeedleField& needles, int smooth_side) {
  if (smooth_side < 1) throw ConfigError("smooth_side must be >= 1");
  const int h = needles.grid_rows();
  const int w = needles.grid_cols();
  Plane raw(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) raw(r, c) = needles.at(Position{r, c}).l1();
  if (smooth_side == 1) return raw;

  Eigen::MatrixXd sat = Eigen::MatrixXd::Zero(h + 1, w + 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      sat(r + 1, c + 1) = raw(r, c) + sat(r, c + 1) + sat(r + 1, c) - sat(r, c);
  const int lo = (smooth_side - 1) / 2;
  const int hi = smooth_side / 2;
  const double scale = 1.0 / (static_cast<double>(smooth_side) * smooth_side);
  Plane out(h, w);
  for (int r = 0; r < h; ++r) {
    const int r0 = std::max(0, r - lo), r1 = std::min(h - 1, r + hi);
    for (int c = 0; c < w; ++c) {
      const int c0 = std::max(0, c - lo), c1 = std::min(w - 1, c + hi);
      out(r, c) = scale * (sat(r1 + 1, c1 + 1) - sat(r0, c1 + 1) - sat(r1 + 1, c0) + sat(r0, c0));
    }
  }
  return out;
}

struct DecomposeResult {
  Plane base;           // unpadded smooth component
  NeedleField needles;  // sparse code of the edge component on the padded grid
  /// Combined objective (fit + l1 + gradient penalty) after every half-step:
  /// entry 0 is the state after needle initialization, then two entries per
  /// alternation (after the pursuit step, after the base step).
  std::vector<double> objective_trace;
  std::int64_t monotone_violations = 0;
};

namespace detail {

inline double decompose_objective(const Plane& src, const Plane& base,
                                  const NeedleField& needles, const LocalDictionary& dict,
                                  double lambda, double mu) {
  WorkImage wi = pad_image(src - base, dict.filter_side());
  const double data = 0.5 * (wi.original - reconstruct(needles, dict)).squaredNorm();
  return data + lambda * needles.l1() + 0.5 * mu * gradient_energy(base);
}

}  // namespace detail

/// Splits a source into a gradient-penalized smooth base and a sparse-coded
/// edge part by alternating a pursuit over the base-subtracted plane with an
/// exact base update. Each half-step minimizes its own block, so the combined
/// objective never increases along the trace.
inline DecomposeResult decompose_base_edge(const Plane& src, const LocalDictionary& dict,
                                           double lambda, double mu, int iters,
                                           const PursuitConfig& inner) {
  if (iters < 1) throw ConfigError("iters must be >= 1");
  if (mu < 0.0) throw ConfigError("mu must be >= 0");
  PursuitConfig cfg = inner;
  cfg.lambda = lambda;

  DecomposeResult out;
  out.base = Plane::Zero(src.rows(), src.cols());

  WorkImage wi = pad_image(src, dict.filter_side());
  const LayerSchedule schedule = build_layers(static_cast<int>(wi.original.rows()),
                                              static_cast<int>(wi.original.cols()),
                                              dict.filter_side());
  out.needles = init_needles(wi, dict, cfg.lasso(), cfg.parallel ? cfg.threads : 1);
  out.objective_trace.push_back(
      detail::decompose_objective(src, out.base, out.needles, dict, lambda, mu));

  for (int it = 0; it < iters; ++it) {
    WorkImage target = pad_image(src - out.base, dict.filter_side());
    PursuitResult pr = pursue_layered(target, dict, std::move(out.needles), schedule, cfg);
    out.needles = std::move(pr.needles);
    out.monotone_violations += pr.monotone_violations;
    out.objective_trace.push_back(
        detail::decompose_objective(src, out.base, out.needles, dict, lambda, mu));

    const Plane edge = crop_result(reconstruct(out.needles, dict), dict.filter_side());
    out.base = solve_base(src - edge, mu);
    out.objective_trace.push_back(
        detail::decompose_objective(src, out.base, out.needles, dict, lambda, mu));
  }
  return out;
}

/// Per-source state of a fusion run.
struct FusionState {
  Plane base;
  NeedleField needles;
  Plane activity;
  std::vector<double> objective_trace;
};

struct FusionResult {
  Plane fused;
  std::vector<FusionState> sources;
};

/// Multi-source fusion: decompose every source, build smoothed activity maps,
/// then per needle position copy the whole needle from the most active
/// source, and fuse bases per pixel the same way (or by averaging). Ties pick
/// the lowest source index. The fused plane is the fused base plus the
/// reconstruction of the fused needles.
inline FusionResult fuse(const std::vector<Plane>& sources, const LocalDictionary& dict,
                         double lambda, double mu, int smooth_side, int iters,
                         const PursuitConfig& inner, bool base_average = false) {
  if (sources.empty()) throw ConfigError("fuse needs at least one source");
  FusionResult out;
  if (sources.size() == 1) {
    std::cerr << "warning: single source, returning it unchanged\n";
    out.fused = sources.front();
    return out;
  }
  const int h = static_cast<int>(sources.front().rows());
  const int w = static_cast<int>(sources.front().cols());
  for (const Plane& s : sources)
    if (s.rows() != h || s.cols() != w) throw ShapeError("fusion sources differ in size");

  for (const Plane& s : sources) {
    DecomposeResult dr = decompose_base_edge(s, dict, lambda, mu, iters, inner);
    FusionState st;
    st.base = std::move(dr.base);
    st.activity = activity_map(dr.needles, smooth_side);
    st.needles = std::move(dr.needles);
    st.objective_trace = std::move(dr.objective_trace);
    out.sources.push_back(std::move(st));
  }

  const int side = dict.filter_side();
  const NeedleField& ref = out.sources.front().needles;
  NeedleField fused_needles(ref.height(), ref.width(), side);
  for (int f = 0; f < ref.count(); ++f) {
    const Position p = ref.position(f);
    std::size_t best = 0;
    for (std::size_t k = 1; k < out.sources.size(); ++k)
      if (out.sources[k].activity(p.row, p.col) > out.sources[best].activity(p.row, p.col))
        best = k;
    fused_needles.at(f) = out.sources[best].needles.at(f);
  }

  Plane fused_base(h, w);
  if (base_average) {
    fused_base.setZero();
    for (const FusionState& st : out.sources) fused_base += st.base;
    fused_base /= static_cast<double>(out.sources.size());
  } else {
    // A pixel maps to the needle whose patch is centered on it.
    const int off = (side - 1) - (side - 1) / 2;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < out.sources.size(); ++k)
          if (out.sources[k].activity(y + off, x + off) >
              out.sources[best].activity(y + off, x + off))
            best = k;
        fused_base(y, x) = out.sources[best].base(y, x);
      }
  }

  out.fused = fused_base + crop_result(reconstruct(fused_needles, dict), side);
  return out;
}

struct InpaintResult {
  Plane restored;
  std::vector<ObjectiveReport> trace;
  LocalDictionary dict;  // updated when training on the corrupted image
  std::int64_t monotone_violations = 0;
};

/// Fills missing pixels: masked local-mean split, masked pursuit on the
/// detail part (optionally with interleaved masked dictionary updates), then
/// reconstruction with the full dictionary everywhere plus the mean. The
/// model output is used at observed pixels too; they are not pasted back.
inline InpaintResult inpaint(const Plane& corrupted, const Plane& mask,
                             const LocalDictionary& dict, const PursuitConfig& cfg,
                             int mean_kernel = 8, const TrainConfig* train_on_image = nullptr) {
  if (mask.rows() != corrupted.rows() || mask.cols() != corrupted.cols())
    throw ShapeError("mask shape does not match image");
  Plane bin_mask = (mask.array() > 0.5).cast<double>();
  Plane observed = bin_mask.cwiseProduct(corrupted);

  MeanSubtractResult split = mean_subtract(observed, mean_kernel, &bin_mask);
  WorkImage wi = pad_image(split.detail, bin_mask, dict.filter_side());
  const LayerSchedule schedule = build_layers(static_cast<int>(wi.original.rows()),
                                              static_cast<int>(wi.original.cols()),
                                              dict.filter_side());

  InpaintResult out{Plane(), {}, dict, 0};
  NeedleField needles;
  if (train_on_image != nullptr) {
    TrainConfig tc = *train_on_image;
    tc.lambda = cfg.lambda;
    tc.epochs = cfg.max_epochs;
    tc.dual_tol = cfg.dual_tol;
    tc.max_nnz = cfg.max_nnz;
    tc.parallel = cfg.parallel;
    tc.threads = cfg.threads;
    tc.check_monotone = cfg.check_monotone;
    std::vector<WorkImage> work;
    work.push_back(std::move(wi));
    std::vector<NeedleField> fields;
    fields.push_back(init_needles(work.front(), out.dict, cfg.lasso(),
                                  cfg.parallel ? cfg.threads : 1));
    TrainResult tr = detail::stochastic_train_loop(work, fields, out.dict, tc);
    out.dict = std::move(tr.dict);
    needles = std::move(tr.needle_fields.front());
    for (const TrainReport& r : tr.trace) out.trace.push_back(r.objective);
    out.monotone_violations = tr.monotone_violations;
  } else {
    needles = init_needles(wi, out.dict, cfg.lasso(), cfg.parallel ? cfg.threads : 1);
    PursuitResult pr = pursue_masked(wi, out.dict, std::move(needles), schedule, cfg);
    needles = std::move(pr.needles);
    out.trace = std::move(pr.trace);
    out.monotone_violations = pr.monotone_violations;
  }

  const Plane full = reconstruct(needles, out.dict);
  out.restored = crop_result(full, out.dict.filter_side()) + split.mean;
  return out;
}

}  // namespace lobcod
