#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lobcod {

/// Dense 2-D image plane, (row, col) indexed, double precision throughout.
using Plane = Eigen::MatrixXd;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct PositionError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an iterative solve exhausts its iteration budget. Carries the
/// best iterate reached so far so callers can inspect or resume.
struct SolverError : NumericError {
  std::vector<double> best_iterate;
  SolverError(const std::string& what, std::vector<double> best = {})
      : NumericError(what), best_iterate(std::move(best)) {}
};

/// Top-left corner of a filter-sized patch window.
struct Position {
  int row = 0;
  int col = 0;
};

/// Sparse coefficient vector attached to one patch position. Indices are kept
/// sorted ascending; explicit zeros are never stored.
struct Needle {
  std::vector<std::uint16_t> idx;
  std::vector<double> val;

  int nnz() const { return static_cast<int>(idx.size()); }
  bool empty() const { return idx.empty(); }
  void clear() {
    idx.clear();
    val.clear();
  }

  double l1() const {
    double s = 0.0;
    for (double v : val) s += std::abs(v);
    return s;
  }

  bool operator==(const Needle& o) const { return idx == o.idx && val == o.val; }
};

/// The n x m matrix of vectorized filters (one per column) together with its
/// Gram matrix, which is precomputed once and shared read-only by all local
/// solves. Filters are vectorized in row-major pixel order.
class LocalDictionary {
 public:
  LocalDictionary(int filter_side, Eigen::MatrixXd atoms)
      : side_(filter_side), atoms_(std::move(atoms)) {
    validate();
    gram_.noalias() = atoms_.transpose() * atoms_;
  }

  int filter_side() const { return side_; }
  int patch_size() const { return side_ * side_; }
  int num_filters() const { return static_cast<int>(atoms_.cols()); }
  const Eigen::MatrixXd& atoms() const { return atoms_; }
  const Eigen::MatrixXd& gram() const { return gram_; }

  /// Replaces the filters and refreshes the Gram matrix. Must not race with
  /// concurrent readers; callers synchronize (single-writer contract).
  void set_atoms(Eigen::MatrixXd atoms) {
    atoms_ = std::move(atoms);
    validate();
    gram_.noalias() = atoms_.transpose() * atoms_;
  }

  /// Dense synthesis D * alpha of a sparse needle.
  Eigen::VectorXd synthesize(const Needle& a) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(atoms_.rows());
    add_synthesis(a, 1.0, out);
    return out;
  }

  /// out += scale * D * alpha.
  void add_synthesis(const Needle& a, double scale, Eigen::VectorXd& out) const {
    for (int k = 0; k < a.nnz(); ++k) out += (scale * a.val[k]) * atoms_.col(a.idx[k]);
  }

 private:
  void validate() const {
    if (side_ < 1) throw ConfigError("filter_side must be >= 1");
    if (atoms_.rows() != static_cast<Eigen::Index>(side_) * side_)
      throw ShapeError("dictionary must have filter_side^2 rows");
    if (atoms_.cols() < 1) throw ConfigError("dictionary needs at least one filter");
    if (!atoms_.allFinite()) throw NumericError("dictionary contains non-finite entries");
  }

  int side_;
  Eigen::MatrixXd atoms_;
  Eigen::MatrixXd gram_;
};

/// One sparse coefficient vector per valid patch position of a padded plane.
/// Valid positions are all (row, col) where a filter_side x filter_side
/// window fits fully inside, i.e. a fully overlapping stride-1 grid.
class NeedleField {
 public:
  NeedleField() = default;

  NeedleField(int height, int width, int filter_side)
      : h_(height), w_(width), side_(filter_side) {
    if (side_ < 1) throw ConfigError("filter_side must be >= 1");
    if (h_ < side_ || w_ < side_) throw ConfigError("image smaller than filter");
    needles_.assign(static_cast<std::size_t>(grid_rows()) * grid_cols(), Needle{});
  }

  int height() const { return h_; }
  int width() const { return w_; }
  int filter_side() const { return side_; }
  int grid_rows() const { return h_ - side_ + 1; }
  int grid_cols() const { return w_ - side_ + 1; }
  int count() const { return grid_rows() * grid_cols(); }

  int flat(Position p) const { return p.row * grid_cols() + p.col; }

  Position position(int flat_index) const {
    return Position{flat_index / grid_cols(), flat_index % grid_cols()};
  }

  Needle& at(int flat_index) { return needles_[static_cast<std::size_t>(flat_index)]; }
  const Needle& at(int flat_index) const {
    return needles_[static_cast<std::size_t>(flat_index)];
  }
  Needle& at(Position p) { return at(flat(p)); }
  const Needle& at(Position p) const { return at(flat(p)); }

  std::int64_t nnz() const {
    std::int64_t s = 0;
    for (const Needle& a : needles_) s += a.nnz();
    return s;
  }

  double l1() const {
    double s = 0.0;
    for (const Needle& a : needles_) s += a.l1();
    return s;
  }

 private:
  int h_ = 0, w_ = 0, side_ = 1;
  std::vector<Needle> needles_;
};

/// Partition of all patch positions into filter_side^2 groups with pairwise
/// disjoint patch footprints. Group k holds the residue class
/// (k / filter_side, k % filter_side) of (row mod side, col mod side), so the
/// group order is row-major over residues. Groups may be empty for planes
/// narrower than 2*side-1.
class LayerSchedule {
 public:
  LayerSchedule(int height, int width, int filter_side, std::vector<std::vector<int>> layers)
      : h_(height), w_(width), side_(filter_side), layers_(std::move(layers)) {}

  int height() const { return h_; }
  int width() const { return w_; }
  int filter_side() const { return side_; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  const std::vector<int>& layer(int k) const { return layers_[static_cast<std::size_t>(k)]; }
  const std::vector<std::vector<int>>& layers() const { return layers_; }

 private:
  int h_ = 0, w_ = 0, side_ = 1;
  std::vector<std::vector<int>> layers_;
};

inline LayerSchedule build_layers(int height, int width, int filter_side) {
  if (filter_side < 1) throw ConfigError("filter_side must be >= 1");
  if (height < filter_side || width < filter_side)
    throw ConfigError("image smaller than filter");
  const int rows = height - filter_side + 1;
  const int cols = width - filter_side + 1;
  std::vector<std::vector<int>> layers(static_cast<std::size_t>(filter_side) * filter_side);
  for (int rr = 0; rr < filter_side; ++rr) {
    for (int rc = 0; rc < filter_side; ++rc) {
      std::vector<int>& layer = layers[static_cast<std::size_t>(rr) * filter_side + rc];
      for (int r = rr; r < rows; r += filter_side)
        for (int c = rc; c < cols; c += filter_side) layer.push_back(r * cols + c);
    }
  }
  return LayerSchedule(height, width, filter_side, std::move(layers));
}

/// A padded plane under decomposition: the target, its running reconstruction
/// and residual, and an optional binary mask (1 = observed pixel). With a
/// mask, `original` is zero at missing pixels and the residual is kept zero
/// there as well.
struct WorkImage {
  Plane original;
  Plane reconstruction;
  Plane residual;
  Plane mask;  // empty when absent
  int pad = 0;

  bool has_mask() const { return mask.size() != 0; }

  void refresh_residual() {
    if (has_mask())
      residual = mask.cwiseProduct(original - reconstruction);
    else
      residual = original - reconstruction;
  }
};

/// Zero-pads each border by filter_side - 1 pixels and sets up the residual
/// bookkeeping. The border width matches the patch overlap so that every
/// pixel of the raw plane is covered by a full complement of patches.
inline WorkImage pad_image(const Plane& raw, int filter_side) {
  if (filter_side < 1) throw ConfigError("filter_side must be >= 1");
  const int pad = filter_side - 1;
  WorkImage img;
  img.pad = pad;
  img.original = Plane::Zero(raw.rows() + 2 * pad, raw.cols() + 2 * pad);
  img.original.block(pad, pad, raw.rows(), raw.cols()) = raw;
  img.reconstruction = Plane::Zero(img.original.rows(), img.original.cols());
  img.residual = img.original;
  return img;
}

/// Masked variant. The mask border is padded with ones: padding pixels are
/// treated as observed zeros, exactly as in the unmasked pipeline. Raw pixels
/// at mask = 0 are forced to zero in `original`.
inline WorkImage pad_image(const Plane& raw, const Plane& raw_mask, int filter_side) {
  if (raw_mask.rows() != raw.rows() || raw_mask.cols() != raw.cols())
    throw ShapeError("mask shape does not match image");
  WorkImage img = pad_image(raw, filter_side);
  img.mask = Plane::Ones(img.original.rows(), img.original.cols());
  img.mask.block(img.pad, img.pad, raw.rows(), raw.cols()) = raw_mask;
  img.original = img.mask.cwiseProduct(img.original);
  img.residual = img.original;
  return img;
}

/// Removes the filter_side - 1 border added by pad_image.
inline Plane crop_result(const Plane& padded, int filter_side) {
  if (filter_side < 1) throw ConfigError("filter_side must be >= 1");
  const int pad = filter_side - 1;
  if (padded.rows() < 2 * pad || padded.cols() < 2 * pad)
    throw ShapeError("plane smaller than the padding to crop");
  return padded.block(pad, pad, padded.rows() - 2 * pad, padded.cols() - 2 * pad);
}

namespace detail {
inline void check_position(const Plane& img, Position pos, int side) {
  if (pos.row < 0 || pos.col < 0 || pos.row + side > img.rows() || pos.col + side > img.cols())
    throw PositionError("patch position (" + std::to_string(pos.row) + "," +
                        std::to_string(pos.col) + ") out of range");
}
}  // namespace detail

/// Copies the side x side window at `pos` into `out`, vectorized row-major:
/// out[r*side + c] = img(pos.row + r, pos.col + c).
inline void extract_patch_into(const Plane& img, Position pos, int side, Eigen::VectorXd& out) {
  detail::check_position(img, pos, side);
  out.resize(static_cast<Eigen::Index>(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) out[r * side + c] = img(pos.row + r, pos.col + c);
}

inline Eigen::VectorXd extract_patch(const Plane& img, Position pos, int side) {
  Eigen::VectorXd out;
  extract_patch_into(img, pos, side, out);
  return out;
}

/// img += the zero-padded embedding of v (row-major vectorized patch) at pos.
inline void place_add_patch(Plane& img, const Eigen::VectorXd& v, Position pos, int side) {
  detail::check_position(img, pos, side);
  if (v.size() != static_cast<Eigen::Index>(side) * side)
    throw ShapeError("patch vector length does not match filter_side^2");
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) img(pos.row + r, pos.col + c) += v[r * side + c];
}

/// Sum of all needle contributions: the plane of every slice D*alpha_i placed
/// at its position. An all-zero field yields a zero plane.
inline Plane reconstruct(const NeedleField& needles, const LocalDictionary& dict) {
  if (needles.filter_side() != dict.filter_side())
    throw ShapeError("needle field and dictionary disagree on filter_side");
  Plane out = Plane::Zero(needles.height(), needles.width());
  Eigen::VectorXd slice(dict.patch_size());
  for (int f = 0; f < needles.count(); ++f) {
    const Needle& a = needles.at(f);
    if (a.empty()) continue;
    slice.setZero();
    dict.add_synthesis(a, 1.0, slice);
    place_add_patch(out, slice, needles.position(f), dict.filter_side());
  }
  return out;
}

/// Split of the sparse-coding objective at one state: the quadratic fit term,
/// the weighted l1 penalty, their sum, the support size, and the wall time
/// spent to reach the state (zero for direct evaluations).
struct ObjectiveReport {
  int epoch = 0;
  double wall_time = 0.0;
  double data_term = 0.0;
  double l1_term = 0.0;
  double total = 0.0;
  std::int64_t nnz = 0;
};

/// Exact objective evaluation on the padded domain. Recomputes the
/// reconstruction from scratch; with a mask, the fit term only counts
/// observed pixels.
inline ObjectiveReport objective(const WorkImage& img, const NeedleField& needles,
                                 const LocalDictionary& dict, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (needles.height() != img.original.rows() || needles.width() != img.original.cols())
    throw ShapeError("needle field does not match image shape");
  Plane xhat = reconstruct(needles, dict);
  ObjectiveReport rep;
  if (img.has_mask())
    rep.data_term = 0.5 * img.mask.cwiseProduct(img.original - xhat).squaredNorm();
  else
    rep.data_term = 0.5 * (img.original - xhat).squaredNorm();
  rep.l1_term = lambda * needles.l1();
  rep.total = rep.data_term + rep.l1_term;
  rep.nnz = needles.nnz();
  return rep;
}

}  // namespace lobcod
