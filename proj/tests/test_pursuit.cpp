#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "lobcod/pursuit.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace lobcod;

namespace {

struct Instance {
  LocalDictionary dict;
  WorkImage img;
  LayerSchedule schedule;
  NeedleField zeros;
};

Instance make_instance(int raw_h, int raw_w, int side, int m, std::mt19937_64& rng,
                       const Plane* mask = nullptr) {
  LocalDictionary dict = testutil::random_unit_dictionary(side, m, rng);
  Plane raw = testutil::random_plane(raw_h, raw_w, rng);
  WorkImage img = mask != nullptr ? pad_image(raw, *mask, side) : pad_image(raw, side);
  const int h = static_cast<int>(img.original.rows());
  const int w = static_cast<int>(img.original.cols());
  return Instance{std::move(dict), std::move(img), build_layers(h, w, side),
                  NeedleField(h, w, side)};
}

bool fields_equal(const NeedleField& a, const NeedleField& b, double tol) {
  if (a.count() != b.count()) return false;
  for (int f = 0; f < a.count(); ++f) {
    Eigen::VectorXd va = Eigen::VectorXd::Zero(64), vb = Eigen::VectorXd::Zero(64);
    for (int k = 0; k < a.at(f).nnz(); ++k) va[a.at(f).idx[k]] = a.at(f).val[k];
    for (int k = 0; k < b.at(f).nnz(); ++k) vb[b.at(f).idx[k]] = b.at(f).val[k];
    if ((va - vb).lpNorm<Eigen::Infinity>() > tol) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("sequential pursuit reaches the dense global optimum", "[pursuit]") {
  std::mt19937_64 rng(41);
  Instance in = make_instance(8, 8, 3, 4, rng);  // 12x12 padded
  PursuitConfig cfg;
  cfg.lambda = 0.5;
  cfg.max_epochs = 60;
  cfg.rel_obj_tol = 0.0;
  cfg.check_monotone = true;
  PursuitResult res = pursue_sequential(in.img, in.dict, in.zeros, cfg);
  REQUIRE(res.monotone_violations == 0);

  Eigen::MatrixXd D = oracle::build_global_matrix(
      in.dict, static_cast<int>(in.img.original.rows()),
      static_cast<int>(in.img.original.cols()));
  oracle::FistaResult fr =
      oracle::fista_lasso(D, oracle::flatten(in.img.original), cfg.lambda, 1e-10);
  REQUIRE(fr.converged);
  REQUIRE(res.trace.back().total == Catch::Approx(fr.objective).epsilon(1e-4).margin(1e-10));
}

TEST_CASE("an optimal field is a fixed point", "[pursuit]") {
  std::mt19937_64 rng(43);
  Instance in = make_instance(7, 7, 3, 4, rng);
  PursuitConfig cfg;
  cfg.lambda = 0.4;
  cfg.max_epochs = 300;
  cfg.rel_obj_tol = 0.0;
  cfg.dual_tol = 1e-11;
  PursuitResult first = pursue_layered(in.img, in.dict, in.zeros, in.schedule, cfg);

  PursuitConfig one = cfg;
  one.max_epochs = 1;
  PursuitResult second = pursue_sequential(in.img, in.dict, std::move(first.needles), one);
  const double before = second.trace.front().total;
  const double after = second.trace.back().total;
  REQUIRE(std::abs(after - before) <= 1e-12 * (1.0 + std::abs(before)));
}

TEST_CASE("huge lambda zeroes every needle in one epoch", "[pursuit]") {
  std::mt19937_64 rng(47);
  Instance in = make_instance(6, 9, 2, 5, rng);
  NeedleField start = init_needles(in.img, in.dict, LassoConfig{0.01, 1e-8, 0, 10000});
  REQUIRE(start.nnz() > 0);
  PursuitConfig cfg;
  cfg.lambda = 1e9;
  cfg.max_epochs = 1;
  PursuitResult res = pursue_layered(in.img, in.dict, std::move(start), in.schedule, cfg);
  REQUIRE(res.needles.nnz() == 0);
  REQUIRE(in.img.reconstruction.lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("layered pursuit is order- and worker-count-independent", "[pursuit]") {
  std::mt19937_64 rng(53);
  Instance in = make_instance(9, 8, 3, 5, rng);
  PursuitConfig cfg;
  cfg.lambda = 0.3;
  cfg.max_epochs = 7;
  cfg.rel_obj_tol = 0.0;

  auto run_with = [&](bool parallel, int threads) {
    WorkImage img = in.img;  // fresh copy
    PursuitConfig c = cfg;
    c.parallel = parallel;
    c.threads = threads;
    return pursue_layered(img, in.dict, in.zeros, in.schedule, c);
  };
  PursuitResult serial = run_with(false, 1);
  PursuitResult par2 = run_with(true, 2);
  PursuitResult par5 = run_with(true, 5);
  REQUIRE(fields_equal(serial.needles, par2.needles, 1e-12));
  REQUIRE(fields_equal(serial.needles, par5.needles, 1e-12));

  REQUIRE(serial.trace.back().total == par2.trace.back().total);
  REQUIRE(serial.trace.back().total == par5.trace.back().total);
}

TEST_CASE("single-layer schedule with 1x1 filters soft-thresholds pixels", "[pursuit]") {
  std::mt19937_64 rng(59);
  Eigen::MatrixXd atom = Eigen::MatrixXd::Ones(1, 1);
  LocalDictionary dict(1, std::move(atom));
  Plane raw = testutil::random_plane(4, 5, rng);
  WorkImage img = pad_image(raw, 1);
  LayerSchedule schedule = build_layers(4, 5, 1);
  REQUIRE(schedule.layer_count() == 1);

  PursuitConfig cfg;
  cfg.lambda = 0.7;
  cfg.max_epochs = 1;
  PursuitResult res = pursue_layered(img, dict, NeedleField(4, 5, 1), schedule, cfg);
  for (int f = 0; f < res.needles.count(); ++f) {
    const Position p = res.needles.position(f);
    const double x = raw(p.row, p.col);
    const double expect = x > 0.7 ? x - 0.7 : (x < -0.7 ? x + 0.7 : 0.0);
    double got = res.needles.at(f).empty() ? 0.0 : res.needles.at(f).val[0];
    REQUIRE(got == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("sequential and layered agree on the final objective", "[pursuit]") {
  std::mt19937_64 rng(41);  // same instance as the dense-oracle test
  Instance in = make_instance(8, 8, 3, 4, rng);
  PursuitConfig cfg;
  cfg.lambda = 0.5;
  cfg.max_epochs = 60;
  cfg.rel_obj_tol = 0.0;

  WorkImage img_a = in.img;
  PursuitResult seq = pursue_sequential(img_a, in.dict, in.zeros, cfg);
  WorkImage img_b = in.img;
  PursuitResult lay = pursue_layered(img_b, in.dict, in.zeros, in.schedule, cfg);
  REQUIRE(seq.trace.back().total == Catch::Approx(lay.trace.back().total).epsilon(1e-6));
}

TEST_CASE("residual stays consistent with the reconstruction", "[pursuit]") {
  std::mt19937_64 rng(61);
  Instance in = make_instance(10, 10, 3, 6, rng);
  PursuitConfig cfg;
  cfg.lambda = 0.2;
  cfg.max_epochs = 25;  // crosses a refresh boundary
  cfg.rel_obj_tol = 0.0;
  PursuitResult res = pursue_layered(in.img, in.dict, in.zeros, in.schedule, cfg);
  Plane direct = reconstruct(res.needles, in.dict);
  REQUIRE((in.img.reconstruction - direct).lpNorm<Eigen::Infinity>() <= 1e-9);
  REQUIRE((in.img.original - in.img.reconstruction - in.img.residual)
              .lpNorm<Eigen::Infinity>() <= 1e-9);
}

TEST_CASE("masked pursuit", "[pursuit]") {
  std::mt19937_64 rng(67);

  SECTION("all-ones mask reproduces the unmasked run exactly") {
    std::mt19937_64 r1(71), r2(71);
    Instance plain = make_instance(7, 8, 2, 4, r1);
    Plane ones = Plane::Ones(7, 8);
    Instance masked = make_instance(7, 8, 2, 4, r2, &ones);
    PursuitConfig cfg;
    cfg.lambda = 0.3;
    cfg.max_epochs = 5;
    cfg.rel_obj_tol = 0.0;
    PursuitResult a = pursue_layered(plain.img, plain.dict, plain.zeros, plain.schedule, cfg);
    PursuitResult b = pursue_masked(masked.img, masked.dict, masked.zeros, masked.schedule, cfg);
    for (int f = 0; f < a.needles.count(); ++f) {
      REQUIRE(a.needles.at(f).idx == b.needles.at(f).idx);
      REQUIRE(a.needles.at(f).val == b.needles.at(f).val);
    }
  }

  SECTION("all-zeros mask zeroes everything after one epoch") {
    Plane zero_mask = Plane::Zero(6, 6);
    Instance in = make_instance(6, 6, 2, 4, rng, &zero_mask);
    NeedleField start(static_cast<int>(in.img.original.rows()),
                      static_cast<int>(in.img.original.cols()), 2);
    start.at(4).idx = {1};
    start.at(4).val = {2.5};
    PursuitConfig cfg;
    cfg.lambda = 0.05;
    cfg.max_epochs = 1;
    PursuitResult res = pursue_masked(in.img, in.dict, std::move(start), in.schedule, cfg);
    REQUIRE(res.needles.nnz() == 0);
  }

  SECTION("random mask matches the dense masked oracle") {
    Plane mask = testutil::random_mask(7, 7, 0.5, rng);
    Instance in = make_instance(7, 7, 3, 4, rng, &mask);
    PursuitConfig cfg;
    cfg.lambda = 0.3;
    cfg.max_epochs = 250;
    cfg.rel_obj_tol = 0.0;
    cfg.check_monotone = true;
    PursuitResult res = pursue_masked(in.img, in.dict, in.zeros, in.schedule, cfg);
    REQUIRE(res.monotone_violations == 0);

    const int h = static_cast<int>(in.img.original.rows());
    const int w = static_cast<int>(in.img.original.cols());
    Eigen::MatrixXd D = oracle::build_global_matrix(in.dict, h, w);
    Eigen::VectorXd mflat = oracle::flatten(in.img.mask);
    Eigen::MatrixXd Dm = mflat.asDiagonal() * D;
    oracle::FistaResult fr =
        oracle::fista_lasso(Dm, oracle::flatten(in.img.original), cfg.lambda, 1e-10);
    REQUIRE(fr.converged);
    REQUIRE(res.trace.back().total == Catch::Approx(fr.objective).epsilon(1e-4).margin(1e-10));
  }

  SECTION("mode mismatches are rejected") {
    Plane mask = Plane::Ones(6, 6);
    Instance masked = make_instance(6, 6, 2, 3, rng, &mask);
    Instance plain = make_instance(6, 6, 2, 3, rng);
    PursuitConfig cfg;
    REQUIRE_THROWS_AS(
        pursue_layered(masked.img, masked.dict, masked.zeros, masked.schedule, cfg), ConfigError);
    REQUIRE_THROWS_AS(pursue_masked(plain.img, plain.dict, plain.zeros, plain.schedule, cfg),
                      ConfigError);
  }
}

TEST_CASE("one-needle global problem equals the local solve", "[pursuit]") {
  std::mt19937_64 rng(73);
  for (int trial = 0; trial < 8; ++trial) {
    LocalDictionary dict = testutil::random_unit_dictionary(3, 4, rng);
    Plane plane = testutil::random_plane(10, 10, rng);
    NeedleField grid(10, 10, 3);
    const int f = static_cast<int>(rng() % grid.count());
    const Position pos = grid.position(f);

    // global: fit the whole plane with a single positioned needle
    Eigen::MatrixXd tall(100, 4);
    tall.setZero();
    for (int j = 0; j < 4; ++j)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          tall((pos.row + r) * 10 + (pos.col + c), j) = dict.atoms()(r * 3 + c, j);
    Eigen::VectorXd global = oracle::enumerate_lasso(tall, oracle::flatten(plane), 0.35);

    LassoConfig cfg;
    cfg.lambda = 0.35;
    cfg.dual_tol = 1e-12;
    Needle local = solve_local(extract_patch(plane, pos, 3), dict, cfg);
    Eigen::VectorXd lv = Eigen::VectorXd::Zero(4);
    for (int k = 0; k < local.nnz(); ++k) lv[local.idx[k]] = local.val[k];
    REQUIRE((lv - global).lpNorm<Eigen::Infinity>() <= 1e-6);
  }
}

TEST_CASE("trace rows are well-formed", "[pursuit]") {
  std::mt19937_64 rng(79);
  Instance in = make_instance(6, 6, 2, 4, rng);
  PursuitConfig cfg;
  cfg.lambda = 0.2;
  cfg.max_epochs = 5;
  cfg.rel_obj_tol = 0.0;
  cfg.log_every = 2;
  PursuitResult res = pursue_layered(in.img, in.dict, in.zeros, in.schedule, cfg);
  REQUIRE(res.trace.front().epoch == 0);
  REQUIRE(res.trace.back().epoch == 5);
  for (const ObjectiveReport& r : res.trace) {
    REQUIRE(r.total == Catch::Approx(r.data_term + r.l1_term).margin(1e-12));
    REQUIRE(std::isfinite(r.total));
    REQUIRE(r.wall_time >= 0.0);
  }
  for (std::size_t i = 1; i < res.trace.size(); ++i)
    REQUIRE(res.trace[i].total <= res.trace[i - 1].total * (1.0 + 1e-12) + 1e-12);
}

TEST_CASE("solver failures carry the needle position", "[pursuit]") {
  Eigen::MatrixXd atoms(4, 2);
  atoms.col(0) << 1, 0, 0, 0;
  atoms.col(1) << std::sqrt(1.0 - 1e-8), 1e-4, 0, 0;
  LocalDictionary dict(2, std::move(atoms));
  std::mt19937_64 rng(83);
  Plane raw = testutil::random_plane(5, 5, rng);
  WorkImage img = pad_image(raw, 2);
  LayerSchedule schedule = build_layers(7, 7, 2);
  PursuitConfig cfg;
  cfg.lambda = 1e-9;
  cfg.dual_tol = 1e-15;
  cfg.max_sweeps = 2;
  cfg.max_epochs = 1;
  try {
    pursue_layered(img, dict, NeedleField(7, 7, 2), schedule, cfg);
    FAIL("expected SolverError");
  } catch (const SolverError& e) {
    REQUIRE(std::string(e.what()).find("needle (") != std::string::npos);
  }
}
