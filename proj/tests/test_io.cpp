#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "lobcod/dict_learn.hpp"
#include "lobcod/io.hpp"
#include "support/test_util.hpp"

using namespace lobcod;

TEST_CASE("pgm round trip", "[io]") {
  std::mt19937_64 rng(301);
  testutil::TempDir tmp;
  Plane img(7, 9);
  std::uniform_int_distribution<int> u(0, 255);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 9; ++c) img(r, c) = u(rng);

  const std::string path = tmp.file("img.pgm");
  write_pgm(path, img);
  Plane back = read_pgm(path);
  REQUIRE(back == img);

  SECTION("quantization clamps and rounds") {
    Plane wild(1, 4);
    wild << -3.0, 12.4, 12.6, 700.0;
    write_pgm(path, wild);
    Plane q = read_pgm(path);
    REQUIRE(q(0, 0) == 0.0);
    REQUIRE(q(0, 1) == 12.0);
    REQUIRE(q(0, 2) == 13.0);
    REQUIRE(q(0, 3) == 255.0);
  }

  SECTION("comments in the header are skipped") {
    {
      std::ofstream os(tmp.file("c.pgm"), std::ios::binary);
      os << "P5\n# a comment\n2 1\n# another\n255\n";
      os.put(static_cast<char>(7));
      os.put(static_cast<char>(200));
    }
    Plane p = read_pgm(tmp.file("c.pgm"));
    REQUIRE(p.rows() == 1);
    REQUIRE(p.cols() == 2);
    REQUIRE(p(0, 0) == 7.0);
    REQUIRE(p(0, 1) == 200.0);
  }
}

TEST_CASE("pgm errors", "[io]") {
  testutil::TempDir tmp;
  REQUIRE_THROWS_AS(read_pgm(tmp.file("missing.pgm")), IOError);

  {
    std::ofstream os(tmp.file("ascii.pgm"), std::ios::binary);
    os << "P2\n2 2\n255\n0 1 2 3\n";
  }
  REQUIRE_THROWS_AS(read_pgm(tmp.file("ascii.pgm")), IOError);

  {
    std::ofstream os(tmp.file("short.pgm"), std::ios::binary);
    os << "P5\n4 4\n255\nab";
  }
  REQUIRE_THROWS_AS(read_pgm(tmp.file("short.pgm")), IOError);

  {
    std::ofstream os(tmp.file("deep.pgm"), std::ios::binary);
    os << "P5\n2 2\n65535\n";
    for (int i = 0; i < 8; ++i) os.put(0);
  }
  REQUIRE_THROWS_AS(read_pgm(tmp.file("deep.pgm")), IOError);
}

TEST_CASE("dictionary file round trip", "[io]") {
  std::mt19937_64 rng(307);
  testutil::TempDir tmp;
  for (int trial = 0; trial < 10; ++trial) {
    LocalDictionary d = testutil::random_unit_dictionary(2 + static_cast<int>(rng() % 4),
                                                         1 + static_cast<int>(rng() % 12), rng);
    const std::string p1 = tmp.file("d1.bin"), p2 = tmp.file("d2.bin");
    write_dictionary(p1, d);
    LocalDictionary back = read_dictionary(p1);
    REQUIRE(back.filter_side() == d.filter_side());
    REQUIRE(back.atoms() == d.atoms());
    write_dictionary(p2, back);
    REQUIRE(testutil::read_file_bytes(p1) == testutil::read_file_bytes(p2));
  }

  SECTION("header layout") {
    LocalDictionary d = testutil::random_unit_dictionary(3, 2, rng);
    const std::string p = tmp.file("hdr.bin");
    write_dictionary(p, d);
    std::string bytes = testutil::read_file_bytes(p);
    REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + sizeof(double) * 9 * 2);
    REQUIRE(bytes.substr(0, 4) == "LBCD");
    REQUIRE(bytes[4] == 1);  // version, little-endian
  }

  SECTION("corrupt files are rejected") {
    const std::string p = tmp.file("bad.bin");
    {
      std::ofstream os(p, std::ios::binary);
      os << "NOPE";
    }
    REQUIRE_THROWS_AS(read_dictionary(p), IOError);
  }
}

TEST_CASE("needle dump round trip and size formula", "[io]") {
  std::mt19937_64 rng(311);
  testutil::TempDir tmp;
  for (int trial = 0; trial < 10; ++trial) {
    const int side = 2 + static_cast<int>(rng() % 3);
    const int h = side + 3 + static_cast<int>(rng() % 6);
    const int w = side + 2 + static_cast<int>(rng() % 6);
    NeedleField nf(h, w, side);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int f = 0; f < nf.count(); ++f)
      for (int j = 0; j < 6; ++j)
        if (rng() % 4 == 0) {
          nf.at(f).idx.push_back(static_cast<std::uint16_t>(j));
          double v = g(rng);
          if (v == 0.0) v = 1.0;
          nf.at(f).val.push_back(v);
        }

    const std::string p1 = tmp.file("n1.bin"), p2 = tmp.file("n2.bin");
    write_needles(p1, nf);
    NeedleField back = read_needles(p1);
    REQUIRE(back.count() == nf.count());
    for (int f = 0; f < nf.count(); ++f) {
      REQUIRE(back.at(f).idx == nf.at(f).idx);
      REQUIRE(back.at(f).val == nf.at(f).val);
    }
    write_needles(p2, back);
    const std::string bytes = testutil::read_file_bytes(p1);
    REQUIRE(bytes == testutil::read_file_bytes(p2));
    REQUIRE(bytes.size() ==
            20 + 4 * static_cast<std::size_t>(nf.count()) + 10 * static_cast<std::size_t>(nf.nnz()));
  }

  SECTION("zero field stores zero counts") {
    NeedleField nf(5, 5, 2);
    const std::string p = tmp.file("zero.bin");
    write_needles(p, nf);
    REQUIRE(testutil::read_file_bytes(p).size() == 20 + 4 * 16);
    NeedleField back = read_needles(p);
    REQUIRE(back.nnz() == 0);
  }
}

TEST_CASE("trace csv", "[io]") {
  testutil::TempDir tmp;
  std::vector<ObjectiveReport> trace(3);
  trace[0] = {0, 0.0, 10.0, 1.0, 11.0, 5};
  trace[1] = {1, 0.5, 4.0, 2.0, 6.0, 7};
  trace[2] = {2, 0.9, 3.5, 2.1, 5.6, 7};
  const std::string p = tmp.file("trace.csv");
  write_trace_csv(p, trace, {"lambda=1", "seed=42"});
  const std::string text = testutil::read_file_bytes(p);
  REQUIRE(text.find("# lambda=1") == 0);
  REQUIRE(text.find("epoch,wall_time_s,data_term,l1_term,total,nnz\n") != std::string::npos);
  REQUIRE(text.find("\n2,") != std::string::npos);
  REQUIRE(text.find(",5.5999999999999996,7") != std::string::npos);

  std::vector<TrainReport> ttrace(1);
  ttrace[0].objective = trace[1];
  ttrace[0].grad_norm = 0.25;
  write_train_trace_csv(tmp.file("tt.csv"), ttrace, {});
  const std::string ttext = testutil::read_file_bytes(tmp.file("tt.csv"));
  REQUIRE(ttext.find("grad_norm") != std::string::npos);
  REQUIRE(ttext.find("0.25") != std::string::npos);
}
