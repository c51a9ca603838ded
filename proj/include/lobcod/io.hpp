#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lobcod/core.hpp"

namespace lobcod {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IOError("truncated " + what);
  return v;
}

/// Next PGM header token, skipping whitespace and '#' comments.
inline std::string pgm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw IOError("truncated PGM header");
  return tok;
}

}  // namespace detail

/// Reads an 8-bit binary PGM (P5). Values are kept as-is in [0, maxval].
inline Plane read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open " + path);
  if (detail::pgm_token(is) != "P5") throw IOError(path + ": not a binary PGM (P5)");
  const long w = std::stol(detail::pgm_token(is));
  const long h = std::stol(detail::pgm_token(is));
  const long maxval = std::stol(detail::pgm_token(is));
  if (w <= 0 || h <= 0) throw IOError(path + ": bad PGM dimensions");
  if (maxval <= 0 || maxval > 255) throw IOError(path + ": only 8-bit PGM supported");
  std::vector<unsigned char> raster(static_cast<std::size_t>(w) * h);
  if (!is.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size())))
    throw IOError(path + ": truncated PGM raster");
  Plane img(h, w);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) img(r, c) = raster[static_cast<std::size_t>(r) * w + c];
  return img;
}

/// Writes an 8-bit binary PGM, clamping and rounding to [0, 255].
inline void write_pgm(const std::string& path, const Plane& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write " + path);
  os << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  std::vector<unsigned char> raster(static_cast<std::size_t>(img.size()));
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const double v = std::llround(std::min(255.0, std::max(0.0, img(r, c))));
      raster[static_cast<std::size_t>(r) * img.cols() + c] = static_cast<unsigned char>(v);
    }
  os.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!os) throw IOError("short write to " + path);
}

// Dictionary file: "LBCD", u32 version=1, u32 filter_side, u32 num_filters,
// then filter_side^2 * num_filters float64 values column-major.

inline void write_dictionary(const std::string& path, const LocalDictionary& dict) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write " + path);
  os.write("LBCD", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(dict.filter_side()));
  detail::write_u32(os, static_cast<std::uint32_t>(dict.num_filters()));
  os.write(reinterpret_cast<const char*>(dict.atoms().data()),
           static_cast<std::streamsize>(sizeof(double) * dict.atoms().size()));
  if (!os) throw IOError("short write to " + path);
}

inline LocalDictionary read_dictionary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LBCD", 4) != 0)
    throw IOError(path + ": not a dictionary file");
  const std::uint32_t version = detail::read_u32(is, "dictionary header");
  if (version != 1) throw IOError(path + ": unsupported dictionary version");
  const std::uint32_t side = detail::read_u32(is, "dictionary header");
  const std::uint32_t m = detail::read_u32(is, "dictionary header");
  if (side == 0 || m == 0 || side > 4096 || m > 1u << 20)
    throw IOError(path + ": implausible dictionary header");
  Eigen::MatrixXd atoms(static_cast<Eigen::Index>(side) * side, m);
  if (!is.read(reinterpret_cast<char*>(atoms.data()),
               static_cast<std::streamsize>(sizeof(double) * atoms.size())))
    throw IOError(path + ": truncated dictionary data");
  return LocalDictionary(static_cast<int>(side), std::move(atoms));
}

// Needle dump: "LBNF", u32 version=1, u32 height, u32 width, u32 filter_side,
// then for every position in row-major order a u32 count followed by count
// (u16 filter index, f64 value) pairs.

inline void write_needles(const std::string& path, const NeedleField& nf) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write " + path);
  os.write("LBNF", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(nf.height()));
  detail::write_u32(os, static_cast<std::uint32_t>(nf.width()));
  detail::write_u32(os, static_cast<std::uint32_t>(nf.filter_side()));
  for (int f = 0; f < nf.count(); ++f) {
    const Needle& a = nf.at(f);
    detail::write_u32(os, static_cast<std::uint32_t>(a.nnz()));
    for (int k = 0; k < a.nnz(); ++k) {
      os.write(reinterpret_cast<const char*>(&a.idx[static_cast<std::size_t>(k)]), 2);
      os.write(reinterpret_cast<const char*>(&a.val[static_cast<std::size_t>(k)]), 8);
    }
  }
  if (!os) throw IOError("short write to " + path);
}

inline NeedleField read_needles(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LBNF", 4) != 0)
    throw IOError(path + ": not a needle dump");
  const std::uint32_t version = detail::read_u32(is, "needle header");
  if (version != 1) throw IOError(path + ": unsupported needle dump version");
  const int h = static_cast<int>(detail::read_u32(is, "needle header"));
  const int w = static_cast<int>(detail::read_u32(is, "needle header"));
  const int side = static_cast<int>(detail::read_u32(is, "needle header"));
  NeedleField nf(h, w, side);
  for (int f = 0; f < nf.count(); ++f) {
    const std::uint32_t count = detail::read_u32(is, "needle record");
    Needle& a = nf.at(f);
    a.idx.resize(count);
    a.val.resize(count);
    for (std::uint32_t k = 0; k < count; ++k) {
      if (!is.read(reinterpret_cast<char*>(&a.idx[k]), 2) ||
          !is.read(reinterpret_cast<char*>(&a.val[k]), 8))
        throw IOError(path + ": truncated needle record");
      if (!std::isfinite(a.val[k]) || a.val[k] == 0.0)
        throw IOError(path + ": invalid needle coefficient");
    }
  }
  return nf;
}

namespace detail {

inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Trace CSV: '#' comment lines (configuration, seed), a header row, then one
/// row per logged epoch. Training traces carry an extra grad_norm column.
inline void write_trace_csv(const std::string& path, const std::vector<ObjectiveReport>& trace,
                            const std::vector<std::string>& comments = {}) {
  std::ofstream os(path);
  if (!os) throw IOError("cannot write " + path);
  for (const std::string& line : comments) os << "# " << line << "\n";
  os << "epoch,wall_time_s,data_term,l1_term,total,nnz\n";
  for (const ObjectiveReport& r : trace)
    os << r.epoch << ',' << detail::csv_double(r.wall_time) << ','
       << detail::csv_double(r.data_term) << ',' << detail::csv_double(r.l1_term) << ','
       << detail::csv_double(r.total) << ',' << r.nnz << "\n";
  if (!os) throw IOError("short write to " + path);
}

/// Same layout plus a trailing grad_norm column; rows need .objective and
/// .grad_norm members (training trace entries).
template <class TrainTrace>
inline void write_train_trace_csv(const std::string& path, const TrainTrace& trace,
                                  const std::vector<std::string>& comments = {}) {
  std::ofstream os(path);
  if (!os) throw IOError("cannot write " + path);
  for (const std::string& line : comments) os << "# " << line << "\n";
  os << "epoch,wall_time_s,data_term,l1_term,total,nnz,grad_norm\n";
  for (const auto& r : trace)
    os << r.objective.epoch << ',' << detail::csv_double(r.objective.wall_time) << ','
       << detail::csv_double(r.objective.data_term) << ','
       << detail::csv_double(r.objective.l1_term) << ','
       << detail::csv_double(r.objective.total) << ',' << r.objective.nnz << ','
       << detail::csv_double(r.grad_norm) << "\n";
  if (!os) throw IOError("short write to " + path);
}

}  // namespace lobcod
