#include "transhp/analysis_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace transhp {

void write_pgm(const Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P5\n" << g.cols << " " << g.rows << "\n255\n";
  for (double v : g.values) {
    const double c = std::min(1.0, std::max(0.0, v));
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_csv_matrix(const Grid& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  char buf[64];
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.12g", g.at(r, c));
      out << (c ? "," : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

Grid read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  Grid g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    int cols = 0;
    while (std::getline(ls, cell, ',')) {
      g.values.push_back(std::stod(cell));
      ++cols;
    }
    if (g.rows == 0)
      g.cols = cols;
    else if (cols != g.cols)
      throw ParseError("'" + path + "' row " + std::to_string(g.rows) + " has " +
                       std::to_string(cols) + " cells, expected " + std::to_string(g.cols));
    ++g.rows;
  }
  return g;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path + "'");
}

Grid minmax_normalize(const Grid& g) {
  Grid out = g;
  if (g.values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(g.values.begin(), g.values.end());
  if (*mx == *mn) {
    std::fill(out.values.begin(), out.values.end(), 0.5);
    return out;
  }
  const double span = *mx - *mn;
  for (double& v : out.values) v = (v - *mn) / span;
  return out;
}

}  // namespace transhp
