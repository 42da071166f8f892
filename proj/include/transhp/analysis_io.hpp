#pragma once

#include <string>
#include <vector>

#include "transhp/common.hpp"

namespace transhp {

// Row-major numeric grid with explicit dimensions.
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double& at(int r, int c) { return values[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return values[static_cast<size_t>(r) * cols + c]; }
};

// Binary PGM (P5), 8-bit; values expected in [0,1].
void write_pgm(const Grid& g, const std::string& path);

// Comma-separated text matrix, full float precision.
void write_csv_matrix(const Grid& g, const std::string& path);
Grid read_csv_matrix(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);

// Min-max normalization to [0,1]; a constant grid maps to 0.5 everywhere.
Grid minmax_normalize(const Grid& g);

}  // namespace transhp
