#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transhp/hierarchy.hpp"

namespace transhp {

// One labeled image, pixels H*W*3 row-major interleaved, values in [0,1].
struct ImageRecord {
  int image_id = 0;
  int fine_label = 0;
  std::vector<float> pixels;
};

struct Dataset {
  int height = 0;  // square images
  std::vector<ImageRecord> records;
};

// Deterministic procedural dataset: coarse class c picks one of M global
// stripe orientations for the background, fine class k within c picks one of
// K small glyph shapes drawn in the top-left quadrant, so predicting the
// fine label c*K+k genuinely requires the coarse attribute. Pixel values are
// quantized to the 1/255 grid so serialized files round-trip exactly.
struct SyntheticConfig {
  int coarse_count = 8;    // M
  int fine_per_coarse = 4; // K
  int images_per_fine = 64;
  int image_size = 32;     // H == W
  double noise_std = 0.1;
  uint64_t seed = 0;
};

constexpr int kMaxGlyphShapes = 8;

struct LabeledData {
  Dataset data;
  LabelHierarchy hierarchy;
};

// CIFAR-100 binary layout: per record 1 coarse byte, 1 fine byte, then 3072
// pixel bytes channel-major (1024 R, 1024 G, 1024 B), rows of 32. The stored
// coarse byte must match the built-in taxonomy.
Dataset parse_cifar100_file(const std::string& path);
struct Cifar100 {
  Dataset train;
  Dataset test;
  LabelHierarchy hierarchy;
};
Cifar100 parse_cifar100(const std::string& train_path, const std::string& test_path);

// Re-encode records in the CIFAR-100 binary layout (exact inverse of the
// parser for byte-grid pixel values).
std::vector<uint8_t> cifar100_serialize(const Dataset& ds, const LabelHierarchy& h);

LabeledData generate_synthetic(const SyntheticConfig& cfg);

// Synthetic dataset file: 8-byte magic "THPSYN1\n", then u32 LE M, K, H,
// then CIFAR-style records sized for H.
void save_synthetic_file(const Dataset& ds, const LabelHierarchy& h, const SyntheticConfig& cfg,
                         const std::string& path);
struct SyntheticFile {
  Dataset data;
  LabelHierarchy hierarchy;
  int coarse_count = 0;
  int fine_per_coarse = 0;
};
SyntheticFile load_synthetic_file(const std::string& path);

// Per fine class keeps ceil(fraction * n) records chosen uniformly without
// replacement; surviving records keep their original order.
std::vector<ImageRecord> subsample_per_class(const std::vector<ImageRecord>& records,
                                             double fraction, uint64_t seed);

uint64_t dataset_fingerprint(const Dataset& ds);

}  // namespace transhp
