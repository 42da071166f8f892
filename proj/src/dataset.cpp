#include "transhp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "transhp/presets.hpp"

namespace transhp {

namespace {

constexpr size_t kCifarRecordBytes = 3074;
constexpr char kSyntheticMagic[8] = {'T', 'H', 'P', 'S', 'Y', 'N', '1', '\n'};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

// Records are channel-major in the file, interleaved H*W*3 in memory.
ImageRecord decode_record(const uint8_t* rec, int H, int id) {
  ImageRecord r;
  r.image_id = id;
  r.fine_label = rec[1];
  const int plane = H * H;
  r.pixels.resize(static_cast<size_t>(plane) * 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int p = 0; p < plane; ++p)
      r.pixels[static_cast<size_t>(p) * 3 + ch] = static_cast<float>(rec[2 + ch * plane + p]) / 255.0f;
  return r;
}

void encode_record(const ImageRecord& r, int H, int coarse, uint8_t* out) {
  out[0] = static_cast<uint8_t>(coarse);
  out[1] = static_cast<uint8_t>(r.fine_label);
  const int plane = H * H;
  for (int ch = 0; ch < 3; ++ch)
    for (int p = 0; p < plane; ++p)
      out[2 + ch * plane + p] =
          static_cast<uint8_t>(std::lround(r.pixels[static_cast<size_t>(p) * 3 + ch] * 255.0f));
}

Dataset parse_cifar_bytes(const std::vector<uint8_t>& bytes, const std::string& path) {
  if (bytes.empty()) throw ParseError("'" + path + "' is empty, expected whole 3074-byte records");
  if (bytes.size() % kCifarRecordBytes != 0)
    throw ParseError("'" + path + "' holds " + std::to_string(bytes.size()) +
                     " bytes, expected a multiple of 3074 (nearest whole-record size " +
                     std::to_string((bytes.size() / kCifarRecordBytes + 1) * kCifarRecordBytes) + ")");
  const auto& taxonomy = cifar100_taxonomy();
  Dataset ds;
  ds.height = 32;
  const size_t n = bytes.size() / kCifarRecordBytes;
  ds.records.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    const int coarse = rec[0], fine = rec[1];
    if (fine >= taxonomy.fine_count())
      throw ParseError("'" + path + "' record " + std::to_string(i) + ": fine label " +
                       std::to_string(fine) + " out of range");
    if (coarse != taxonomy.ancestor_of(fine, 0))
      throw ValidationError("'" + path + "' record " + std::to_string(i) + ": coarse byte " +
                            std::to_string(coarse) + " disagrees with taxonomy ancestor " +
                            std::to_string(taxonomy.ancestor_of(fine, 0)) + " of fine class " +
                            std::to_string(fine));
    ds.records.push_back(decode_record(rec, 32, static_cast<int>(i)));
  }
  return ds;
}

}  // namespace

Dataset parse_cifar100_file(const std::string& path) {
  return parse_cifar_bytes(read_file(path), path);
}

Cifar100 parse_cifar100(const std::string& train_path, const std::string& test_path) {
  return Cifar100{parse_cifar100_file(train_path), parse_cifar100_file(test_path),
                  cifar100_taxonomy()};
}

std::vector<uint8_t> cifar100_serialize(const Dataset& ds, const LabelHierarchy& h) {
  const size_t rec_bytes = 2 + static_cast<size_t>(ds.height) * ds.height * 3;
  std::vector<uint8_t> out(ds.records.size() * rec_bytes);
  for (size_t i = 0; i < ds.records.size(); ++i)
    encode_record(ds.records[i], ds.height, h.ancestor_of(ds.records[i].fine_label, 0),
                  out.data() + i * rec_bytes);
  return out;
}

namespace {

// Glyph alphabet; relative coordinates are in units of the glyph radius.
bool glyph_hit(int shape, double ux, double uy) {
  const double rr = ux * ux + uy * uy;
  switch (shape) {
    case 0: return rr <= 1.0;                                              // disk
    case 1: return std::abs(std::sqrt(rr) - 0.78) <= 0.26;                 // ring
    case 2: return (std::abs(ux) <= 0.34 && std::abs(uy) <= 1.0) ||
                   (std::abs(uy) <= 0.34 && std::abs(ux) <= 1.0);          // plus
    case 3: {                                                              // square outline
      const double m = std::max(std::abs(ux), std::abs(uy));
      return m <= 1.0 && m >= 0.55;
    }
    case 4: return uy >= -1.0 && uy <= 1.0 && std::abs(ux) <= 0.55 * (uy + 1.0);  // triangle
    case 5: return std::abs(std::abs(ux) - std::abs(uy)) <= 0.3 &&
                   std::max(std::abs(ux), std::abs(uy)) <= 1.0;            // diagonal cross
    case 6: return std::abs(uy) <= 0.34 && std::abs(ux) <= 1.0;            // horizontal bar
    case 7: {                                                              // two dots
      const double dx1 = ux - 0.52, dx2 = ux + 0.52;
      return dx1 * dx1 + uy * uy <= 0.21 || dx2 * dx2 + uy * uy <= 0.21;
    }
    default: return false;
  }
}

float quantize(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return static_cast<float>(std::lround(v * 255.0)) / 255.0f;
}

void validate(const SyntheticConfig& cfg) {
  if (cfg.coarse_count < 1) throw ValidationError("synthetic config: coarse_count must be >= 1");
  if (cfg.fine_per_coarse < 1)
    throw ValidationError("synthetic config: fine_per_coarse must be >= 1");
  if (cfg.fine_per_coarse > kMaxGlyphShapes)
    throw ValidationError("synthetic config: fine_per_coarse " +
                          std::to_string(cfg.fine_per_coarse) + " exceeds the glyph alphabet (" +
                          std::to_string(kMaxGlyphShapes) + ")");
  if (cfg.coarse_count * cfg.fine_per_coarse > 256)
    throw ValidationError("synthetic config: fine count exceeds the one-byte label range");
  if (cfg.images_per_fine < 1)
    throw ValidationError("synthetic config: images_per_fine must be >= 1");
  if (cfg.image_size < 8) throw ValidationError("synthetic config: image_size must be >= 8");
  if (cfg.noise_std < 0) throw ValidationError("synthetic config: noise_std must be >= 0");
}

}  // namespace

LabeledData generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  const int M = cfg.coarse_count, K = cfg.fine_per_coarse, H = cfg.image_size;
  const double period = H / 4.0;
  const double radius = H * 5.0 / 32.0;
  const int jmax = std::max(1, H / 16);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * M_PI);
  std::uniform_int_distribution<int> jitter_dist(-jmax, jmax);
  std::normal_distribution<double> noise_dist(0.0, cfg.noise_std);

  Dataset ds;
  ds.height = H;
  ds.records.reserve(static_cast<size_t>(M) * K * cfg.images_per_fine);
  int id = 0;
  for (int c = 0; c < M; ++c) {
    const double theta = M_PI * c / M;
    const double kx = std::cos(theta), ky = std::sin(theta);
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < cfg.images_per_fine; ++i) {
        const double phase = phase_dist(rng);
        const double cx = H / 4.0 + jitter_dist(rng);
        const double cy = H / 4.0 + jitter_dist(rng);
        ImageRecord rec;
        rec.image_id = id++;
        rec.fine_label = c * K + k;
        rec.pixels.resize(static_cast<size_t>(H) * H * 3);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < H; ++x) {
            double base = 0.5 + 0.21 * std::sin(2.0 * M_PI * (kx * x + ky * y) / period + phase);
            if (glyph_hit(k, (x - cx) / radius, (y - cy) / radius)) base = 0.93;
            for (int ch = 0; ch < 3; ++ch) {
              double v = base;
              if (cfg.noise_std > 0) v += noise_dist(rng);
              rec.pixels[(static_cast<size_t>(y) * H + x) * 3 + ch] = quantize(v);
            }
          }
        ds.records.push_back(std::move(rec));
      }
    }
  }

  HierarchyLevel lv;
  lv.name = "stripe";
  lv.coarse_count = M;
  lv.parent_of.resize(static_cast<size_t>(M) * K);
  for (int f = 0; f < M * K; ++f) lv.parent_of[static_cast<size_t>(f)] = f / K;
  return LabeledData{std::move(ds), LabelHierarchy(M * K, {lv})};
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

void save_synthetic_file(const Dataset& ds, const LabelHierarchy& h, const SyntheticConfig& cfg,
                         const std::string& path) {
  std::vector<uint8_t> out(kSyntheticMagic, kSyntheticMagic + 8);
  put_u32(out, static_cast<uint32_t>(cfg.coarse_count));
  put_u32(out, static_cast<uint32_t>(cfg.fine_per_coarse));
  put_u32(out, static_cast<uint32_t>(cfg.image_size));
  const size_t rec_bytes = 2 + static_cast<size_t>(ds.height) * ds.height * 3;
  const size_t header = out.size();
  out.resize(header + ds.records.size() * rec_bytes);
  for (size_t i = 0; i < ds.records.size(); ++i)
    encode_record(ds.records[i], ds.height, h.ancestor_of(ds.records[i].fine_label, 0),
                  out.data() + header + i * rec_bytes);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write dataset file '" + path + "'");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

SyntheticFile load_synthetic_file(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kSyntheticMagic, 8) != 0)
    throw ParseError("'" + path + "' is not a synthetic dataset file (bad magic)");
  const int M = static_cast<int>(get_u32(bytes.data() + 8));
  const int K = static_cast<int>(get_u32(bytes.data() + 12));
  const int H = static_cast<int>(get_u32(bytes.data() + 16));
  if (M < 1 || K < 1 || H < 8)
    throw ParseError("'" + path + "' header invalid: M=" + std::to_string(M) + " K=" +
                     std::to_string(K) + " H=" + std::to_string(H));
  const size_t rec_bytes = 2 + static_cast<size_t>(H) * H * 3;
  const size_t payload = bytes.size() - 20;
  if (payload == 0 || payload % rec_bytes != 0)
    throw ParseError("'" + path + "' holds " + std::to_string(payload) +
                     " record bytes, expected a positive multiple of " + std::to_string(rec_bytes));

  HierarchyLevel lv;
  lv.name = "stripe";
  lv.coarse_count = M;
  lv.parent_of.resize(static_cast<size_t>(M) * K);
  for (int f = 0; f < M * K; ++f) lv.parent_of[static_cast<size_t>(f)] = f / K;
  LabelHierarchy hier(M * K, {lv});

  SyntheticFile out{Dataset{}, hier, M, K};
  out.data.height = H;
  const size_t n = payload / rec_bytes;
  out.data.records.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const uint8_t* rec = bytes.data() + 20 + i * rec_bytes;
    if (rec[1] >= M * K)
      throw ParseError("'" + path + "' record " + std::to_string(i) + ": fine label " +
                       std::to_string(rec[1]) + " out of range for M*K=" + std::to_string(M * K));
    if (rec[0] != rec[1] / K)
      throw ValidationError("'" + path + "' record " + std::to_string(i) +
                            ": coarse byte disagrees with fine/K");
    out.data.records.push_back(decode_record(rec, H, static_cast<int>(i)));
  }
  return out;
}

std::vector<ImageRecord> subsample_per_class(const std::vector<ImageRecord>& records,
                                             double fraction, uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ContractError("subsample fraction must lie in (0,1], got " + std::to_string(fraction));
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < records.size(); ++i) by_class[records[i].fine_label].push_back(i);

  std::vector<char> keep(records.size(), 0);
  for (auto& [cls, idx] : by_class) {
    const size_t n = idx.size();
    const size_t m = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
    if (m >= n) {
      for (size_t i : idx) keep[i] = 1;
      continue;
    }
    auto rng = indexed_rng(seed, "subsample", static_cast<uint64_t>(cls));
    std::vector<size_t> pool = idx;
    for (size_t i = 0; i < m; ++i) {
      std::uniform_int_distribution<size_t> pickd(i, pool.size() - 1);
      std::swap(pool[i], pool[pickd(rng)]);
      keep[pool[i]] = 1;
    }
  }
  std::vector<ImageRecord> out;
  for (size_t i = 0; i < records.size(); ++i)
    if (keep[i]) out.push_back(records[i]);
  return out;
}

uint64_t dataset_fingerprint(const Dataset& ds) {
  uint64_t h = fnv1a_bytes(&ds.height, sizeof(ds.height));
  for (const auto& r : ds.records) {
    h = fnv1a_bytes(&r.fine_label, sizeof(r.fine_label), h);
    h = fnv1a_bytes(r.pixels.data(), r.pixels.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace transhp
