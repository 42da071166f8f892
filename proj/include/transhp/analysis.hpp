#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "transhp/analysis_io.hpp"
#include "transhp/model.hpp"

// Interpretability quantities: the attention mass feature tokens place on
// prompt tokens (absorption weights), the target-prompt weight, and the
// target / strongest-non-target ratio R(T:N). Weights come straight out of
// the already-normalized softmax rows; nothing is renormalized.

namespace transhp::analysis {

// Head-averaged absorption weights: rows are feature tokens (class token
// first), columns are prompts. attention is one image's [h,T,T] map with
// T = n_feature + M.
template <class S>
Grid absorption_weights(const Tensor<S>& attention, int n_feature, int M) {
  if (attention.rank() != 3 || attention.dim(1) != attention.dim(2))
    throw ShapeError("absorption_weights expects [h,T,T] attention, got " +
                     shape_str(attention.shape()));
  const int h = attention.dim(0), T = attention.dim(1);
  if (T != n_feature + M)
    throw ShapeError("absorption_weights: T=" + std::to_string(T) + " but n_feature+M=" +
                     std::to_string(n_feature + M));
  Grid g;
  g.rows = n_feature;
  g.cols = M;
  g.values.assign(static_cast<size_t>(n_feature) * std::max(M, 0), 0.0);
  const auto& a = attention.data();
  for (int r = 0; r < n_feature; ++r)
    for (int j = 0; j < M; ++j) {
      double acc = 0;
      for (int hh = 0; hh < h; ++hh)
        acc += static_cast<double>(
            a[(static_cast<size_t>(hh) * T + r) * T + n_feature + j]);
      g.at(r, j) = acc / h;
    }
  return g;
}

// R(T:N) = w_k / max_{i != k} w_i.
inline double absorption_ratio(const std::vector<double>& weights, int k) {
  const int M = static_cast<int>(weights.size());
  if (M < 2) throw ContractError("absorption_ratio undefined for M < 2");
  if (k < 0 || k >= M)
    throw IndexError("absorption_ratio: target " + std::to_string(k) + " out of range [0," +
                     std::to_string(M) + ")");
  double best_other = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < M; ++i)
    if (i != k) best_other = std::max(best_other, weights[static_cast<size_t>(i)]);
  return weights[static_cast<size_t>(k)] / best_other;
}

// One image at one prompting block, both aggregation scopes, both target
// conventions (predicted coarse class and ground truth).
struct AbsorptionImageReport {
  int image_id = 0;
  int block_layer = 0;
  int predicted_coarse = -1;
  int true_coarse = -1;
  std::vector<double> cls_weights;   // w(x_cls <- p_i)
  std::vector<double> feat_weights;  // mean over all feature tokens
  double cls_target_pred = 0, cls_target_true = 0;
  double feat_target_pred = 0, feat_target_true = 0;
  double cls_ratio_pred = 0, cls_ratio_true = 0;  // valid when M >= 2
};

struct AbsorptionStats {
  int block_layer = 0;
  int M = 0;
  int tokens = 0;  // T = 1+N+M
  long count = 0;
  double mean_cls_target_pred = 0, mean_cls_target_true = 0;
  double mean_feat_target_pred = 0, mean_feat_target_true = 0;
  double median_cls_ratio_pred = 0, median_cls_ratio_true = 0;
  double mean_cls_ratio_pred = 0, mean_cls_ratio_true = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<AbsorptionStats> aggregate_reports(
    const std::vector<AbsorptionImageReport>& reports) {
  std::vector<AbsorptionStats> stats;
  std::vector<int> layers;
  for (const auto& r : reports)
    if (std::find(layers.begin(), layers.end(), r.block_layer) == layers.end())
      layers.push_back(r.block_layer);
  std::sort(layers.begin(), layers.end());
  for (int layer : layers) {
    AbsorptionStats s;
    s.block_layer = layer;
    std::vector<double> ratios_pred, ratios_true;
    for (const auto& r : reports) {
      if (r.block_layer != layer) continue;
      s.M = static_cast<int>(r.cls_weights.size());
      ++s.count;
      s.mean_cls_target_pred += r.cls_target_pred;
      s.mean_cls_target_true += r.cls_target_true;
      s.mean_feat_target_pred += r.feat_target_pred;
      s.mean_feat_target_true += r.feat_target_true;
      if (s.M >= 2) {
        ratios_pred.push_back(r.cls_ratio_pred);
        ratios_true.push_back(r.cls_ratio_true);
      }
    }
    if (s.count > 0) {
      s.mean_cls_target_pred /= static_cast<double>(s.count);
      s.mean_cls_target_true /= static_cast<double>(s.count);
      s.mean_feat_target_pred /= static_cast<double>(s.count);
      s.mean_feat_target_true /= static_cast<double>(s.count);
    }
    s.median_cls_ratio_pred = median_of(ratios_pred);
    s.median_cls_ratio_true = median_of(ratios_true);
    double acc_p = 0, acc_t = 0;
    for (double v : ratios_pred) acc_p += v;
    for (double v : ratios_true) acc_t += v;
    s.mean_cls_ratio_pred = ratios_pred.empty() ? 0.0 : acc_p / static_cast<double>(ratios_pred.size());
    s.mean_cls_ratio_true = ratios_true.empty() ? 0.0 : acc_t / static_cast<double>(ratios_true.size());
    stats.push_back(s);
  }
  return stats;
}

inline int argmax_row(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Per-image reports for every prompting block, computed from one batch
// forward that retained attention. Requires prototypes (predicted coarse
// classes come from the Eq.-4 scores).
template <class S>
void absorption_reports_from_batch(const TransHPModel<S>& m, const ForwardBatch<S>& fwd,
                                   const std::vector<const ImageRecord*>& images,
                                   const LabelHierarchy& hierarchy,
                                   std::vector<AbsorptionImageReport>& out) {
  if (m.variant != Variant::transhp)
    throw ContractError("absorption tracking needs prompt pools and prototypes (transhp variant)");
  const int n_feature = 1 + m.config.patch_tokens();
  for (size_t si = 0; si < m.config.prompting_specs.size(); ++si) {
    const auto& spec = m.config.prompting_specs[si];
    const int M = spec.coarse_count;
    const auto& attn = fwd.attention[static_cast<size_t>(spec.layer_index - 1)];
    if (!attn.defined())
      throw ContractError("forward pass did not retain the prompting block attention");
    const auto& logits = fwd.coarse_logits[si];
    const int B = attn.dim(0), h = attn.dim(1), T = attn.dim(2);
    const auto& a = attn.data();
    for (int b = 0; b < B; ++b) {
      AbsorptionImageReport r;
      r.image_id = images[static_cast<size_t>(b)]->image_id;
      r.block_layer = spec.layer_index;
      r.true_coarse = hierarchy.ancestor_of(images[static_cast<size_t>(b)]->fine_label, spec.level_id);
      {
        const S* lrow = logits.data().data() + static_cast<size_t>(b) * M;
        r.predicted_coarse = static_cast<int>(std::max_element(lrow, lrow + M) - lrow);
      }
      r.cls_weights.assign(static_cast<size_t>(M), 0.0);
      r.feat_weights.assign(static_cast<size_t>(M), 0.0);
      for (int j = 0; j < M; ++j) {
        double cls_acc = 0, feat_acc = 0;
        for (int hh = 0; hh < h; ++hh) {
          const size_t base = ((static_cast<size_t>(b) * h + hh) * T) * T;
          cls_acc += static_cast<double>(a[base + n_feature + j]);  // row 0 = class token
          for (int row = 0; row < n_feature; ++row)
            feat_acc += static_cast<double>(a[base + static_cast<size_t>(row) * T + n_feature + j]);
        }
        r.cls_weights[static_cast<size_t>(j)] = cls_acc / h;
        r.feat_weights[static_cast<size_t>(j)] = feat_acc / (static_cast<double>(h) * n_feature);
      }
      r.cls_target_pred = r.cls_weights[static_cast<size_t>(r.predicted_coarse)];
      r.cls_target_true = r.cls_weights[static_cast<size_t>(r.true_coarse)];
      r.feat_target_pred = r.feat_weights[static_cast<size_t>(r.predicted_coarse)];
      r.feat_target_true = r.feat_weights[static_cast<size_t>(r.true_coarse)];
      if (M >= 2) {
        r.cls_ratio_pred = absorption_ratio(r.cls_weights, r.predicted_coarse);
        r.cls_ratio_true = absorption_ratio(r.cls_weights, r.true_coarse);
      }
      out.push_back(std::move(r));
    }
  }
}

// Runs the model over a split and reports absorption for every image and
// prompting block, plus per-block aggregates.
template <class S>
struct AbsorptionTrace {
  std::vector<AbsorptionImageReport> reports;
  std::vector<AbsorptionStats> stats;
};

template <class S>
AbsorptionTrace<S> track_absorption(const TransHPModel<S>& m,
                                    const std::vector<ImageRecord>& split,
                                    const LabelHierarchy& hierarchy, int batch_size = 64) {
  if (m.config.prompting_specs.empty())
    throw ContractError("track_absorption requires at least one prompting block");
  if (split.empty()) throw ContractError("track_absorption: empty split");
  NoGradGuard ng;
  AbsorptionTrace<S> trace;
  for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch_size)) {
    std::vector<const ImageRecord*> batch;
    for (size_t i = start; i < std::min(split.size(), start + static_cast<size_t>(batch_size)); ++i)
      batch.push_back(&split[i]);
    auto fwd = forward_batch(m, batch, false);
    absorption_reports_from_batch(m, fwd, batch, hierarchy, trace.reports);
  }
  trace.stats = aggregate_reports(trace.reports);
  return trace;
}

// Class-token attention over patch keys at one block, as a patch-grid map.
struct AttentionMapResult {
  Grid grid;                          // (H/P) x (H/P), min-max normalized
  std::vector<double> prompt_weights; // class-token mass on prompt keys, prompting blocks only
};

template <class S>
AttentionMapResult attention_map(const TransHPModel<S>& m, const ImageRecord& image,
                                 int block_index) {
  if (block_index < 1 || block_index > m.config.depth)
    throw IndexError("block index " + std::to_string(block_index) + " out of range [1," +
                     std::to_string(m.config.depth) + "]");
  NoGradGuard ng;
  auto fwd = forward(m, image, true);
  const auto& attn = fwd.attention[static_cast<size_t>(block_index - 1)];
  const int h = attn.dim(0), T = attn.dim(1);
  const int N = m.config.patch_tokens(), G = m.config.patch_grid();
  AttentionMapResult res;
  Grid raw;
  raw.rows = G;
  raw.cols = G;
  raw.values.assign(static_cast<size_t>(N), 0.0);
  const auto& a = attn.data();
  for (int j = 0; j < N; ++j) {
    double acc = 0;
    for (int hh = 0; hh < h; ++hh) acc += static_cast<double>(a[(static_cast<size_t>(hh) * T) * T + 1 + j]);
    raw.values[static_cast<size_t>(j)] = acc / h;
  }
  res.grid = minmax_normalize(raw);
  for (int j = 1 + N; j < T; ++j) {
    double acc = 0;
    for (int hh = 0; hh < h; ++hh) acc += static_cast<double>(a[(static_cast<size_t>(hh) * T) * T + j]);
    res.prompt_weights.push_back(acc / h);
  }
  return res;
}

// Writes <prefix>.pgm and <prefix>.csv (and <prefix>_prompts.csv at a
// prompting block); returns the in-memory result.
template <class S>
AttentionMapResult attention_map_export(const TransHPModel<S>& m, const ImageRecord& image,
                                        int block_index, const std::string& prefix) {
  auto res = attention_map(m, image, block_index);
  write_pgm(res.grid, prefix + ".pgm");
  write_csv_matrix(res.grid, prefix + ".csv");
  if (!res.prompt_weights.empty()) {
    Grid pw;
    pw.rows = 1;
    pw.cols = static_cast<int>(res.prompt_weights.size());
    pw.values = res.prompt_weights;
    write_csv_matrix(pw, prefix + "_prompts.csv");
  }
  return res;
}

}  // namespace transhp::analysis
