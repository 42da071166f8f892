#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "transhp/analysis.hpp"
#include "transhp/config.hpp"
#include "transhp/model.hpp"

// Deterministic single-stage training: decoupled weight decay (AdamW
// semantics), cosine learning-rate schedule with linear warmup, fixed batch
// order derived from the seed. Two runs with the same config and seed
// produce bitwise-identical parameters and logs.

namespace transhp {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double base_lr = 3e-3;
  int warmup_epochs = 5;
  double weight_decay = 0.05;
  uint64_t seed = 0;
  bool deterministic = true;
  int eval_every = 1;
  bool augment_flip = false;  // seeded horizontal flips; forced off in deterministic mode
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.base_lr <= 0) throw ConfigError("base_lr must be positive");
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.epochs > 0 && c.warmup_epochs >= c.epochs)
    throw ConfigError("warmup epochs (" + std::to_string(c.warmup_epochs) +
                      ") must be smaller than epochs (" + std::to_string(c.epochs) + ")");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

// Desk-scale preset used throughout the experiments.
inline TrainConfig desk_train_preset() { return TrainConfig{}; }

// Published large-scale preset, shipped for documentation; not used by the
// desk experiments.
inline TrainConfig paper_train_preset() {
  TrainConfig c;
  c.epochs = 300;
  c.batch_size = 1024;
  c.base_lr = 1e-3;
  c.warmup_epochs = 5;
  c.weight_decay = 0.05;
  return c;
}

// Closed-form schedule: linear warmup to base_lr, then cosine to zero.
inline double lr_at_step(double base_lr, long step, long total_steps, long warmup_steps) {
  if (total_steps <= 0) return base_lr;
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Decoupled weight decay: parameters shrink multiplicatively before the
// moment update, so a zero-gradient step changes theta by exactly
// -lr*wd*theta.
template <class S>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(TransHPModel<S>& model, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& name : model.param_order) {
      auto& p = model.param(name);
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.data().size(), S(0));
        st.v.assign(p.data().size(), S(0));
      }
      const auto& g = p.grad();
      auto& th = p.data();
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      const S decay = static_cast<S>(1.0 - lr * cfg_.weight_decay);
      const S step_size = static_cast<S>(lr / bc1);
      const S vh_scale = static_cast<S>(1.0 / std::sqrt(bc2));
      const S eps = static_cast<S>(cfg_.adam_eps);
      const long n = static_cast<long>(th.size());
      S* pm = st.m.data();
      S* pv = st.v.data();
      S* pt = th.data();
      const S* pg = g.data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
      for (long i = 0; i < n; ++i) {
        pt[i] *= decay;
        pm[i] = b1 * pm[i] + (S(1) - b1) * pg[i];
        pv[i] = b2 * pv[i] + (S(1) - b2) * pg[i] * pg[i];
        pt[i] -= step_size * pm[i] / (std::sqrt(pv[i]) * vh_scale + eps);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  struct State {
    std::vector<S> m, v;
  };
  TrainConfig cfg_;
  std::map<std::string, State> state_;
  long t_ = 0;
};

struct EvalResult {
  double fine_top1 = 0;
  std::vector<double> coarse_top1;  // per prompting block with a coarse head
  long count = 0;
};

template <class S>
EvalResult evaluate(const TransHPModel<S>& m, const std::vector<ImageRecord>& split,
                    const LabelHierarchy& hierarchy, int batch_size = 64) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  NoGradGuard ng;
  EvalResult res;
  const size_t n_heads =
      (m.variant == Variant::transhp || m.variant == Variant::no_prompts)
          ? m.config.prompting_specs.size()
          : 0;
  std::vector<long> coarse_hits(n_heads, 0);
  long fine_hits = 0;
  for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch_size)) {
    std::vector<const ImageRecord*> batch;
    for (size_t i = start; i < std::min(split.size(), start + static_cast<size_t>(batch_size)); ++i)
      batch.push_back(&split[i]);
    auto fwd = forward_batch(m, batch, false);
    const int B = static_cast<int>(batch.size());
    const int fine = m.config.fine_count;
    for (int b = 0; b < B; ++b) {
      const S* row = fwd.fine_logits.data().data() + static_cast<size_t>(b) * fine;
      const int pred = static_cast<int>(std::max_element(row, row + fine) - row);
      if (pred == batch[static_cast<size_t>(b)]->fine_label) ++fine_hits;
    }
    for (size_t hI = 0; hI < n_heads; ++hI) {
      const auto& spec = m.config.prompting_specs[hI];
      const int M = spec.coarse_count;
      for (int b = 0; b < B; ++b) {
        const S* row = fwd.coarse_logits[hI].data().data() + static_cast<size_t>(b) * M;
        const int pred = static_cast<int>(std::max_element(row, row + M) - row);
        if (pred == hierarchy.ancestor_of(batch[static_cast<size_t>(b)]->fine_label, spec.level_id))
          ++coarse_hits[hI];
      }
    }
    res.count += B;
  }
  res.fine_top1 = static_cast<double>(fine_hits) / static_cast<double>(res.count);
  for (long hits : coarse_hits)
    res.coarse_top1.push_back(static_cast<double>(hits) / static_cast<double>(res.count));
  return res;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;  // at the last step of the epoch
  double train_loss = 0;
  double train_loss_fine = 0;
  std::vector<double> train_loss_coarse;
  double train_fine_top1 = 0;
  std::vector<double> train_coarse_top1;
  double val_fine_top1 = 0;
  std::vector<double> val_coarse_top1;
  std::vector<analysis::AbsorptionStats> absorption_train;
  std::vector<analysis::AbsorptionStats> absorption_val;
  double wall_seconds = 0;  // never serialized into the canonical log
};

struct TrainRunLog {
  Config run_config;
  uint64_t seed = 0;
  uint64_t data_fingerprint = 0;
  std::string variant;
  std::vector<EpochRecord> epochs;
  std::vector<double> lr_trace;  // per optimizer step
  double total_wall_seconds = 0;

  // Line-delimited records. Deterministic: wall-clock never enters.
  std::string to_jsonl() const {
    nlohmann::ordered_json header;
    header["type"] = "header";
    header["variant"] = variant;
    header["seed"] = seed;
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(data_fingerprint));
    header["dataset_fingerprint"] = fp;
    header["config"] = run_config.entries();
    std::string out = header.dump() + "\n";
    for (const auto& e : epochs) {
      nlohmann::ordered_json j;
      j["type"] = "epoch";
      j["epoch"] = e.epoch;
      j["lr"] = e.lr;
      j["train_loss"] = e.train_loss;
      j["train_loss_fine"] = e.train_loss_fine;
      j["train_loss_coarse"] = e.train_loss_coarse;
      j["train_fine_top1"] = e.train_fine_top1;
      j["train_coarse_top1"] = e.train_coarse_top1;
      j["val_fine_top1"] = e.val_fine_top1;
      j["val_coarse_top1"] = e.val_coarse_top1;
      out += j.dump() + "\n";
      for (const char* split : {"train", "val"}) {
        const auto& stats = split == std::string("train") ? e.absorption_train : e.absorption_val;
        for (const auto& s : stats) {
          const std::pair<const char*, double> items[] = {
              {"cls_target_weight_pred", s.mean_cls_target_pred},
              {"cls_target_weight_true", s.mean_cls_target_true},
              {"cls_ratio_median_pred", s.median_cls_ratio_pred},
              {"cls_ratio_median_true", s.median_cls_ratio_true},
              {"feat_target_weight_pred", s.mean_feat_target_pred},
              {"feat_target_weight_true", s.mean_feat_target_true},
          };
          for (const auto& [stat, value] : items) {
            nlohmann::ordered_json a;
            a["type"] = "absorption";
            a["epoch"] = e.epoch;
            a["split"] = split;
            a["block"] = s.block_layer;
            a["statistic"] = stat;
            a["value"] = value;
            out += a.dump() + "\n";
          }
        }
      }
    }
    return out;
  }
};

// Trains in place. Aborts with NumericError naming the epoch and batch if
// the loss goes non-finite.
template <class S>
TrainRunLog train(TransHPModel<S>& model, const std::vector<ImageRecord>& train_split,
                  const std::vector<ImageRecord>& val_split, const LabelHierarchy& hierarchy,
                  const TrainConfig& cfg) {
  validate_train_config(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  TrainRunLog log;
  log.seed = cfg.seed;
  log.variant = variant_name(model.variant);
  {
    Dataset probe;
    probe.height = model.config.image_size;
    probe.records = train_split;
    log.data_fingerprint = dataset_fingerprint(probe);
  }
  log.run_config.set_int("epochs", cfg.epochs);
  log.run_config.set_int("batch_size", cfg.batch_size);
  log.run_config.set_double("base_lr", cfg.base_lr);
  log.run_config.set_int("warmup_epochs", cfg.warmup_epochs);
  log.run_config.set_double("weight_decay", cfg.weight_decay);
  log.run_config.set_int("seed", static_cast<long>(cfg.seed));
  log.run_config.set_int("deterministic", cfg.deterministic ? 1 : 0);

  if (cfg.epochs == 0) return log;
  if (train_split.empty()) throw ContractError("train: empty training split");

  const bool flips = cfg.augment_flip && !cfg.deterministic;
  const long steps_per_epoch =
      (static_cast<long>(train_split.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  const bool track_absorb = model.variant == Variant::transhp;

  AdamW<S> opt(cfg);
  long step = 0;
  EvalResult last_val;
  std::vector<analysis::AbsorptionStats> last_val_absorb;
  bool have_val = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::vector<size_t> order(train_split.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    {
      auto shuffle_rng = indexed_rng(cfg.seed, "epoch-shuffle", static_cast<uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
    }
    auto flip_rng = indexed_rng(cfg.seed, "epoch-flip", static_cast<uint64_t>(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_acc = 0, loss_fine_acc = 0;
    std::vector<double> loss_coarse_acc;
    long train_hits = 0;
    std::vector<long> train_coarse_hits;
    std::vector<analysis::AbsorptionImageReport> train_absorb_reports;
    long batches = 0;

    for (long start = 0; start < static_cast<long>(order.size()); start += cfg.batch_size) {
      std::vector<const ImageRecord*> batch;
      std::vector<int> fine_targets;
      std::vector<ImageRecord> flipped;  // owns any augmented copies
      flipped.reserve(flips ? static_cast<size_t>(cfg.batch_size) : 0);
      for (long i = start; i < std::min<long>(order.size(), start + cfg.batch_size); ++i) {
        const ImageRecord& r = train_split[order[static_cast<size_t>(i)]];
        if (flips && (flip_rng() & 1u)) {
          ImageRecord f = r;
          const int H = model.config.image_size;
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < H / 2; ++x)
              for (int ch = 0; ch < 3; ++ch)
                std::swap(f.pixels[(static_cast<size_t>(y) * H + x) * 3 + ch],
                          f.pixels[(static_cast<size_t>(y) * H + H - 1 - x) * 3 + ch]);
          flipped.push_back(std::move(f));
          batch.push_back(&flipped.back());
        } else {
          batch.push_back(&r);
        }
        fine_targets.push_back(r.fine_label);
      }

      ForwardBatch<S> fwd;
      objective::LossBreakdown<S> lb;
      try {
        fwd = forward_batch(model, batch, false);
        lb = batch_loss(model, fwd, fine_targets, hierarchy);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      const double loss_val = static_cast<double>(lb.total.item());
      if (!std::isfinite(loss_val))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches));
      loss_acc += loss_val;
      loss_fine_acc += static_cast<double>(lb.fine_loss.item());
      if (loss_coarse_acc.size() < lb.coarse_losses.size())
        loss_coarse_acc.assign(lb.coarse_losses.size(), 0.0);
      for (size_t l = 0; l < lb.coarse_losses.size(); ++l)
        loss_coarse_acc[l] += static_cast<double>(lb.coarse_losses[l].item());

      // batch accuracy from the pre-update forward
      {
        const int B = static_cast<int>(batch.size()), fine = model.config.fine_count;
        for (int b = 0; b < B; ++b) {
          const S* row = fwd.fine_logits.data().data() + static_cast<size_t>(b) * fine;
          if (static_cast<int>(std::max_element(row, row + fine) - row) == fine_targets[static_cast<size_t>(b)])
            ++train_hits;
        }
        if (train_coarse_hits.size() < fwd.coarse_logits.size())
          train_coarse_hits.assign(fwd.coarse_logits.size(), 0);
        for (size_t l = 0; l < fwd.coarse_logits.size(); ++l) {
          const auto& spec = model.config.prompting_specs[l];
          for (int b = 0; b < B; ++b) {
            const S* row = fwd.coarse_logits[l].data().data() + static_cast<size_t>(b) * spec.coarse_count;
            const int pred = static_cast<int>(std::max_element(row, row + spec.coarse_count) - row);
            if (pred == hierarchy.ancestor_of(fine_targets[static_cast<size_t>(b)], spec.level_id))
              ++train_coarse_hits[l];
          }
        }
      }
      if (track_absorb)
        analysis::absorption_reports_from_batch(model, fwd, batch, hierarchy, train_absorb_reports);

      model.zero_grads();
      backward(lb.total);
      const double lr = lr_at_step(cfg.base_lr, step, total_steps, warmup_steps);
      log.lr_trace.push_back(lr);
      opt.step(model, lr);
      rec.lr = lr;
      ++step;
      ++batches;
    }

    rec.train_loss = loss_acc / static_cast<double>(batches);
    rec.train_loss_fine = loss_fine_acc / static_cast<double>(batches);
    for (double v : loss_coarse_acc) rec.train_loss_coarse.push_back(v / static_cast<double>(batches));
    rec.train_fine_top1 = static_cast<double>(train_hits) / static_cast<double>(train_split.size());
    for (long hits : train_coarse_hits)
      rec.train_coarse_top1.push_back(static_cast<double>(hits) / static_cast<double>(train_split.size()));
    if (track_absorb) rec.absorption_train = analysis::aggregate_reports(train_absorb_reports);

    const bool do_eval = !val_split.empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (do_eval) {
      last_val = evaluate(model, val_split, hierarchy, cfg.batch_size);
      if (track_absorb)
        last_val_absorb = analysis::track_absorption(model, val_split, hierarchy, cfg.batch_size).stats;
      have_val = true;
    }
    if (have_val) {
      rec.val_fine_top1 = last_val.fine_top1;
      rec.val_coarse_top1 = last_val.coarse_top1;
      rec.absorption_val = last_val_absorb;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    log.epochs.push_back(std::move(rec));
  }
  log.total_wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return log;
}

// ---------------------------------------------------------------------------
// Experiment drivers

struct SweepRow {
  int layer = 0;
  double val_fine_top1 = 0;
};

// One full training run per candidate prompting-layer placement, identical
// seeds. Runs are independent; they execute in parallel when OpenMP threads
// are available, each run serializing its own kernels.
template <class S>
std::vector<SweepRow> position_sweep(const ModelConfig& base, const std::vector<int>& layers,
                                     const std::vector<ImageRecord>& train_split,
                                     const std::vector<ImageRecord>& val_split,
                                     const LabelHierarchy& hierarchy, const TrainConfig& cfg) {
  if (base.prompting_specs.size() != 1)
    throw ContractError("position_sweep expects a single-spec base config");
  for (int l : layers)
    if (l < 1 || l > base.depth)
      throw ContractError("sweep layer " + std::to_string(l) + " outside [1," +
                          std::to_string(base.depth) + "]");
  std::vector<SweepRow> rows(layers.size());
  const int n = static_cast<int>(layers.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < n; ++i) {
    ModelConfig c = base;
    c.prompting_specs[0].layer_index = layers[static_cast<size_t>(i)];
    auto model = assemble<S>(c, hierarchy, cfg.seed);
    train(model, train_split, val_split, hierarchy, cfg);
    rows[static_cast<size_t>(i)] =
        SweepRow{layers[static_cast<size_t>(i)], evaluate(model, val_split, hierarchy).fine_top1};
  }
  return rows;
}

struct DataEfficiencyRow {
  double fraction = 1.0;
  uint64_t seed = 0;
  double baseline_top1 = 0;
  double transhp_top1 = 0;
};

// Table-5-style protocol: for each fraction and seed, subsample the training
// split once and train both arms on the identical subset.
template <class S>
std::vector<DataEfficiencyRow> data_efficiency_protocol(
    const ModelConfig& base, const std::vector<double>& fractions,
    const std::vector<uint64_t>& seeds, const std::vector<ImageRecord>& train_split,
    const std::vector<ImageRecord>& val_split, const LabelHierarchy& hierarchy,
    const TrainConfig& cfg) {
  std::vector<DataEfficiencyRow> rows(fractions.size() * seeds.size());
  const int total = static_cast<int>(rows.size());
#pragma omp parallel for schedule(dynamic, 1) collapse(1)
  for (int idx = 0; idx < total; ++idx) {
    const double fraction = fractions[static_cast<size_t>(idx) / seeds.size()];
    const uint64_t seed = seeds[static_cast<size_t>(idx) % seeds.size()];
    auto subset = subsample_per_class(train_split, fraction, seed);
    TrainConfig run_cfg = cfg;
    run_cfg.seed = seed;

    auto full = assemble<S>(base, hierarchy, seed);
    auto baseline = make_baseline(full);
    train(baseline, subset, val_split, hierarchy, run_cfg);
    const double b = evaluate(baseline, val_split, hierarchy).fine_top1;

    auto transhp_model = assemble<S>(base, hierarchy, seed);
    train(transhp_model, subset, val_split, hierarchy, run_cfg);
    const double t = evaluate(transhp_model, val_split, hierarchy).fine_top1;

    rows[static_cast<size_t>(idx)] = DataEfficiencyRow{fraction, seed, b, t};
  }
  return rows;
}

}  // namespace transhp
