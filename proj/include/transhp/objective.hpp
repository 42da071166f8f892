#pragma once

#include <vector>

#include "transhp/tensor.hpp"

// Set-to-set coarse classification head and the composite objective. The
// coarse scores pair each prompt output state with its own class prototype
// (the diagonal of the full state/prototype product), and the coarse scores
// feed a standard softmax cross-entropy. The printed form of the coarse loss
// in the source paper omits exp() around the target score; the implementation
// follows the surrounding description ("softmax plus cross-entropy"), since
// the printed form is not a normalized likelihood.

namespace transhp::objective {

// scores[i] = <states[i,:], prototypes[i,:]>. Accepts [M,C] states or a
// batched [B,M,C]; prototypes are always [M,C].
template <class S>
Tensor<S> coarse_scores(const Tensor<S>& prompt_states, const Tensor<S>& prototypes) {
  return paired_row_scores(prompt_states, prototypes);
}

// Softmax cross-entropy over M coarse scores with target y.
template <class S>
Tensor<S> coarse_loss(const Tensor<S>& scores, int y) {
  return cross_entropy(scores, y);
}

// Batched mean over rows of [B,M].
template <class S>
Tensor<S> coarse_loss(const Tensor<S>& scores, const std::vector<int>& ys) {
  return cross_entropy_rows(scores, ys);
}

template <class S>
struct LossBreakdown {
  Tensor<S> fine_loss;
  std::vector<Tensor<S>> coarse_losses;  // one per prompting block
  Tensor<S> total;                       // fine + sum_l lambda_l * coarse_l
  std::vector<double> lambdas;
};

// Composite objective over batched logits. coarse_logits / coarse_targets /
// lambdas are parallel per-prompting-block lists.
template <class S>
LossBreakdown<S> total_loss(const Tensor<S>& fine_logits,
                            const std::vector<Tensor<S>>& coarse_logits,
                            const std::vector<int>& fine_targets,
                            const std::vector<std::vector<int>>& coarse_targets,
                            const std::vector<double>& lambdas) {
  if (coarse_logits.size() != coarse_targets.size() || coarse_logits.size() != lambdas.size())
    throw ContractError("total_loss: " + std::to_string(coarse_logits.size()) +
                        " coarse logit blocks, " + std::to_string(coarse_targets.size()) +
                        " coarse target lists, " + std::to_string(lambdas.size()) + " lambdas");
  LossBreakdown<S> out;
  out.lambdas = lambdas;
  out.fine_loss = cross_entropy_rows(fine_logits, fine_targets);
  out.total = out.fine_loss;
  for (size_t l = 0; l < coarse_logits.size(); ++l) {
    out.coarse_losses.push_back(cross_entropy_rows(coarse_logits[l], coarse_targets[l]));
    out.total = add(out.total, scale(out.coarse_losses[l], static_cast<S>(lambdas[l])));
  }
  return out;
}

// Single-sample convenience: rank-1 logits, one label per block.
template <class S>
LossBreakdown<S> total_loss_single(const Tensor<S>& fine_logits,
                                   const std::vector<Tensor<S>>& coarse_logits, int fine_target,
                                   const std::vector<int>& coarse_targets,
                                   const std::vector<double>& lambdas) {
  if (coarse_logits.size() != coarse_targets.size() || coarse_logits.size() != lambdas.size())
    throw ContractError("total_loss: mismatched per-block list lengths");
  LossBreakdown<S> out;
  out.lambdas = lambdas;
  out.fine_loss = cross_entropy(fine_logits, fine_target);
  out.total = out.fine_loss;
  for (size_t l = 0; l < coarse_logits.size(); ++l) {
    out.coarse_losses.push_back(cross_entropy(coarse_logits[l], coarse_targets[l]));
    out.total = add(out.total, scale(out.coarse_losses[l], static_cast<S>(lambdas[l])));
  }
  return out;
}

}  // namespace transhp::objective
