#pragma once

#include <vector>

#include "memvit/model/model.hpp"
#include "memvit/numerics/grad_check.hpp"

namespace memvit {

template <typename Scalar>
struct ClipSequence {
  std::vector<TokenTensor<Scalar>> clips;
  std::vector<Index> labels;  // one per clip
};

/// Summed cross-entropy of a stream run. When `snapshots` is given it
/// receives the bank state seen by each clip.
template <typename Scalar>
Tensor<Scalar> sequence_loss(Model<Scalar>& model, const ClipSequence<Scalar>& seq,
                             std::vector<std::vector<MemoryBank<Scalar>>>* snapshots = nullptr) {
  auto banks = model.make_banks();
  std::vector<Tensor<Scalar>> losses;
  for (std::size_t c = 0; c < seq.clips.size(); ++c) {
    if (snapshots) snapshots->push_back(banks);
    auto out = model.forward_clip(seq.clips[c], banks);
    losses.push_back(cross_entropy(out.logits, seq.labels[c]));
  }
  return sum(concat_rows(losses));
}

/// Same loss with every clip reading a fixed bank state instead of the one
/// produced by earlier clips. Cached slots are constants here, which is
/// exactly the function the stop-gradient stream differentiates.
template <typename Scalar>
Tensor<Scalar> frozen_bank_loss(Model<Scalar>& model, const ClipSequence<Scalar>& seq,
                                const std::vector<std::vector<MemoryBank<Scalar>>>& snapshots) {
  std::vector<Tensor<Scalar>> losses;
  for (std::size_t c = 0; c < seq.clips.size(); ++c) {
    auto banks = snapshots[c];
    auto out = model.forward_clip(seq.clips[c], banks);
    losses.push_back(cross_entropy(out.logits, seq.labels[c]));
  }
  return sum(concat_rows(losses));
}

/// End-to-end check of a streamed sequence: analytic gradients of the live
/// stream against central differences of the frozen-bank loss.
template <typename Scalar>
GradCheckResult stream_grad_check(Model<Scalar>& model, const ClipSequence<Scalar>& seq, Scalar eps,
                                  std::vector<Parameter<Scalar>*> params = {}) {
  if (params.empty()) params = model.parameters();
  std::vector<std::vector<MemoryBank<Scalar>>> snapshots;
  sequence_loss(model, seq, &snapshots);
  bool live = true;
  std::function<Tensor<Scalar>()> f = [&] {
    if (live) {
      live = false;
      return sequence_loss(model, seq);
    }
    return frozen_bank_loss(model, seq, snapshots);
  };
  return grad_check<Scalar>(f, params, eps);
}

}  // namespace memvit
