#pragma once

#include <random>
#include <vector>

#include "memvit/analysis/cost_model.hpp"
#include "memvit/model/model.hpp"

namespace memvit {

struct RfTrace {
  std::vector<Index> traced;    // per layer
  std::vector<Index> analytic;  // per layer
  Index traced_output = 0;      // logits
  Index analytic_output = 0;
  Index probe_clips = 0;
  bool saturated = false;  // still changing at the last probe clip

  bool matches() const { return !saturated && traced == analytic && traced_output == analytic_output; }
};

/// Empirical temporal reach: streams `probe_clips` random clips twice, the
/// second time with clip 0 replaced, and reports for every layer 1 + the last
/// clip whose output moved by more than `threshold`.
template <typename Scalar>
RfTrace trace_receptive_field(Model<Scalar>& model, Index probe_clips, std::uint64_t seed = 0,
                              double threshold = 0.0) {
  if (probe_clips < 1) throw ConfigError("probe clip count must be positive");
  const ModelSpec& s = model.spec();
  const Triple e{s.frames, s.height, s.width};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto random_pixels = [&] {
    Matrix<Scalar> m(e.volume(), ModelSpec::kInputChannels);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(u(rng));
    return m;
  };
  std::vector<Matrix<Scalar>> clips;
  for (Index c = 0; c < probe_clips; ++c) clips.push_back(random_pixels());
  const Matrix<Scalar> replacement = random_pixels();

  ForwardOptions fo;
  fo.keep_layer_outputs = true;
  auto run = [&](bool perturb) {
    std::vector<StreamOutput<Scalar>> outs;
    auto banks = model.make_banks();
    for (Index c = 0; c < probe_clips; ++c) {
      const Matrix<Scalar>& px = perturb && c == 0 ? replacement : clips[static_cast<std::size_t>(c)];
      outs.push_back(model.forward_clip(TokenTensor<Scalar>(Tensor<Scalar>(px), e, c, 0), banks, fo));
    }
    return outs;
  };
  const auto base = run(false);
  const auto moved = run(true);

  RfTrace r;
  r.probe_clips = probe_clips;
  const std::size_t layers = model.geometry().size();
  r.traced.assign(layers, 0);
  for (Index c = 0; c < probe_clips; ++c) {
    const auto& a = base[static_cast<std::size_t>(c)];
    const auto& b = moved[static_cast<std::size_t>(c)];
    for (std::size_t l = 0; l < layers; ++l) {
      const double diff = static_cast<double>((a.layer_outputs[l] - b.layer_outputs[l]).cwiseAbs().maxCoeff());
      if (diff > threshold) r.traced[l] = c + 1;
    }
    if (static_cast<double>((a.logits.value() - b.logits.value()).cwiseAbs().maxCoeff()) > threshold) {
      r.traced_output = c + 1;
    }
  }
  r.analytic = receptive_field_by_layer(s);
  r.analytic_output = r.analytic.back();
  r.saturated = r.traced_output >= probe_clips;
  for (Index t : r.traced) r.saturated = r.saturated || t >= probe_clips;
  return r;
}

}  // namespace memvit
