#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "memvit/model/model.hpp"

namespace memvit {

/// Adam with decoupled weight decay. Decay is applied to matrices only;
/// biases, norm affines and [1,d] vectors are left alone.
template <typename Scalar>
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW(std::vector<Parameter<Scalar>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.push_back(Matrix<Scalar>::Zero(p->tensor.rows(), p->tensor.cols()));
      v_.push_back(Matrix<Scalar>::Zero(p->tensor.rows(), p->tensor.cols()));
    }
  }

  const Options& options() const { return opt_; }
  long steps() const { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i]->tensor.mutable_value();
      const Matrix<Scalar> g = params_[i]->tensor.grad();
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
      if (w.rows() > 1 && opt_.weight_decay > 0) w *= static_cast<Scalar>(1.0 - lr * opt_.weight_decay);
      const Matrix<Scalar> mhat = m_[i] / static_cast<Scalar>(bc1);
      const Matrix<Scalar> vhat = v_[i] / static_cast<Scalar>(bc2);
      w.array() -= static_cast<Scalar>(lr) * mhat.array() / (vhat.array().sqrt() + static_cast<Scalar>(opt_.eps));
    }
  }

 private:
  std::vector<Parameter<Scalar>*> params_;
  Options opt_;
  std::vector<Matrix<Scalar>> m_, v_;
  long t_ = 0;
};

/// Half-cosine decay from `base` to 0 over `total` steps.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * p));
}

inline constexpr Index kBlankLabel = -1;

template <typename Scalar>
struct LabeledClip {
  TokenTensor<Scalar> clip;
  Index label = kBlankLabel;  // blank clips add no loss
};

struct TrainStepResult {
  double loss = 0.0;       // mean over labelled clips
  Index labelled = 0;
  Index correct = 0;
};

/// Runs the first `curriculum_len` clips of every sequence through fresh
/// banks, averages cross-entropy over labelled clips and applies one update.
template <typename Scalar>
TrainStepResult train_step(Model<Scalar>& model, const std::vector<std::vector<LabeledClip<Scalar>>>& batch,
                           AdamW<Scalar>& opt, Index curriculum_len, double lr, std::mt19937_64* drop_rng = nullptr) {
  if (curriculum_len < 1) throw ConfigError("curriculum length must be at least one clip");
  TrainStepResult r;
  std::vector<Tensor<Scalar>> losses;
  ForwardOptions fo;
  fo.training = true;
  fo.drop_rng = drop_rng;
  for (const auto& seq : batch) {
    auto banks = model.make_banks();
    const Index n = std::min<Index>(curriculum_len, static_cast<Index>(seq.size()));
    for (Index i = 0; i < n; ++i) {
      const auto& lc = seq[static_cast<std::size_t>(i)];
      auto out = model.forward_clip(lc.clip, banks, fo);
      if (lc.label == kBlankLabel) continue;
      losses.push_back(cross_entropy(out.logits, lc.label));
      Index argmax = 0;
      out.logits.value().row(0).maxCoeff(&argmax);
      r.correct += argmax == lc.label ? 1 : 0;
    }
  }
  r.labelled = static_cast<Index>(losses.size());
  model.zero_grad();
  if (losses.empty()) return r;
  Tensor<Scalar> total = scale(sum(concat_rows(losses)), Scalar(1) / static_cast<Scalar>(losses.size()));
  r.loss = static_cast<double>(total.item());
  total.backward();
  opt.step(lr);
  return r;
}

}  // namespace memvit
