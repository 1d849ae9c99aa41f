#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "memvit/attention/memvit_attention.hpp"
#include "memvit/memory/memory_bank.hpp"
#include "memvit/model/spec.hpp"

namespace memvit {

struct LayerDiagnostics {
  int layer = 0;
  Index attended_keys = 0;
  Index memory_keys = 0;
  Index compressions = 0;
  Index bank_size = 0;  // after the update
};

template <typename Scalar>
struct StreamOutput {
  Tensor<Scalar> logits;  // [1, num_classes]
  std::vector<LayerDiagnostics> layers;
  TokenTensor<Scalar> final_tokens;              // last block output, before the head norm
  std::vector<Matrix<Scalar>> layer_outputs;     // per block, when requested
  Index dropped_oldest = 0;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* drop_rng = nullptr;  // memory-drop augmentation when training
  bool keep_layer_outputs = false;
};

template <typename Scalar>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    geometry_ = layer_geometry(spec_);
    aug_ = spec_.memory_len > 0 ? spec_.aug_layers() : std::vector<int>{};
    Initializer init(seed);
    const Index d0 = spec_.stages.front().channels;
    const Index patch = spec_.cube_kernel.volume() * ModelSpec::kInputChannels;
    embed_w_ = add_param("embed.w", init.truncated_normal<Scalar>(patch, d0));
    embed_b_ = add_param("embed.b", Matrix<Scalar>::Zero(1, d0));
    int per_stage = 0;
    for (const auto& g : geometry_) {
      per_stage = (g.index == 0 || geometry_[static_cast<std::size_t>(g.index - 1)].stage != g.stage) ? 0 : per_stage + 1;
      const std::string prefix = "stage" + std::to_string(g.stage + 1) + ".layer" + std::to_string(per_stage);
      blocks_.push_back(std::make_unique<Block>(g, prefix, init, *this));
    }
    const Index d = spec_.stages.back().channels;
    norm_g_ = add_param("head.norm.gamma", Matrix<Scalar>::Ones(1, d));
    norm_b_ = add_param("head.norm.beta", Matrix<Scalar>::Zero(1, d));
    head_w_ = add_param("head.w", init.truncated_normal<Scalar>(d, spec_.num_classes));
    head_b_ = add_param("head.b", Matrix<Scalar>::Zero(1, spec_.num_classes));
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  const std::vector<LayerGeometry>& geometry() const { return geometry_; }
  const std::vector<int>& aug_layers() const { return aug_; }

  /// All parameters in construction order.
  const std::vector<Parameter<Scalar>*>& parameters() const { return params_; }
  Index parameter_count() const {
    Index n = 0;
    for (const auto* p : params_) n += p->tensor.size();
    return n;
  }
  Parameter<Scalar>* find(const std::string& name) const {
    for (auto* p : params_) {
      if (p->name == name) return p;
    }
    return nullptr;
  }
  /// f_K / f_V of every memory layer.
  std::vector<Parameter<Scalar>*> compression_parameters() const {
    std::vector<Parameter<Scalar>*> out;
    for (const auto& b : blocks_) {
      for (auto* p : b->attn.compression_parameters()) out.push_back(p);
    }
    return out;
  }
  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

  /// Fresh, empty banks for the memory layers, in layer order.
  std::vector<MemoryBank<Scalar>> make_banks() const {
    std::vector<MemoryBank<Scalar>> banks;
    for (int l : aug_) banks.emplace_back(l, spec_.memory_len);
    return banks;
  }

  /// Pixels [T*H*W, 3] with extents (T, H, W) -> embedded tokens.
  TokenTensor<Scalar> embed(const TokenTensor<Scalar>& clip) const {
    const Triple in{spec_.frames, spec_.height, spec_.width};
    if (clip.extents != in || clip.channels() != ModelSpec::kInputChannels) {
      throw DimensionError("clip " + to_string(clip.extents) + "x" + std::to_string(clip.channels()) +
                           " does not match spec input " + to_string(in) + "x3");
    }
    PoolSpec cube;
    cube.kernel = spec_.cube_kernel;
    cube.stride = spec_.cube_stride;
    cube.padding = spec_.cube_padding;
    cube.causal = spec_.causal;
    const ConvPlan plan = cube.plan(in);
    const Index kvol = plan.kernel_volume();
    const Index c = ModelSpec::kInputChannels;
    Matrix<Scalar> cols = Matrix<Scalar>::Zero(plan.out.volume(), kvol * c);
    const auto& px = clip.data.value();
    for (Index o = 0; o < plan.out.volume(); ++o) {
      for (Index k = 0; k < kvol; ++k) {
        const Index src = plan.taps[static_cast<std::size_t>(o * kvol + k)];
        if (src >= 0) cols.row(o).segment(k * c, c) = px.row(src);
      }
    }
    Tensor<Scalar> x = linear(Tensor<Scalar>(std::move(cols)), embed_w_->tensor, embed_b_->tensor);
    return clip.with_data(x, plan.out);
  }

  StreamOutput<Scalar> forward_clip(const TokenTensor<Scalar>& clip, std::vector<MemoryBank<Scalar>>& banks,
                                    const ForwardOptions& opt = {}) {
    if (banks.size() != aug_.size()) {
      throw ContractError("model has " + std::to_string(aug_.size()) + " memory layers, got " +
                          std::to_string(banks.size()) + " banks");
    }
    for (auto& b : banks) boundary_reset(b, clip.video_id);
    StreamOutput<Scalar> out;
    AttentionContext<Scalar> ctx;
    if (opt.training && opt.drop_rng != nullptr && !banks.empty()) {
      ctx.dropped_oldest = memory_drop_augment(banks.front(), *opt.drop_rng, true).dropped_oldest;
    }
    out.dropped_oldest = ctx.dropped_oldest;

    TokenTensor<Scalar> x = embed(clip);
    std::size_t bank_at = 0;
    for (auto& block : blocks_) {
      MemoryBank<Scalar>* bank = nullptr;
      if (block->geo.attn.uses_memory()) bank = &banks[bank_at++];
      LayerDiagnostics diag;
      x = block->forward(x, bank, ctx, diag);
      if (bank != nullptr) diag.bank_size = bank->size();
      out.layers.push_back(diag);
      if (opt.keep_layer_outputs) out.layer_outputs.push_back(x.data.value());
    }
    out.final_tokens = x;
    Tensor<Scalar> h = layer_norm(x.data, norm_g_->tensor, norm_b_->tensor);
    out.logits = linear(mean_rows(h), head_w_->tensor, head_b_->tensor);
    return out;
  }

 private:
  struct Block {
    LayerGeometry geo;
    Parameter<Scalar>* ln1_g;
    Parameter<Scalar>* ln1_b;
    MemoryAttention<Scalar> attn;
    Parameter<Scalar>* skip_w = nullptr;
    Parameter<Scalar>* skip_b = nullptr;
    Parameter<Scalar>* ln2_g;
    Parameter<Scalar>* ln2_b;
    Parameter<Scalar>* fc1_w;
    Parameter<Scalar>* fc1_b;
    Parameter<Scalar>* fc2_w;
    Parameter<Scalar>* fc2_b;

    Block(const LayerGeometry& g, const std::string& prefix, Initializer& init, Model& m)
        : geo(g),
          ln1_g(m.add_param(prefix + ".norm1.gamma", Matrix<Scalar>::Ones(1, g.attn.d_in))),
          ln1_b(m.add_param(prefix + ".norm1.beta", Matrix<Scalar>::Zero(1, g.attn.d_in))),
          attn(g.attn, g.index, prefix + ".attn", init) {
      std::vector<Parameter<Scalar>*> ap;
      attn.collect_parameters(ap);
      for (auto* p : ap) m.params_.push_back(p);
      const Index din = g.attn.d_in;
      const Index dout = g.attn.d_out;
      if (g.skip_proj) {
        skip_w = m.add_param(prefix + ".skip.w", init.truncated_normal<Scalar>(din, dout));
        skip_b = m.add_param(prefix + ".skip.b", Matrix<Scalar>::Zero(1, dout));
      }
      ln2_g = m.add_param(prefix + ".norm2.gamma", Matrix<Scalar>::Ones(1, dout));
      ln2_b = m.add_param(prefix + ".norm2.beta", Matrix<Scalar>::Zero(1, dout));
      fc1_w = m.add_param(prefix + ".mlp.fc1.w", init.truncated_normal<Scalar>(dout, g.mlp_hidden));
      fc1_b = m.add_param(prefix + ".mlp.fc1.b", Matrix<Scalar>::Zero(1, g.mlp_hidden));
      fc2_w = m.add_param(prefix + ".mlp.fc2.w", init.truncated_normal<Scalar>(g.mlp_hidden, dout));
      fc2_b = m.add_param(prefix + ".mlp.fc2.b", Matrix<Scalar>::Zero(1, dout));
    }

    TokenTensor<Scalar> forward(const TokenTensor<Scalar>& x, MemoryBank<Scalar>* bank,
                                const AttentionContext<Scalar>& ctx, LayerDiagnostics& diag) {
      const TokenTensor<Scalar> xn = x.with_data(layer_norm(x.data, ln1_g->tensor, ln1_b->tensor), x.extents);
      AttentionOutput<Scalar> a = attn.forward(xn, bank, ctx);
      diag.layer = geo.index;
      diag.attended_keys = a.attended_keys;
      diag.memory_keys = a.memory_keys;
      diag.compressions = a.compressions;

      TokenTensor<Scalar> skip = geo.skip_proj ? xn : x;
      if (!geo.skip_pool.is_identity()) skip = pool(skip, geo.skip_pool);
      Tensor<Scalar> res = skip.data;
      if (geo.skip_proj) res = linear(res, skip_w->tensor, skip_b->tensor);
      Tensor<Scalar> x1 = add(res, a.tokens.data);
      Tensor<Scalar> h = layer_norm(x1, ln2_g->tensor, ln2_b->tensor);
      h = linear(gelu(linear(h, fc1_w->tensor, fc1_b->tensor)), fc2_w->tensor, fc2_b->tensor);
      return a.tokens.with_data(add(x1, h), a.tokens.extents);
    }
  };

  Parameter<Scalar>* add_param(const std::string& name, Matrix<Scalar> init) {
    owned_.push_back(std::make_unique<Parameter<Scalar>>(name, std::move(init)));
    params_.push_back(owned_.back().get());
    return params_.back();
  }

  ModelSpec spec_;
  std::vector<LayerGeometry> geometry_;
  std::vector<int> aug_;
  std::vector<std::unique_ptr<Parameter<Scalar>>> owned_;
  std::vector<Parameter<Scalar>*> params_;
  Parameter<Scalar>* embed_w_ = nullptr;
  Parameter<Scalar>* embed_b_ = nullptr;
  std::vector<std::unique_ptr<Block>> blocks_;
  Parameter<Scalar>* norm_g_ = nullptr;
  Parameter<Scalar>* norm_b_ = nullptr;
  Parameter<Scalar>* head_w_ = nullptr;
  Parameter<Scalar>* head_b_ = nullptr;
};

}  // namespace memvit
