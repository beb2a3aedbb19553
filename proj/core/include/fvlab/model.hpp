// GPT-style decoder-only transformer with per-head output decomposition.
//
// Block order is pre-layernorm: LN -> attention -> add, LN -> MLP -> add.
// Each head's output is projected into the residual stream on its own
// (a_lj = head_lj * Wo_lj), so the layer update is
//   h_l = h_{l-1} + m_l + sum_j a_lj
// and the tape records every term of that sum at the last token position.
// The decoder D is fixed as softmax(unembed * final_layernorm(h)).
//
// Interventions: head patches replace a_lj at the last token before the
// layer sum; layer additions are applied to h_l at the last token after the
// layer's attention and MLP sums. The tape records post-intervention values
// plus the injected vectors, so residual bookkeeping stays checkable on
// intervened passes.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fvlab/numerics.hpp"

namespace fvlab {

struct ModelConfig {
  uint32_t vocab_size = 0;
  uint32_t d_model = 0;
  uint32_t n_layers = 0;
  uint32_t n_heads = 0;
  uint32_t d_head = 0;
  uint32_t max_seq = 0;
  float layernorm_epsilon = 1e-5f;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

template <class T>
struct LayerWeightsT {
  std::vector<Mat<T>> wq, wk, wv;  // per head, d_model x d_head; no QKV biases
  std::vector<Mat<T>> wo;          // per head, d_head x d_model
  std::vector<T> ln1_gain, ln1_bias;
  std::vector<T> ln2_gain, ln2_bias;
  Mat<T> fc_w;             // d_model x 4*d_model
  std::vector<T> fc_b;
  Mat<T> proj_w;           // 4*d_model x d_model
  std::vector<T> proj_b;
};

template <class T>
struct WeightsT {
  Mat<T> tok_emb;  // vocab x d_model
  Mat<T> pos_emb;  // max_seq x d_model (learned absolute positions)
  std::vector<LayerWeightsT<T>> layers;
  std::vector<T> lnf_gain, lnf_bias;
  Mat<T> unembed;  // d_model x vocab

  size_t param_count() const;
};

using ModelWeights = WeightsT<float>;

template <class T>
struct PlanT {
  std::map<HeadId, std::vector<T>> head_patches;    // replacement a_lj, length d
  std::map<int, std::vector<T>> layer_additions;    // added to h_l, length d
  bool apply_during_generation = false;

  bool empty() const { return head_patches.empty() && layer_additions.empty(); }
};

using InterventionPlan = PlanT<float>;

template <class T>
struct TapeT {
  // all records taken at the last token position
  std::vector<T> embed;            // h before layer 0 (token + position embedding)
  Mat<T> hidden;                   // L x d, h_l
  Mat<T> mlp;                      // L x d, m_l
  std::vector<Mat<T>> head_out;    // per layer: J x d, a_lj after any patch
  std::vector<Mat<T>> attn;        // per layer: J x T attention rows, sum to 1
  Mat<T> injected;                 // L x d, layer additions applied at last token
  std::vector<T> dist;             // output distribution f(p)

  // max over layers of max-abs(h_l - h_{l-1} - m_l - sum_j a_lj - injected_l)
  T residual_defect() const;
};

using ActivationTape = TapeT<float>;

struct ForwardOutput {
  std::vector<float> dist;
  ActivationTape tape;
};

// Full forward pass over a token sequence; distribution is for the next
// token after the last position.
ForwardOutput forward(const ModelWeights& w, const ModelConfig& cfg,
                      const std::vector<int>& tokens,
                      const InterventionPlan* plan = nullptr);

// D(v): decode any residual-stream vector to a token distribution.
std::vector<float> decode_vector(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<float>& v);

// Argmax decoding; ties break toward the lowest token id. Layer additions
// follow plan.apply_during_generation (see intervene.hpp for semantics).
std::vector<int> greedy_generate(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<int>& tokens, int n_new,
                                 const InterventionPlan* plan = nullptr);

// Gaussian init (std 0.02), zero biases, unit layernorm gains; residual
// projections (per-head wo, MLP proj) scaled by 1/sqrt(2L).
ModelWeights random_weights(const ModelConfig& cfg, uint64_t seed,
                            float init_std = 0.02f);

int argmax_lowest(const std::vector<float>& v);

}  // namespace fvlab
