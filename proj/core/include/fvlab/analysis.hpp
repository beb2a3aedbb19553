// Post-hoc analyses of function vectors: logit-lens decoding, reconstruction
// from the decoded distribution by gradient descent, vector composition,
// log-probability deltas under injection, and prefix-matching scores.

#pragma once

#include <string>
#include <vector>

#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"

namespace fvlab {

struct DecodedDistribution {
  std::string task;
  std::vector<float> full;      // Q_t, sums to 1
  std::vector<float> topk;      // restricted to top k and renormalized
  std::vector<int> topk_ids;    // probability descending, ties by token id
  int k = 0;
};

DecodedDistribution decode_fv(const ModelWeights& w, const ModelConfig& cfg,
                              const FunctionVector& fv, int k);

// Keep the k most probable entries (ties broken by index) and renormalize.
std::vector<float> topk_restrict(const std::vector<float>& dist, int k,
                                 std::vector<int>* ids = nullptr);

class OptimizationError : public std::runtime_error {
 public:
  OptimizationError(const std::string& what, std::vector<float> history)
      : std::runtime_error(what), loss_history(std::move(history)) {}
  std::vector<float> loss_history;
};

struct ReconstructionResult {
  FunctionVector v_hat;            // source = Reconstructed
  float final_ce = 0.0f;           // CE of the best iterate
  double kl = 0.0;                 // KL(target || D(v_hat)), 0*log0 = 0
  int iterations = 0;
  std::vector<float> ce_history;   // CE per accepted logging point
};

// Minimizes CE(target, D(v)) with Adam (step_size is the learning rate);
// the best iterate by CE is kept. Deterministic given the init.
ReconstructionResult reconstruct_fv(const ModelWeights& w, const ModelConfig& cfg,
                                    const std::vector<float>& target,
                                    const std::vector<float>& init, int steps,
                                    float step_size, const std::string& task = "");

// Warm start: least-squares fit of the centered log-target through the
// unembedding (ridge-regularized normal equations). Zero init strands the
// descent on flat basins for some targets; this lands near the answer.
std::vector<float> reconstruction_init(const ModelWeights& w, const ModelConfig& cfg,
                                       const std::vector<float>& target);

// CE(target, D(v)) and its analytic gradient w.r.t. v; templated so tests
// can run the finite-difference oracle in double.
template <class T>
std::pair<T, std::vector<T>> reconstruction_loss_grad(const WeightsT<T>& w,
                                                      const ModelConfig& cfg,
                                                      const std::vector<T>& v,
                                                      const std::vector<T>& target);

// KL(p || q) over the full support with 0*log0 = 0.
double kl_divergence(const std::vector<float>& p, const std::vector<float>& q);

// v_ad + v_bc - v_ac, evaluated left to right.
FunctionVector compose_fv(const FunctionVector& v_ad, const FunctionVector& v_bc,
                          const FunctionVector& v_ac, const std::string& task = "");

struct DeltaLogprob {
  int token = -1;
  double delta = 0.0;
  bool clamped = false;  // baseline probability hit the 1e-12 floor
};

// log f(p | h_l += v)[w] - log f(p)[w] per token, sorted descending.
std::vector<DeltaLogprob> delta_logprob(const ModelWeights& w, const ModelConfig& cfg,
                                        const std::vector<int>& tokens,
                                        const FunctionVector& fv, int layer,
                                        const std::vector<int>& token_set);

// Mean attention weight from a repeated token's second occurrence back to
// the token that followed its first occurrence, over random sequences
// [A, B, ..., A] with the second A at the last position.
double prefix_matching_score(const ModelWeights& w, const ModelConfig& cfg, HeadId head,
                             int n_sequences, int seq_len, Rng& rng,
                             const std::vector<int>& token_pool);

}  // namespace fvlab
