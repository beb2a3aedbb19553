#include "fvlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fvlab/detail/backprop_impl.hpp"
#include "fvlab/parallel.hpp"

namespace fvlab {

std::vector<float> topk_restrict(const std::vector<float>& dist, int k,
                                 std::vector<int>* ids) {
  const int n = static_cast<int>(dist.size());
  if (k < 1 || k > n) {
    throw DomainError("topk_restrict: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(n) + "]");
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist[a] != dist[b]) return dist[a] > dist[b];
    return a < b;
  });
  std::vector<float> out(n, 0.0f);
  float mass = 0.0f;
  for (int i = 0; i < k; ++i) mass += dist[order[i]];
  for (int i = 0; i < k; ++i) out[order[i]] = dist[order[i]] / mass;
  if (ids) ids->assign(order.begin(), order.begin() + k);
  return out;
}

DecodedDistribution decode_fv(const ModelWeights& w, const ModelConfig& cfg,
                              const FunctionVector& fv, int k) {
  DecodedDistribution d;
  d.task = fv.task;
  d.k = k;
  d.full = decode_vector(w, cfg, fv.vec);
  d.topk = topk_restrict(d.full, k, &d.topk_ids);
  return d;
}

template <class T>
std::pair<T, std::vector<T>> reconstruction_loss_grad(const WeightsT<T>& w,
                                                      const ModelConfig& cfg,
                                                      const std::vector<T>& v,
                                                      const std::vector<T>& target) {
  const int d = static_cast<int>(cfg.d_model);
  const int vocab = static_cast<int>(cfg.vocab_size);
  if (static_cast<int>(v.size()) != d) {
    throw ShapeError("reconstruction: v length " + std::to_string(v.size()));
  }
  if (static_cast<int>(target.size()) != vocab) {
    throw ShapeError("reconstruction: target length " + std::to_string(target.size()));
  }
  const T eps = static_cast<T>(cfg.layernorm_epsilon);

  std::vector<T> z(d);
  layernorm_into(v.data(), w.lnf_gain.data(), w.lnf_bias.data(), d, eps, z.data());
  std::vector<T> logits(vocab, T(0));
  gemm(z.data(), w.unembed.data.data(), logits.data(), 1, d, vocab, false);

  auto [loss, dlogits] = cross_entropy_grad(target, logits);

  std::vector<T> dz(d, T(0));
  gemm(w.unembed.data.data(), dlogits.data(), dz.data(), d, vocab, 1, false);

  std::vector<T> dv(d, T(0)), dgain_scratch(d, T(0)), dbias_scratch(d, T(0));
  detail::layernorm_backward_row(v.data(), w.lnf_gain.data(), d, eps, dz.data(),
                                 dv.data(), dgain_scratch.data(), dbias_scratch.data());
  return {loss, std::move(dv)};
}

template std::pair<float, std::vector<float>> reconstruction_loss_grad<float>(
    const WeightsT<float>&, const ModelConfig&, const std::vector<float>&,
    const std::vector<float>&);
template std::pair<double, std::vector<double>> reconstruction_loss_grad<double>(
    const WeightsT<double>&, const ModelConfig&, const std::vector<double>&,
    const std::vector<double>&);

double kl_divergence(const std::vector<float>& p, const std::vector<float>& q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0f) continue;  // 0*log0 = 0
    if (q[i] <= 0.0f) return std::numeric_limits<double>::infinity();
    kl += double(p[i]) * (std::log(double(p[i])) - std::log(double(q[i])));
  }
  return std::max(0.0, kl);
}

ReconstructionResult reconstruct_fv(const ModelWeights& w, const ModelConfig& cfg,
                                    const std::vector<float>& target,
                                    const std::vector<float>& init, int steps,
                                    float step_size, const std::string& task) {
  if (steps < 0) throw DomainError("reconstruct_fv: negative step count");
  std::vector<float> v = init;
  std::vector<float> best_v = v;
  std::vector<float> m(v.size(), 0.0f), s(v.size(), 0.0f);
  float best_ce = std::numeric_limits<float>::infinity();
  ReconstructionResult res;
  res.ce_history.reserve(steps + 1);

  // Adam on v; vanilla descent stalls on the ill-conditioned surface near
  // the optimum. The best iterate by CE is what gets returned.
  constexpr float kBeta1 = 0.9f, kBeta2 = 0.999f, kEps = 1e-8f;
  for (int it = 0; it <= steps; ++it) {
    auto [ce, grad] = reconstruction_loss_grad(w, cfg, v, target);
    if (!std::isfinite(ce)) {
      throw OptimizationError("reconstruction loss not finite at iteration " +
                                  std::to_string(it),
                              res.ce_history);
    }
    res.ce_history.push_back(ce);
    if (ce < best_ce) {
      best_ce = ce;
      best_v = v;
    }
    if (it == steps) break;
    const float b1 = 1.0f - std::pow(kBeta1, float(it + 1));
    const float b2 = 1.0f - std::pow(kBeta2, float(it + 1));
    for (size_t i = 0; i < v.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0f - kBeta1) * grad[i];
      s[i] = kBeta2 * s[i] + (1.0f - kBeta2) * grad[i] * grad[i];
      v[i] -= step_size * (m[i] / b1) / (std::sqrt(s[i] / b2) + kEps);
    }
  }

  res.v_hat.task = task;
  res.v_hat.source = FunctionVector::Source::Reconstructed;
  res.v_hat.vec = std::move(best_v);
  res.final_ce = best_ce;
  res.iterations = static_cast<int>(res.ce_history.size()) - 1;
  res.kl = kl_divergence(target, decode_vector(w, cfg, res.v_hat.vec));
  return res;
}

std::vector<float> reconstruction_init(const ModelWeights& w, const ModelConfig& cfg,
                                       const std::vector<float>& target) {
  const int d = static_cast<int>(cfg.d_model);
  const int vocab = static_cast<int>(cfg.vocab_size);
  if (static_cast<int>(target.size()) != vocab) {
    throw ShapeError("reconstruction_init: target length " +
                     std::to_string(target.size()));
  }
  // centered log-target
  std::vector<double> y(vocab);
  double mean = 0.0;
  for (int c = 0; c < vocab; ++c) {
    y[c] = std::log(std::max(double(target[c]), 1e-12));
    mean += y[c];
  }
  mean /= vocab;
  for (auto& v : y) v -= mean;

  // normal equations A v = b with A = U U^T + ridge, b = U y
  std::vector<double> a(size_t(d) * d, 0.0), b(d, 0.0);
  for (int i = 0; i < d; ++i) {
    const float* ui = w.unembed.row(i);
    for (int j = i; j < d; ++j) {
      const float* uj = w.unembed.row(j);
      double s = 0.0;
      for (int c = 0; c < vocab; ++c) s += double(ui[c]) * uj[c];
      a[size_t(i) * d + j] = s;
      a[size_t(j) * d + i] = s;
    }
    double s = 0.0;
    for (int c = 0; c < vocab; ++c) s += double(ui[c]) * y[c];
    b[i] = s;
  }
  double trace = 0.0;
  for (int i = 0; i < d; ++i) trace += a[size_t(i) * d + i];
  const double ridge = 1e-6 * trace / d + 1e-12;
  for (int i = 0; i < d; ++i) a[size_t(i) * d + i] += ridge;

  // Gaussian elimination with partial pivoting, fixed order
  for (int col = 0; col < d; ++col) {
    int pivot = col;
    for (int r = col + 1; r < d; ++r) {
      if (std::abs(a[size_t(r) * d + col]) > std::abs(a[size_t(pivot) * d + col])) {
        pivot = r;
      }
    }
    if (pivot != col) {
      for (int c = 0; c < d; ++c) std::swap(a[size_t(col) * d + c], a[size_t(pivot) * d + c]);
      std::swap(b[col], b[pivot]);
    }
    const double diag = a[size_t(col) * d + col];
    for (int r = col + 1; r < d; ++r) {
      const double f = a[size_t(r) * d + col] / diag;
      if (f == 0.0) continue;
      for (int c = col; c < d; ++c) a[size_t(r) * d + c] -= f * a[size_t(col) * d + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<float> v0(d);
  for (int r = d - 1; r >= 0; --r) {
    double s = b[r];
    for (int c = r + 1; c < d; ++c) s -= a[size_t(r) * d + c] * double(v0[c]);
    v0[r] = float(s / a[size_t(r) * d + r]);
  }
  return v0;
}

FunctionVector compose_fv(const FunctionVector& v_ad, const FunctionVector& v_bc,
                          const FunctionVector& v_ac, const std::string& task) {
  if (v_ad.vec.size() != v_bc.vec.size() || v_ad.vec.size() != v_ac.vec.size()) {
    throw ShapeError("compose_fv: dimension mismatch " +
                     std::to_string(v_ad.vec.size()) + "/" +
                     std::to_string(v_bc.vec.size()) + "/" +
                     std::to_string(v_ac.vec.size()));
  }
  FunctionVector out;
  out.task = task;
  out.source = FunctionVector::Source::Composed;
  out.parents = {v_ad.task, v_bc.task, v_ac.task};
  out.vec.resize(v_ad.vec.size());
  for (size_t i = 0; i < out.vec.size(); ++i) {
    out.vec[i] = (v_ad.vec[i] + v_bc.vec[i]) - v_ac.vec[i];  // fixed left-to-right
  }
  return out;
}

std::vector<DeltaLogprob> delta_logprob(const ModelWeights& w, const ModelConfig& cfg,
                                        const std::vector<int>& tokens,
                                        const FunctionVector& fv, int layer,
                                        const std::vector<int>& token_set) {
  if (token_set.empty()) throw DomainError("delta_logprob: empty token set");
  const auto base = forward(w, cfg, tokens);
  InterventionPlan plan;
  plan.layer_additions[layer] = fv.vec;
  const auto injected = forward(w, cfg, tokens, &plan);

  constexpr double kFloor = 1e-12;
  std::vector<DeltaLogprob> out;
  out.reserve(token_set.size());
  for (int tok : token_set) {
    if (tok < 0 || tok >= static_cast<int>(cfg.vocab_size)) {
      throw DomainError("delta_logprob: token " + std::to_string(tok) + " out of range");
    }
    DeltaLogprob e;
    e.token = tok;
    const double pb = double(base.dist[tok]);
    const double pi = double(injected.dist[tok]);
    e.clamped = pb < kFloor;
    e.delta = std::log(std::max(pi, kFloor)) - std::log(std::max(pb, kFloor));
    out.push_back(e);
  }
  std::sort(out.begin(), out.end(), [](const DeltaLogprob& a, const DeltaLogprob& b) {
    if (a.delta != b.delta) return a.delta > b.delta;
    return a.token < b.token;
  });
  return out;
}

double prefix_matching_score(const ModelWeights& w, const ModelConfig& cfg, HeadId head,
                             int n_sequences, int seq_len, Rng& rng,
                             const std::vector<int>& token_pool) {
  if (seq_len < 3) throw DomainError("prefix_matching_score: seq_len must be >= 3");
  if (n_sequences < 1) throw DomainError("prefix_matching_score: n_sequences < 1");
  if (token_pool.size() < 2) throw DomainError("prefix_matching_score: pool too small");
  if (head.layer < 0 || head.layer >= static_cast<int>(cfg.n_layers) || head.head < 0 ||
      head.head >= static_cast<int>(cfg.n_heads)) {
    throw DomainError("prefix_matching_score: head out of bounds");
  }

  // [A, B, random tokens without A, A]; the row at the trailing A is read off
  // the tape and position 1 holds B
  std::vector<std::vector<int>> seqs(n_sequences);
  for (int s = 0; s < n_sequences; ++s) {
    const int a = token_pool[rng.below(token_pool.size())];
    int b = a;
    while (b == a) b = token_pool[rng.below(token_pool.size())];
    std::vector<int> seq = {a, b};
    while (static_cast<int>(seq.size()) < seq_len - 1) {
      int t = a;
      while (t == a) t = token_pool[rng.below(token_pool.size())];
      seq.push_back(t);
    }
    seq.push_back(a);
    seqs[s] = std::move(seq);
  }

  std::vector<double> weight(n_sequences, 0.0);
  parallel_for(n_sequences, [&](int s) {
    const auto out = forward(w, cfg, seqs[s]);
    weight[s] = out.tape.attn[head.layer].at(head.head, 1);
  });
  double sum = 0.0;
  for (double x : weight) sum += x;
  return sum / double(n_sequences);
}

}  // namespace fvlab
