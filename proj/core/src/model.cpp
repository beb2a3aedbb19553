#include "fvlab/model.hpp"

#include <algorithm>

#include "fvlab/detail/model_impl.hpp"

namespace fvlab {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_head < 1) {
    throw DomainError("ModelConfig: all counts must be >= 1");
  }
  if (max_seq < 2) throw DomainError("ModelConfig: max_seq must be >= 2");
  if (d_model != n_heads * d_head) {
    throw DomainError("ModelConfig: d_model " + std::to_string(d_model) +
                      " != n_heads*d_head " + std::to_string(n_heads * d_head));
  }
  if (!(layernorm_epsilon > 0.0f)) {
    throw DomainError("ModelConfig: layernorm_epsilon must be > 0");
  }
}

template <class T>
size_t WeightsT<T>::param_count() const {
  size_t n = tok_emb.size() + pos_emb.size() + lnf_gain.size() + lnf_bias.size() +
             unembed.size();
  for (const auto& l : layers) {
    for (const auto& m : l.wq) n += m.size();
    for (const auto& m : l.wk) n += m.size();
    for (const auto& m : l.wv) n += m.size();
    for (const auto& m : l.wo) n += m.size();
    n += l.ln1_gain.size() + l.ln1_bias.size() + l.ln2_gain.size() + l.ln2_bias.size();
    n += l.fc_w.size() + l.fc_b.size() + l.proj_w.size() + l.proj_b.size();
  }
  return n;
}

template <class T>
T TapeT<T>::residual_defect() const {
  const int L = hidden.rows;
  const int d = hidden.cols;
  T worst = T(0);
  for (int l = 0; l < L; ++l) {
    const T* prev = (l == 0) ? embed.data() : hidden.row(l - 1);
    for (int i = 0; i < d; ++i) {
      T head_sum = T(0);
      for (int j = 0; j < head_out[l].rows; ++j) head_sum += head_out[l].at(j, i);
      const T defect =
          hidden.at(l, i) - prev[i] - mlp.at(l, i) - head_sum - injected.at(l, i);
      worst = std::max(worst, std::abs(defect));
    }
  }
  return worst;
}

int argmax_lowest(const std::vector<float>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

ForwardOutput forward(const ModelWeights& w, const ModelConfig& cfg,
                      const std::vector<int>& tokens, const InterventionPlan* plan) {
  const int last = static_cast<int>(tokens.size()) - 1;
  detail::PositionedPlan<float> pp;
  if (plan) pp = detail::PositionedPlan<float>::at_last(*plan, last);
  auto st = detail::forward_states(w, cfg, tokens, {last}, plan ? &pp : nullptr);
  std::vector<float> dist(st.logits.data);
  softmax_inplace(dist.data(), static_cast<int>(dist.size()));
  ForwardOutput out;
  out.tape = detail::make_tape(w, cfg, st, dist);
  out.dist = std::move(dist);
  return out;
}

std::vector<float> decode_vector(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<float>& v) {
  return detail::decode_vector_impl(w, cfg, v);
}

std::vector<int> greedy_generate(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<int>& tokens, int n_new,
                                 const InterventionPlan* plan) {
  if (n_new < 0) throw DomainError("greedy_generate: n_new < 0");
  if (tokens.size() + static_cast<size_t>(n_new) > cfg.max_seq) {
    throw CapacityError("greedy_generate: " + std::to_string(tokens.size()) + "+" +
                        std::to_string(n_new) + " tokens exceed max_seq " +
                        std::to_string(cfg.max_seq));
  }
  std::vector<int> seq = tokens;
  std::vector<int> out;
  const int pinned = static_cast<int>(tokens.size()) - 1;
  for (int step = 0; step < n_new; ++step) {
    detail::PositionedPlan<float> pp;
    if (plan) {
      // head patches and layer additions replay at the original last token;
      // with apply_during_generation the additions also land on every
      // generated position, matching what a cached decoder would have done.
      for (const auto& [head, vec] : plan->head_patches) {
        pp.patches.emplace_back(head, pinned, vec);
      }
      for (const auto& [layer, vec] : plan->layer_additions) {
        pp.additions.emplace_back(layer, pinned, vec);
        if (plan->apply_during_generation) {
          for (int pos = pinned + 1; pos < static_cast<int>(seq.size()); ++pos) {
            pp.additions.emplace_back(layer, pos, vec);
          }
        }
      }
    }
    const int last = static_cast<int>(seq.size()) - 1;
    auto st = detail::forward_states(w, cfg, seq, {last}, plan ? &pp : nullptr);
    std::vector<float> dist(st.logits.data);
    const int next = argmax_lowest(dist);
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

ModelWeights random_weights(const ModelConfig& cfg, uint64_t seed, float init_std) {
  cfg.validate();
  Rng rng(seed);
  const int d = static_cast<int>(cfg.d_model);
  const int J = static_cast<int>(cfg.n_heads);
  const int dh = static_cast<int>(cfg.d_head);
  const float resid_std =
      init_std / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));

  auto gauss_fill = [&rng](Matrix& m, float std_dev) {
    for (auto& x : m.data) x = static_cast<float>(rng.gaussian(0.0, std_dev));
  };

  ModelWeights w;
  w.tok_emb = Matrix(cfg.vocab_size, d);
  gauss_fill(w.tok_emb, init_std);
  w.pos_emb = Matrix(cfg.max_seq, d);
  gauss_fill(w.pos_emb, init_std);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.wq.assign(J, Matrix(d, dh));
    l.wk.assign(J, Matrix(d, dh));
    l.wv.assign(J, Matrix(d, dh));
    l.wo.assign(J, Matrix(dh, d));
    for (int j = 0; j < J; ++j) {
      gauss_fill(l.wq[j], init_std);
      gauss_fill(l.wk[j], init_std);
      gauss_fill(l.wv[j], init_std);
      gauss_fill(l.wo[j], resid_std);
    }
    l.ln1_gain.assign(d, 1.0f);
    l.ln1_bias.assign(d, 0.0f);
    l.ln2_gain.assign(d, 1.0f);
    l.ln2_bias.assign(d, 0.0f);
    l.fc_w = Matrix(d, 4 * d);
    gauss_fill(l.fc_w, init_std);
    l.fc_b.assign(4 * d, 0.0f);
    l.proj_w = Matrix(4 * d, d);
    gauss_fill(l.proj_w, resid_std);
    l.proj_b.assign(d, 0.0f);
  }
  w.lnf_gain.assign(d, 1.0f);
  w.lnf_bias.assign(d, 0.0f);
  w.unembed = Matrix(d, cfg.vocab_size);
  gauss_fill(w.unembed, init_std);
  return w;
}

template struct WeightsT<float>;
template struct WeightsT<double>;
template struct TapeT<float>;
template struct TapeT<double>;

}  // namespace fvlab

namespace fvlab::detail {
template ForwardStatesT<float> forward_states<float>(const WeightsT<float>&,
                                                     const ModelConfig&,
                                                     const std::vector<int>&,
                                                     const std::vector<int>&,
                                                     const PositionedPlan<float>*);
template ForwardStatesT<double> forward_states<double>(const WeightsT<double>&,
                                                       const ModelConfig&,
                                                       const std::vector<int>&,
                                                       const std::vector<int>&,
                                                       const PositionedPlan<double>*);
template std::vector<float> decode_vector_impl<float>(const WeightsT<float>&,
                                                      const ModelConfig&,
                                                      const std::vector<float>&);
template std::vector<double> decode_vector_impl<double>(const WeightsT<double>&,
                                                        const ModelConfig&,
                                                        const std::vector<double>&);
}  // namespace fvlab::detail
