// Templated forward pass. Instantiated for float (production) and double
// (finite-difference oracle path in tests).

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "fvlab/model.hpp"

namespace fvlab::detail {

// Interventions keyed by explicit token position. greedy_generate replays
// last-token interventions at pinned positions through this form.
template <class T>
struct PositionedPlan {
  // (layer, head, position) -> replacement a_lj
  std::vector<std::tuple<HeadId, int, std::vector<T>>> patches;
  // (layer, position) -> vector added to h_l
  std::vector<std::tuple<int, int, std::vector<T>>> additions;

  static PositionedPlan at_last(const PlanT<T>& plan, int last_pos) {
    PositionedPlan p;
    for (const auto& [head, vec] : plan.head_patches) {
      p.patches.emplace_back(head, last_pos, vec);
    }
    for (const auto& [layer, vec] : plan.layer_additions) {
      p.additions.emplace_back(layer, last_pos, vec);
    }
    return p;
  }
};

template <class T>
void validate_plan(const PositionedPlan<T>& plan, const ModelConfig& cfg, int seq_len) {
  const int L = static_cast<int>(cfg.n_layers);
  const int d = static_cast<int>(cfg.d_model);
  for (const auto& [head, pos, vec] : plan.patches) {
    if (head.layer < 0 || head.layer >= L || head.head < 0 ||
        head.head >= static_cast<int>(cfg.n_heads)) {
      throw DomainError("intervention head (" + std::to_string(head.layer) + "," +
                        std::to_string(head.head) + ") out of bounds");
    }
    if (static_cast<int>(vec.size()) != d) {
      throw ShapeError("head patch length " + std::to_string(vec.size()) +
                       " != d_model " + std::to_string(d));
    }
    if (pos < 0 || pos >= seq_len) throw DomainError("patch position out of range");
  }
  for (const auto& [layer, pos, vec] : plan.additions) {
    if (layer < 0 || layer >= L) {
      throw DomainError("intervention layer " + std::to_string(layer) + " out of bounds");
    }
    if (static_cast<int>(vec.size()) != d) {
      throw ShapeError("layer addition length " + std::to_string(vec.size()) +
                       " != d_model " + std::to_string(d));
    }
    if (pos < 0 || pos >= seq_len) throw DomainError("addition position out of range");
  }
}

// Resize without preserving contents; callers overwrite every element.
template <class T>
void reshape(Mat<T>& m, int rows, int cols) {
  m.rows = rows;
  m.cols = cols;
  m.data.resize(static_cast<size_t>(rows) * cols);
}

// gemm into a reshaped destination
template <class T>
void matmul_into(Mat<T>& out, const Mat<T>& a, const Mat<T>& b) {
  reshape(out, a.rows, b.cols);
  gemm(a.data.data(), b.data.data(), out.data.data(), a.rows, a.cols, b.cols, false);
}

// Everything the backward pass (and the tape) needs from one forward run.
// Reusable: buffers are reshaped in place, so a caller that runs many
// prompts through one instance pays for allocation only on growth.
template <class T>
struct ForwardStatesT {
  int seq_len = 0;
  std::vector<Mat<T>> xs;          // L+1 entries; xs[0] = embeddings, xs[l+1] = h_l rows
  std::vector<Mat<T>> n1;          // per layer: T x d, LN1 output
  std::vector<std::vector<Mat<T>>> q, k, v;   // [layer][head]: T x d_head
  std::vector<std::vector<Mat<T>>> p;         // [layer][head]: T x T attention probs
  std::vector<std::vector<Mat<T>>> h;         // [layer][head]: T x d_head, attn-weighted V
  std::vector<Mat<T>> head_proj_last;         // per layer: J x d, a_lj at last token
  std::vector<Mat<T>> x_mid;       // per layer: T x d, after attention add
  std::vector<Mat<T>> n2;          // per layer: T x d, LN2 output
  std::vector<Mat<T>> fc;          // per layer: T x 4d, pre-GELU
  std::vector<Mat<T>> act;         // per layer: T x 4d, post-GELU
  std::vector<Mat<T>> mlp;         // per layer: T x d, m_l rows
  Mat<T> injected_last;            // L x d, additions applied at last position
  Mat<T> lnf_rows;                 // R x d, final layernorm at loss rows
  std::vector<int> loss_rows;
  Mat<T> logits;                   // R x vocab, one row per loss row

  Mat<T> scratch_s;                // attention scores, reused per head
  Mat<T> scratch_kt;
  Mat<T> scratch_aj;
  Mat<T> scratch_attn_sum;
};

template <class T>
void forward_states_into(const WeightsT<T>& w, const ModelConfig& cfg,
                         const std::vector<int>& tokens,
                         const std::vector<int>& loss_rows,
                         const PositionedPlan<T>* plan, ForwardStatesT<T>& st) {
  cfg.validate();
  const int seq = static_cast<int>(tokens.size());
  const int d = static_cast<int>(cfg.d_model);
  const int L = static_cast<int>(cfg.n_layers);
  const int J = static_cast<int>(cfg.n_heads);
  const int dh = static_cast<int>(cfg.d_head);
  const int vocab = static_cast<int>(cfg.vocab_size);
  const T eps = static_cast<T>(cfg.layernorm_epsilon);

  if (seq < 1) throw CapacityError("forward: empty token sequence");
  if (seq > static_cast<int>(cfg.max_seq)) {
    throw CapacityError("forward: sequence length " + std::to_string(seq) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || t >= vocab) {
      throw DomainError("forward: token id " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  if (plan) validate_plan(*plan, cfg, seq);

  st.seq_len = seq;
  st.loss_rows = loss_rows;
  st.xs.resize(L + 1);
  st.n1.resize(L);
  st.q.resize(L);
  st.k.resize(L);
  st.v.resize(L);
  st.p.resize(L);
  st.h.resize(L);
  st.head_proj_last.resize(L);
  st.x_mid.resize(L);
  st.n2.resize(L);
  st.fc.resize(L);
  st.act.resize(L);
  st.mlp.resize(L);
  reshape(st.injected_last, L, d);
  st.injected_last.fill(T(0));

  const int last = seq - 1;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T>& x0 = st.xs[0];
  reshape(x0, seq, d);
  for (int t = 0; t < seq; ++t) {
    const T* te = w.tok_emb.row(tokens[t]);
    const T* pe = w.pos_emb.row(t);
    T* xr = x0.row(t);
    for (int i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
  }

  for (int l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    const Mat<T>& x = st.xs[l];

    Mat<T>& n1 = st.n1[l];
    reshape(n1, seq, d);
    for (int t = 0; t < seq; ++t) {
      layernorm_into(x.row(t), lw.ln1_gain.data(), lw.ln1_bias.data(), d, eps, n1.row(t));
    }

    Mat<T>& attn_sum = st.scratch_attn_sum;
    reshape(attn_sum, seq, d);
    attn_sum.fill(T(0));
    st.q[l].resize(J);
    st.k[l].resize(J);
    st.v[l].resize(J);
    st.p[l].resize(J);
    st.h[l].resize(J);
    reshape(st.head_proj_last[l], J, d);
    for (int j = 0; j < J; ++j) {
      matmul_into(st.q[l][j], n1, lw.wq[j]);
      matmul_into(st.k[l][j], n1, lw.wk[j]);
      matmul_into(st.v[l][j], n1, lw.wv[j]);

      Mat<T>& kt = st.scratch_kt;
      reshape(kt, dh, seq);
      for (int t = 0; t < seq; ++t) {
        for (int c = 0; c < dh; ++c) kt.at(c, t) = st.k[l][j].at(t, c);
      }
      Mat<T>& s = st.scratch_s;
      matmul_into(s, st.q[l][j], kt);
      // causal softmax row by row; positions after the query get probability 0
      Mat<T>& p = st.p[l][j];
      reshape(p, seq, seq);
      for (int i = 0; i < seq; ++i) {
        T* srow = s.row(i);
        T* prow = p.row(i);
        for (int c = 0; c <= i; ++c) prow[c] = srow[c] * scale;
        softmax_inplace(prow, i + 1);
        for (int c = i + 1; c < seq; ++c) prow[c] = T(0);
      }
      matmul_into(st.h[l][j], p, st.v[l][j]);

      Mat<T>& a_j = st.scratch_aj;
      matmul_into(a_j, st.h[l][j], lw.wo[j]);
      if (plan) {
        for (const auto& [head, pos, vec] : plan->patches) {
          if (head.layer == l && head.head == j) {
            std::copy(vec.begin(), vec.end(), a_j.row(pos));
          }
        }
      }
      std::copy(a_j.row(last), a_j.row(last) + d, st.head_proj_last[l].row(j));
      for (size_t i = 0; i < attn_sum.data.size(); ++i) attn_sum.data[i] += a_j.data[i];
    }

    Mat<T>& x_mid = st.x_mid[l];
    reshape(x_mid, seq, d);
    for (size_t i = 0; i < x_mid.data.size(); ++i) {
      x_mid.data[i] = x.data[i] + attn_sum.data[i];
    }

    Mat<T>& n2 = st.n2[l];
    reshape(n2, seq, d);
    for (int t = 0; t < seq; ++t) {
      layernorm_into(x_mid.row(t), lw.ln2_gain.data(), lw.ln2_bias.data(), d, eps,
                     n2.row(t));
    }

    const int hid = 4 * d;
    Mat<T>& fc = st.fc[l];
    matmul_into(fc, n2, lw.fc_w);
    for (int t = 0; t < seq; ++t) {
      T* r = fc.row(t);
      for (int i = 0; i < hid; ++i) r[i] += lw.fc_b[i];
    }
    Mat<T>& act = st.act[l];
    reshape(act, seq, hid);
    for (size_t i = 0; i < fc.data.size(); ++i) act.data[i] = gelu(fc.data[i]);
    Mat<T>& mlp = st.mlp[l];
    matmul_into(mlp, act, lw.proj_w);
    for (int t = 0; t < seq; ++t) {
      T* r = mlp.row(t);
      for (int i = 0; i < d; ++i) r[i] += lw.proj_b[i];
    }

    Mat<T>& x_out = st.xs[l + 1];
    reshape(x_out, seq, d);
    for (size_t i = 0; i < x_out.data.size(); ++i) {
      x_out.data[i] = x_mid.data[i] + mlp.data[i];
    }

    if (plan) {
      // additions for one (layer, position) are summed first and applied
      // once, so listing v then w is bit-identical to listing v+w
      std::map<int, std::vector<T>> summed;
      for (const auto& [layer, pos, vec] : plan->additions) {
        if (layer != l) continue;
        auto& acc = summed[pos];
        if (acc.empty()) acc.assign(d, T(0));
        for (int i = 0; i < d; ++i) acc[i] += vec[i];
      }
      for (const auto& [pos, vec] : summed) {
        T* r = x_out.row(pos);
        for (int i = 0; i < d; ++i) r[i] += vec[i];
        if (pos == last) {
          T* inj = st.injected_last.row(l);
          for (int i = 0; i < d; ++i) inj[i] += vec[i];
        }
      }
    }
  }

  const int nrows = static_cast<int>(loss_rows.size());
  reshape(st.lnf_rows, nrows, d);
  for (int r = 0; r < nrows; ++r) {
    layernorm_into(st.xs[L].row(loss_rows[r]), w.lnf_gain.data(), w.lnf_bias.data(), d,
                   eps, st.lnf_rows.row(r));
  }
  matmul_into(st.logits, st.lnf_rows, w.unembed);
}

template <class T>
ForwardStatesT<T> forward_states(const WeightsT<T>& w, const ModelConfig& cfg,
                                 const std::vector<int>& tokens,
                                 const std::vector<int>& loss_rows,
                                 const PositionedPlan<T>* plan) {
  ForwardStatesT<T> st;
  forward_states_into(w, cfg, tokens, loss_rows, plan, st);
  return st;
}

template <class T>
TapeT<T> make_tape(const WeightsT<T>& w, const ModelConfig& cfg,
                   const ForwardStatesT<T>& st, std::vector<T> dist) {
  (void)w;
  const int d = static_cast<int>(cfg.d_model);
  const int L = static_cast<int>(cfg.n_layers);
  const int J = static_cast<int>(cfg.n_heads);
  const int last = st.seq_len - 1;

  TapeT<T> tape;
  tape.embed.assign(st.xs[0].row(last), st.xs[0].row(last) + d);
  tape.hidden = Mat<T>(L, d);
  tape.mlp = Mat<T>(L, d);
  tape.head_out = st.head_proj_last;
  tape.attn.assign(L, Mat<T>(J, st.seq_len));
  tape.injected = st.injected_last;
  for (int l = 0; l < L; ++l) {
    std::copy(st.xs[l + 1].row(last), st.xs[l + 1].row(last) + d, tape.hidden.row(l));
    std::copy(st.mlp[l].row(last), st.mlp[l].row(last) + d, tape.mlp.row(l));
    for (int j = 0; j < J; ++j) {
      std::copy(st.p[l][j].row(last), st.p[l][j].row(last) + st.seq_len,
                tape.attn[l].row(j));
    }
  }
  tape.dist = std::move(dist);
  return tape;
}

template <class T>
std::vector<T> decode_vector_impl(const WeightsT<T>& w, const ModelConfig& cfg,
                                  const std::vector<T>& v) {
  const int d = static_cast<int>(cfg.d_model);
  if (static_cast<int>(v.size()) != d) {
    throw ShapeError("decode_vector: length " + std::to_string(v.size()) +
                     " != d_model " + std::to_string(d));
  }
  std::vector<T> z(d);
  layernorm_into(v.data(), w.lnf_gain.data(), w.lnf_bias.data(), d,
                 static_cast<T>(cfg.layernorm_epsilon), z.data());
  std::vector<T> logits(cfg.vocab_size, T(0));
  gemm(z.data(), w.unembed.data.data(), logits.data(), 1, d,
       static_cast<int>(cfg.vocab_size), false);
  softmax_inplace(logits.data(), static_cast<int>(logits.size()));
  return logits;
}

}  // namespace fvlab::detail
