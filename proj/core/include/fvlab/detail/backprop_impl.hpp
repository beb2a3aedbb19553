// Hand-derived backward pass through the whole model. Gradients accumulate
// into a WeightsT-shaped container; every += runs in a fixed order so a
// batch reduced prompt-by-prompt is bit-identical at any thread count.

#pragma once

#include <cmath>

#include "fvlab/detail/model_impl.hpp"

namespace fvlab::detail {

template <class T>
LayerWeightsT<T> zero_layer_like(const LayerWeightsT<T>& l) {
  LayerWeightsT<T> z;
  auto zm = [](const Mat<T>& m) { return Mat<T>(m.rows, m.cols); };
  for (const auto& m : l.wq) z.wq.push_back(zm(m));
  for (const auto& m : l.wk) z.wk.push_back(zm(m));
  for (const auto& m : l.wv) z.wv.push_back(zm(m));
  for (const auto& m : l.wo) z.wo.push_back(zm(m));
  z.ln1_gain.assign(l.ln1_gain.size(), T(0));
  z.ln1_bias.assign(l.ln1_bias.size(), T(0));
  z.ln2_gain.assign(l.ln2_gain.size(), T(0));
  z.ln2_bias.assign(l.ln2_bias.size(), T(0));
  z.fc_w = zm(l.fc_w);
  z.fc_b.assign(l.fc_b.size(), T(0));
  z.proj_w = zm(l.proj_w);
  z.proj_b.assign(l.proj_b.size(), T(0));
  return z;
}

template <class T>
WeightsT<T> zero_like(const WeightsT<T>& w) {
  WeightsT<T> z;
  z.tok_emb = Mat<T>(w.tok_emb.rows, w.tok_emb.cols);
  z.pos_emb = Mat<T>(w.pos_emb.rows, w.pos_emb.cols);
  for (const auto& l : w.layers) z.layers.push_back(zero_layer_like(l));
  z.lnf_gain.assign(w.lnf_gain.size(), T(0));
  z.lnf_bias.assign(w.lnf_bias.size(), T(0));
  z.unembed = Mat<T>(w.unembed.rows, w.unembed.cols);
  return z;
}

// Visits every parameter array in the checkpoint serialization order.
template <class W, class F>
void visit_params(W& w, F&& f) {
  f(w.tok_emb.data);
  f(w.pos_emb.data);
  for (auto& l : w.layers) {
    for (auto& m : l.wq) f(m.data);
    for (auto& m : l.wk) f(m.data);
    for (auto& m : l.wv) f(m.data);
    for (auto& m : l.wo) f(m.data);
    f(l.fc_w.data);
    f(l.fc_b);
    f(l.proj_w.data);
    f(l.proj_b);
    f(l.ln1_gain);
    f(l.ln1_bias);
    f(l.ln2_gain);
    f(l.ln2_bias);
  }
  f(w.lnf_gain);
  f(w.lnf_bias);
  f(w.unembed.data);
}

template <class T>
void zero_weights(WeightsT<T>& w) {
  visit_params(w, [](std::vector<T>& v) { std::fill(v.begin(), v.end(), T(0)); });
}

// dst += src, arrays visited in canonical order
template <class T>
void axpy_weights(WeightsT<T>& dst, const WeightsT<T>& src) {
  std::vector<std::vector<T>*> d;
  visit_params(dst, [&](std::vector<T>& v) { d.push_back(&v); });
  size_t i = 0;
  visit_params(const_cast<WeightsT<T>&>(src), [&](std::vector<T>& v) {
    std::vector<T>& out = *d[i++];
    for (size_t k = 0; k < v.size(); ++k) out[k] += v[k];
  });
}

// Transposes reused by every prompt of a batch (weights are fixed within a
// step). Rebuilt after each optimizer update.
template <class T>
struct TransposeCache {
  Mat<T> unembed_t;
  std::vector<std::vector<Mat<T>>> wq_t, wk_t, wv_t, wo_t;  // [layer][head]
  std::vector<Mat<T>> fc_w_t, proj_w_t;                     // [layer]

  explicit TransposeCache(const WeightsT<T>& w) { rebuild(w); }

  void rebuild(const WeightsT<T>& w) {
    unembed_t = transpose(w.unembed);
    const size_t L = w.layers.size();
    wq_t.assign(L, {});
    wk_t.assign(L, {});
    wv_t.assign(L, {});
    wo_t.assign(L, {});
    fc_w_t.assign(L, {});
    proj_w_t.assign(L, {});
    for (size_t l = 0; l < L; ++l) {
      const auto& lw = w.layers[l];
      for (const auto& m : lw.wq) wq_t[l].push_back(transpose(m));
      for (const auto& m : lw.wk) wk_t[l].push_back(transpose(m));
      for (const auto& m : lw.wv) wv_t[l].push_back(transpose(m));
      for (const auto& m : lw.wo) wo_t[l].push_back(transpose(m));
      fc_w_t[l] = transpose(lw.fc_w);
      proj_w_t[l] = transpose(lw.proj_w);
    }
  }
};

template <class T>
void layernorm_backward_row(const T* x, const T* gain, int n, T eps, const T* dz,
                            T* dx_accum, T* dgain_accum, T* dbias_accum) {
  T mean = T(0);
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= T(n);
  T var = T(0);
  for (int i = 0; i < n; ++i) {
    const T d = x[i] - mean;
    var += d * d;
  }
  var /= T(n);
  const T inv = T(1) / std::sqrt(var + eps);

  T m1 = T(0);  // mean of dxhat
  T m2 = T(0);  // mean of dxhat * xhat
  for (int i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * inv;
    const T dxhat = dz[i] * gain[i];
    dgain_accum[i] += dz[i] * xhat;
    dbias_accum[i] += dz[i];
    m1 += dxhat;
    m2 += dxhat * xhat;
  }
  m1 /= T(n);
  m2 /= T(n);
  for (int i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * inv;
    const T dxhat = dz[i] * gain[i];
    dx_accum[i] += (dxhat - m1 - xhat * m2) * inv;
  }
}

// Mean masked cross entropy over positions with targets[i] >= 0.
template <class T>
T example_loss_impl(const WeightsT<T>& w, const ModelConfig& cfg,
                    const std::vector<int>& tokens, const std::vector<int>& targets) {
  std::vector<int> rows;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= 0) rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw DomainError("example has no target positions");
  auto st = forward_states<T>(w, cfg, tokens, rows, nullptr);
  const int vocab = static_cast<int>(cfg.vocab_size);
  T loss = T(0);
  for (size_t r = 0; r < rows.size(); ++r) {
    const T* lg = st.logits.row(static_cast<int>(r));
    T mx = lg[0];
    for (int i = 1; i < vocab; ++i) {
      if (lg[i] > mx) mx = lg[i];
    }
    T sum = T(0);
    for (int i = 0; i < vocab; ++i) sum += std::exp(lg[i] - mx);
    loss -= lg[targets[rows[r]]] - (std::log(sum) + mx);
  }
  return loss / T(rows.size());
}

// Reusable temporaries for one backward pass.
template <class T>
struct BackwardScratch {
  ForwardStatesT<T> st;
  Mat<T> dlogits, dlnf, dx, dxmid, dn1, dn2, dact;
  Mat<T> lnf_t, act_t, n2_t, n1_t, h_t, v_t, p_t, ds_t;
  Mat<T> dhh, dp, dv, ds, dq, dk;
};

template <class T>
void transpose_into(Mat<T>& out, const Mat<T>& a) {
  reshape(out, a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  }
}

// Accumulates d(scale * sum-of-CE-at-targets)/dw into grads; returns the
// unscaled CE sum.
template <class T>
T backward_example(const WeightsT<T>& w, const TransposeCache<T>& wt,
                   const ModelConfig& cfg, const std::vector<int>& tokens,
                   const std::vector<int>& targets, WeightsT<T>& grads, T scale,
                   BackwardScratch<T>& ws) {
  std::vector<int> rows;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= 0) rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw DomainError("example has no target positions");

  forward_states_into<T>(w, cfg, tokens, rows, nullptr, ws.st);
  ForwardStatesT<T>& st = ws.st;
  const int seq = st.seq_len;
  const int d = static_cast<int>(cfg.d_model);
  const int hid = 4 * d;
  const int J = static_cast<int>(cfg.n_heads);
  const int dh = static_cast<int>(cfg.d_head);
  const int L = static_cast<int>(cfg.n_layers);
  const int vocab = static_cast<int>(cfg.vocab_size);
  const int nrows = static_cast<int>(rows.size());
  const T eps = static_cast<T>(cfg.layernorm_epsilon);
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));

  // CE at the loss rows
  T loss = T(0);
  reshape(ws.dlogits, nrows, vocab);
  for (int r = 0; r < nrows; ++r) {
    const T* lg = st.logits.row(r);
    T* dl = ws.dlogits.row(r);
    T mx = lg[0];
    for (int i = 1; i < vocab; ++i) {
      if (lg[i] > mx) mx = lg[i];
    }
    T sum = T(0);
    for (int i = 0; i < vocab; ++i) sum += std::exp(lg[i] - mx);
    const T logz = std::log(sum) + mx;
    const int y = targets[rows[r]];
    loss -= lg[y] - logz;
    for (int i = 0; i < vocab; ++i) dl[i] = std::exp(lg[i] - logz) * scale;
    dl[y] -= scale;
  }

  // unembedding and final layernorm
  transpose_into(ws.lnf_t, st.lnf_rows);
  gemm(ws.lnf_t.data.data(), ws.dlogits.data.data(), grads.unembed.data.data(), d,
       nrows, vocab, true);
  matmul_into(ws.dlnf, ws.dlogits, wt.unembed_t);  // nrows x d
  reshape(ws.dx, seq, d);
  ws.dx.fill(T(0));
  for (int r = 0; r < nrows; ++r) {
    layernorm_backward_row(st.xs[L].row(rows[r]), w.lnf_gain.data(), d, eps,
                           ws.dlnf.row(r), ws.dx.row(rows[r]), grads.lnf_gain.data(),
                           grads.lnf_bias.data());
  }

  for (int l = L - 1; l >= 0; --l) {
    const auto& lw = w.layers[l];
    auto& gl = grads.layers[l];

    // MLP branch: x_out = x_mid + proj(gelu(fc(n2)))
    const Mat<T>& dm = ws.dx;
    for (int t = 0; t < seq; ++t) {
      const T* r = dm.row(t);
      for (int i = 0; i < d; ++i) gl.proj_b[i] += r[i];
    }
    matmul_into(ws.dact, dm, wt.proj_w_t[l]);  // seq x hid
    transpose_into(ws.act_t, st.act[l]);
    gemm(ws.act_t.data.data(), dm.data.data(), gl.proj_w.data.data(), hid, seq, d,
         true);
    Mat<T>& dfc = ws.dact;  // gelu backward in place
    for (size_t i = 0; i < dfc.data.size(); ++i) {
      dfc.data[i] = dfc.data[i] * gelu_grad(st.fc[l].data[i]);
    }
    for (int t = 0; t < seq; ++t) {
      const T* r = dfc.row(t);
      for (int i = 0; i < hid; ++i) gl.fc_b[i] += r[i];
    }
    transpose_into(ws.n2_t, st.n2[l]);
    gemm(ws.n2_t.data.data(), dfc.data.data(), gl.fc_w.data.data(), d, seq, hid, true);
    matmul_into(ws.dn2, dfc, wt.fc_w_t[l]);  // seq x d

    Mat<T>& dxmid = ws.dxmid;  // residual path
    reshape(dxmid, seq, d);
    std::copy(ws.dx.data.begin(), ws.dx.data.end(), dxmid.data.begin());
    for (int t = 0; t < seq; ++t) {
      layernorm_backward_row(st.x_mid[l].row(t), lw.ln2_gain.data(), d, eps,
                             ws.dn2.row(t), dxmid.row(t), gl.ln2_gain.data(),
                             gl.ln2_bias.data());
    }

    // attention branch: every head sees the same upstream gradient
    Mat<T>& dn1 = ws.dn1;
    reshape(dn1, seq, d);
    dn1.fill(T(0));
    transpose_into(ws.n1_t, st.n1[l]);
    for (int j = 0; j < J; ++j) {
      transpose_into(ws.h_t, st.h[l][j]);
      gemm(ws.h_t.data.data(), dxmid.data.data(), gl.wo[j].data.data(), dh, seq, d,
           true);
      matmul_into(ws.dhh, dxmid, wt.wo_t[l][j]);  // seq x dh
      transpose_into(ws.v_t, st.v[l][j]);
      matmul_into(ws.dp, ws.dhh, ws.v_t);         // seq x seq
      transpose_into(ws.p_t, st.p[l][j]);
      matmul_into(ws.dv, ws.p_t, ws.dhh);         // seq x dh

      Mat<T>& ds = ws.ds;
      reshape(ds, seq, seq);
      for (int i = 0; i < seq; ++i) {
        const T* prow = st.p[l][j].row(i);
        const T* dprow = ws.dp.row(i);
        T dot = T(0);
        for (int c = 0; c < seq; ++c) dot += dprow[c] * prow[c];
        T* dsrow = ds.row(i);
        for (int c = 0; c < seq; ++c) dsrow[c] = prow[c] * (dprow[c] - dot);
      }
      matmul_into(ws.dq, ds, st.k[l][j]);
      transpose_into(ws.ds_t, ds);
      matmul_into(ws.dk, ws.ds_t, st.q[l][j]);
      for (auto& x : ws.dq.data) x *= attn_scale;
      for (auto& x : ws.dk.data) x *= attn_scale;

      gemm(ws.dq.data.data(), wt.wq_t[l][j].data.data(), dn1.data.data(), seq, dh, d,
           true);
      gemm(ws.dk.data.data(), wt.wk_t[l][j].data.data(), dn1.data.data(), seq, dh, d,
           true);
      gemm(ws.dv.data.data(), wt.wv_t[l][j].data.data(), dn1.data.data(), seq, dh, d,
           true);

      gemm(ws.n1_t.data.data(), ws.dq.data.data(), gl.wq[j].data.data(), d, seq, dh,
           true);
      gemm(ws.n1_t.data.data(), ws.dk.data.data(), gl.wk[j].data.data(), d, seq, dh,
           true);
      gemm(ws.n1_t.data.data(), ws.dv.data.data(), gl.wv[j].data.data(), d, seq, dh,
           true);
    }

    std::swap(ws.dx, ws.dxmid);  // residual path into x_in
    for (int t = 0; t < seq; ++t) {
      layernorm_backward_row(st.xs[l].row(t), lw.ln1_gain.data(), d, eps, dn1.row(t),
                             ws.dx.row(t), gl.ln1_gain.data(), gl.ln1_bias.data());
    }
  }

  for (int t = 0; t < seq; ++t) {
    const T* r = ws.dx.row(t);
    T* te = grads.tok_emb.row(tokens[t]);
    T* pe = grads.pos_emb.row(t);
    for (int i = 0; i < d; ++i) {
      te[i] += r[i];
      pe[i] += r[i];
    }
  }
  return loss;
}

// Convenience overload with owned scratch.
template <class T>
T backward_example(const WeightsT<T>& w, const TransposeCache<T>& wt,
                   const ModelConfig& cfg, const std::vector<int>& tokens,
                   const std::vector<int>& targets, WeightsT<T>& grads, T scale) {
  BackwardScratch<T> ws;
  return backward_example(w, wt, cfg, tokens, targets, grads, scale, ws);
}

}  // namespace fvlab::detail
