// Binary artifact container. Little-endian throughout.
//
// Model checkpoint:
//   magic "FVLB" | u32 version=1 | ModelConfig fields as u32 in declaration
//   order (vocab_size, d_model, n_layers, n_heads, d_head, max_seq,
//   layernorm_epsilon as its IEEE-754 bit pattern) | weight matrices as
//   row-major f32 | u32 CRC32 of every byte after the magic.
//
// Weight order: tok_emb, pos_emb, then per layer (wq[j]..., wk[j]...,
// wv[j]..., wo[j]..., fc_w, fc_b, proj_w, proj_b, ln1_gain, ln1_bias,
// ln2_gain, ln2_bias), then lnf_gain, lnf_bias, unembed.
//
// Mean-activation and function-vector artifacts reuse the container with a
// u32 kind tag (2 = means, 3 = fv) directly after the version.

#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"

namespace fvlab {

struct FormatError : std::runtime_error {
  FormatError(const std::string& what, size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  size_t byte_offset;
};

uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0);

void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg,
                     const std::string& path);
std::pair<ModelWeights, ModelConfig> load_checkpoint(const std::string& path);

void save_means(const MeanActivations& m, const std::string& path);
MeanActivations load_means(const std::string& path);

void save_fv(const FunctionVector& fv, const std::string& path);
FunctionVector load_fv(const std::string& path);

}  // namespace fvlab
