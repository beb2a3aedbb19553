#include "fvlab/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace fvlab {

uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed) {
  // IEEE 802.3, reflected, polynomial 0xEDB88320
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = ~seed;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return ~crc;
}

namespace {

constexpr char kMagic[4] = {'F', 'V', 'L', 'B'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kKindMeans = 2;
constexpr uint32_t kKindFv = 3;

// payload accumulated little-endian; CRC covers every byte after the magic
struct Writer {
  std::vector<uint8_t> payload;

  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) payload.push_back(uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void floats(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(p[i]);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    payload.insert(payload.end(), s.begin(), s.end());
  }
  void mat(const Matrix& m) { floats(m.data.data(), m.data.size()); }
  void vec(const std::vector<float>& v) { floats(v.data(), v.size()); }

  void commit(const std::string& path) {
    const uint32_t crc = crc32(payload.data(), payload.size());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing", 0);
    f.write(kMagic, 4);
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    char crc_bytes[4];
    for (int i = 0; i < 4; ++i) crc_bytes[i] = char(crc >> (8 * i));
    f.write(crc_bytes, 4);
    if (!f) throw FormatError("short write to '" + path + "'", payload.size());
  }
};

struct Reader {
  std::vector<uint8_t> bytes;
  size_t pos = 0;

  explicit Reader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'", 0);
    bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (bytes.size() < 12) throw FormatError("file truncated", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw FormatError("bad magic bytes", 0);
    }
    const size_t body = bytes.size() - 8;
    const uint32_t stored = read_u32_at(bytes.size() - 4);
    const uint32_t actual = crc32(bytes.data() + 4, body);
    if (stored != actual) throw FormatError("CRC32 mismatch", bytes.size() - 4);
    pos = 4;
  }

  uint32_t read_u32_at(size_t at) const {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[at + i]) << (8 * i);
    return v;
  }
  void need(size_t n) {
    if (pos + n > bytes.size() - 4) {
      throw FormatError("file truncated", pos);
    }
  }
  uint32_t u32() {
    need(4);
    const uint32_t v = read_u32_at(pos);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  void floats(float* out, size_t n) {
    need(4 * n);
    for (size_t i = 0; i < n; ++i) out[i] = f32();
  }
  Matrix mat(int rows, int cols) {
    Matrix m(rows, cols);
    floats(m.data.data(), m.data.size());
    return m;
  }
  std::vector<float> vec(size_t n) {
    std::vector<float> v(n);
    floats(v.data(), n);
    return v;
  }
  void expect_end() {
    if (pos != bytes.size() - 4) throw FormatError("trailing bytes", pos);
  }
};

void check_version(uint32_t v, size_t offset) {
  if (v != kVersion) {
    throw FormatError("unsupported version " + std::to_string(v), offset);
  }
}

}  // namespace

void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg,
                     const std::string& path) {
  cfg.validate();
  Writer out;
  out.u32(kVersion);
  out.u32(cfg.vocab_size);
  out.u32(cfg.d_model);
  out.u32(cfg.n_layers);
  out.u32(cfg.n_heads);
  out.u32(cfg.d_head);
  out.u32(cfg.max_seq);
  out.f32(cfg.layernorm_epsilon);
  out.mat(w.tok_emb);
  out.mat(w.pos_emb);
  for (const auto& l : w.layers) {
    for (const auto& m : l.wq) out.mat(m);
    for (const auto& m : l.wk) out.mat(m);
    for (const auto& m : l.wv) out.mat(m);
    for (const auto& m : l.wo) out.mat(m);
    out.mat(l.fc_w);
    out.vec(l.fc_b);
    out.mat(l.proj_w);
    out.vec(l.proj_b);
    out.vec(l.ln1_gain);
    out.vec(l.ln1_bias);
    out.vec(l.ln2_gain);
    out.vec(l.ln2_bias);
  }
  out.vec(w.lnf_gain);
  out.vec(w.lnf_bias);
  out.mat(w.unembed);
  out.commit(path);
}

std::pair<ModelWeights, ModelConfig> load_checkpoint(const std::string& path) {
  Reader in(path);
  check_version(in.u32(), 4);
  ModelConfig cfg;
  cfg.vocab_size = in.u32();
  cfg.d_model = in.u32();
  cfg.n_layers = in.u32();
  cfg.n_heads = in.u32();
  cfg.d_head = in.u32();
  cfg.max_seq = in.u32();
  cfg.layernorm_epsilon = in.f32();
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("invalid config: ") + e.what(), 8);
  }
  const int d = static_cast<int>(cfg.d_model);
  const int J = static_cast<int>(cfg.n_heads);
  const int dh = static_cast<int>(cfg.d_head);

  ModelWeights w;
  w.tok_emb = in.mat(cfg.vocab_size, d);
  w.pos_emb = in.mat(cfg.max_seq, d);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.wq.resize(J);
    l.wk.resize(J);
    l.wv.resize(J);
    l.wo.resize(J);
    for (int j = 0; j < J; ++j) l.wq[j] = in.mat(d, dh);
    for (int j = 0; j < J; ++j) l.wk[j] = in.mat(d, dh);
    for (int j = 0; j < J; ++j) l.wv[j] = in.mat(d, dh);
    for (int j = 0; j < J; ++j) l.wo[j] = in.mat(dh, d);
    l.fc_w = in.mat(d, 4 * d);
    l.fc_b = in.vec(4 * d);
    l.proj_w = in.mat(4 * d, d);
    l.proj_b = in.vec(d);
    l.ln1_gain = in.vec(d);
    l.ln1_bias = in.vec(d);
    l.ln2_gain = in.vec(d);
    l.ln2_bias = in.vec(d);
  }
  w.lnf_gain = in.vec(d);
  w.lnf_bias = in.vec(d);
  w.unembed = in.mat(d, cfg.vocab_size);
  in.expect_end();
  return {std::move(w), cfg};
}

void save_means(const MeanActivations& m, const std::string& path) {
  Writer out;
  out.u32(kVersion);
  out.u32(kKindMeans);
  out.str(m.task);
  const int L = static_cast<int>(m.head_mean.size());
  const int J = L > 0 ? m.head_mean[0].rows : 0;
  const int d = L > 0 ? m.head_mean[0].cols : 0;
  out.u32(L);
  out.u32(J);
  out.u32(d);
  out.u32(static_cast<uint32_t>(m.n_prompts));
  for (const auto& hm : m.head_mean) out.mat(hm);
  out.mat(m.hidden_mean);
  out.commit(path);
}

MeanActivations load_means(const std::string& path) {
  Reader in(path);
  check_version(in.u32(), 4);
  if (in.u32() != kKindMeans) throw FormatError("not a mean-activations artifact", 8);
  MeanActivations m;
  m.task = in.str();
  const int L = static_cast<int>(in.u32());
  const int J = static_cast<int>(in.u32());
  const int d = static_cast<int>(in.u32());
  m.n_prompts = static_cast<int>(in.u32());
  m.head_mean.reserve(L);
  for (int l = 0; l < L; ++l) m.head_mean.push_back(in.mat(J, d));
  m.hidden_mean = in.mat(L, d);
  in.expect_end();
  return m;
}

void save_fv(const FunctionVector& fv, const std::string& path) {
  Writer out;
  out.u32(kVersion);
  out.u32(kKindFv);
  out.str(fv.task);
  out.u32(static_cast<uint32_t>(fv.source));
  out.u32(static_cast<uint32_t>(fv.layer + 1));  // 0 = none
  out.u32(static_cast<uint32_t>(fv.vec.size()));
  out.vec(fv.vec);
  out.u32(static_cast<uint32_t>(fv.head_set.size()));
  for (const auto& h : fv.head_set) {
    out.u32(static_cast<uint32_t>(h.layer));
    out.u32(static_cast<uint32_t>(h.head));
  }
  out.u32(static_cast<uint32_t>(fv.parents.size()));
  for (const auto& p : fv.parents) out.str(p);
  out.commit(path);
}

FunctionVector load_fv(const std::string& path) {
  Reader in(path);
  check_version(in.u32(), 4);
  if (in.u32() != kKindFv) throw FormatError("not a function-vector artifact", 8);
  FunctionVector fv;
  fv.task = in.str();
  const uint32_t src = in.u32();
  if (src > 3) throw FormatError("bad source tag " + std::to_string(src), in.pos - 4);
  fv.source = static_cast<FunctionVector::Source>(src);
  fv.layer = static_cast<int>(in.u32()) - 1;
  fv.vec = in.vec(in.u32());
  const uint32_t nh = in.u32();
  for (uint32_t i = 0; i < nh; ++i) {
    HeadId h;
    h.layer = static_cast<int>(in.u32());
    h.head = static_cast<int>(in.u32());
    fv.head_set.push_back(h);
  }
  const uint32_t np = in.u32();
  for (uint32_t i = 0; i < np; ++i) fv.parents.push_back(in.str());
  in.expect_end();
  return fv;
}

}  // namespace fvlab
