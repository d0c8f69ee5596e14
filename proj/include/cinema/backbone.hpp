#pragma once

// Multi-view convolution-transformer masked autoencoder. Per view: 16x16
// in-plane mask patches (depth 1 on SAX), a three-stage conv stem (2x each,
// 8x total, bias-free convs + instance norm + GELU, masked locations re-zeroed
// after every stage), (2,2) token patches so one mask patch maps to exactly
// one token, a shared pre-norm ViT encoder over the concatenated visible
// tokens of all views, multi-scale fusion (pooled stage features projected
// and added at token resolution), a shared decoder with a learned mask token,
// and per-view linear reconstruction heads. Loss: per-view masked MSE, then
// the unweighted mean over views.

#include "cinema/dataio.hpp"
#include "cinema/nn.hpp"

namespace cinema {

enum class ViewId { SAX = 0, LAX2C = 1, LAX3C = 2, LAX4C = 3 };

inline const char* view_name(ViewId v) {
  switch (v) {
    case ViewId::SAX: return "sax";
    case ViewId::LAX2C: return "lax_2c";
    case ViewId::LAX3C: return "lax_3c";
    case ViewId::LAX4C: return "lax_4c";
  }
  fail(errc::invalid_argument, "bad view id");
}

inline constexpr int64_t kMaskPatch = 16;  // in-plane mask patch edge, px
inline constexpr int64_t kTokenPatch = 2;  // token patch edge on the 8x grid
inline constexpr int64_t kPatchPixels = kMaskPatch * kMaskPatch;  // depth 1 on SAX

struct ViewSpec {
  ViewId id = ViewId::SAX;
  int64_t nx = 64, ny = 64, nz = 1;  // nz > 1 only for SAX

  int64_t tokens_x() const { return nx / kMaskPatch; }
  int64_t tokens_y() const { return ny / kMaskPatch; }
  int64_t n_tokens() const { return nz * tokens_y() * tokens_x(); }

  void validate() const {
    require(nx > 0 && ny > 0 && nz > 0, errc::bad_config, "view: sizes must be positive");
    require(nx % kMaskPatch == 0 && ny % kMaskPatch == 0, errc::bad_config,
            "view: in-plane size must be divisible by 16");
    require(id == ViewId::SAX || nz == 1, errc::bad_config, "view: only SAX may have depth > 1");
  }
};

struct ModelConfig {
  int64_t embed_dim = 64;
  int encoder_depth = 4;
  int encoder_heads = 4;
  int64_t decoder_dim = 32;
  int decoder_depth = 2;
  int decoder_heads = 2;
  double mlp_ratio = 4.0;
  std::array<int64_t, 2> conv_channels{8, 16};  // stage 1 and 2; stage 3 emits embed_dim
  double mask_ratio = 0.75;
  std::vector<ViewSpec> views;  // canonical order SAX, 2C, 3C, 4C; subsets allowed
  bool sax_conv3d = false;      // reserved; the implemented stem is 2D per slice

  static ModelConfig desk() {
    ModelConfig c;
    c.views = {{ViewId::SAX, 64, 64, 4},
               {ViewId::LAX2C, 64, 64, 1},
               {ViewId::LAX3C, 64, 64, 1},
               {ViewId::LAX4C, 64, 64, 1}};
    return c;
  }

  static ModelConfig base() {
    ModelConfig c;
    c.embed_dim = 768;
    c.encoder_depth = 12;
    c.encoder_heads = 12;
    c.decoder_dim = 512;
    c.decoder_depth = 8;
    c.decoder_heads = 8;
    c.conv_channels = {64, 128};
    c.views = {{ViewId::SAX, 192, 192, 16},
               {ViewId::LAX2C, 256, 256, 1},
               {ViewId::LAX3C, 256, 256, 1},
               {ViewId::LAX4C, 256, 256, 1}};
    return c;
  }

  static ModelConfig tiny() {  // for finite-difference gradient checks
    ModelConfig c;
    c.embed_dim = 16;
    c.encoder_depth = 2;
    c.encoder_heads = 2;
    c.decoder_dim = 16;
    c.decoder_depth = 1;
    c.decoder_heads = 2;
    c.conv_channels = {2, 4};
    c.views = {{ViewId::SAX, 32, 32, 2}, {ViewId::LAX2C, 32, 32, 1}};
    return c;
  }

  void validate() const {
    require(!views.empty(), errc::bad_config, "config: at least one view required");
    require(embed_dim > 0 && decoder_dim > 0, errc::bad_config, "config: dims must be positive");
    require(embed_dim % 16 == 0 && decoder_dim % 16 == 0, errc::bad_config,
            "config: embed/decoder dims must be divisible by 16 (positional embedding split)");
    require(embed_dim % encoder_heads == 0, errc::bad_config,
            "config: embed_dim not divisible by encoder heads");
    require(decoder_dim % decoder_heads == 0, errc::bad_config,
            "config: decoder_dim not divisible by decoder heads");
    require(encoder_depth >= 0 && decoder_depth >= 0, errc::bad_config,
            "config: negative depth");
    require(mask_ratio >= 0 && mask_ratio < 1, errc::bad_config, "config: mask_ratio in [0,1)");
    require(conv_channels[0] > 0 && conv_channels[1] > 0, errc::bad_config,
            "config: conv channels must be positive");
    require(mlp_ratio > 0, errc::bad_config, "config: mlp_ratio must be positive");
    for (const auto& v : views) v.validate();
    for (size_t i = 1; i < views.size(); ++i)
      require(int(views[i].id) > int(views[i - 1].id), errc::bad_config,
              "config: views must be unique and in canonical order");
  }

  int64_t n_tokens_total() const {
    int64_t n = 0;
    for (const auto& v : views) n += v.n_tokens();
    return n;
  }

  int view_index(ViewId id) const {
    for (size_t i = 0; i < views.size(); ++i)
      if (views[i].id == id) return int(i);
    fail(errc::invalid_argument, std::string("config: view not present: ") + view_name(id));
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["embed_dim"] = c.embed_dim;
  j["encoder_depth"] = c.encoder_depth;
  j["encoder_heads"] = c.encoder_heads;
  j["decoder_dim"] = c.decoder_dim;
  j["decoder_depth"] = c.decoder_depth;
  j["decoder_heads"] = c.decoder_heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["conv_channels"] = c.conv_channels;
  j["mask_ratio"] = c.mask_ratio;
  j["sax_conv3d"] = c.sax_conv3d;
  j["views"] = nlohmann::json::array();
  for (const auto& v : c.views)
    j["views"].push_back({{"id", view_name(v.id)}, {"nx", v.nx}, {"ny", v.ny}, {"nz", v.nz}});
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.views.clear();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.encoder_depth = j.at("encoder_depth").get<int>();
  c.encoder_heads = j.at("encoder_heads").get<int>();
  c.decoder_dim = j.at("decoder_dim").get<int64_t>();
  c.decoder_depth = j.at("decoder_depth").get<int>();
  c.decoder_heads = j.at("decoder_heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  auto cc = j.at("conv_channels").get<std::vector<int64_t>>();
  require(cc.size() == 2, errc::bad_config, "config: conv_channels must have two entries");
  c.conv_channels = {cc[0], cc[1]};
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.sax_conv3d = j.at("sax_conv3d").get<bool>();
  for (const auto& vj : j.at("views")) {
    ViewSpec v;
    std::string id = vj.at("id").get<std::string>();
    if (id == "sax") v.id = ViewId::SAX;
    else if (id == "lax_2c") v.id = ViewId::LAX2C;
    else if (id == "lax_3c") v.id = ViewId::LAX3C;
    else if (id == "lax_4c") v.id = ViewId::LAX4C;
    else fail(errc::bad_config, "config: unknown view id '" + id + "'");
    v.nx = vj.at("nx").get<int64_t>();
    v.ny = vj.at("ny").get<int64_t>();
    v.nz = vj.at("nz").get<int64_t>();
    c.views.push_back(v);
  }
  c.validate();
  return c;
}

// ---- masking ----------------------------------------------------------------------

// per-view boolean token masks, true (1) = masked
struct MaskPattern {
  std::vector<std::vector<uint8_t>> masked;
  double ratio = 0.0;

  int64_t masked_count(size_t view) const {
    int64_t n = 0;
    for (uint8_t m : masked[view]) n += m;
    return n;
  }
  bool empty() const {
    for (const auto& v : masked)
      for (uint8_t m : v)
        if (m) return false;
    return true;
  }
};

inline std::vector<uint8_t> sample_mask(int64_t n_tokens, double ratio, Rng& rng) {
  require(ratio >= 0 && ratio < 1, errc::invalid_argument, "sample_mask: ratio in [0,1)");
  require(n_tokens > 0, errc::invalid_argument, "sample_mask: no tokens");
  int64_t k = llround(ratio * double(n_tokens));
  std::vector<uint8_t> out(size_t(n_tokens), 0);
  for (int64_t idx : rng.sample_without_replacement(n_tokens, k)) out[size_t(idx)] = 1;
  return out;
}

inline MaskPattern sample_mask_all(const ModelConfig& cfg, Rng& rng) {
  MaskPattern p;
  p.ratio = cfg.mask_ratio;
  for (const auto& v : cfg.views) p.masked.push_back(sample_mask(v.n_tokens(), cfg.mask_ratio, rng));
  return p;
}

inline MaskPattern empty_mask(const ModelConfig& cfg) {
  MaskPattern p;
  p.ratio = 0.0;
  for (const auto& v : cfg.views) p.masked.emplace_back(size_t(v.n_tokens()), 0);
  return p;
}

// token grid layout: index = (z * tokens_y + ty) * tokens_x + tx
template <class T>
NdArray<T> apply_mask(const NdArray<T>& image, const std::vector<uint8_t>& masked,
                      const ViewSpec& spec) {
  bool sax = spec.nz > 1;
  if (sax)
    require(image.shape == std::vector<int64_t>({spec.nz, spec.ny, spec.nx}),
            errc::invalid_argument, "apply_mask: image/spec shape mismatch");
  else
    require(image.shape == std::vector<int64_t>({spec.ny, spec.nx}), errc::invalid_argument,
            "apply_mask: image/spec shape mismatch");
  require(int64_t(masked.size()) == spec.n_tokens(), errc::invalid_argument,
          "apply_mask: pattern size mismatch");
  NdArray<T> out = image;
  int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
  for (int64_t z = 0; z < spec.nz; ++z)
    for (int64_t ty = 0; ty < TY; ++ty)
      for (int64_t tx = 0; tx < TX; ++tx) {
        if (!masked[size_t((z * TY + ty) * TX + tx)]) continue;
        for (int64_t dy = 0; dy < kMaskPatch; ++dy) {
          T* row = out.v.data() + ((z * spec.ny) + ty * kMaskPatch + dy) * spec.nx +
                   tx * kMaskPatch;
          std::fill_n(row, kMaskPatch, T{});
        }
      }
  return out;
}

// token bookkeeping: the visible/masked partition across all views
struct TokenBatch {
  struct Ref {
    int view;
    int64_t pos;
  };
  std::vector<Ref> visible, masked;                        // concatenation order
  std::vector<std::vector<int64_t>> visible_idx, masked_idx;  // per-view positions
  std::vector<int64_t> vis_offset;                         // per-view start in the visible stream
};

inline TokenBatch build_token_batch(const ModelConfig& cfg, const MaskPattern& pat) {
  require(pat.masked.size() == cfg.views.size(), errc::invalid_argument,
          "token batch: pattern/view count mismatch");
  TokenBatch b;
  for (size_t v = 0; v < cfg.views.size(); ++v) {
    require(int64_t(pat.masked[v].size()) == cfg.views[v].n_tokens(), errc::invalid_argument,
            "token batch: pattern size mismatch");
    b.vis_offset.push_back(int64_t(b.visible.size()));
    std::vector<int64_t> vis, msk;
    for (int64_t i = 0; i < int64_t(pat.masked[v].size()); ++i) {
      if (pat.masked[v][size_t(i)]) {
        msk.push_back(i);
        b.masked.push_back({int(v), i});
      } else {
        vis.push_back(i);
        b.visible.push_back({int(v), i});
      }
    }
    b.visible_idx.push_back(std::move(vis));
    b.masked_idx.push_back(std::move(msk));
  }
  return b;
}

// ---- positional embeddings ----------------------------------------------------------

namespace detail {
inline void sincos_1d(double pos, int64_t dim, double* out) {
  for (int64_t i = 0; i < dim / 2; ++i) {
    double freq = std::pow(10000.0, -2.0 * double(i) / double(dim));
    out[2 * i] = std::sin(pos * freq);
    out[2 * i + 1] = std::cos(pos * freq);
  }
}
}  // namespace detail

// fixed sinusoidal embeddings on the token grid: 2D views split dim (1/2, 1/2)
// over (ty, tx); 3D views split (1/4, 3/8, 3/8) over (z, ty, tx)
inline nn::Tensor pos_embed_view(const ViewSpec& spec, int64_t dim) {
  require(dim % 16 == 0, errc::bad_config, "pos embed: dim must be divisible by 16");
  int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
  nn::Tensor e({spec.n_tokens(), dim});
  bool sax = spec.nz > 1;
  int64_t dz = sax ? dim / 4 : 0;
  int64_t dy = sax ? 3 * dim / 8 : dim / 2;
  int64_t dx = dim - dz - dy;
  for (int64_t z = 0; z < spec.nz; ++z)
    for (int64_t ty = 0; ty < TY; ++ty)
      for (int64_t tx = 0; tx < TX; ++tx) {
        double* row = e.v.data() + ((z * TY + ty) * TX + tx) * dim;
        if (sax) detail::sincos_1d(double(z), dz, row);
        detail::sincos_1d(double(ty), dy, row + dz);
        detail::sincos_1d(double(tx), dx, row + dz + dy);
      }
  return e;
}

// ---- the model -------------------------------------------------------------------------

// images in canonical view order; SAX [Z,Y,X], LAX [Y,X]
using ViewImages = std::vector<NdArray<double>>;

struct EncodeCache {
  std::vector<nn::Var> s1, s2;          // per-view conv features at 2x and 4x
  std::vector<nn::Var> tokens_full;     // per-view [n_tokens, embed] before masking
  nn::Var encoded;                      // [n_visible_total, embed]
  nn::Var mid;                          // mid-depth encoder output (UNetR skip)
  TokenBatch batch;
};

class MaeModel {
public:
  ModelConfig cfg;
  nn::ParamStore params;

  struct Stem {
    nn::Conv2dLayer c0, c1, c2;
    size_t in0g, in0b, in1g, in1b, in2g, in2b;  // instance norm affine params
    nn::LinearLayer proj;                        // (4*embed) -> embed token projection
    size_t view_emb;
    size_t dec_view_emb;
    nn::LinearLayer recon;                       // decoder_dim -> patch pixels
  };

  std::vector<Stem> stems;
  std::vector<nn::BlockLayer> enc_blocks;
  bool has_decoder = true;
  nn::LinearLayer dec_proj;
  size_t mask_token = size_t(-1);
  nn::LinearLayer fuse_s1, fuse_s2;
  std::vector<nn::BlockLayer> dec_blocks;
  nn::LayerNormLayer dec_ln;

  // with_decoder=false builds the encoder-only model used for fine-tuning; the
  // decoder, reconstruction heads, and mask token are never registered
  MaeModel(ModelConfig config, uint64_t init_seed, bool with_decoder = true)
      : cfg(std::move(config)), has_decoder(with_decoder) {
    cfg.validate();
    Rng rng(mix_seed(init_seed, uint64_t(0x1217)));
    int64_t E = cfg.embed_dim, D = cfg.decoder_dim;
    auto [c0, c1] = cfg.conv_channels;
    for (const auto& v : cfg.views) {
      std::string base = std::string("stem.") + view_name(v.id);
      Stem s;
      s.c0 = make_conv(base + ".c0", 1, c0, rng);
      std::tie(s.in0g, s.in0b) = add_norm(base + ".in0", c0);
      s.c1 = make_conv(base + ".c1", c0, c1, rng);
      std::tie(s.in1g, s.in1b) = add_norm(base + ".in1", c1);
      s.c2 = make_conv(base + ".c2", c1, E, rng);
      std::tie(s.in2g, s.in2b) = add_norm(base + ".in2", E);
      s.proj = nn::LinearLayer::make(params, std::string("embed.") + view_name(v.id) + ".proj",
                                     E * kTokenPatch * kTokenPatch, E, false, rng);
      s.view_emb = params.add(std::string("embed.") + view_name(v.id) + ".view", {E}, false);
      nn::init_normal(params.at(s.view_emb).value, rng);
      s.dec_view_emb = size_t(-1);
      if (has_decoder) {
        s.dec_view_emb =
            params.add(std::string("dec.embed.") + view_name(v.id) + ".view", {D}, false);
        nn::init_normal(params.at(s.dec_view_emb).value, rng);
        s.recon = nn::LinearLayer::make(params, std::string("recon.") + view_name(v.id), D,
                                        kPatchPixels, false, rng);
      }
      stems.push_back(s);
    }
    for (int i = 0; i < cfg.encoder_depth; ++i)
      enc_blocks.push_back(nn::BlockLayer::make(params, "enc.blk" + std::to_string(i), E,
                                                cfg.encoder_heads,
                                                int64_t(cfg.mlp_ratio * double(E)), rng));
    if (has_decoder) {
      dec_proj = nn::LinearLayer::make(params, "dec.proj", E, D, false, rng);
      mask_token = params.add("dec.mask_token", {D}, false);
      nn::init_normal(params.at(mask_token).value, rng);
      fuse_s1 = nn::LinearLayer::make(params, "fuse.s1", c0, D, false, rng);
      fuse_s2 = nn::LinearLayer::make(params, "fuse.s2", c1, D, false, rng);
      for (int i = 0; i < cfg.decoder_depth; ++i)
        dec_blocks.push_back(nn::BlockLayer::make(params, "dec.blk" + std::to_string(i), D,
                                                  cfg.decoder_heads,
                                                  int64_t(cfg.mlp_ratio * double(D)), rng));
      dec_ln = nn::LayerNormLayer::make(params, "dec.ln", D);
    }
  }

  // ---- forward pieces ----

  // conv stem over one view; returns s1, s2, and the token matrix [n_tokens, embed]
  void conv_encode(nn::Graph& g, const nn::Bound& p, size_t view, const NdArray<double>& image,
                   const std::vector<uint8_t>& masked_tokens, nn::Var& s1_out, nn::Var& s2_out,
                   nn::Var& tokens_out) const {
    const ViewSpec& spec = cfg.views[view];
    const Stem& st = stems[view];
    NdArray<double> masked_img = apply_mask(image, masked_tokens, spec);
    int64_t B = spec.nz;  // SAX slices share the 2D stem; LAX is B=1
    nn::Tensor x = masked_img;
    x.shape = {B, 1, spec.ny, spec.nx};
    nn::Var h = g.constant(std::move(x));

    auto stage = [&](nn::Var in, const nn::Conv2dLayer& conv, size_t gamma, size_t beta,
                     int64_t down) {
      nn::Var y = conv2d(g, in, p[conv.w], 2, 1);
      y = nn::instance_norm(g, y, p[gamma], p[beta]);
      y = nn::gelu(g, y);
      return nn::zero_masked(g, y, keep_mask(spec, masked_tokens, down));
    };
    nn::Var s1 = stage(h, st.c0, st.in0g, st.in0b, 2);
    nn::Var s2 = stage(s1, st.c1, st.in1g, st.in1b, 4);
    nn::Var s3 = stage(s2, st.c2, st.in2g, st.in2b, 8);

    // (2,2) patches of s3 -> one token per mask patch
    int64_t E = cfg.embed_dim;
    int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
    nn::Var t = nn::reshape(g, s3, {B, E, TY, kTokenPatch, TX, kTokenPatch});
    t = nn::permute(g, t, {0, 2, 4, 1, 3, 5});  // [B, TY, TX, E, 2, 2]
    t = nn::reshape(g, t, {B * TY * TX, E * kTokenPatch * kTokenPatch});
    t = st.proj(g, p, t);
    t = nn::add(g, t, g.constant(pos_embed_view(spec, E)));
    t = nn::add(g, t, nn::repeat_row(g, p[st.view_emb], spec.n_tokens()));
    s1_out = s1;
    s2_out = s2;
    tokens_out = t;
  }

  // shared encoder over the concatenated visible tokens of all views
  EncodeCache encode(nn::Graph& g, const nn::Bound& p, const ViewImages& images,
                     const MaskPattern& pat,
                     std::vector<nn::Tensor>* attn_out = nullptr) const {
    require(images.size() == cfg.views.size(), errc::invalid_argument,
            "encode: image/view count mismatch");
    EncodeCache c;
    c.batch = build_token_batch(cfg, pat);
    std::vector<nn::Var> vis_parts;
    for (size_t v = 0; v < cfg.views.size(); ++v) {
      nn::Var s1, s2, tok;
      conv_encode(g, p, v, images[v], pat.masked[v], s1, s2, tok);
      c.s1.push_back(s1);
      c.s2.push_back(s2);
      c.tokens_full.push_back(tok);
      if (!c.batch.visible_idx[v].empty())
        vis_parts.push_back(nn::index_rows(g, tok, c.batch.visible_idx[v]));
    }
    require(!vis_parts.empty(), errc::invalid_argument, "encode: no visible tokens");
    nn::Var x = vis_parts.size() == 1 ? vis_parts[0] : nn::concat_rows(g, vis_parts);
    c.mid = x;
    for (size_t i = 0; i < enc_blocks.size(); ++i) {
      x = enc_blocks[i](g, p, x, attn_out);
      if (i + 1 == (enc_blocks.size() + 1) / 2) c.mid = x;
    }
    c.encoded = x;
    return c;
  }

  // decoder + per-view reconstruction; returns per-view patch predictions [n_tokens, 256]
  std::vector<nn::Var> fuse_and_decode(nn::Graph& g, const nn::Bound& p,
                                       const EncodeCache& c) const {
    require(has_decoder, errc::invalid_argument, "decode on an encoder-only model");
    int64_t D = cfg.decoder_dim;
    nn::Var enc_d = dec_proj(g, p, c.encoded);  // [n_vis_total, D]
    int64_t n_vis_total = g.val(enc_d).shape[0];
    nn::Var with_mask =
        nn::concat_rows(g, {enc_d, nn::repeat_row(g, p[mask_token], 1)});
    std::vector<nn::Var> parts;
    for (size_t v = 0; v < cfg.views.size(); ++v) {
      const ViewSpec& spec = cfg.views[v];
      // scatter: row i of the full sequence comes from the visible stream or the mask token
      std::vector<int64_t> src(size_t(spec.n_tokens()), n_vis_total);
      for (size_t j = 0; j < c.batch.visible_idx[v].size(); ++j)
        src[size_t(c.batch.visible_idx[v][j])] = c.batch.vis_offset[v] + int64_t(j);
      nn::Var full = nn::index_rows(g, with_mask, src);
      full = nn::add(g, full, g.constant(pos_embed_view(spec, D)));
      full = nn::add(g, full, nn::repeat_row(g, p[stems[v].dec_view_emb], spec.n_tokens()));
      // multi-scale fusion: pooled stage features, projected, added per token
      full = nn::add(g, full, fused_tokens(g, p, v, c.s1[v], fuse_s1, 8));
      full = nn::add(g, full, fused_tokens(g, p, v, c.s2[v], fuse_s2, 4));
      parts.push_back(full);
    }
    nn::Var x = parts.size() == 1 ? parts[0] : nn::concat_rows(g, parts);
    for (const auto& blk : dec_blocks) x = blk(g, p, x);
    x = dec_ln(g, p, x);
    std::vector<nn::Var> out;
    int64_t off = 0;
    for (size_t v = 0; v < cfg.views.size(); ++v) {
      int64_t n = cfg.views[v].n_tokens();
      std::vector<int64_t> rows(size_t(n), 0);
      for (int64_t i = 0; i < n; ++i) rows[size_t(i)] = off + i;
      nn::Var seq = nn::index_rows(g, x, rows);
      out.push_back(stems[v].recon(g, p, seq));
      off += n;
    }
    return out;
  }

  // patch predictions -> image [nz?, ny, nx]
  nn::Var reassemble(nn::Graph& g, size_t view, nn::Var patches) const {
    const ViewSpec& spec = cfg.views[view];
    int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
    nn::Var x = nn::reshape(g, patches, {spec.nz, TY, TX, kMaskPatch, kMaskPatch});
    x = nn::permute(g, x, {0, 1, 3, 2, 4});  // [nz, TY, 16, TX, 16]
    std::vector<int64_t> shape = spec.nz > 1
                                     ? std::vector<int64_t>{spec.nz, spec.ny, spec.nx}
                                     : std::vector<int64_t>{spec.ny, spec.nx};
    return nn::reshape(g, x, shape);
  }

  // image -> per-token pixel patches [n_tokens, 256] (exact inverse of reassemble)
  static nn::Tensor extract_patches(const NdArray<double>& image, const ViewSpec& spec) {
    int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
    nn::Tensor out({spec.n_tokens(), kPatchPixels});
    for (int64_t z = 0; z < spec.nz; ++z)
      for (int64_t ty = 0; ty < TY; ++ty)
        for (int64_t tx = 0; tx < TX; ++tx) {
          double* row = out.v.data() + ((z * TY + ty) * TX + tx) * kPatchPixels;
          for (int64_t dy = 0; dy < kMaskPatch; ++dy)
            for (int64_t dx = 0; dx < kMaskPatch; ++dx)
              row[dy * kMaskPatch + dx] =
                  image.v[size_t((z * spec.ny + ty * kMaskPatch + dy) * spec.nx +
                                 tx * kMaskPatch + dx)];
        }
    return out;
  }

  // per-view mean over masked patch pixels, then unweighted mean over views
  nn::Var masked_mse(nn::Graph& g, const std::vector<nn::Var>& pred_patches,
                     const ViewImages& targets, const MaskPattern& pat) const {
    require(!pat.empty(), errc::invalid_argument, "masked_mse: empty mask, loss undefined");
    require(pred_patches.size() == cfg.views.size() && targets.size() == cfg.views.size(),
            errc::invalid_argument, "masked_mse: view count mismatch");
    nn::Var total;
    int n_views_with_mask = 0;
    for (size_t v = 0; v < cfg.views.size(); ++v) {
      std::vector<int64_t> midx;
      for (int64_t i = 0; i < int64_t(pat.masked[v].size()); ++i)
        if (pat.masked[v][size_t(i)]) midx.push_back(i);
      if (midx.empty()) continue;
      nn::Tensor tgt_all = extract_patches(targets[v], cfg.views[v]);
      nn::Tensor tgt({int64_t(midx.size()), kPatchPixels});
      for (size_t j = 0; j < midx.size(); ++j)
        std::copy_n(tgt_all.v.begin() + midx[j] * kPatchPixels, kPatchPixels,
                    tgt.v.begin() + int64_t(j) * kPatchPixels);
      nn::Var pv = nn::index_rows(g, pred_patches[v], midx);
      nn::Var lv = nn::mse_against(g, pv, tgt);
      total = total.valid() ? nn::add(g, total, lv) : lv;
      ++n_views_with_mask;
    }
    return nn::scale(g, total, 1.0 / double(n_views_with_mask));
  }

  // full pretraining objective for one study phase
  nn::Var pretrain_loss(nn::Graph& g, const nn::Bound& p, const ViewImages& images,
                        const MaskPattern& pat) const {
    EncodeCache c = encode(g, p, images, pat);
    std::vector<nn::Var> preds = fuse_and_decode(g, p, c);
    return masked_mse(g, preds, images, pat);
  }

private:
  nn::Conv2dLayer make_conv(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
    // bias-free stem conv: zero input stays zero before normalization
    nn::Conv2dLayer c;
    c.stride = 2;
    c.pad = 1;
    c.w = params.add(name + ".weight", {cout, cin, 3, 3}, false);
    nn::init_xavier_uniform(params.at(c.w).value, rng);
    c.b = size_t(-1);
    return c;
  }

  std::pair<size_t, size_t> add_norm(const std::string& name, int64_t ch) {
    size_t gamma = params.add(name + ".gamma", {ch}, false);
    std::fill(params.at(gamma).value.v.begin(), params.at(gamma).value.v.end(), 1.0);
    size_t beta = params.add(name + ".beta", {ch}, false);
    return {gamma, beta};
  }

  // 0/1 keep mask at a given downsampling factor; [B, ny/down, nx/down]
  static NdArray<uint8_t> keep_mask(const ViewSpec& spec, const std::vector<uint8_t>& masked,
                                    int64_t down) {
    int64_t H = spec.ny / down, W = spec.nx / down;
    int64_t block = kMaskPatch / down;  // pixels per mask patch at this scale
    NdArray<uint8_t> keep({spec.nz, H, W}, 1);
    int64_t TY = spec.tokens_y(), TX = spec.tokens_x();
    for (int64_t z = 0; z < spec.nz; ++z)
      for (int64_t ty = 0; ty < TY; ++ty)
        for (int64_t tx = 0; tx < TX; ++tx) {
          if (!masked[size_t((z * TY + ty) * TX + tx)]) continue;
          for (int64_t dy = 0; dy < block; ++dy) {
            uint8_t* row =
                keep.v.data() + (z * H + ty * block + dy) * W + tx * block;
            std::fill_n(row, block, uint8_t(0));
          }
        }
    return keep;
  }

  // pooled stage features -> per-token fusion vectors [n_tokens, decoder_dim]
  nn::Var fused_tokens(nn::Graph& g, const nn::Bound& p, size_t view, nn::Var stage,
                       const nn::LinearLayer& proj, int64_t pool) const {
    const ViewSpec& spec = cfg.views[view];
    nn::Var pooled = nn::avgpool2d(g, stage, int(pool));  // [B, C, TY, TX]
    int64_t C = g.val(pooled).shape[1];
    nn::Var t = nn::permute(g, pooled, {0, 2, 3, 1});  // [B, TY, TX, C]
    t = nn::reshape(g, t, {spec.n_tokens(), C});
    return proj(g, p, t);
  }
};

// closed-form learnable parameter count for a config (no model allocation)
inline int64_t param_count(const ModelConfig& cfg, bool with_decoder = true) {
  cfg.validate();
  int64_t E = cfg.embed_dim, D = cfg.decoder_dim;
  auto [c0, c1] = cfg.conv_channels;
  auto block = [&](int64_t d) {
    int64_t hidden = int64_t(cfg.mlp_ratio * double(d));
    int64_t ln = 2 * d * 2;                       // two layer norms
    int64_t attn = 4 * (d * d + d);               // q,k,v,o with bias
    int64_t mlp = d * hidden + hidden + hidden * d + d;
    return ln + attn + mlp;
  };
  int64_t n = 0;
  for (size_t v = 0; v < cfg.views.size(); ++v) {
    n += 1 * c0 * 9 + 2 * c0;        // c0 conv (no bias) + instance norm affine
    n += c0 * c1 * 9 + 2 * c1;       // c1
    n += c1 * E * 9 + 2 * E;         // c2
    n += (E * kTokenPatch * kTokenPatch) * E + E;  // token projection
    n += E;                          // encoder view embedding
    if (with_decoder) {
      n += D;                        // decoder view embedding
      n += D * kPatchPixels + kPatchPixels;  // reconstruction head
    }
  }
  n += int64_t(cfg.encoder_depth) * block(E);
  if (with_decoder) {
    n += E * D + D;     // decoder projection
    n += D;             // mask token
    n += c0 * D + D;    // fusion projections
    n += c1 * D + D;
    n += int64_t(cfg.decoder_depth) * block(D);
    n += 2 * D;         // decoder final layer norm
  }
  return n;
}

// study phase -> model inputs on the model grid (images must already match specs)
inline ViewImages study_phase_views(const CineStudy& s, const ModelConfig& cfg, int64_t t) {
  ViewImages out;
  for (const auto& spec : cfg.views) {
    if (spec.id == ViewId::SAX) {
      require(s.sax.shape[1] == spec.nz && s.sax.shape[2] == spec.ny && s.sax.shape[3] == spec.nx,
              errc::invalid_argument, "study SAX grid does not match model view spec");
      NdArray<double> img({spec.nz, spec.ny, spec.nx});
      int64_t n = spec.nz * spec.ny * spec.nx;
      for (int64_t i = 0; i < n; ++i) img.v[size_t(i)] = double(s.sax.v[size_t(t * n + i)]);
      out.push_back(std::move(img));
    } else {
      size_t li = size_t(int(spec.id) - 1);
      const auto& l = s.lax[li];
      require(l.shape[1] == spec.ny && l.shape[2] == spec.nx, errc::invalid_argument,
              "study LAX grid does not match model view spec");
      NdArray<double> img({spec.ny, spec.nx});
      int64_t n = spec.ny * spec.nx;
      for (int64_t i = 0; i < n; ++i) img.v[size_t(i)] = double(l.v[size_t(t * n + i)]);
      out.push_back(std::move(img));
    }
  }
  return out;
}

}  // namespace cinema
