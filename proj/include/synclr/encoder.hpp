#pragma once

// Patch-token encoder: linear patch embedding, summary token, pre-norm
// attention blocks, plus a contrastive head (unit vectors) and a prototype
// head (per-patch logits). Every parameter array has an analytic gradient.

#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "synclr/error.hpp"
#include "synclr/image.hpp"
#include "synclr/layers.hpp"
#include "synclr/random.hpp"

namespace synclr {

struct EncoderConfig {
  int image_size = 32;
  int patch = 8;
  int width = 64;
  int depth = 2;
  int heads = 2;
  int mlp_hidden = 128;
  int head_hidden = 128;        // 2 * width
  int projection_dim = 64;      // contrastive embedding size
  int prototype_dim = 64;       // prototype head bottleneck
  int prototypes = 64;
  bool positional_embedding = true;
  bool normalize_prototype_input = true;

  int patch_dim() const { return patch * patch * 3; }
  int patches_for(int side) const { return (side / patch) * (side / patch); }

  void validate() const {
    require(patch >= 1 && width >= 2 && depth >= 0 && heads >= 1 && width % heads == 0, ErrorCode::invalid_argument,
            "invalid encoder dimensions (width must be divisible by heads)");
    require(mlp_hidden >= 1 && head_hidden >= 1 && projection_dim >= 1 && prototype_dim >= 1 && prototypes >= 1,
            ErrorCode::invalid_argument, "invalid head dimensions");
    require(!positional_embedding || width % 4 == 0, ErrorCode::invalid_argument,
            "positional embedding needs width divisible by 4");
    require(image_size % patch == 0, ErrorCode::invalid_argument, "image size must be divisible by the patch size");
  }
};

template <typename S>
struct BlockParams {
  Matrix<S> ln1_g, ln1_b;
  Matrix<S> qkv_w, qkv_b;
  Matrix<S> proj_w, proj_b;
  Matrix<S> ln2_g, ln2_b;
  Matrix<S> fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Parameter arrays. The same type also serves as the gradient bundle.
template <typename S>
struct EncoderParams {
  Matrix<S> patch_w, patch_b;
  Matrix<S> cls_token, mask_token;
  std::vector<BlockParams<S>> blocks;
  Matrix<S> norm_g, norm_b;
  Matrix<S> con_w1, con_b1, con_w2, con_b2;
  Matrix<S> pro_w1, pro_b1, pro_w2, pro_b2;
  Matrix<S> prototypes;

  /// Visits (name, array) in a fixed order shared by checkpoints, the
  /// optimizer and the EMA update.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  /// Visits matching arrays of two bundles with the same layout.
  template <typename Other, typename F>
  void zip(Other& other, F&& f) {
    std::vector<Matrix<S>*> mine;
    for_each([&](const std::string&, Matrix<S>& m) { mine.push_back(&m); });
    std::size_t i = 0;
    other.for_each([&](const std::string& name, auto& m) { f(name, *mine[i++], m); });
  }

  EncoderParams zeros_like() const {
    EncoderParams out = *this;
    out.for_each([](const std::string&, Matrix<S>& m) { m.setZero(); });
    return out;
  }

  template <typename T>
  EncoderParams<T> cast() const {
    EncoderParams<T> out;
    out.blocks.resize(blocks.size());
    std::vector<const Matrix<S>*> src;
    for_each([&](const std::string&, const Matrix<S>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Matrix<T>& m) {
      m = src[i++]->template cast<T>();
    });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f("patch_embed.weight", self.patch_w);
    f("patch_embed.bias", self.patch_b);
    f("cls_token", self.cls_token);
    f("mask_token", self.mask_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "norm1.weight", b.ln1_g);
      f(p + "norm1.bias", b.ln1_b);
      f(p + "attn.qkv.weight", b.qkv_w);
      f(p + "attn.qkv.bias", b.qkv_b);
      f(p + "attn.proj.weight", b.proj_w);
      f(p + "attn.proj.bias", b.proj_b);
      f(p + "norm2.weight", b.ln2_g);
      f(p + "norm2.bias", b.ln2_b);
      f(p + "mlp.fc1.weight", b.fc1_w);
      f(p + "mlp.fc1.bias", b.fc1_b);
      f(p + "mlp.fc2.weight", b.fc2_w);
      f(p + "mlp.fc2.bias", b.fc2_b);
    }
    f("norm.weight", self.norm_g);
    f("norm.bias", self.norm_b);
    f("contrastive_head.fc1.weight", self.con_w1);
    f("contrastive_head.fc1.bias", self.con_b1);
    f("contrastive_head.fc2.weight", self.con_w2);
    f("contrastive_head.fc2.bias", self.con_b2);
    f("prototype_head.fc1.weight", self.pro_w1);
    f("prototype_head.fc1.bias", self.pro_b1);
    f("prototype_head.fc2.weight", self.pro_w2);
    f("prototype_head.fc2.bias", self.pro_b2);
    f("prototypes", self.prototypes);
  }
};

/// Biases, normalization parameters and the learned tokens are row vectors
/// and are exempt from weight decay.
inline bool is_decay_exempt(const std::string& name) {
  return name.ends_with(".bias") || name.find("norm") != std::string::npos || name == "cls_token" ||
         name == "mask_token";
}

template <typename S>
void renormalize_prototypes(EncoderParams<S>& p) {
  for (Eigen::Index i = 0; i < p.prototypes.rows(); ++i) {
    const S n = p.prototypes.row(i).norm();
    if (n > S(0)) p.prototypes.row(i) /= n;
  }
}

/// Truncated-normal (sigma 0.02) weights, zero biases, unit norm gains,
/// unit-norm prototype rows.
template <typename S>
EncoderParams<S> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Eigen::Index d = cfg.width;
  auto zeros = [](Eigen::Index r, Eigen::Index c) { return Matrix<S>(Matrix<S>::Zero(r, c)); };
  auto ones = [](Eigen::Index c) { return Matrix<S>(Matrix<S>::Ones(1, c)); };
  EncoderParams<S> p;
  p.patch_w = zeros(cfg.patch_dim(), d);
  p.patch_b = zeros(1, d);
  p.cls_token = zeros(1, d);
  p.mask_token = zeros(1, d);
  p.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& b : p.blocks) {
    b.ln1_g = ones(d);
    b.ln1_b = zeros(1, d);
    b.qkv_w = zeros(d, 3 * d);
    b.qkv_b = zeros(1, 3 * d);
    b.proj_w = zeros(d, d);
    b.proj_b = zeros(1, d);
    b.ln2_g = ones(d);
    b.ln2_b = zeros(1, d);
    b.fc1_w = zeros(d, cfg.mlp_hidden);
    b.fc1_b = zeros(1, cfg.mlp_hidden);
    b.fc2_w = zeros(cfg.mlp_hidden, d);
    b.fc2_b = zeros(1, d);
  }
  p.norm_g = ones(d);
  p.norm_b = zeros(1, d);
  p.con_w1 = zeros(d, cfg.head_hidden);
  p.con_b1 = zeros(1, cfg.head_hidden);
  p.con_w2 = zeros(cfg.head_hidden, cfg.projection_dim);
  p.con_b2 = zeros(1, cfg.projection_dim);
  p.pro_w1 = zeros(d, cfg.head_hidden);
  p.pro_b1 = zeros(1, cfg.head_hidden);
  p.pro_w2 = zeros(cfg.head_hidden, cfg.prototype_dim);
  p.pro_b2 = zeros(1, cfg.prototype_dim);
  p.prototypes = zeros(cfg.prototypes, cfg.prototype_dim);

  Rng rng(derive_seed(seed, 0x494E4954));
  p.for_each([&](const std::string& name, Matrix<S>& m) {
    const bool weight = name.ends_with(".weight") && name.find("norm") == std::string::npos;
    if (weight || name == "cls_token" || name == "mask_token" || name == "prototypes")
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.truncated_normal(0.02));
  });
  renormalize_prototypes(p);
  return p;
}

template <typename S>
void check_finite(const EncoderParams<S>& p, const char* what) {
  p.for_each([&](const std::string& name, const Matrix<S>& m) {
    require(m.allFinite(), ErrorCode::numerical, std::string(what) + ": non-finite values in '" + name + "'");
  });
}

template <typename S>
void check_same_layout(const EncoderParams<S>& a, const EncoderParams<S>& b) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  a.for_each([&](const std::string&, const Matrix<S>& m) { shapes.emplace_back(m.rows(), m.cols()); });
  std::size_t i = 0;
  bool ok = a.blocks.size() == b.blocks.size();
  b.for_each([&](const std::string&, const Matrix<S>& m) {
    ok = ok && i < shapes.size() && shapes[i] == std::make_pair(m.rows(), m.cols());
    ++i;
  });
  require(ok && i == shapes.size(), ErrorCode::invalid_argument, "parameter layouts differ");
}

template <typename S>
struct TokenOutput {
  RowVector<S> summary;
  Matrix<S> patch_tokens;  // P x d
};

template <typename S>
struct BlockCache {
  Matrix<S> x_in;
  LayerNormCache<S> ln1;
  Matrix<S> h1, qkv;
  std::vector<Matrix<S>> probs;  // per head, T x T
  Matrix<S> ctx;
  Matrix<S> x_mid;
  LayerNormCache<S> ln2;
  MlpCache<S> mlp;
};

template <typename S>
struct EncodeCache {
  Matrix<S> patches;
  std::vector<std::size_t> masked;
  std::vector<BlockCache<S>> blocks;
  LayerNormCache<S> final_norm;
};

/// Fixed 2-D sine-cosine positional table for a g x g grid; the summary
/// token row is zero.
template <typename S>
Matrix<S> sincos_positions(int grid, int dim) {
  Matrix<S> pos = Matrix<S>::Zero(grid * grid + 1, dim);
  const int quarter = dim / 4;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      const int row = 1 + y * grid + x;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, quarter > 1 ? static_cast<double>(k) / (quarter - 1) : 0.0);
        pos(row, k) = static_cast<S>(std::sin(x * omega));
        pos(row, quarter + k) = static_cast<S>(std::cos(x * omega));
        pos(row, 2 * quarter + k) = static_cast<S>(std::sin(y * omega));
        pos(row, 3 * quarter + k) = static_cast<S>(std::cos(y * omega));
      }
    }
  return pos;
}

/// Splits an image into non-overlapping patches, one row per patch in
/// raster order, each row laid out (dy, dx, channel).
template <typename S>
Matrix<S> patchify(const Image& img, int patch) {
  const int gy = img.height / patch, gx = img.width / patch;
  Matrix<S> out(gy * gx, patch * patch * 3);
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      const Eigen::Index row = py * gx + px;
      Eigen::Index col = 0;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < 3; ++c) out(row, col++) = static_cast<S>(img.at(py * patch + dy, px * patch + dx, c));
    }
  return out;
}

template <typename S>
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const EncoderConfig& config() const { return cfg_; }

  /// Tokens after the final normalization: row 0 summary, rows 1..P patches.
  /// Patches listed in `mask` have their embedding replaced by the mask token.
  Matrix<S> encode_tokens(const EncoderParams<S>& p, const Image& img, const std::vector<std::size_t>* mask,
                          EncodeCache<S>* cache) const {
    require(img.height == img.width && img.height % cfg_.patch == 0, ErrorCode::invalid_argument,
            "image side must be square and divisible by the patch size");
    const int grid = img.height / cfg_.patch;
    const Eigen::Index P = grid * grid, d = cfg_.width, T = P + 1;

    Matrix<S> patches = patchify<S>(img, cfg_.patch);
    Matrix<S> x(T, d);
    x.row(0) = p.cls_token.row(0);
    x.bottomRows(P) = affine(patches, p.patch_w, p.patch_b);
    if (mask)
      for (std::size_t idx : *mask) {
        require(idx < static_cast<std::size_t>(P), ErrorCode::invalid_argument, "mask index out of range");
        x.row(static_cast<Eigen::Index>(idx) + 1) = p.mask_token.row(0);
      }
    if (cfg_.positional_embedding) x += positions(grid);
    if (cache) {
      cache->patches = std::move(patches);
      cache->masked = mask ? *mask : std::vector<std::size_t>{};
      cache->blocks.resize(p.blocks.size());
    }

    const Eigen::Index heads = cfg_.heads, hd = d / heads;
    const S scale = S(1) / std::sqrt(S(hd));
    for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
      const auto& b = p.blocks[bi];
      BlockCache<S>* bc = cache ? &cache->blocks[bi] : nullptr;
      LayerNormCache<S> ln1;
      Matrix<S> h1 = layer_norm(x, b.ln1_g, b.ln1_b, &ln1);
      Matrix<S> qkv = affine(h1, b.qkv_w, b.qkv_b);
      Matrix<S> ctx(T, d);
      std::vector<Matrix<S>> probs(static_cast<std::size_t>(heads));
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto q = qkv.middleCols(h * hd, hd);
        const auto k = qkv.middleCols(d + h * hd, hd);
        const auto v = qkv.middleCols(2 * d + h * hd, hd);
        Matrix<S> scores = (q * k.transpose()) * scale;
        probs[static_cast<std::size_t>(h)] = softmax_rows(scores);
        ctx.middleCols(h * hd, hd).noalias() = probs[static_cast<std::size_t>(h)] * v;
      }
      Matrix<S> x_mid = x + affine(ctx, b.proj_w, b.proj_b);
      LayerNormCache<S> ln2;
      Matrix<S> h2 = layer_norm(x_mid, b.ln2_g, b.ln2_b, &ln2);
      MlpCache<S> mc;
      Matrix<S> x_out = x_mid + mlp_forward(MlpParamsView<S>{b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b}, h2, bc ? &mc : nullptr);
      if (bc) {
        bc->x_in = std::move(x);
        bc->ln1 = std::move(ln1);
        bc->h1 = std::move(h1);
        bc->qkv = std::move(qkv);
        bc->probs = std::move(probs);
        bc->ctx = std::move(ctx);
        bc->x_mid = std::move(x_mid);
        bc->ln2 = std::move(ln2);
        bc->mlp = std::move(mc);
      }
      x = std::move(x_out);
    }
    return layer_norm(x, p.norm_g, p.norm_b, cache ? &cache->final_norm : nullptr);
  }

  TokenOutput<S> encode(const EncoderParams<S>& p, const Image& img, const std::vector<std::size_t>* mask = nullptr,
                        EncodeCache<S>* cache = nullptr) const {
    Matrix<S> tokens = encode_tokens(p, img, mask, cache);
    TokenOutput<S> out;
    out.summary = tokens.row(0);
    out.patch_tokens = tokens.bottomRows(tokens.rows() - 1);
    return out;
  }

  /// Backpropagates dL/d(tokens) (same layout as encode_tokens' result) into `grads`.
  void backward(const EncoderParams<S>& p, const EncodeCache<S>& cache, const Matrix<S>& d_tokens,
                EncoderParams<S>& grads) const {
    const Eigen::Index d = cfg_.width, heads = cfg_.heads, hd = d / heads;
    const S scale = S(1) / std::sqrt(S(hd));
    Matrix<S> dx = layer_norm_backward(d_tokens, cache.final_norm, p.norm_g, grads.norm_g, grads.norm_b);

    for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
      const auto& b = p.blocks[bi];
      auto& g = grads.blocks[bi];
      const auto& bc = cache.blocks[bi];
      // x_out = x_mid + mlp(ln2(x_mid))
      const Matrix<S> dh2 = mlp_backward(MlpParamsView<S>{b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b}, bc.mlp, dx,
                                         MlpGradView<S>{g.fc1_w, g.fc1_b, g.fc2_w, g.fc2_b});
      Matrix<S> dx_mid = dx + layer_norm_backward(dh2, bc.ln2, b.ln2_g, g.ln2_g, g.ln2_b);
      // x_mid = x_in + proj(attn(ln1(x_in)))
      const Matrix<S> dctx = affine_backward(dx_mid, bc.ctx, b.proj_w, g.proj_w, g.proj_b);
      Matrix<S> dqkv(bc.qkv.rows(), bc.qkv.cols());
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto& a = bc.probs[static_cast<std::size_t>(h)];
        const auto q = bc.qkv.middleCols(h * hd, hd);
        const auto k = bc.qkv.middleCols(d + h * hd, hd);
        const auto v = bc.qkv.middleCols(2 * d + h * hd, hd);
        const auto dout = dctx.middleCols(h * hd, hd);
        dqkv.middleCols(2 * d + h * hd, hd).noalias() = a.transpose() * dout;
        const Matrix<S> da = dout * v.transpose();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> row_dot = (da.array() * a.array()).rowwise().sum();
        const Matrix<S> ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * scale;
        dqkv.middleCols(h * hd, hd).noalias() = ds * k;
        dqkv.middleCols(d + h * hd, hd).noalias() = ds.transpose() * q;
      }
      const Matrix<S> dh1 = affine_backward(dqkv, bc.h1, b.qkv_w, g.qkv_w, g.qkv_b);
      dx = dx_mid + layer_norm_backward(dh1, bc.ln1, b.ln1_g, g.ln1_g, g.ln1_b);
    }

    // Token assembly: row 0 is the summary token, rows 1.. the (possibly
    // masked) patch embeddings; positional terms are constants.
    grads.cls_token.row(0) += dx.row(0);
    const Eigen::Index P = dx.rows() - 1;
    Matrix<S> dembed = dx.bottomRows(P);
    for (std::size_t idx : cache.masked) {
      const auto r = static_cast<Eigen::Index>(idx);
      grads.mask_token.row(0) += dembed.row(r);
      dembed.row(r).setZero();
    }
    grads.patch_w.noalias() += cache.patches.transpose() * dembed;
    grads.patch_b.row(0) += dembed.colwise().sum();
  }

 private:
  const Matrix<S>& positions(int grid) const {
    std::lock_guard lock(pos_mu_);
    auto it = pos_cache_.find(grid);
    if (it == pos_cache_.end()) it = pos_cache_.emplace(grid, sincos_positions<S>(grid, cfg_.width)).first;
    return it->second;
  }

  EncoderConfig cfg_;
  mutable std::mutex pos_mu_;
  mutable std::map<int, Matrix<S>> pos_cache_;
};

// ---------------------------------------------------------------------------
// Heads

template <typename S>
struct ContrastiveCache {
  MlpCache<S> mlp;
  RowNormalizeCache<S> norm;
};

/// Perceptron then l2 normalization; one unit row per input row.
template <typename S>
Matrix<S> project_contrastive(const EncoderParams<S>& p, const Matrix<S>& summaries, ContrastiveCache<S>* cache = nullptr) {
  require(summaries.allFinite(), ErrorCode::numerical, "non-finite summary vector");
  const Matrix<S> y = mlp_forward(MlpParamsView<S>{p.con_w1, p.con_b1, p.con_w2, p.con_b2}, summaries,
                                  cache ? &cache->mlp : nullptr);
  Matrix<S> unit;
  require(normalize_rows(y, unit, cache ? &cache->norm : nullptr), ErrorCode::degenerate,
          "contrastive projection is the zero vector");
  return unit;
}

/// Returns dL/d(summaries).
template <typename S>
Matrix<S> project_contrastive_backward(const EncoderParams<S>& p, const ContrastiveCache<S>& c, const Matrix<S>& d_unit,
                                       EncoderParams<S>& grads) {
  const Matrix<S> dy = normalize_rows_backward(d_unit, c.norm);
  return mlp_backward(MlpParamsView<S>{p.con_w1, p.con_b1, p.con_w2, p.con_b2}, c.mlp, dy,
                      MlpGradView<S>{grads.con_w1, grads.con_b1, grads.con_w2, grads.con_b2});
}

template <typename S>
struct PrototypeCache {
  MlpCache<S> mlp;
  RowNormalizeCache<S> norm;
  Matrix<S> embedding;  // rows multiplied against the prototype matrix
  bool normalized = false;
};

/// logits = (projected patch embedding) * prototypes^T, one row per token.
template <typename S>
Matrix<S> project_prototypes(const EncoderParams<S>& p, const Matrix<S>& patch_tokens, bool normalize_input,
                             PrototypeCache<S>* cache = nullptr) {
  Matrix<S> e = mlp_forward(MlpParamsView<S>{p.pro_w1, p.pro_b1, p.pro_w2, p.pro_b2}, patch_tokens,
                            cache ? &cache->mlp : nullptr);
  if (normalize_input) {
    Matrix<S> unit;
    require(normalize_rows(e, unit, cache ? &cache->norm : nullptr), ErrorCode::degenerate,
            "prototype projection is the zero vector");
    e = std::move(unit);
  }
  Matrix<S> logits = e * p.prototypes.transpose();
  if (cache) {
    cache->embedding = std::move(e);
    cache->normalized = normalize_input;
  }
  return logits;
}

/// Returns dL/d(patch_tokens).
template <typename S>
Matrix<S> project_prototypes_backward(const EncoderParams<S>& p, const PrototypeCache<S>& c, const Matrix<S>& d_logits,
                                      EncoderParams<S>& grads) {
  grads.prototypes.noalias() += d_logits.transpose() * c.embedding;
  Matrix<S> de = d_logits * p.prototypes;
  if (c.normalized) de = normalize_rows_backward(de, c.norm);
  return mlp_backward(MlpParamsView<S>{p.pro_w1, p.pro_b1, p.pro_w2, p.pro_b2}, c.mlp, de,
                      MlpGradView<S>{grads.pro_w1, grads.pro_b1, grads.pro_w2, grads.pro_b2});
}

}  // namespace synclr
