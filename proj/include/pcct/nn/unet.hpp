#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcct/core/json_util.hpp"
#include "pcct/core/rng.hpp"
#include "pcct/nn/autograd.hpp"

namespace pcct::nn {

enum class NormKind { None, Group };

struct UNetConfig {
  int in_channels = 1;
  int out_channels = 1;
  int base_width = 32;
  std::vector<int> channel_mult = {1, 2, 2};
  int res_blocks = 1;
  bool attention = true;  // self-attention at the smallest resolution
  bool gamma_embedding = false;
  NormKind norm = NormKind::None;
  int norm_groups = 8;
  /// Adds input channel `residual_channel` to the output (identity at init).
  bool global_residual = false;
  int residual_channel = 0;

  int levels() const { return static_cast<int>(channel_mult.size()); }
  int divisor() const { return 1 << (levels() - 1); }

  void validate() const {
    require(in_channels >= 1 && out_channels >= 1, "unet channel counts must be positive");
    require(base_width >= 1, "unet base_width must be positive");
    require(!channel_mult.empty(), "unet channel_mult must not be empty");
    for (int m : channel_mult) require(m >= 1, "unet channel_mult entries must be positive");
    require(res_blocks >= 1, "unet res_blocks must be positive");
    require(!global_residual || (residual_channel >= 0 && residual_channel < in_channels),
            "unet residual_channel outside the input channels");
    if (norm == NormKind::Group) {
      require(norm_groups >= 1, "unet norm_groups must be positive");
      for (int m : channel_mult)
        require((base_width * m) % norm_groups == 0, "unet widths must be divisible by norm_groups");
    }
  }
  bool operator==(const UNetConfig&) const = default;
};

inline json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"base_width", c.base_width},
          {"channel_mult", c.channel_mult},
          {"res_blocks", c.res_blocks},
          {"attention", c.attention},
          {"gamma_embedding", c.gamma_embedding},
          {"norm", c.norm == NormKind::Group ? "group" : "none"},
          {"norm_groups", c.norm_groups},
          {"global_residual", c.global_residual},
          {"residual_channel", c.residual_channel}};
}

inline UNetConfig unet_config_from_json(const json& j, const std::string& where = "net") {
  UNetConfig c;
  StrictReader r(j, where);
  r.get("in_channels", c.in_channels);
  r.get("out_channels", c.out_channels);
  r.get("base_width", c.base_width);
  r.get("channel_mult", c.channel_mult);
  r.get("res_blocks", c.res_blocks);
  r.get("attention", c.attention);
  r.get("gamma_embedding", c.gamma_embedding);
  std::string norm = c.norm == NormKind::Group ? "group" : "none";
  r.get("norm", norm);
  if (norm == "group") {
    c.norm = NormKind::Group;
  } else if (norm == "none") {
    c.norm = NormKind::None;
  } else {
    throw ConfigError(where + ".norm: expected none|group, got '" + norm + "'");
  }
  r.get("norm_groups", c.norm_groups);
  r.get("global_residual", c.global_residual);
  r.get("residual_channel", c.residual_channel);
  r.finish();
  c.validate();
  return c;
}

/// Sinusoidal features of 1000*gamma, `dim` wide (sin half, cos half).
template <class S>
std::vector<S> gamma_features(const std::vector<double>& gammas, int dim) {
  const int half = dim / 2;
  std::vector<S> out(gammas.size() * dim, S(0));
  for (std::size_t n = 0; n < gammas.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * i / std::max(1, half));
      const double a = 1000.0 * gammas[n] * f;
      out[n * dim + i] = static_cast<S>(std::sin(a));
      out[n * dim + half + i] = static_cast<S>(std::cos(a));
    }
  return out;
}

/// Encoder-decoder with skip connections, FiLM conditioning on a scalar
/// noise level and optional self-attention at the bottleneck.
template <class S>
class UNet {
 public:
  struct Param {
    std::string name;
    Var<S> var;
  };

  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_rng(derive_seed(seed, 0x0E7));
    rng_ = &rng;
    build();
    rng_ = nullptr;
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var->value.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) std::fill(p.var->grad.begin(), p.var->grad.end(), S(0));
  }

  /// x: (n, in_channels, h, w) with h, w divisible by 2^(levels-1).
  Var<S> forward(const Var<S>& x, const std::vector<double>& gammas = {}) const {
    const Shape s = x->shape;
    if (s.c != cfg_.in_channels) {
      throw ConfigError("network expects " + std::to_string(cfg_.in_channels) + " input channel(s), got " +
                        std::to_string(s.c));
    }
    if (s.h % cfg_.divisor() != 0 || s.w % cfg_.divisor() != 0) {
      throw ConfigError("network input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                        " is not divisible by " + std::to_string(cfg_.divisor()));
    }
    Var<S> emb;
    if (cfg_.gamma_embedding) {
      if (static_cast<int>(gammas.size()) != s.n) throw ConfigError("one noise level per batch item is required");
      const int d = cfg_.base_width;
      Var<S> feats = constant<S>(Shape{s.n, d, 1, 1}, gamma_features<S>(gammas, d));
      emb = silu(linear(silu(linear(feats, p("emb.0.w"), p("emb.0.b"))), p("emb.1.w"), p("emb.1.b")));
    }
    Var<S> h = conv2d(x, p("in.w"), p("in.b"));
    std::vector<Var<S>> skips;
    for (int l = 0; l < cfg_.levels(); ++l) {
      for (int r = 0; r < cfg_.res_blocks; ++r) h = res_block(h, emb, lname("enc", l, r));
      skips.push_back(h);
      if (l + 1 < cfg_.levels()) h = conv2d(h, p(lname("down", l) + ".w"), p(lname("down", l) + ".b"), 2, 1);
    }
    h = res_block(h, emb, "mid.0");
    if (cfg_.attention) h = attn_block(h, "mid.attn");
    h = res_block(h, emb, "mid.1");
    for (int l = cfg_.levels() - 1; l >= 0; --l) {
      h = concat(h, skips[l]);
      for (int r = 0; r < cfg_.res_blocks; ++r) h = res_block(h, emb, lname("dec", l, r));
      if (l > 0) h = conv2d(upsample2x(h), p(lname("up", l) + ".w"), p(lname("up", l) + ".b"));
    }
    h = out_norm_act(h);
    h = conv2d(h, p("out.w"), p("out.b"));
    if (cfg_.global_residual) {
      Var<S> base = slice_channels(x, cfg_.residual_channel, 1);
      if (cfg_.out_channels != 1) throw ConfigError("global residual needs a single output channel");
      h = add(h, base);
    }
    return h;
  }

 private:
  static std::string lname(const char* a, int l, int r = -1) {
    std::string s = std::string(a) + "." + std::to_string(l);
    if (r >= 0) s += "." + std::to_string(r);
    return s;
  }

  const Var<S>& p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("network parameter '" + name + "' missing");
    return params_[it->second].var;
  }
  void register_param(const std::string& name, Var<S> v) {
    index_[name] = params_.size();
    params_.push_back({name, std::move(v)});
  }

  void add_param(const std::string& name, Shape shape, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<S> v(shape.size());
    for (auto& x : v) x = bound > 0 ? static_cast<S>(u(*rng_)) : S(0);
    register_param(name, parameter<S>(shape, std::move(v)));
  }
  void conv(const std::string& name, int ci, int co, int k, bool zero = false) {
    const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(ci * k * k));
    add_param(name + ".w", Shape{co, ci, k, k}, bound);
    add_param(name + ".b", Shape{co, 1, 1, 1}, 0.0);
  }
  void dense(const std::string& name, int in, int out, bool zero = false) {
    const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    add_param(name + ".w", Shape{out, in, 1, 1}, bound);
    add_param(name + ".b", Shape{out, 1, 1, 1}, 0.0);
  }
  void norm(const std::string& name, int c) {
    if (cfg_.norm != NormKind::Group) return;
    register_param(name + ".g", parameter<S>(Shape{c, 1, 1, 1}, std::vector<S>(c, S(1))));
    register_param(name + ".b", parameter<S>(Shape{c, 1, 1, 1}, std::vector<S>(c, S(0))));
  }
  void res_params(const std::string& name, int ci, int co) {
    norm(name + ".n1", ci);
    conv(name + ".c1", ci, co, 3);
    if (cfg_.gamma_embedding) dense(name + ".film", 4 * cfg_.base_width, 2 * co, true);
    norm(name + ".n2", co);
    conv(name + ".c2", co, co, 3, true);
    if (ci != co) conv(name + ".skip", ci, co, 1);
  }

  void build() {
    const int c0 = cfg_.base_width;
    if (cfg_.gamma_embedding) {
      dense("emb.0", c0, 4 * c0);
      dense("emb.1", 4 * c0, 4 * c0);
    }
    conv("in", cfg_.in_channels, c0, 3);
    std::vector<int> widths;
    int ch = c0;
    for (int l = 0; l < cfg_.levels(); ++l) {
      const int co = c0 * cfg_.channel_mult[l];
      for (int r = 0; r < cfg_.res_blocks; ++r) {
        res_params(lname("enc", l, r), ch, co);
        ch = co;
      }
      widths.push_back(ch);
      if (l + 1 < cfg_.levels()) conv(lname("down", l), ch, ch, 3);
    }
    res_params("mid.0", ch, ch);
    if (cfg_.attention) {
      norm("mid.attn.n", ch);
      conv("mid.attn.q", ch, ch, 1);
      conv("mid.attn.k", ch, ch, 1);
      conv("mid.attn.v", ch, ch, 1);
      conv("mid.attn.o", ch, ch, 1, true);
    }
    res_params("mid.1", ch, ch);
    for (int l = cfg_.levels() - 1; l >= 0; --l) {
      const int co = c0 * cfg_.channel_mult[l];
      for (int r = 0; r < cfg_.res_blocks; ++r) {
        res_params(lname("dec", l, r), r == 0 ? ch + widths[l] : ch, co);
        ch = co;
      }
      if (l > 0) conv(lname("up", l), ch, ch, 3);
    }
    norm("out.n", ch);
    conv("out", ch, cfg_.out_channels, 3, true);
  }

  Var<S> norm_act(const Var<S>& x, const std::string& name) const {
    if (cfg_.norm == NormKind::Group) {
      const int groups = std::min(cfg_.norm_groups, x->shape.c);
      return silu(group_norm(x, p(name + ".g"), p(name + ".b"), groups));
    }
    return silu(x);
  }
  Var<S> out_norm_act(const Var<S>& x) const { return norm_act(x, "out.n"); }

  Var<S> res_block(const Var<S>& x, const Var<S>& emb, const std::string& name) const {
    Var<S> h = conv2d(norm_act(x, name + ".n1"), p(name + ".c1.w"), p(name + ".c1.b"));
    if (cfg_.gamma_embedding) {
      const int co = h->shape.c;
      Var<S> mod = linear(emb, p(name + ".film.w"), p(name + ".film.b"));
      Var<S> m4 = reshape(mod, Shape{h->shape.n, 2 * co, 1, 1});
      h = film(h, slice_channels(m4, 0, co), slice_channels(m4, co, co));
    }
    h = conv2d(norm_act(h, name + ".n2"), p(name + ".c2.w"), p(name + ".c2.b"));
    Var<S> skip = x->shape.c == h->shape.c ? x : conv2d(x, p(name + ".skip.w"), p(name + ".skip.b"));
    return add(h, skip);
  }

  Var<S> attn_block(const Var<S>& x, const std::string& name) const {
    Var<S> h = cfg_.norm == NormKind::Group
                   ? group_norm(x, p(name + ".n.g"), p(name + ".n.b"), std::min(cfg_.norm_groups, x->shape.c))
                   : x;
    Var<S> q = conv2d(h, p(name + ".q.w"), p(name + ".q.b"));
    Var<S> k = conv2d(h, p(name + ".k.w"), p(name + ".k.b"));
    Var<S> v = conv2d(h, p(name + ".v.w"), p(name + ".v.b"));
    Var<S> a = attention(q, k, v);
    return add(x, conv2d(a, p(name + ".o.w"), p(name + ".o.b")));
  }

  /// Same payload, new shape (no copy semantics needed beyond the value).
  static Var<S> reshape(const Var<S>& x, Shape s) {
    if (s.size() != x->shape.size()) throw ConfigError("reshape: size mismatch");
    return detail::make_result<S>(s, x->value, {x}, [x](Node<S>& o) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
    });
  }

  UNetConfig cfg_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
  Rng* rng_ = nullptr;
};

}  // namespace pcct::nn
