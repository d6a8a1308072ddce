#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/raw_io.hpp"
#include "pcct/core/sha256.hpp"
#include "pcct/nn/unet.hpp"

namespace pcct::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a network's parameters, in parameter order.
template <class S>
class Adam {
 public:
  Adam(const UNet<S>& net, AdamConfig cfg) : cfg_(cfg) {
    require(cfg.lr > 0, "learning rate must be positive");
    for (const auto& p : net.params()) {
      m_.emplace_back(p.var->value.size(), 0.0f);
      v_.emplace_back(p.var->value.size(), 0.0f);
    }
  }

  void step(UNet<S>& net) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& ps = net.params();
    if (ps.size() != m_.size()) throw ConfigError("optimizer state does not match the network");
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& node = *ps[k].var;
      if (node.grad.empty()) continue;
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const double g = static_cast<double>(node.grad[i]);
        m_[k][i] = static_cast<float>(cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g);
        v_[k][i] = static_cast<float>(cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g * g);
        const double mh = m_[k][i] / bc1, vh = v_[k][i] / bc2;
        node.value[i] = static_cast<S>(node.value[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// checkpoints: <name>.json (architecture, metadata, tensor index, sha256)
// and <name>.bin (little-endian float32 weights, then Adam moments)
// ---------------------------------------------------------------------------

namespace detail {

inline void append_f32(std::vector<std::byte>& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::byte>((u >> (8 * b)) & 0xFF));
}

inline float read_f32(const std::vector<char>& buf, std::size_t& pos) {
  if (pos + 4 > buf.size()) throw FormatError("checkpoint payload is truncated");
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
  pos += 4;
  return std::bit_cast<float>(u);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& stem, const UNet<float>& net, const Adam<float>* opt,
                            const json& meta) {
  std::vector<std::byte> bytes;
  json tensors = json::array();
  for (const auto& p : net.params()) {
    const Shape s = p.var->shape;
    tensors.push_back({{"name", p.name}, {"shape", {s.n, s.c, s.h, s.w}}});
    for (float f : p.var->value) detail::append_f32(bytes, f);
  }
  if (opt) {
    auto& o = const_cast<Adam<float>&>(*opt);
    for (const auto& m : o.first_moments())
      for (float f : m) detail::append_f32(bytes, f);
    for (const auto& v : o.second_moments())
      for (float f : v) detail::append_f32(bytes, f);
  }
  std::filesystem::create_directories(stem.parent_path().empty() ? "." : stem.parent_path());
  const auto bin = std::filesystem::path(stem.string() + ".bin");
  {
    std::ofstream f(bin, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + bin.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  json head = {{"format", "pcct-checkpoint-1"},
               {"architecture", to_json(net.config())},
               {"tensors", tensors},
               {"has_optimizer_state", opt != nullptr},
               {"optimizer_steps", opt ? opt->steps() : 0},
               {"payload_sha256", sha256_hex(std::span<const std::byte>(bytes))},
               {"meta", meta}};
  if (opt) {
    head["adam"] = {{"lr", opt->config().lr},
                    {"beta1", opt->config().beta1},
                    {"beta2", opt->config().beta2},
                    {"eps", opt->config().eps}};
  }
  write_json(std::filesystem::path(stem.string() + ".json"), head);
}

struct LoadedCheckpoint {
  UNetConfig architecture;
  json meta;
  bool has_optimizer_state = false;
  std::int64_t optimizer_steps = 0;
  std::vector<float> weights;
  std::vector<float> moments;  // m then v, flat
};

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& stem) {
  const auto jpath = std::filesystem::path(stem.string() + ".json");
  const auto bin = std::filesystem::path(stem.string() + ".bin");
  if (!std::filesystem::exists(jpath) || !std::filesystem::exists(bin)) {
    throw FormatError("checkpoint '" + stem.string() + "' not found (.json/.bin)");
  }
  json head = read_json(jpath);
  if (head.value("format", "") != "pcct-checkpoint-1") throw FormatError(jpath.string() + ": unknown checkpoint format");
  std::ifstream f(bin, std::ios::binary);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (sha256_hex(std::as_bytes(std::span<const char>(buf))) != head.at("payload_sha256").get<std::string>()) {
    throw FormatError(bin.string() + ": checksum mismatch");
  }
  LoadedCheckpoint c;
  c.architecture = unet_config_from_json(head.at("architecture"), "architecture");
  c.meta = head.value("meta", json::object());
  c.has_optimizer_state = head.value("has_optimizer_state", false);
  c.optimizer_steps = head.value("optimizer_steps", std::int64_t{0});
  std::size_t total = 0;
  for (const auto& t : head.at("tensors")) {
    std::size_t n = 1;
    for (int d : t.at("shape")) n *= static_cast<std::size_t>(d);
    total += n;
  }
  std::size_t pos = 0;
  c.weights.resize(total);
  for (auto& w : c.weights) w = detail::read_f32(buf, pos);
  if (c.has_optimizer_state) {
    c.moments.resize(2 * total);
    for (auto& m : c.moments) m = detail::read_f32(buf, pos);
  }
  if (pos != buf.size()) throw FormatError(bin.string() + ": payload size does not match the tensor index");
  return c;
}

/// Rebuilds the network (and optionally the optimizer state) from disk.
inline UNet<float> load_network(const LoadedCheckpoint& c) {
  UNet<float> net(c.architecture, 0);
  std::size_t pos = 0;
  for (auto& p : net.params())
    for (auto& v : p.var->value) v = c.weights.at(pos++);
  if (pos != c.weights.size()) throw FormatError("checkpoint weights do not match the architecture");
  return net;
}

inline void restore_optimizer(const LoadedCheckpoint& c, Adam<float>& opt) {
  if (!c.has_optimizer_state) throw FormatError("checkpoint has no optimizer state");
  std::size_t pos = 0;
  for (auto& m : opt.first_moments())
    for (auto& x : m) x = c.moments.at(pos++);
  for (auto& v : opt.second_moments())
    for (auto& x : v) x = c.moments.at(pos++);
  opt.set_steps(c.optimizer_steps);
}

/// Loss history as CSV (iteration,loss).
inline void write_loss_history(const std::filesystem::path& path, const std::vector<double>& loss) {
  std::string s = "iteration,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) {
    std::ostringstream o;
    o.precision(9);
    o << (i + 1) << "," << loss[i] << "\n";
    s += o.str();
  }
  pcct::detail::write_text(path, s);
}

/// Centered moving average with a window clipped at the ends.
inline std::vector<double> smooth(const std::vector<double>& x, int window) {
  std::vector<double> out(x.size());
  const int half = window / 2;
  for (int i = 0; i < static_cast<int>(x.size()); ++i) {
    const int a = std::max(0, i - half), b = std::min(static_cast<int>(x.size()) - 1, i + half);
    double s = 0;
    for (int k = a; k <= b; ++k) s += x[k];
    out[i] = s / (b - a + 1);
  }
  return out;
}

}  // namespace pcct::nn
