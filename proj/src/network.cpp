#include "dualmod/network.hpp"

#include <cmath>

#include "dualmod/rng.hpp"

namespace dualmod {

namespace {

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : seed_(seed) {}

  ConvParams<T> conv(const std::string& name, int in, int out, int k) const {
    const double fan_in = static_cast<double>(in) * k * k * k;
    return {normal(name + ".weight", Shape{out, in, k, k, k}, std::sqrt(2.0 / fan_in)), zeros(Shape{out})};
  }

  NormParams<T> norm(int channels) const {
    return {ag::Var<T>::leaf(Tensor<T>(Shape{channels}, T(1)), true), zeros(Shape{channels})};
  }

  LinearParams<T> fc(const std::string& name, int in, int out) const {
    return {normal(name + ".weight", Shape{out, in}, std::sqrt(1.0 / in)), zeros(Shape{out})};
  }

  ConvBlockParams<T> block(const std::string& name, int in, int out) const {
    return {conv(name + ".conv1", in, out, 3), norm(out), conv(name + ".conv2", out, out, 3), norm(out)};
  }

 private:
  ag::Var<T> normal(const std::string& name, Shape shape, double stddev) const {
    Tensor<T> t(std::move(shape));
    CounterRng rng{mix_seed({seed_, name_hash(name)})};
    for (auto& v : t.data) v = static_cast<T>(stddev * standard_normal(rng));
    return ag::Var<T>::leaf(std::move(t), true);
  }

  static ag::Var<T> zeros(Shape shape) { return ag::Var<T>::leaf(Tensor<T>(std::move(shape)), true); }

  std::uint64_t seed_;
};

template <typename T>
BranchParams<T> make_branch(const Initializer<T>& init, const NetworkConfig& cfg, const std::string& prefix) {
  BranchParams<T> b;
  for (int s = 0; s < cfg.num_stages; ++s) {
    const int in = s == 0 ? cfg.in_channels : cfg.stage_channels(s - 1);
    b.encoder.push_back(init.block(prefix + ".enc" + std::to_string(s), in, cfg.stage_channels(s)));
  }
  for (int s = cfg.num_stages - 2; s >= 0; --s) {
    const int in = cfg.stage_channels(s + 1) + cfg.stage_channels(s);
    b.decoder.push_back(init.block(prefix + ".dec" + std::to_string(s), in, cfg.stage_channels(s)));
  }
  b.head = init.conv(prefix + ".head", cfg.stage_channels(0), cfg.num_classes, 1);
  return b;
}

template <typename T>
MAEBranchParams<T> make_mae_branch(const Initializer<T>& init, const NetworkConfig& cfg, const std::string& prefix) {
  const int c = cfg.stage_channels(cfg.num_stages - 1);
  return {init.conv(prefix + ".psi_small", c, c, cfg.mae_kernel_small),
          init.conv(prefix + ".psi_large", c, c, cfg.mae_kernel_large), init.fc(prefix + ".fc", c, c)};
}

template <typename T>
void push(std::vector<NamedParameter<T>>& out, const std::string& name, const ConvParams<T>& p) {
  out.push_back({name + ".weight", p.weight});
  out.push_back({name + ".bias", p.bias});
}

template <typename T>
void push(std::vector<NamedParameter<T>>& out, const std::string& name, const ConvBlockParams<T>& p) {
  push(out, name + ".conv1", p.conv1);
  out.push_back({name + ".norm1.gamma", p.norm1.gamma});
  out.push_back({name + ".norm1.beta", p.norm1.beta});
  push(out, name + ".conv2", p.conv2);
  out.push_back({name + ".norm2.gamma", p.norm2.gamma});
  out.push_back({name + ".norm2.beta", p.norm2.beta});
}

template <typename T>
void push(std::vector<NamedParameter<T>>& out, const std::string& name, const BranchParams<T>& b,
          const NetworkConfig& cfg) {
  for (std::size_t s = 0; s < b.encoder.size(); ++s) push(out, name + ".enc" + std::to_string(s), b.encoder[s]);
  for (std::size_t i = 0; i < b.decoder.size(); ++i)
    push(out, name + ".dec" + std::to_string(cfg.num_stages - 2 - static_cast<int>(i)), b.decoder[i]);
  push(out, name + ".head", b.head);
}

template <typename T>
void push(std::vector<NamedParameter<T>>& out, const std::string& name, const MAEBranchParams<T>& p) {
  push(out, name + ".psi_small", p.psi_small);
  push(out, name + ".psi_large", p.psi_large);
  out.push_back({name + ".fc.weight", p.fc.weight});
  out.push_back({name + ".fc.bias", p.fc.bias});
}

template <typename T>
ag::Var<T> conv(const ag::Var<T>& x, const ConvParams<T>& p) {
  return ag::conv3d(x, p.weight, p.bias);
}

template <typename T>
ag::Var<T> conv_block(const ag::Var<T>& x, const ConvBlockParams<T>& p) {
  auto h = ag::relu(ag::instance_norm(conv(x, p.conv1), p.norm1.gamma, p.norm1.beta));
  return ag::relu(ag::instance_norm(conv(h, p.conv2), p.norm2.gamma, p.norm2.beta));
}

template <typename T>
ag::Var<T> decode(const BranchParams<T>& b, const std::vector<ag::Var<T>>& skips, ag::Var<T> bottom,
                  const NetworkConfig& cfg, bool train_mode, std::uint64_t dropout_seed) {
  auto cur = std::move(bottom);
  for (std::size_t i = 0; i < b.decoder.size(); ++i) {
    const std::size_t level = skips.size() - 2 - i;
    cur = conv_block(ag::concat_channels(ag::upsample2(cur), skips[level]), b.decoder[i]);
  }
  if (train_mode) cur = ag::dropout(cur, cfg.dropout_rate, dropout_seed);
  return ag::softmax_channels(conv(cur, b.head));
}

}  // namespace

void NetworkConfig::validate() const {
  if (in_channels < 1) throw ConfigError("network.in_channels must be >= 1");
  if (base_channels < 1) throw ConfigError("network.base_channels must be >= 1");
  if (num_stages < 1 || num_stages > 8) throw ConfigError("network.num_stages must be in [1, 8]");
  if (num_classes < 2) throw ConfigError("network.num_classes must be >= 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("network.dropout_rate must be in [0, 1)");
  if (mae_kernel_small < 1 || mae_kernel_small % 2 == 0 || mae_kernel_large < 1 || mae_kernel_large % 2 == 0)
    throw ConfigError("network.mae_kernel_small/large must be odd and positive");
}

template <typename T>
DualBranchModel<T> DualBranchModel<T>::create(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Initializer<T> init(seed);
  DualBranchModel m;
  m.cfg_ = cfg;
  m.branch_a = make_branch(init, cfg, "a");
  m.branch_b = make_branch(init, cfg, "b");
  if (cfg.mmf_enabled)
    for (int s = 0; s < cfg.num_stages; ++s) {
      const int c = cfg.stage_channels(s);
      const std::string name = "fusion" + std::to_string(s);
      m.fusion.push_back({init.conv(name + ".conv1", 2 * c, c, 3), init.conv(name + ".conv2", c, c, 3)});
    }
  if (cfg.mae_enabled) m.mae = MAEParams<T>{make_mae_branch(init, cfg, "mae.a"), make_mae_branch(init, cfg, "mae.b")};
  return m;
}

template <typename T>
std::vector<NamedParameter<T>> DualBranchModel<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  push(out, "a", branch_a, cfg_);
  push(out, "b", branch_b, cfg_);
  for (std::size_t s = 0; s < fusion.size(); ++s) {
    push(out, "fusion" + std::to_string(s) + ".conv1", fusion[s].conv1);
    push(out, "fusion" + std::to_string(s) + ".conv2", fusion[s].conv2);
  }
  if (mae) {
    push(out, "mae.a", mae->a);
    push(out, "mae.b", mae->b);
  }
  return out;
}

template <typename T>
ag::Var<T> mmf_fuse(const ag::Var<T>& f_a, const ag::Var<T>& f_b, const FusionLayerParams<T>& params) {
  require_same_shape(f_a.shape(), f_b.shape(), "mmf_fuse");
  auto h = ag::relu(conv(ag::concat_channels(f_a, f_b), params.conv1));
  return ag::sigmoid(conv(h, params.conv2));
}

template <typename T>
ag::Var<T> inject_fused(const ag::Var<T>& f, const ag::Var<T>& fused) {
  require_same_shape(f.shape(), fused.shape(), "inject_fused");
  return ag::add(f, fused);
}

template <typename T>
ModalityWeights<T> mae_weights(const ag::Var<T>& f_a, const ag::Var<T>& f_b, const MAEParams<T>& params) {
  require_same_shape(f_a.shape(), f_b.shape(), "mae_weights");
  if (f_a.shape().rank() != 5 || static_cast<std::size_t>(f_a.shape()[1]) != params.a.fc.bias.size())
    throw DataError("mae_weights: feature channels " + f_a.shape().str() + " do not match attention parameters");
  auto logits = [](const ag::Var<T>& f, const MAEBranchParams<T>& p) {
    auto mixed = ag::add(conv(f, p.psi_small), conv(f, p.psi_large));
    return ag::linear(ag::global_avg_pool(mixed), p.fc.weight, p.fc.bias);
  };
  auto z_a = logits(f_a, params.a);
  auto z_b = logits(f_b, params.b);
  // Two-way softmax over the modality axis: exp(z_a) / (exp(z_a) + exp(z_b)) = sigmoid(z_a - z_b).
  return {ag::sigmoid(ag::sub(z_a, z_b)), ag::sigmoid(ag::sub(z_b, z_a))};
}

template <typename T>
ag::Var<T> mae_enhance(const ag::Var<T>& f, const ag::Var<T>& w) {
  return ag::scale_channels(f, w, T(2));
}

template <typename T>
DualOutput<T> forward_dual(const DualBranchModel<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                           bool train_mode, std::uint64_t dropout_seed) {
  const NetworkConfig& cfg = model.config();
  require_same_shape(x_a.shape(), x_b.shape(), "forward_dual");
  const Shape& s = x_a.shape();
  if (s.rank() != 5 || s[1] != cfg.in_channels)
    throw DataError("forward_dual: expected input (N, " + std::to_string(cfg.in_channels) + ", D, H, W), got " +
                    s.str());
  const int div = cfg.spatial_divisor();
  if (s[2] % div || s[3] % div || s[4] % div)
    throw DataError("forward_dual: spatial extents " + s.str() + " must be divisible by " + std::to_string(div));

  std::vector<ag::Var<T>> skips_a, skips_b;
  ag::Var<T> fa = x_a, fb = x_b;
  for (int stage = 0; stage < cfg.num_stages; ++stage) {
    if (stage > 0) {
      fa = ag::avg_pool2(fa);
      fb = ag::avg_pool2(fb);
    }
    fa = conv_block(fa, model.branch_a.encoder[stage]);
    fb = conv_block(fb, model.branch_b.encoder[stage]);
    if (cfg.mmf_enabled) {
      auto fused = mmf_fuse(fa, fb, model.fusion[stage]);
      fa = inject_fused(fa, fused);
      fb = inject_fused(fb, fused);
    }
    skips_a.push_back(fa);
    skips_b.push_back(fb);
  }
  if (cfg.mae_enabled) {
    auto w = mae_weights(fa, fb, *model.mae);
    fa = mae_enhance(fa, w.w_a);
    fb = mae_enhance(fb, w.w_b);
  }
  return {decode(model.branch_a, skips_a, fa, cfg, train_mode, mix_seed({dropout_seed, 0xa})),
          decode(model.branch_b, skips_b, fb, cfg, train_mode, mix_seed({dropout_seed, 0xb}))};
}

template <typename T>
std::size_t param_count(const DualBranchModel<T>& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.var.size();
  return n;
}

#define DUALMOD_INSTANTIATE(T)                                                                                 \
  template class DualBranchModel<T>;                                                                           \
  template ag::Var<T> mmf_fuse(const ag::Var<T>&, const ag::Var<T>&, const FusionLayerParams<T>&);             \
  template ag::Var<T> inject_fused(const ag::Var<T>&, const ag::Var<T>&);                                      \
  template ModalityWeights<T> mae_weights(const ag::Var<T>&, const ag::Var<T>&, const MAEParams<T>&);          \
  template ag::Var<T> mae_enhance(const ag::Var<T>&, const ag::Var<T>&);                                       \
  template DualOutput<T> forward_dual(const DualBranchModel<T>&, const ag::Var<T>&, const ag::Var<T>&, bool,   \
                                      std::uint64_t);                                                          \
  template std::size_t param_count(const DualBranchModel<T>&);

DUALMOD_INSTANTIATE(float)
DUALMOD_INSTANTIATE(double)

#undef DUALMOD_INSTANTIATE

}  // namespace dualmod
