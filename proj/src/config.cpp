#include "dualmod/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "dualmod/error.hpp"

namespace dualmod {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

Extent3 parse_extent(const std::string& key, const std::string& text) {
  std::vector<int> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(parse_number<int>(key, trim(item)));
  if (parts.size() == 1) parts = {parts[0], parts[0], parts[0]};
  if (parts.size() != 3) throw ConfigError(key + ": expected D,H,W or a single extent");
  return {parts[0], parts[1], parts[2]};
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename V>
void assign(V& target, const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<V, bool>) {
    target = parse_bool(key, text);
  } else if constexpr (std::is_arithmetic_v<V>) {
    target = parse_number<V>(key, text);
  } else if constexpr (std::is_same_v<V, Extent3>) {
    target = parse_extent(key, text);
  } else if constexpr (std::is_same_v<V, NormalizeMode>) {
    target = parse_normalize_mode(text);
  } else {
    target = text;
  }
}

template <typename V>
std::string render(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<V>) {
    return format_double(v);
  } else if constexpr (std::is_arithmetic_v<V>) {
    return std::to_string(v);
  } else if constexpr (std::is_same_v<V, Extent3>) {
    return std::to_string(v.d) + "," + std::to_string(v.h) + "," + std::to_string(v.w);
  } else if constexpr (std::is_same_v<V, NormalizeMode>) {
    return v == NormalizeMode::window ? "window" : "minmax";
  } else {
    return v;
  }
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// `access` is a generic lambda returning a reference to the member.
template <typename Access>
Field bind(std::string key, Access access) {
  Field f;
  f.key = key;
  f.set = [key, access](ExperimentConfig& c, const std::string& text) { assign(access(c), key, text); };
  f.get = [access](const ExperimentConfig& c) { return render(access(c)); };
  return f;
}

#define DUALMOD_FIELD(key, member) bind(key, [](auto& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DUALMOD_FIELD("data.manifest", data.manifest),
      DUALMOD_FIELD("data.labeled_fraction", data.labeled_fraction),
      DUALMOD_FIELD("data.val_count", data.val_count),
      DUALMOD_FIELD("data.test_count", data.test_count),
      DUALMOD_FIELD("data.split_seed", data.split_seed),
      DUALMOD_FIELD("data.patch_shape", data.patch_shape),
      DUALMOD_FIELD("data.normalize", data.normalize),
      DUALMOD_FIELD("data.ct_window_level", data.ct_window_level),
      DUALMOD_FIELD("data.ct_window_width", data.ct_window_width),
      DUALMOD_FIELD("data.crop_nonzero", data.crop_nonzero),

      DUALMOD_FIELD("synthetic.count", synthetic.count),
      DUALMOD_FIELD("synthetic.seed", synthetic.seed),
      DUALMOD_FIELD("synthetic.shape", synthetic.spec.shape),
      DUALMOD_FIELD("synthetic.num_blobs", synthetic.spec.num_blobs),
      DUALMOD_FIELD("synthetic.noise_sigma", synthetic.spec.noise_sigma),
      DUALMOD_FIELD("synthetic.contrast_a", synthetic.spec.contrast_a),
      DUALMOD_FIELD("synthetic.contrast_b", synthetic.spec.contrast_b),
      DUALMOD_FIELD("synthetic.num_decoys", synthetic.spec.num_decoys),

      DUALMOD_FIELD("network.base_channels", network.base_channels),
      DUALMOD_FIELD("network.num_stages", network.num_stages),
      DUALMOD_FIELD("network.num_classes", network.num_classes),
      DUALMOD_FIELD("network.mmf_enabled", network.mmf_enabled),
      DUALMOD_FIELD("network.mae_enabled", network.mae_enabled),
      DUALMOD_FIELD("network.dropout_rate", network.dropout_rate),
      DUALMOD_FIELD("network.mae_kernel_small", network.mae_kernel_small),
      DUALMOD_FIELD("network.mae_kernel_large", network.mae_kernel_large),

      DUALMOD_FIELD("losses.alpha", losses.alpha),
      DUALMOD_FIELD("losses.alpha_rampup_iters", losses.alpha_rampup_iters),
      DUALMOD_FIELD("losses.dice_epsilon", losses.dice_epsilon),

      DUALMOD_FIELD("trainer.max_iters", trainer.max_iters),
      DUALMOD_FIELD("trainer.batch_size", trainer.batch_size),
      DUALMOD_FIELD("trainer.labeled_per_batch", trainer.labeled_per_batch),
      DUALMOD_FIELD("trainer.lr_initial", trainer.lr_initial),
      DUALMOD_FIELD("trainer.lr_power", trainer.lr_power),
      DUALMOD_FIELD("trainer.momentum", trainer.momentum),
      DUALMOD_FIELD("trainer.weight_decay", trainer.weight_decay),
      DUALMOD_FIELD("trainer.eval_every", trainer.eval_every),
      DUALMOD_FIELD("trainer.checkpoint_every", trainer.checkpoint_every),
      DUALMOD_FIELD("trainer.seed", trainer.seed),
      DUALMOD_FIELD("trainer.mcml_enabled", trainer.mcml_enabled),

      DUALMOD_FIELD("check_grad.step", check_grad.step),
      DUALMOD_FIELD("check_grad.tolerance", check_grad.tolerance),
      DUALMOD_FIELD("check_grad.entries_per_tensor", check_grad.entries_per_tensor),
      DUALMOD_FIELD("check_grad.patch_shape", check_grad.patch_shape),
      DUALMOD_FIELD("check_grad.zero_fusion", check_grad.zero_fusion),
      DUALMOD_FIELD("check_grad.seed", check_grad.seed),
  };
  return table;
}

#undef DUALMOD_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(cfg, trim(value));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void ExperimentConfig::validate() const {
  network.validate();
  synthetic.spec.validate();
  if (synthetic.count < 1) throw ConfigError("synthetic.count must be >= 1");
  if (!(data.labeled_fraction > 0.0 && data.labeled_fraction <= 1.0))
    throw ConfigError("data.labeled_fraction must be in (0, 1]");
  if (data.val_count < 0 || data.test_count < 0) throw ConfigError("holdout counts must be >= 0");
  const auto& p = data.patch_shape;
  const int div = network.spatial_divisor();
  if (p.d < 1 || p.h < 1 || p.w < 1 || p.d % div || p.h % div || p.w % div)
    throw ConfigError("data.patch_shape must be positive and divisible by " + std::to_string(div));
  const auto& g = check_grad.patch_shape;
  if (g.d < 1 || g.h < 1 || g.w < 1 || g.d % div || g.h % div || g.w % div)
    throw ConfigError("check_grad.patch_shape must be positive and divisible by " + std::to_string(div));
  if (!(data.ct_window_width > 0.0)) throw ConfigError("data.ct_window_width must be positive");
  if (!(losses.alpha >= 0.0)) throw ConfigError("losses.alpha must be >= 0");
  if (losses.alpha_rampup_iters < 0) throw ConfigError("losses.alpha_rampup_iters must be >= 0");
  if (!(losses.dice_epsilon > 0.0)) throw ConfigError("losses.dice_epsilon must be positive");
  const auto& t = trainer;
  if (t.max_iters < 1) throw ConfigError("trainer.max_iters must be >= 1");
  if (t.batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
  if (t.labeled_per_batch < 1 || t.labeled_per_batch > t.batch_size)
    throw ConfigError("trainer.labeled_per_batch must be in [1, batch_size]");
  if (!(t.lr_initial > 0.0)) throw ConfigError("trainer.lr_initial must be positive");
  if (!(t.lr_power >= 0.0)) throw ConfigError("trainer.lr_power must be >= 0");
  if (!(t.momentum >= 0.0 && t.momentum < 1.0)) throw ConfigError("trainer.momentum must be in [0, 1)");
  if (!(t.weight_decay >= 0.0)) throw ConfigError("trainer.weight_decay must be >= 0");
  if (t.eval_every < 0 || t.checkpoint_every < 0) throw ConfigError("trainer intervals must be >= 0");
  if (!(check_grad.step > 0.0) || !(check_grad.tolerance > 0.0) || check_grad.entries_per_tensor < 1)
    throw ConfigError("check_grad step, tolerance and entries_per_tensor must be positive");
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << f.key.substr(dot + 1) << " = " << f.get(*this) << '\n';
  }
  return out.str();
}

std::uint64_t ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (section.empty()) throw ConfigError(where + "key '" + key + "' outside of a section");
    try {
      set_config_value(cfg, section + "." + key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    set_config_value(cfg, trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

}  // namespace dualmod
