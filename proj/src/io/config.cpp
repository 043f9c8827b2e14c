#include "safe/io/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "safe/error.hpp"

namespace safe::io {
namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

using VT = ValueType;

std::vector<KeySpec> build_schema() {
  return {
      {"seed", VT::Int, std::int64_t{0}, "root seed for every random stream"},

      {"encoder.token_size", VT::Int, std::int64_t{8}, "tokenizer kernel = stride, pixels"},
      {"encoder.embed_dim", VT::Int, std::int64_t{192}, "feature dimension d_f"},
      {"encoder.depth", VT::Int, std::int64_t{6}, "number of transformer blocks"},
      {"encoder.heads", VT::Int, std::int64_t{3}, "attention heads"},
      {"encoder.mlp_ratio", VT::Int, std::int64_t{4}, "MLP hidden width / d_f"},
      {"encoder.in_channels", VT::Int, std::int64_t{1}, "1 or 4 polarization channels"},

      {"head.layers", VT::Int, std::int64_t{3}, "linear layers in the projection head"},
      {"head.hidden", VT::Int, std::int64_t{512}, "projection head hidden width"},
      {"head.out_dim", VT::Int, std::int64_t{192}, "projection dimension d_g"},

      {"objective.prototypes", VT::Int, std::int64_t{256}, "prototype count n"},
      {"objective.tau_student", VT::Real, 0.1, "student temperature"},
      {"objective.tau_teacher", VT::Real, 0.04, "teacher temperature"},
      {"objective.lambda", VT::Real, 1.0, "mean-entropy weight"},
      {"objective.entropy_sign", VT::Real, -1.0, "sign of lambda*R in the minimized loss"},

      {"augment.q_sub", VT::Real, 0.5, "probability a local view is a sub-aperture view"},
      {"augment.shift_a", VT::Real, 0.0, "log-amplitude shift lower bound"},
      {"augment.shift_b", VT::Real, 0.3, "log-amplitude shift upper bound"},
      {"augment.n_local", VT::Int, std::int64_t{3}, "local student views"},
      {"augment.n_global", VT::Int, std::int64_t{2}, "global student views"},
      {"augment.global_size", VT::Int, std::int64_t{64}, "global crop size"},
      {"augment.local_size", VT::Int, std::int64_t{32}, "local crop size"},
      {"augment.subaperture_rho", VT::Real, 0.32, "kept bandwidth fraction"},
      {"augment.recenter", VT::Bool, false, "recenter spectrum on its centroid"},
      {"augment.mask_p", VT::Real, 0.3, "student token masking fraction"},

      {"despeckle.window", VT::Int, std::int64_t{5}, "boxcar window (odd)"},
      {"despeckle.command", VT::String, std::string{}, "external despeckler: cmd with {in} {out}"},

      {"train.batch_size", VT::Int, std::int64_t{64}, "samples per step"},
      {"train.epochs", VT::Int, std::int64_t{30}, "epochs"},
      {"train.max_steps", VT::Int, std::int64_t{0}, "stop after this many steps (0 = no cap)"},
      {"train.lr", VT::Real, 1e-3, "peak learning rate"},
      {"train.lr_final", VT::Real, 1e-6, "learning rate at the end of cosine decay"},
      {"train.warmup_epochs", VT::Int, std::int64_t{10}, "linear warmup epochs"},
      {"train.wd_start", VT::Real, 0.04, "weight decay at step 0"},
      {"train.wd_end", VT::Real, 0.4, "weight decay at the last step"},
      {"train.momentum_start", VT::Real, 0.9995, "teacher EMA momentum at step 0"},
      {"train.momentum_end", VT::Real, 1.0, "teacher EMA momentum at the last step"},
      {"train.beta1", VT::Real, 0.9, "AdamW beta1"},
      {"train.beta2", VT::Real, 0.999, "AdamW beta2"},
      {"train.eps", VT::Real, 1e-8, "AdamW epsilon"},
      {"train.grad_clip", VT::Real, 3.0, "global gradient norm clip (0 disables)"},
      {"train.checkpoint_every", VT::Int, std::int64_t{10}, "epochs between checkpoints"},

      {"probe.feature", VT::String, std::string{"z"}, "z or s (prototype scores)"},
      {"probe.method", VT::String, std::string{"knn"}, "knn or linear"},
      {"probe.k", VT::Int, std::int64_t{1}, "k-NN neighbours"},
      {"probe.trials", VT::Int, std::int64_t{10}, "few-shot trials"},
      {"probe.labels_per_class", VT::Int, std::int64_t{5}, "few-shot labels per class"},
      {"probe.linear_epochs", VT::Int, std::int64_t{300}, "linear probe epochs"},
      {"probe.linear_lr", VT::Real, 3e-3, "linear probe learning rate"},

      {"seg.reduce_dim", VT::Int, std::int64_t{64}, "channels after the 1x1 reduction"},
      {"seg.classes", VT::Int, std::int64_t{3}, "segmentation classes"},
      {"seg.stride", VT::Int, std::int64_t{32}, "feature grid stride"},
      {"seg.patch_small", VT::Int, std::int64_t{16}, "smallest patch size"},
      {"seg.patch_mid", VT::Int, std::int64_t{32}, "middle patch size"},
      {"seg.patch_large", VT::Int, std::int64_t{64}, "largest patch size"},
      {"seg.epochs", VT::Int, std::int64_t{100}, "head training epochs"},
      {"seg.lr", VT::Real, 3.125e-5, "initial head learning rate"},
      {"seg.decay_epoch1", VT::Int, std::int64_t{40}, "first x0.1 decay epoch"},
      {"seg.decay_epoch2", VT::Int, std::int64_t{80}, "second x0.1 decay epoch"},
      {"seg.weight_decay", VT::Real, 0.01, "AdamW weight decay for the head"},
      {"seg.train_fraction", VT::Real, 0.75, "share of scenes used for training"},

      {"detect.threshold", VT::Real, 0.8, "cosine threshold"},
      {"detect.patch", VT::Int, std::int64_t{64}, "patch size"},
      {"detect.stride", VT::Int, std::int64_t{4}, "grid stride"},

      {"visualize.patch", VT::Int, std::int64_t{64}, "patch size"},
      {"visualize.stride", VT::Int, std::int64_t{16}, "grid stride"},
      {"visualize.reducer", VT::String, std::string{"pca"}, "pca or external"},
      {"visualize.command", VT::String, std::string{}, "external reducer: cmd with {in} {out}"},
  };
}

const KeySpec* find_spec(const std::string& key) {
  const auto& s = RunConfig::schema();
  auto it = std::find_if(s.begin(), s.end(), [&](const KeySpec& k) { return k.key == key; });
  return it == s.end() ? nullptr : &*it;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::Config, "line " + std::to_string(line_no) + ": expected key=value");
    }
    auto key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) fail(ErrorKind::Config, "line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), trim(std::string_view(line).substr(eq + 1)));
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ConfigValue parse_value(ValueType type, const std::string& key, const std::string& text) {
  auto mismatch = [&](const char* what) -> Error {
    return Error(ErrorKind::TypeMismatch, key + ": expected " + what + ", got '" + text + "'");
  };
  switch (type) {
    case ValueType::Int: {
      std::int64_t v{};
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) throw mismatch("integer");
      return v;
    }
    case ValueType::Real: {
      double v{};
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) throw mismatch("number");
      return v;
    }
    case ValueType::Bool:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw mismatch("boolean");
    case ValueType::String:
      return text;
  }
  throw mismatch("value");
}

std::string format_value(const ConfigValue& value) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return v;
        } else if constexpr (std::is_same_v<T, double>) {
          char buf[64];
          auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
          return std::string(buf, p);
        } else {
          return std::to_string(v);
        }
      },
      value);
}

const std::vector<KeySpec>& RunConfig::schema() {
  static const std::vector<KeySpec> s = build_schema();
  return s;
}

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto* spec = find_spec(key);
  if (!spec) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  values_[key] = parse_value(spec->type, key, value);
}

void RunConfig::set_value(const std::string& key, ConfigValue value) {
  const auto* spec = find_spec(key);
  if (!spec) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  if (value.index() != spec->default_value.index()) {
    fail(ErrorKind::TypeMismatch, key + ": wrong value type");
  }
  values_[key] = std::move(value);
}

bool RunConfig::has_key(const std::string& key) const { return values_.count(key) > 0; }

const ConfigValue& RunConfig::lookup(const std::string& key, ValueType type) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  if (find_spec(key)->type != type) fail(ErrorKind::TypeMismatch, key + ": wrong accessor type");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  return std::get<std::int64_t>(lookup(key, ValueType::Int));
}
double RunConfig::get_real(const std::string& key) const {
  return std::get<double>(lookup(key, ValueType::Real));
}
bool RunConfig::get_bool(const std::string& key) const {
  return std::get<bool>(lookup(key, ValueType::Bool));
}
const std::string& RunConfig::get_string(const std::string& key) const {
  return std::get<std::string>(lookup(key, ValueType::String));
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + format_value(v) + "\n";
  return out;
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  for (const auto& [k, v] : parse_key_values(text)) cfg.set(k, v);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text_file(path));
}

}  // namespace safe::io
