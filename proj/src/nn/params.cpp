#include "safe/nn/params.hpp"

#include <cmath>
#include <fstream>

#include "safe/error.hpp"
#include "safe/io/config.hpp"
#include "safe/io/tensor_file.hpp"

namespace safe::nn {

std::size_t ParamTable::add(std::string name, Tensor value) {
  require(!contains(name), "duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParamTable::index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  fail(ErrorKind::ShapeMismatch, "missing parameter " + name);
}

bool ParamTable::contains(const std::string& name) const {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

bool ParamTable::same_layout(const ParamTable& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].shape() != other.values_[i].shape()) return false;
  return true;
}

ParamTable ParamTable::zeros_like() const {
  ParamTable z;
  for (std::size_t i = 0; i < values_.size(); ++i) z.add(names_[i], Tensor(values_[i].shape()));
  return z;
}

void ParamTable::set_zero() {
  for (auto& v : values_) v.fill(0.0);
}

std::size_t ParamTable::element_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParamTable::append(const ParamTable& other, const std::string& prefix) {
  for (std::size_t i = 0; i < other.count(); ++i) add(prefix + other.name(i), other[i]);
}

std::vector<Var> bind(Tape& tape, const ParamTable& params, ParamTable* grads) {
  if (grads) require(grads->same_layout(params), "gradient table layout mismatch", ErrorKind::ShapeMismatch);
  std::vector<Var> out;
  out.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i)
    out.push_back(tape.param(params[i], grads ? &(*grads)[i] : nullptr));
  return out;
}

double global_norm(const ParamTable& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.count(); ++i)
    for (double v : t[i].values()) s += v * v;
  return std::sqrt(s);
}

void scale_all(ParamTable& t, double factor) {
  for (std::size_t i = 0; i < t.count(); ++i)
    for (double& v : t[i].values()) v *= factor;
}

Tensor truncated_normal(Shape shape, double std, SeedStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    double x;
    do {
      x = rng.normal();
    } while (std::abs(x) > 2.0);
    v = x * std;
  }
  return t;
}

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, SeedStream& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

void AdamW::init(const ParamTable& params) {
  m_ = params.zeros_like();
  v_ = params.zeros_like();
  t_ = 0;
}

void AdamW::set_state(ParamTable m, ParamTable v, long steps) {
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = steps;
}

void AdamW::step(ParamTable& params, const ParamTable& grads, double lr, double weight_decay) {
  require(params.same_layout(grads) && params.same_layout(m_), "AdamW layout mismatch",
          ErrorKind::ShapeMismatch);
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const double wd = p.ndim() >= 2 ? weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * p[j]);
    }
  }
}

void save_params(const std::filesystem::path& dir, const ParamTable& params,
                 const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / (stem + ".manifest.cfg"), std::ios::trunc);
  if (!manifest) fail(ErrorKind::Io, "cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < params.count(); ++i) {
    manifest << "param." << params.name(i) << "=" << shape_string(params[i].shape()) << "\n";
    io::write_tensor(dir / (stem + "." + params.name(i) + ".saft"), params[i], io::DType::Float64);
  }
}

ParamTable load_params(const std::filesystem::path& dir, const std::string& stem) {
  const auto entries = io::parse_key_values(io::read_text_file(dir / (stem + ".manifest.cfg")));
  ParamTable out;
  for (const auto& [key, shape] : entries) {
    require(key.rfind("param.", 0) == 0, "unexpected manifest key " + key, ErrorKind::Data);
    const std::string name = key.substr(6);
    Tensor t = io::read_numeric(dir / (stem + "." + name + ".saft"));
    require(shape_string(t.shape()) == shape, "parameter " + name + " shape differs from manifest",
            ErrorKind::ShapeMismatch);
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace safe::nn
