#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "safe/io/seed.hpp"
#include "safe/nn/autograd.hpp"
#include "safe/tensor.hpp"

namespace safe::nn {

/// Ordered, named parameter tensors. Two tables with the same names and
/// shapes in the same order have the same layout (teacher/student, grads).
class ParamTable {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t count() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& operator[](std::size_t i) { return values_[i]; }
  const Tensor& operator[](std::size_t i) const { return values_[i]; }

  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name) { return values_[index(name)]; }
  const Tensor& at(const std::string& name) const { return values_[index(name)]; }

  bool same_layout(const ParamTable& other) const;
  ParamTable zeros_like() const;
  void set_zero();
  std::size_t element_count() const;

  /// Table with every entry prefixed, for composing checkpoints.
  void append(const ParamTable& other, const std::string& prefix = "");

  bool operator==(const ParamTable&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Tape leaves for every entry of `params`; gradients go to `grads` if given.
std::vector<Var> bind(Tape& tape, const ParamTable& params, ParamTable* grads = nullptr);

double global_norm(const ParamTable& t);
void scale_all(ParamTable& t, double factor);

// Initialisers.
Tensor truncated_normal(Shape shape, double std, SeedStream& rng);
Tensor uniform_fan_in(Shape shape, std::size_t fan_in, SeedStream& rng);

/// AdamW with decoupled weight decay applied only to tensors of rank >= 2
/// (weights and prototypes; biases and norm affines are not decayed).
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void init(const ParamTable& params);
  void step(ParamTable& params, const ParamTable& grads, double lr, double weight_decay);

  long steps() const { return t_; }
  ParamTable& first_moment() { return m_; }
  ParamTable& second_moment() { return v_; }
  const ParamTable& first_moment() const { return m_; }
  const ParamTable& second_moment() const { return v_; }
  void set_state(ParamTable m, ParamTable v, long steps);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  ParamTable m_, v_;
};

/// Directory of SAFT float64 containers plus `manifest.cfg` listing
/// `param.<name>=<shape>`, preceded by any caller-provided header lines.
void save_params(const std::filesystem::path& dir, const ParamTable& params,
                 const std::string& stem);
ParamTable load_params(const std::filesystem::path& dir, const std::string& stem);

}  // namespace safe::nn
