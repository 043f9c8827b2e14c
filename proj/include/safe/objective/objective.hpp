#pragma once

#include <cstddef>
#include <vector>

#include "safe/io/config.hpp"
#include "safe/io/seed.hpp"
#include "safe/nn/autograd.hpp"
#include "safe/nn/params.hpp"
#include "safe/tensor.hpp"

namespace safe::objective {

/// MLP g: `layers` linear maps with GELU between them.
struct HeadConfig {
  std::size_t layers = 3;
  std::size_t in_dim = 192;
  std::size_t hidden = 512;
  std::size_t out_dim = 192;

  static HeadConfig from_config(const io::RunConfig& config);
  void validate() const;
};

nn::ParamTable init_head(const HeadConfig& cfg, const SeedStream& seed);

/// Records h = g(z) for z {r, in_dim}.
nn::Var project(nn::Tape& t, nn::Var z, const std::vector<nn::Var>& head, const HeadConfig& cfg);
/// h for z {in_dim} or {r, in_dim}; result has the same rank as z.
Tensor project(const Tensor& z, const nn::ParamTable& head, const HeadConfig& cfg);

/// Q as {d_g, n}; each column is a unit-norm Gaussian direction.
Tensor init_prototypes(std::size_t d_g, std::size_t n, const SeedStream& seed);

/// Cosine scores s {r, n} of rows of h {r, d_g} (or a single {d_g}) against the columns of Q.
Tensor prototype_scores(const Tensor& h, const Tensor& Q);

/// Row-wise softmax(s / tau).
Tensor tempered_softmax(const Tensor& s, double tau);

/// teacher_p {b, n}; student_p {b*(k-1), n} with the views of sample i in
/// rows i*(k-1) .. i*(k-1)+k-2.
double loss_cross_entropy(const Tensor& teacher_p, const Tensor& student_p);
/// Entropy of the mean of all rows of student_p.
double loss_mean_entropy(const Tensor& student_p);

struct ObjectiveParams {
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double lambda = 1.0;
  double entropy_sign = -1.0;

  static ObjectiveParams from_config(const io::RunConfig& config);
};

struct ObjectiveResult {
  double cross_entropy = 0.0;
  double mean_entropy = 0.0;
  double total = 0.0;  // cross_entropy + entropy_sign * lambda * mean_entropy
  Tensor teacher_p;
  Tensor student_p;
  Tensor grad_student_h;  // dL/dh, same shape as student_h
  Tensor grad_prototypes; // dL/dQ, same shape as Q
};

/// Full objective with analytic gradients. The teacher branch is constant.
ObjectiveResult evaluate(const Tensor& teacher_h, const Tensor& student_h, const Tensor& Q,
                         const ObjectiveParams& params);

/// teacher <- m * teacher + (1 - m) * student, entry by entry.
void ema_update(nn::ParamTable& teacher, const nn::ParamTable& student, double m);

}  // namespace safe::objective
