#include "safe/objective/objective.hpp"

#include <algorithm>
#include <cmath>

#include "safe/error.hpp"
#include "safe/kernels/kernels.hpp"
#include "safe/nn/ops.hpp"

namespace safe::objective {

namespace {

constexpr double kLogFloor = 1e-300;

Tensor as_rows(const Tensor& x) {
  if (x.ndim() == 1) return x.reshaped({1, x.size()});
  require(x.ndim() == 2, "expected a vector or a matrix, got " + shape_string(x.shape()), ErrorKind::ShapeMismatch);
  return x;
}

std::vector<double> column_norms(const Tensor& Q) {
  const std::size_t d = Q.rows(), n = Q.cols();
  std::vector<double> norms(n, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) norms[c] += Q(r, c) * Q(r, c);
  for (std::size_t c = 0; c < n; ++c) {
    norms[c] = std::sqrt(norms[c]);
    require(norms[c] > 0.0, "prototype column " + std::to_string(c) + " is zero", ErrorKind::Numerical);
  }
  return norms;
}

struct Normalized {
  Tensor x;                  // unit rows
  std::vector<double> norm;  // original norms
};

Normalized normalize_rows(const Tensor& h) {
  Normalized out{h, std::vector<double>(h.rows())};
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < h.cols(); ++c) s += h(r, c) * h(r, c);
    s = std::sqrt(s);
    require(s > 0.0, "projection vector has zero norm", ErrorKind::Numerical);
    out.norm[r] = s;
    for (std::size_t c = 0; c < h.cols(); ++c) out.x(r, c) /= s;
  }
  return out;
}

Tensor normalize_columns(const Tensor& Q, const std::vector<double>& norms) {
  Tensor out = Q;
  for (std::size_t r = 0; r < Q.rows(); ++r)
    for (std::size_t c = 0; c < Q.cols(); ++c) out(r, c) /= norms[c];
  return out;
}

void check_distributions(const Tensor& teacher_p, const Tensor& student_p) {
  require(teacher_p.ndim() == 2 && student_p.ndim() == 2 && teacher_p.cols() == student_p.cols(),
          "distribution length mismatch", ErrorKind::ShapeMismatch);
  require(teacher_p.rows() >= 1 && student_p.rows() % teacher_p.rows() == 0 && student_p.rows() > 0,
          "student rows must be a multiple of the batch size", ErrorKind::ShapeMismatch);
}

}  // namespace

HeadConfig HeadConfig::from_config(const io::RunConfig& config) {
  HeadConfig c;
  c.layers = static_cast<std::size_t>(config.get_int("head.layers"));
  c.in_dim = static_cast<std::size_t>(config.get_int("encoder.embed_dim"));
  c.hidden = static_cast<std::size_t>(config.get_int("head.hidden"));
  c.out_dim = static_cast<std::size_t>(config.get_int("head.out_dim"));
  c.validate();
  return c;
}

void HeadConfig::validate() const {
  require(layers >= 1, "head.layers must be at least 1", ErrorKind::Config);
  require(in_dim >= 1 && hidden >= 1 && out_dim >= 1, "head dimensions must be positive", ErrorKind::Config);
}

nn::ParamTable init_head(const HeadConfig& cfg, const SeedStream& seed) {
  cfg.validate();
  SeedStream rng = seed.derive("head");
  nn::ParamTable p;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? cfg.in_dim : cfg.hidden;
    const std::size_t out = l + 1 == cfg.layers ? cfg.out_dim : cfg.hidden;
    const std::string pre = "head.fc" + std::to_string(l) + ".";
    p.add(pre + "weight", nn::truncated_normal({in, out}, 0.02, rng));
    p.add(pre + "bias", Tensor({out}));
  }
  return p;
}

nn::Var project(nn::Tape& t, nn::Var z, const std::vector<nn::Var>& head, const HeadConfig& cfg) {
  require(head.size() == 2 * cfg.layers, "projection head parameter count mismatch", ErrorKind::ShapeMismatch);
  require(t.value(z).ndim() == 2 && t.value(z).cols() == cfg.in_dim,
          "projection head expects {r," + std::to_string(cfg.in_dim) + "}, got " + shape_string(t.value(z).shape()),
          ErrorKind::ShapeMismatch);
  nn::Var h = z;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = nn::linear(t, h, head[2 * l], head[2 * l + 1]);
    if (l + 1 < cfg.layers) h = nn::gelu(t, h);
  }
  return h;
}

Tensor project(const Tensor& z, const nn::ParamTable& head, const HeadConfig& cfg) {
  nn::Tape t;
  const auto params = nn::bind(t, head);
  const auto h = project(t, t.constant(as_rows(z)), params, cfg);
  Tensor out = t.value(h);
  return z.ndim() == 1 ? out.reshaped({cfg.out_dim}) : out;
}

Tensor init_prototypes(std::size_t d_g, std::size_t n, const SeedStream& seed) {
  require(d_g >= 1 && n >= 1, "prototype bank dimensions must be positive");
  SeedStream rng = seed.derive("prototypes");
  Tensor Q({d_g, n});
  for (std::size_t c = 0; c < n; ++c) {
    double s = 0.0;
    do {
      s = 0.0;
      for (std::size_t r = 0; r < d_g; ++r) {
        Q(r, c) = rng.normal();
        s += Q(r, c) * Q(r, c);
      }
    } while (s == 0.0);
    s = std::sqrt(s);
    for (std::size_t r = 0; r < d_g; ++r) Q(r, c) /= s;
  }
  return Q;
}

Tensor prototype_scores(const Tensor& h, const Tensor& Q) {
  const Tensor rows = as_rows(h);
  require(Q.ndim() == 2 && Q.rows() == rows.cols(),
          "prototype bank " + shape_string(Q.shape()) + " does not match h " + shape_string(h.shape()),
          ErrorKind::ShapeMismatch);
  const auto hn = normalize_rows(rows);
  const Tensor qn = normalize_columns(Q, column_norms(Q));
  Tensor s({rows.rows(), Q.cols()});
  kernels::gemm(kernels::Op::N, kernels::Op::N, rows.rows(), Q.cols(), Q.rows(), hn.x.data(), qn.data(),
                s.data(), false);
  for (auto& v : s.storage()) v = std::clamp(v, -1.0, 1.0);
  return s;
}

Tensor tempered_softmax(const Tensor& s, double tau) {
  require(tau > 0.0, "temperature must be positive");
  Tensor p = as_rows(s);
  const std::size_t n = p.cols();
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double* row = p.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = std::exp((row[i] - mx) / tau);
      sum += row[i];
    }
    for (std::size_t i = 0; i < n; ++i) row[i] /= sum;
  }
  return s.ndim() == 1 ? p.reshaped({n}) : p;
}

double loss_cross_entropy(const Tensor& teacher_p, const Tensor& student_p) {
  check_distributions(teacher_p, student_p);
  const std::size_t b = teacher_p.rows(), views = student_p.rows() / b, n = teacher_p.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < student_p.rows(); ++r) {
    const std::size_t i = r / views;
    for (std::size_t l = 0; l < n; ++l)
      total -= teacher_p(i, l) * std::log(std::max(student_p(r, l), kLogFloor));
  }
  return total / static_cast<double>(student_p.rows());
}

double loss_mean_entropy(const Tensor& student_p) {
  require(student_p.ndim() == 2 && student_p.rows() > 0, "mean entropy needs at least one distribution");
  const std::size_t n = student_p.cols();
  std::vector<double> mean(n, 0.0);
  for (std::size_t r = 0; r < student_p.rows(); ++r)
    for (std::size_t l = 0; l < n; ++l) mean[l] += student_p(r, l);
  double h = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    const double p = mean[l] / static_cast<double>(student_p.rows());
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

ObjectiveParams ObjectiveParams::from_config(const io::RunConfig& config) {
  ObjectiveParams p;
  p.tau_student = config.get_real("objective.tau_student");
  p.tau_teacher = config.get_real("objective.tau_teacher");
  p.lambda = config.get_real("objective.lambda");
  p.entropy_sign = config.get_real("objective.entropy_sign");
  require(p.tau_student > 0.0 && p.tau_teacher > 0.0, "temperatures must be positive", ErrorKind::Config);
  return p;
}

ObjectiveResult evaluate(const Tensor& teacher_h, const Tensor& student_h, const Tensor& Q,
                         const ObjectiveParams& params) {
  const Tensor th = as_rows(teacher_h), sh = as_rows(student_h);
  ObjectiveResult res;
  res.teacher_p = tempered_softmax(prototype_scores(th, Q), params.tau_teacher);

  const auto qnorm = column_norms(Q);
  const Tensor qn = normalize_columns(Q, qnorm);
  const auto hn = normalize_rows(sh);
  const std::size_t N = sh.rows(), n = Q.cols(), d = Q.rows();
  Tensor s({N, n});
  kernels::gemm(kernels::Op::N, kernels::Op::N, N, n, d, hn.x.data(), qn.data(), s.data(), false);
  res.student_p = tempered_softmax(s, params.tau_student);
  check_distributions(res.teacher_p, res.student_p);

  res.cross_entropy = loss_cross_entropy(res.teacher_p, res.student_p);
  res.mean_entropy = loss_mean_entropy(res.student_p);
  const double w = params.entropy_sign * params.lambda;
  res.total = res.cross_entropy + w * res.mean_entropy;

  // dL/ds per student row.
  const std::size_t views = N / th.rows();
  const double inv_n = 1.0 / static_cast<double>(N);
  std::vector<double> log_mean(n, 0.0);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t l = 0; l < n; ++l) log_mean[l] += res.student_p(r, l);
  for (auto& v : log_mean) v = std::log(std::max(v * inv_n, kLogFloor));

  Tensor ds({N, n});
  for (std::size_t r = 0; r < N; ++r) {
    const std::size_t i = r / views;
    double avg_log = 0.0;
    for (std::size_t l = 0; l < n; ++l) avg_log += res.student_p(r, l) * log_mean[l];
    for (std::size_t l = 0; l < n; ++l) {
      const double p = res.student_p(r, l);
      const double d_ce = (p - res.teacher_p(i, l)) * inv_n;
      const double d_r = -inv_n * p * (log_mean[l] - avg_log);
      ds(r, l) = (d_ce + w * d_r) / params.tau_student;
    }
  }

  // s = hn qn: gradients w.r.t. the unit vectors.
  Tensor dhn({N, d}), dqn({d, n});
  kernels::gemm(kernels::Op::N, kernels::Op::T, N, d, n, ds.data(), qn.data(), dhn.data(), false);
  kernels::gemm(kernels::Op::T, kernels::Op::N, d, n, N, hn.x.data(), ds.data(), dqn.data(), false);

  res.grad_student_h = Tensor({N, d});
  for (std::size_t r = 0; r < N; ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += hn.x(r, c) * dhn(r, c);
    for (std::size_t c = 0; c < d; ++c)
      res.grad_student_h(r, c) = (dhn(r, c) - hn.x(r, c) * dot) / hn.norm[r];
  }
  res.grad_prototypes = Tensor({d, n});
  for (std::size_t c = 0; c < n; ++c) {
    double dot = 0.0;
    for (std::size_t r = 0; r < d; ++r) dot += qn(r, c) * dqn(r, c);
    for (std::size_t r = 0; r < d; ++r) res.grad_prototypes(r, c) = (dqn(r, c) - qn(r, c) * dot) / qnorm[c];
  }
  if (student_h.ndim() == 1) res.grad_student_h = res.grad_student_h.reshaped(student_h.shape());
  return res;
}

void ema_update(nn::ParamTable& teacher, const nn::ParamTable& student, double m) {
  require(m >= 0.0 && m <= 1.0, "EMA momentum must lie in [0,1]");
  require(teacher.same_layout(student), "teacher and student parameter layouts differ", ErrorKind::ShapeMismatch);
  const double a = 1.0 - m;
  for (std::size_t i = 0; i < teacher.count(); ++i) {
    auto& t = teacher[i].storage();
    const auto& s = student[i].values();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + a * s[j];
  }
}

}  // namespace safe::objective
