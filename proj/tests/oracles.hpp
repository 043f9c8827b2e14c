#pragma once

// Brute-force reference evaluations shared by the unit tests and the
// acceptance runner. Each is written straight from the definition with
// plain loops and no library helpers beyond <cmath>.

#include <cmath>
#include <cstdint>
#include <vector>

#include "safe/nn/params.hpp"
#include "safe/tensor.hpp"

namespace safe::oracle {

/// (1/(b(k-1))) sum_i sum_{j>=2} sum_l -t[i][l] log s[i][j][l].
inline double cross_entropy(const std::vector<std::vector<double>>& teacher,
                            const std::vector<std::vector<std::vector<double>>>& students) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < teacher.size(); ++i)
    for (std::size_t j = 0; j < students[i].size(); ++j) {
      ++count;
      for (std::size_t l = 0; l < teacher[i].size(); ++l) sum += -teacher[i][l] * std::log(students[i][j][l]);
    }
  return sum / static_cast<double>(count);
}

/// -sum_l pbar_l log pbar_l with pbar the mean of all student distributions.
inline double mean_entropy(const std::vector<std::vector<std::vector<double>>>& students) {
  std::vector<double> mean;
  std::size_t count = 0;
  for (const auto& sample : students)
    for (const auto& p : sample) {
      if (mean.empty()) mean.assign(p.size(), 0.0);
      for (std::size_t l = 0; l < p.size(); ++l) mean[l] += p[l];
      ++count;
    }
  double r = 0.0;
  for (double m : mean) {
    const double q = m / static_cast<double>(count);
    if (q > 0.0) r -= q * std::log(q);
  }
  return r;
}

inline std::vector<double> softmax(const std::vector<double>& s, double tau) {
  double z = 0.0;
  std::vector<double> p(s.size());
  for (std::size_t l = 0; l < s.size(); ++l) z += std::exp(s[l] / tau);
  for (std::size_t l = 0; l < s.size(); ++l) p[l] = std::exp(s[l] / tau) / z;
  return p;
}

/// Cosine of row r of h {rows, d} with every column of Q {d, n}.
inline std::vector<double> cosine_scores(const Tensor& h, std::size_t r, const Tensor& Q) {
  const std::size_t d = Q.rows(), n = Q.cols();
  std::vector<double> s(n);
  for (std::size_t l = 0; l < n; ++l) {
    double dot = 0.0, hh = 0.0, qq = 0.0;
    for (std::size_t e = 0; e < d; ++e) {
      dot += h(r, e) * Q(e, l);
      hh += h(r, e) * h(r, e);
      qq += Q(e, l) * Q(e, l);
    }
    s[l] = dot / std::sqrt(hh * qq);
  }
  return s;
}

/// Teacher distributions softmax(cos(teacher_h, Q) / tau_t), one row per sample.
inline std::vector<std::vector<double>> teacher_targets(const Tensor& teacher_h, const Tensor& Q, double tau_t) {
  std::vector<std::vector<double>> t;
  for (std::size_t i = 0; i < teacher_h.rows(); ++i) t.push_back(softmax(cosine_scores(teacher_h, i, Q), tau_t));
  return t;
}

/// L_ce + sign * lambda * R from student projections against fixed teacher
/// targets (the teacher branch carries no gradient).
inline double total_loss(const std::vector<std::vector<double>>& teacher, const Tensor& student_h, const Tensor& Q,
                         double tau_s, double lambda, double sign) {
  const std::size_t b = teacher.size(), views = student_h.rows() / b;
  std::vector<std::vector<std::vector<double>>> s(b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < views; ++j) s[i].push_back(softmax(cosine_scores(student_h, i * views + j, Q), tau_s));
  return cross_entropy(teacher, s) + sign * lambda * mean_entropy(s);
}

struct Metrics {
  double oa, aa, kappa, miou;
};

/// Metrics of a row = truth, column = prediction count matrix, averaging
/// AA and mIoU over classes seen in either truth or prediction.
inline Metrics seg_metrics(const std::vector<std::vector<std::int64_t>>& x) {
  const std::size_t n = x.size();
  double N = 0.0, trace = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) N += double(x[i][j]);
  for (std::size_t i = 0; i < n; ++i) trace += double(x[i][i]);
  Metrics m{};
  m.oa = trace / N;
  double pe = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double truth = 0.0, pred = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      truth += double(x[i][j]);
      pred += double(x[j][i]);
    }
    pe += truth * pred / (N * N);
  }
  m.kappa = pe == 1.0 ? 1.0 : (m.oa - pe) / (1.0 - pe);
  double classes = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double tp = double(x[i][i]), fn = 0.0, fp = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) {
        fn += double(x[i][j]);
        fp += double(x[j][i]);
      }
    if (tp + fn + fp == 0.0) continue;
    classes += 1.0;
    m.aa += tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
    m.miou += tp / (tp + fn + fp);
  }
  m.aa /= classes;
  m.miou /= classes;
  return m;
}

/// Teacher after applying t <- m_s t + (1 - m_s) s_s for each step s.
inline nn::ParamTable ema_trajectory(nn::ParamTable teacher, const std::vector<nn::ParamTable>& students,
                                     const std::vector<double>& momenta) {
  for (std::size_t s = 0; s < students.size(); ++s)
    for (std::size_t p = 0; p < teacher.count(); ++p)
      for (std::size_t e = 0; e < teacher[p].size(); ++e)
        teacher[p][e] = momenta[s] * teacher[p][e] + (1.0 - momenta[s]) * students[s][p][e];
  return teacher;
}

}  // namespace safe::oracle
