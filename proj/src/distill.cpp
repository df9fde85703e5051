// Copyright 2026 the cmkd authors
//
// Licensed under the Apache License, Version 2.0

#include "cmkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cmkd/models.hpp"

namespace cmkd::distill {
namespace {

void check_finite(const Vec& z, const char* what) {
  for (double v : z)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("non-finite ") + what);
}

double softplus(double x) {
  // log(1 + e^x), stable on both tails
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

Vec softmax(const Vec& z) {
  Vec p(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

Vec sigmoid(const Vec& z) {
  Vec p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-z[i]));
  return p;
}

ProbLog activation_dist(const Vec& logits, double tau, Task task) {
  if (tau <= 0.0) throw std::invalid_argument("temperature must be positive");
  check_finite(logits, "logits");
  Vec z = logits;
  if (tau != 1.0)
    for (auto& v : z) v /= tau;

  ProbLog out;
  if (task == Task::kSingleLabel) {
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    Vec e(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      e[i] = std::exp(z[i] - m);
      sum += e[i];
    }
    const double logsum = m + std::log(sum);
    out.p.resize(z.size());
    out.logp.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      out.p[i] = e[i] / sum;
      out.logp[i] = z[i] - logsum;
    }
  } else {
    out.p.resize(z.size());
    out.logp.resize(z.size());
    out.log1mp.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      out.p[i] = 1.0 / (1.0 + std::exp(-z[i]));
      out.logp[i] = -softplus(-z[i]);
      out.log1mp[i] = -softplus(z[i]);
    }
  }
  return out;
}

double kl_divergence(const ProbLog& teacher, const ProbLog& student, Task task) {
  if (teacher.p.size() != student.p.size())
    throw std::invalid_argument("KL dimension mismatch");
  double kl = 0.0;
  if (task == Task::kSingleLabel) {
    for (std::size_t i = 0; i < teacher.p.size(); ++i)
      if (teacher.p[i] > 0.0) kl += teacher.p[i] * (teacher.logp[i] - student.logp[i]);
  } else {
    for (std::size_t i = 0; i < teacher.p.size(); ++i) {
      double term = 0.0;
      if (teacher.p[i] > 0.0) term += teacher.p[i] * (teacher.logp[i] - student.logp[i]);
      const double q = 1.0 - teacher.p[i];
      if (q > 0.0) term += q * (teacher.log1mp[i] - student.log1mp[i]);
      kl += term;
    }
    kl /= static_cast<double>(teacher.p.size());
  }
  return kl;
}

double ground_truth_loss(const Vec& logits, const Vec& target, Task task) {
  if (logits.size() != target.size())
    throw std::invalid_argument("loss dimension mismatch");
  check_finite(logits, "logits");
  const auto dist = activation_dist(logits, 1.0, task);
  double loss = 0.0;
  if (task == Task::kSingleLabel) {
    for (std::size_t i = 0; i < logits.size(); ++i)
      loss -= target[i] * dist.logp[i];
  } else {
    for (std::size_t i = 0; i < logits.size(); ++i)
      loss -= target[i] * dist.logp[i] + (1.0 - target[i]) * dist.log1mp[i];
    loss /= static_cast<double>(logits.size());
  }
  return loss;
}

Vec ground_truth_loss_grad(const Vec& logits, const Vec& target, Task task) {
  const auto dist = activation_dist(logits, 1.0, task);
  Vec g(logits.size());
  if (task == Task::kSingleLabel) {
    double tsum = 0.0;
    for (double t : target) tsum += t;
    for (std::size_t i = 0; i < logits.size(); ++i) g[i] = dist.p[i] * tsum - target[i];
  } else {
    const double inv_c = 1.0 / static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) g[i] = (dist.p[i] - target[i]) * inv_c;
  }
  return g;
}

double distillation_loss(const Vec& student_logits, const Vec& teacher_logits,
                         double tau, Task task) {
  return kl_divergence(activation_dist(teacher_logits, tau, task),
                       activation_dist(student_logits, 1.0, task), task);
}

namespace {

// Gradient of KL(teacher || act(z_s)) with respect to z_s, given the teacher
// distribution. Softmax: p_s * sum(p_t) - p_t; sigmoid: (p_s - p_t) / C.
Vec kl_grad_from_teacher(const Vec& teacher_p, const Vec& student_logits, Task task) {
  const auto s = activation_dist(student_logits, 1.0, task);
  Vec g(student_logits.size());
  if (task == Task::kSingleLabel) {
    double tsum = 0.0;
    for (double p : teacher_p) tsum += p;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = s.p[i] * tsum - teacher_p[i];
  } else {
    const double inv_c = 1.0 / static_cast<double>(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (s.p[i] - teacher_p[i]) * inv_c;
  }
  return g;
}

ProbLog ensemble_distribution(const std::vector<Vec>& teacher_logits, double tau, Task task) {
  const std::size_t n = teacher_logits.size();
  ProbLog mean;
  for (std::size_t t = 0; t < n; ++t) {
    const auto d = activation_dist(teacher_logits[t], tau, task);
    if (t == 0) {
      mean.p = d.p;
    } else {
      for (std::size_t i = 0; i < mean.p.size(); ++i) mean.p[i] += d.p[i];
    }
  }
  for (auto& v : mean.p) v /= static_cast<double>(n);
  mean.logp.resize(mean.p.size());
  if (task == Task::kMultiLabel) mean.log1mp.resize(mean.p.size());
  for (std::size_t i = 0; i < mean.p.size(); ++i) {
    mean.logp[i] = mean.p[i] > 0.0 ? std::log(mean.p[i]) : 0.0;
    if (task == Task::kMultiLabel)
      mean.log1mp[i] = mean.p[i] < 1.0 ? std::log(1.0 - mean.p[i]) : 0.0;
  }
  return mean;
}

void validate(const KDSpec& kd, std::size_t n_teachers) {
  if (kd.lambda < 0.0 || kd.lambda > 1.0)
    throw std::invalid_argument("lambda must be in [0, 1]");
  if (kd.temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
  if (kd.lambda < 1.0 && n_teachers == 0)
    throw std::invalid_argument("lambda < 1 requires at least one teacher");
  if (kd.teacher_mode == TeacherMode::kSingle && n_teachers > 1)
    throw std::invalid_argument("single teacher mode with multiple teachers");
}

}  // namespace

LossBreakdown kd_total_loss(const Vec& student_logits, const Vec& target,
                            const KDSpec& kd, const std::vector<Vec>& teacher_logits,
                            const Vec* student_dis_logits) {
  validate(kd, teacher_logits.size());
  LossBreakdown out;
  out.ground_truth = ground_truth_loss(student_logits, target, kd.task);
  if (kd.lambda == 1.0 || teacher_logits.empty()) {
    out.total = out.ground_truth;
    return out;
  }

  const Vec& zd = (kd.separate_head && student_dis_logits) ? *student_dis_logits
                                                           : student_logits;
  const auto student = activation_dist(zd, 1.0, kd.task);
  if (kd.teacher_mode == TeacherMode::kEnsemble) {
    const auto mean = ensemble_distribution(teacher_logits, kd.temperature, kd.task);
    out.distill = kl_divergence(mean, student, kd.task);
    out.per_teacher = {out.distill};
  } else {
    double sum = 0.0;
    for (const auto& zt : teacher_logits) {
      const double d =
          kl_divergence(activation_dist(zt, kd.temperature, kd.task), student, kd.task);
      out.per_teacher.push_back(d);
      sum += d;
    }
    out.distill = sum / static_cast<double>(teacher_logits.size());
  }
  out.total = kd.lambda * out.ground_truth + (1.0 - kd.lambda) * out.distill;
  return out;
}

KDGrad kd_total_loss_grad(const Vec& student_logits, const Vec& target,
                          const KDSpec& kd, const std::vector<Vec>& teacher_logits,
                          const Vec* student_dis_logits) {
  validate(kd, teacher_logits.size());
  KDGrad out;
  out.d_logits = ground_truth_loss_grad(student_logits, target, kd.task);
  if (kd.lambda == 1.0 || teacher_logits.empty()) return out;

  for (auto& g : out.d_logits) g *= kd.lambda;

  const Vec& zd = (kd.separate_head && student_dis_logits) ? *student_dis_logits
                                                           : student_logits;
  Vec dd(zd.size(), 0.0);
  if (kd.teacher_mode == TeacherMode::kEnsemble) {
    const auto mean = ensemble_distribution(teacher_logits, kd.temperature, kd.task);
    dd = kl_grad_from_teacher(mean.p, zd, kd.task);
  } else {
    const double w = 1.0 / static_cast<double>(teacher_logits.size());
    for (const auto& zt : teacher_logits) {
      const auto t = activation_dist(zt, kd.temperature, kd.task);
      const auto g = kl_grad_from_teacher(t.p, zd, kd.task);
      for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += w * g[i];
    }
  }
  const double w_d = 1.0 - kd.lambda;
  if (kd.separate_head && student_dis_logits) {
    out.d_dis_logits.assign(dd.size(), 0.0);
    for (std::size_t i = 0; i < dd.size(); ++i) out.d_dis_logits[i] = w_d * dd[i];
  } else {
    for (std::size_t i = 0; i < dd.size(); ++i) out.d_logits[i] += w_d * dd[i];
  }
  return out;
}

Vec distillation_loss_grad(const Vec& student_logits, const Vec& teacher_logits,
                           double tau, Task task) {
  const auto t = activation_dist(teacher_logits, tau, task);
  return kl_grad_from_teacher(t.p, student_logits, task);
}

Vec teacher_predict(const models::Model& teacher, const features::Spectrogram& clean,
                    const features::Spectrogram& augmented, bool consistent) {
  const auto& input = consistent ? augmented : clean;
  const auto out = teacher.forward_one(input, models::Mode::kEval, false);
  Vec z(out.logits.begin(), out.logits.end());
  return z;
}

}  // namespace cmkd::distill
