// Copyright 2026 the cmkd authors
// Knowledge-distillation losses: ground-truth + softened-teacher KL blend,
// with single, multi-loss and ensemble teacher combination modes.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <vector>

#include "cmkd/features.hpp"

namespace cmkd::models {
class Model;
}

namespace cmkd::distill {

using features::Task;
using Vec = std::vector<double>;

enum class TeacherMode { kSingle, kMultiLoss, kEnsemble };

struct KDSpec {
  double lambda = 0.5;       // weight on the ground-truth loss
  double temperature = 1.0;  // applied to teacher logits only
  TeacherMode teacher_mode = TeacherMode::kSingle;
  bool consistent = true;     // teacher sees the student's augmented input
  bool separate_head = false; // distillation loss reads a dedicated head
  Task task = Task::kMultiLabel;
  std::vector<const models::Model*> teachers;  // frozen, not owned

  std::size_t num_teachers() const { return teachers.size(); }
};

struct LossBreakdown {
  double total = 0.0;
  double ground_truth = 0.0;
  double distill = 0.0;  // combined distillation term (zero when lambda == 1)
  std::vector<double> per_teacher;
};

/// Gradient of the total loss with respect to the student logits. When a
/// separate distillation head is active, `d_dis_logits` carries the
/// distillation component and `d_logits` only the ground-truth component.
struct KDGrad {
  Vec d_logits;
  Vec d_dis_logits;  // empty unless separate head
};

Vec softmax(const Vec& z);
Vec sigmoid(const Vec& z);

/// Post-activation class distribution with its logs, kept together so that
/// identical teacher/student logits cancel exactly in the KL sum.
struct ProbLog {
  Vec p;
  Vec logp;
  Vec log1mp;  // multi-label only
};

ProbLog activation_dist(const Vec& logits, double tau, Task task);

/// KL(teacher || student); categorical for single-label, mean per-class
/// Bernoulli for multi-label.
double kl_divergence(const ProbLog& teacher, const ProbLog& student, Task task);

/// Cross-entropy of softmax (single-label) or mean BCE of sigmoid
/// (multi-label) against `target`.
double ground_truth_loss(const Vec& logits, const Vec& target, Task task);
Vec ground_truth_loss_grad(const Vec& logits, const Vec& target, Task task);

/// KL(act(z_t / tau) || act(z_s)); temperature on the teacher side only and
/// no tau^2 rescaling.
double distillation_loss(const Vec& student_logits, const Vec& teacher_logits,
                         double tau, Task task);
Vec distillation_loss_grad(const Vec& student_logits, const Vec& teacher_logits,
                           double tau, Task task);

/// Total loss: lambda * L_g + (1-lambda) * combined distillation term.
/// multi_loss weights each teacher (1-lambda)/n; ensemble averages teacher
/// post-activation predictions and applies one KL against the average.
LossBreakdown kd_total_loss(const Vec& student_logits, const Vec& target,
                            const KDSpec& kd, const std::vector<Vec>& teacher_logits,
                            const Vec* student_dis_logits = nullptr);

KDGrad kd_total_loss_grad(const Vec& student_logits, const Vec& target,
                          const KDSpec& kd, const std::vector<Vec>& teacher_logits,
                          const Vec* student_dis_logits = nullptr);

/// Frozen-teacher forward: consistent teaching feeds the augmented tensor,
/// conventional teaching the clean one. Always eval mode.
Vec teacher_predict(const models::Model& teacher, const features::Spectrogram& clean,
                    const features::Spectrogram& augmented, bool consistent);

}  // namespace cmkd::distill
