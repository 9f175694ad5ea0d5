#pragma once

// Constant-velocity Kalman filter in (cx, cy, aspect, h) box space.

#include <algorithm>

#include <Eigen/Dense>

#include "epiptrack/datamodel.hpp"

namespace epiptrack {

using Vector8 = Eigen::Matrix<double, 8, 1>;
using Matrix8 = Eigen::Matrix<double, 8, 8>;
using Vector4 = Eigen::Matrix<double, 4, 1>;
using Matrix4 = Eigen::Matrix<double, 4, 4>;
using Matrix48 = Eigen::Matrix<double, 4, 8>;

struct KalmanState {
  Vector8 mean = Vector8::Zero();
  Matrix8 cov = Matrix8::Identity();
};

inline Vector4 to_xyah(const Observation& o) {
  const double w = o.x2 - o.x1, h = o.y2 - o.y1;
  return {o.x1 + w / 2, o.y1 + h / 2, w / h, h};
}

inline Observation from_xyah(const Vector4& m) {
  Observation o;
  const double h = m(3), w = m(2) * h;
  o.x1 = m(0) - w / 2;
  o.y1 = m(1) - h / 2;
  o.x2 = o.x1 + w;
  o.y2 = o.y1 + h;
  return o;
}

class KalmanFilter {
 public:
  double std_weight_position = 1.0 / 20;
  double std_weight_velocity = 1.0 / 160;

  KalmanFilter() {
    motion_.setIdentity();
    for (int i = 0; i < 4; ++i) motion_(i, 4 + i) = 1.0;
    update_.setZero();
    for (int i = 0; i < 4; ++i) update_(i, i) = 1.0;
  }

  KalmanState initiate(const Vector4& z) const {
    KalmanState s;
    s.mean.head<4>() = z;
    s.mean.tail<4>().setZero();
    const double h = z(3), p = std_weight_position, v = std_weight_velocity;
    Vector8 std;
    std << 2 * p * h, 2 * p * h, 1e-2, 2 * p * h, 10 * v * h, 10 * v * h, 1e-5, 10 * v * h;
    s.cov = std.array().square().matrix().asDiagonal();
    return s;
  }

  void predict(KalmanState& s) const {
    const double h = s.mean(3), p = std_weight_position, v = std_weight_velocity;
    Vector8 std;
    std << p * h, p * h, 1e-2, p * h, v * h, v * h, 1e-5, v * h;
    Matrix8 q = std.array().square().matrix().asDiagonal();
    s.mean = motion_ * s.mean;
    s.cov = motion_ * s.cov * motion_.transpose() + q;
    symmetrize(s.cov);
  }

  void update(KalmanState& s, const Vector4& z) const {
    const double h = s.mean(3), p = std_weight_position;
    Vector4 std;
    std << p * h, p * h, 1e-1, p * h;
    Matrix4 r = std.array().square().matrix().asDiagonal();
    Matrix4 proj_cov = update_ * s.cov * update_.transpose() + r;
    Eigen::Matrix<double, 8, 4> pht = s.cov * update_.transpose();
    Eigen::Matrix<double, 8, 4> gain = proj_cov.llt().solve(pht.transpose()).transpose();
    s.mean += gain * (z - update_ * s.mean);
    s.cov -= gain * proj_cov * gain.transpose();
    symmetrize(s.cov);
    s.mean(3) = std::max(s.mean(3), 1e-3);
  }

  static Observation box(const KalmanState& s) { return from_xyah(s.mean.head<4>()); }

 private:
  Matrix8 motion_;
  Matrix48 update_;

  static void symmetrize(Matrix8& c) { c = 0.5 * (c + c.transpose()).eval(); }
};

}  // namespace epiptrack
