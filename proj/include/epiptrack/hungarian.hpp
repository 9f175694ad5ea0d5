#pragma once

// Minimum-cost rectangular assignment (shortest augmenting paths with
// potentials, O(n^2 m)).

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace epiptrack {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  std::vector<int> unmatched_rows;
  std::vector<int> unmatched_cols;
  double total = 0.0;
};

/// Solves the assignment over `cost` ([n, m]). Entries that are not finite
/// or exceed `gate` are forbidden; rows and columns left without an allowed
/// partner are reported unmatched.
inline Assignment hungarian(const Eigen::MatrixXd& cost, double gate = std::numeric_limits<double>::infinity()) {
  const int n_rows = static_cast<int>(cost.rows()), n_cols = static_cast<int>(cost.cols());
  Assignment out;
  if (n_rows == 0 || n_cols == 0) {
    for (int i = 0; i < n_rows; ++i) out.unmatched_rows.push_back(i);
    for (int j = 0; j < n_cols; ++j) out.unmatched_cols.push_back(j);
    return out;
  }
  // forbidden entries get a sentinel larger than any feasible total
  double max_allowed = 0.0;
  for (int i = 0; i < n_rows; ++i)
    for (int j = 0; j < n_cols; ++j)
      if (std::isfinite(cost(i, j)) && cost(i, j) <= gate) max_allowed = std::max(max_allowed, std::abs(cost(i, j)));
  const double sentinel = (max_allowed + 1.0) * (n_rows + n_cols + 1);

  const bool transpose = n_rows > n_cols;
  const int n = transpose ? n_cols : n_rows;  // n <= m
  const int m = transpose ? n_rows : n_cols;
  auto a = [&](int i, int j) {
    const double c = transpose ? cost(j, i) : cost(i, j);
    return (std::isfinite(c) && c <= gate) ? c : sentinel;
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_match(n_rows, -1), col_match(n_cols, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    int r = p[j] - 1, c = j - 1;
    if (transpose) std::swap(r, c);
    if (a(transpose ? c : r, transpose ? r : c) >= sentinel) continue;
    row_match[r] = c;
    col_match[c] = r;
  }
  for (int i = 0; i < n_rows; ++i) {
    if (row_match[i] >= 0) {
      out.pairs.emplace_back(i, row_match[i]);
      out.total += cost(i, row_match[i]);
    } else {
      out.unmatched_rows.push_back(i);
    }
  }
  for (int j = 0; j < n_cols; ++j)
    if (col_match[j] < 0) out.unmatched_cols.push_back(j);
  return out;
}

}  // namespace epiptrack
