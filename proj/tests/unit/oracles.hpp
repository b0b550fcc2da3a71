#pragma once

// Brute-force reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

namespace art::oracle {

inline bool all_tied(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

/// Pair enumeration: (C - D) / sqrt((C + D + Ta)(C + D + Tb)) where Ta counts
/// pairs tied only in a and Tb pairs tied only in b.
inline double kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
  std::int64_t c = 0, d = 0, ta = 0, tb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) continue;
      if (da == 0) {
        ++ta;
      } else if (db == 0) {
        ++tb;
      } else if ((da > 0) == (db > 0)) {
        ++c;
      } else {
        ++d;
      }
    }
  return static_cast<double>(c - d) / std::sqrt(static_cast<double>(c + d + ta) * static_cast<double>(c + d + tb));
}

/// Top-k by repeated selection of the max remaining value, lowest index first.
inline std::set<std::int64_t> topk_set(const std::vector<double>& v, std::int64_t k) {
  std::set<std::int64_t> chosen;
  while (static_cast<std::int64_t>(chosen.size()) < k) {
    std::int64_t best = -1;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(v.size()); ++i) {
      if (chosen.count(i)) continue;
      if (best < 0 || v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    }
    chosen.insert(best);
  }
  return chosen;
}

inline double topk_intersection(const std::vector<double>& a, const std::vector<double>& b, std::int64_t k) {
  const auto sa = topk_set(a, k), sb = topk_set(b, k);
  std::int64_t common = 0;
  for (auto i : sa) common += sb.count(i);
  return static_cast<double>(common) / static_cast<double>(k);
}

/// Box IoU by enumerating the pixels of the joint extent. Boxes are inclusive
/// (x0, y0, x1, y1).
inline double box_iou(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1) {
  std::int64_t inter = 0, uni = 0;
  for (int y = std::min(ay0, by0); y <= std::max(ay1, by1); ++y)
    for (int x = std::min(ax0, bx0); x <= std::max(ax1, bx1); ++x) {
      const bool in_a = x >= ax0 && x <= ax1 && y >= ay0 && y <= ay1;
      const bool in_b = x >= bx0 && x <= bx1 && y >= by0 && y <= by1;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace art::oracle
