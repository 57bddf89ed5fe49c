#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cotfilter/common.hpp"
#include "cotfilter/entropy.hpp"

namespace cotfilter {

enum class SplitStrategy { EntropyGreedy, RandomCuts, EntropyNoGreedy };

inline std::string_view to_string(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::EntropyGreedy: return "greedy";
    case SplitStrategy::RandomCuts: return "random";
    case SplitStrategy::EntropyNoGreedy: return "no-greedy";
  }
  throw std::logic_error("bad SplitStrategy");
}

inline SplitStrategy strategy_from_string(std::string_view s) {
  if (s == "greedy") return SplitStrategy::EntropyGreedy;
  if (s == "random") return SplitStrategy::RandomCuts;
  if (s == "no-greedy") return SplitStrategy::EntropyNoGreedy;
  throw std::invalid_argument("unknown strategy: " + std::string(s));
}

/// Early/middle/late thirds of [0, L), ceil-first: remainder tokens go to
/// the earlier regions.
struct RegionLayout {
  struct Range {
    int lo = 0;
    int hi = 0;
  };
  std::array<Range, 3> ranges{};
};

inline RegionLayout split_regions(int length) {
  if (length < 3)
    throw std::invalid_argument("split_regions: trace shorter than 3 tokens");
  int q = length / 3;
  int rem = length % 3;
  int a = q + (rem >= 1 ? 1 : 0);
  int b = q + (rem >= 2 ? 1 : 0);
  RegionLayout out;
  out.ranges[0] = {0, a};
  out.ranges[1] = {a, a + b};
  out.ranges[2] = {a + b, length};
  return out;
}

/// Per-region segment counts. Always sums to the target N.
struct AllocationPlan {
  std::array<int, 3> s{};
  int n_target = 0;
};

namespace detail {

// Regions ordered by allocation priority: larger fractional remainder
// first, then larger r, then lower index. Remainders are compared as
// integer numerators over the common denominator Σr.
inline std::array<int, 3> allocation_order(const std::array<int, 3>& r, int n,
                                           long long sum) {
  std::array<int, 3> order{0, 1, 2};
  std::array<long long, 3> rem{};
  for (int i = 0; i < 3; ++i)
    rem[static_cast<std::size_t>(i)] =
        (static_cast<long long>(n) * r[static_cast<std::size_t>(i)]) % sum;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    auto xi = static_cast<std::size_t>(x), yi = static_cast<std::size_t>(y);
    if (rem[xi] != rem[yi]) return rem[xi] > rem[yi];
    if (r[xi] != r[yi]) return r[xi] > r[yi];
    return x < y;
  });
  return order;
}

}  // namespace detail

/// Largest-remainder apportionment of N segments across the three regions,
/// proportional to anchor counts r. Regions without anchors get nothing;
/// a region never holds more than r_i + 1 segments (r_i interior splits).
inline AllocationPlan allocate_segments(const std::array<int, 3>& r, int n) {
  if (n < 1) throw std::invalid_argument("allocate_segments: N must be >= 1");
  long long sum = 0;
  long long capacity = 0;
  for (int ri : r) {
    if (ri < 0) throw std::invalid_argument("allocate_segments: negative r");
    sum += ri;
    if (ri > 0) capacity += ri + 1;
  }
  if (sum == 0)
    throw std::invalid_argument("allocate_segments: no anchors in any region");
  if (n > capacity)
    throw std::invalid_argument(
        "allocate_segments: target segments exceed anchor capacity");

  AllocationPlan plan;
  plan.n_target = n;
  int assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    plan.s[i] = static_cast<int>(static_cast<long long>(n) * r[i] / sum);
    assigned += plan.s[i];
  }
  auto order = detail::allocation_order(r, n, sum);
  for (int idx : order) {
    if (assigned >= n) break;
    auto i = static_cast<std::size_t>(idx);
    if (r[i] == 0) continue;
    ++plan.s[i];
    ++assigned;
  }

  // Cap overflow: move surplus units to the region with the most anchors
  // left unused as split points.
  auto unused = [&](std::size_t j) {
    return plan.s[j] == 0 ? r[j] : r[j] - plan.s[j] + 1;
  };
  while (true) {
    int over = -1;
    for (std::size_t i = 0; i < 3; ++i)
      if (plan.s[i] > r[i] + 1) {
        over = static_cast<int>(i);
        break;
      }
    if (over < 0) break;
    int dest = -1;
    for (std::size_t j = 0; j < 3; ++j) {
      if (static_cast<int>(j) == over || r[j] == 0) continue;
      if (plan.s[j] >= r[j] + 1) continue;
      if (dest < 0) {
        dest = static_cast<int>(j);
        continue;
      }
      auto d = static_cast<std::size_t>(dest);
      if (unused(j) > unused(d) ||
          (unused(j) == unused(d) &&
           (r[j] > r[d] || (r[j] == r[d] && j < d))))
        dest = static_cast<int>(j);
    }
    if (dest < 0)
      throw std::invalid_argument(
          "allocate_segments: cannot place segments within anchor capacity");
    --plan.s[static_cast<std::size_t>(over)];
    ++plan.s[static_cast<std::size_t>(dest)];
  }
  return plan;
}

/// Greedy spatially-dispersed selection of s_i - 1 split points from one
/// region's anchors. Initialization {min, max}; each further pick maximizes
/// the sum of distances to the current set, ties resolved by larger
/// min-distance, then lower position.
inline std::vector<int> greedy_splits(const std::vector<int>& anchors, int si,
                                      int region_lo, int region_hi) {
  if (si <= 1) return {};
  int want = si - 1;
  std::vector<int> pool(anchors);
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  if (static_cast<int>(pool.size()) < want)
    throw std::invalid_argument("greedy_splits: insufficient anchors");

  if (want == 1) {
    // Single split: the most central anchor keeps halves balanced.
    double mid = (region_lo + region_hi - 1) / 2.0;
    int best = pool.front();
    double best_d = std::abs(best - mid);
    for (int h : pool) {
      double d = std::abs(h - mid);
      if (d < best_d) {
        best = h;
        best_d = d;
      }
    }
    return {best};
  }

  std::vector<int> chosen{pool.front(), pool.back()};
  while (static_cast<int>(chosen.size()) < want) {
    int best = -1;
    long long best_sum = -1;
    long long best_min = -1;
    for (int h : pool) {
      if (std::find(chosen.begin(), chosen.end(), h) != chosen.end()) continue;
      long long sum = 0;
      long long mind = -1;
      for (int c : chosen) {
        long long d = h > c ? h - c : c - h;
        sum += d;
        if (mind < 0 || d < mind) mind = d;
      }
      if (sum > best_sum || (sum == best_sum && mind > best_min) ||
          (sum == best_sum && mind == best_min && h < best)) {
        best = h;
        best_sum = sum;
        best_min = mind;
      }
    }
    chosen.push_back(best);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

namespace detail {

// Candidate split positions for RandomCuts: strictly inside the region and
// never position 0.
inline std::vector<int> region_interior(int region_lo, int region_hi) {
  std::vector<int> pool;
  for (int p = std::max(region_lo + 1, 1); p <= region_hi - 1; ++p)
    pool.push_back(p);
  return pool;
}

// Deterministic sample of `want` distinct pool members, ascending. Partial
// Fisher-Yates on the raw engine keeps results platform-stable.
inline std::vector<int> draw_distinct(std::vector<int> pool, int want,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int i = 0; i < want; ++i) {
    auto j = i + static_cast<std::size_t>(
                     rng() % (pool.size() - static_cast<std::size_t>(i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(want));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace detail

/// Ablation strategies: RandomCuts ignores anchors and draws from the
/// region interior; EntropyNoGreedy draws uniformly from the anchors.
/// Deterministic given the seed.
inline std::vector<int> variant_splits(const std::vector<int>& anchors, int si,
                                       SplitStrategy strategy,
                                       std::uint64_t seed, int region_lo,
                                       int region_hi) {
  if (strategy == SplitStrategy::EntropyGreedy)
    return greedy_splits(anchors, si, region_lo, region_hi);
  if (si <= 1) return {};
  int want = si - 1;
  std::vector<int> pool;
  if (strategy == SplitStrategy::RandomCuts) {
    pool = detail::region_interior(region_lo, region_hi);
  } else {
    pool = anchors;
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  }
  if (static_cast<int>(pool.size()) < want)
    throw std::invalid_argument(
        "variant_splits: region too small for requested splits");
  return detail::draw_distinct(std::move(pool), want, seed);
}

struct Segment {
  int begin = 0;  // token range [begin, end)
  int end = 0;
  std::string text;
};

/// Final segmentation of one trace. split_positions are token indices where
/// a new segment starts; split_char_offsets are the same boundaries in
/// bytes, so prefixes can be rebuilt from the trace text alone.
struct SegmentPlan {
  std::string sample_id;
  SplitStrategy strategy = SplitStrategy::EntropyGreedy;
  std::vector<int> split_positions;
  std::vector<int> split_char_offsets;
  std::vector<Segment> segments;
  int n_target = 0;
  int n_effective = 0;
  std::vector<std::string> warnings;
};

/// Materializes segments from raw split positions. Out-of-range and
/// duplicate positions are dropped with a warning; a plan that ends up with
/// no splits at all is unsegmentable.
inline SegmentPlan build_segments(const EntropyProfile& profile,
                                  std::vector<int> splits,
                                  SplitStrategy strategy =
                                      SplitStrategy::EntropyGreedy,
                                  int n_target = 0) {
  const int L = profile.length();
  SegmentPlan plan;
  plan.sample_id = profile.sample_id;
  plan.strategy = strategy;

  std::sort(splits.begin(), splits.end());
  for (std::size_t i = 0; i < splits.size(); ++i) {
    int p = splits[i];
    if (p < 1 || p > L - 1) {
      plan.warnings.push_back("dropped out-of-range split " +
                              std::to_string(p));
      continue;
    }
    if (!plan.split_positions.empty() && plan.split_positions.back() == p) {
      plan.warnings.push_back("dropped duplicate split " + std::to_string(p));
      continue;
    }
    plan.split_positions.push_back(p);
  }

  plan.n_effective = static_cast<int>(plan.split_positions.size()) + 1;
  plan.n_target = n_target > 0 ? n_target : plan.n_effective;
  if (plan.n_effective < 2)
    throw UnsegmentableError("sample " + profile.sample_id +
                             ": no valid split positions");

  std::vector<int> offsets(static_cast<std::size_t>(L) + 1, 0);
  for (int t = 0; t < L; ++t)
    offsets[static_cast<std::size_t>(t) + 1] =
        offsets[static_cast<std::size_t>(t)] +
        static_cast<int>(profile.tokens[static_cast<std::size_t>(t)].token.size());

  std::vector<int> bounds{0};
  bounds.insert(bounds.end(), plan.split_positions.begin(),
                plan.split_positions.end());
  bounds.push_back(L);
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    Segment seg;
    seg.begin = bounds[i];
    seg.end = bounds[i + 1];
    for (int t = seg.begin; t < seg.end; ++t)
      seg.text += profile.tokens[static_cast<std::size_t>(t)].token;
    plan.segments.push_back(std::move(seg));
  }
  for (int p : plan.split_positions)
    plan.split_char_offsets.push_back(offsets[static_cast<std::size_t>(p)]);
  return plan;
}

/// Whole segmentation pass for one profile: anchors -> regions ->
/// allocation -> per-region splits -> segments. When allocation parks every
/// region at one segment (zero splits), the minimum-anchor guard re-awards
/// segments, in allocation priority order, to regions that can still absorb
/// them, so the sample stays evaluable whenever any region has an anchor.
inline SegmentPlan segment_trace(const EntropyProfile& profile, int k, int n,
                                 SplitStrategy strategy, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("segment_trace: N must be >= 2");
  if (k < 1) throw std::invalid_argument("segment_trace: K must be >= 1");
  const int L = profile.length();
  std::vector<std::string> warnings;
  if (L < 3)
    throw UnsegmentableError("sample " + profile.sample_id +
                             ": trace too short to segment");

  auto layout = split_regions(L);
  auto high = top_k_positions(profile, k);

  std::array<std::vector<int>, 3> anchors;
  for (int h : high.indices) {
    for (std::size_t i = 0; i < 3; ++i) {
      if (h >= layout.ranges[i].lo && h < layout.ranges[i].hi) {
        anchors[i].push_back(h);
        break;
      }
    }
  }
  std::array<int, 3> r{};
  long long capacity = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    r[i] = static_cast<int>(anchors[i].size());
    if (r[i] > 0) capacity += r[i] + 1;
  }

  int n_used = n;
  if (n_used > capacity) {
    n_used = static_cast<int>(capacity);
    warnings.push_back("target segments clamped to anchor capacity " +
                       std::to_string(n_used));
  }

  auto plan_alloc = allocate_segments(r, n_used);
  auto s = plan_alloc.s;

  auto splits_for = [&](std::size_t i) {
    return variant_splits(
        anchors[i], s[i], strategy,
        derive_seed(profile.sample_id, "segment", i, seed),
        layout.ranges[i].lo, layout.ranges[i].hi);
  };
  auto max_splits = [&](std::size_t i) {
    if (strategy == SplitStrategy::RandomCuts)
      return static_cast<int>(
          detail::region_interior(layout.ranges[i].lo, layout.ranges[i].hi)
              .size());
    return r[i];
  };

  std::array<std::vector<int>, 3> region_result;
  int total_splits = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    region_result[i] = splits_for(i);
    total_splits += static_cast<int>(region_result[i].size());
  }

  if (total_splits == 0) {
    // Minimum-anchor guard: every region sat at s_i <= 1. Hand out extra
    // segments in allocation priority order until splits exist and the
    // target is met or nothing can absorb more.
    long long sum = r[0] + r[1] + r[2];
    auto order = detail::allocation_order(r, n_used, sum);
    bool progress = true;
    while (total_splits < n_used - 1 && progress) {
      progress = false;
      for (int idx : order) {
        if (total_splits >= n_used - 1) break;
        auto i = static_cast<std::size_t>(idx);
        if (r[i] == 0 || s[i] >= max_splits(i) + 1) continue;
        ++s[i];
        region_result[i] = splits_for(i);
        total_splits = 0;
        for (const auto& rr : region_result)
          total_splits += static_cast<int>(rr.size());
        progress = true;
      }
    }
    if (total_splits > 0)
      warnings.push_back("re-allocated segments to avoid an unsegmentable plan");
  }

  std::vector<int> merged;
  for (const auto& rr : region_result)
    merged.insert(merged.end(), rr.begin(), rr.end());

  auto plan = build_segments(profile, std::move(merged), strategy, n);
  plan.warnings.insert(plan.warnings.begin(), warnings.begin(),
                       warnings.end());
  return plan;
}

}  // namespace cotfilter
