#include "calibra/trees.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace calibra::trees {

FeatureBins FeatureBins::fit(const Eigen::MatrixXd& z, int max_bins) {
  max_bins = std::clamp(max_bins, 2, 256);
  FeatureBins out;
  const Eigen::Index n = z.rows();
  out.cuts.resize(static_cast<std::size_t>(z.cols()));
  std::vector<double> sorted(static_cast<std::size_t>(n));
  for (Eigen::Index f = 0; f < z.cols(); ++f) {
    for (Eigen::Index i = 0; i < n; ++i) sorted[static_cast<std::size_t>(i)] = z(i, f);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> distinct;
    for (double v : sorted)
      if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
    auto& cuts = out.cuts[static_cast<std::size_t>(f)];
    if (static_cast<int>(distinct.size()) <= max_bins) {
      for (std::size_t k = 1; k < distinct.size(); ++k)
        cuts.push_back(0.5 * (distinct[k - 1] + distinct[k]));
    } else {
      for (int k = 1; k < max_bins; ++k) {
        const auto idx = static_cast<std::size_t>(static_cast<double>(k) * n / max_bins);
        if (idx == 0 || idx >= sorted.size() || sorted[idx - 1] == sorted[idx]) continue;
        const double c = 0.5 * (sorted[idx - 1] + sorted[idx]);
        if (cuts.empty() || c > cuts.back()) cuts.push_back(c);
      }
    }
  }
  return out;
}

BinnedMatrix BinnedMatrix::encode(const Eigen::MatrixXd& z, const FeatureBins& bins) {
  BinnedMatrix out;
  out.rows = static_cast<int>(z.rows());
  out.cols = static_cast<int>(z.cols());
  out.codes.resize(static_cast<std::size_t>(out.rows) * static_cast<std::size_t>(out.cols));
  for (int f = 0; f < out.cols; ++f) {
    const auto& cuts = bins.cuts[static_cast<std::size_t>(f)];
    for (int i = 0; i < out.rows; ++i) {
      const auto b = std::lower_bound(cuts.begin(), cuts.end(), z(i, f)) - cuts.begin();
      out.codes[static_cast<std::size_t>(f) * static_cast<std::size_t>(out.rows) +
                static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(b);
    }
  }
  return out;
}

double Tree::predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  int k = 0;
  while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
    const Node& nd = nodes[static_cast<std::size_t>(k)];
    k = row(nd.feature) <= nd.threshold ? nd.left : nd.right;
  }
  return nodes[static_cast<std::size_t>(k)].value;
}

double Tree::predict_binned(const BinnedMatrix& data, int row) const {
  int k = 0;
  while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
    const Node& nd = nodes[static_cast<std::size_t>(k)];
    k = data.code(row, nd.feature) <= nd.bin ? nd.left : nd.right;
  }
  return nodes[static_cast<std::size_t>(k)].value;
}

int Tree::leaves() const {
  return static_cast<int>(std::count_if(nodes.begin(), nodes.end(),
                                        [](const Node& n) { return n.feature < 0; }));
}

namespace {

struct Builder {
  const BinnedMatrix& data;
  const FeatureBins& bins;
  std::vector<int>& rows;
  std::span<const double> targets;
  int width;
  GrowParams params;
  Rng* rng;
  const LeafValue& leaf_value;
  Tree tree;
  std::vector<int> features;
  std::vector<double> counts;
  std::vector<double> sums;
  std::vector<double> left_sum;
  std::vector<double> total_sum;

  int make_leaf(int begin, int end) {
    Node leaf;
    leaf.value = leaf_value(std::span<const int>(rows.data() + begin, static_cast<std::size_t>(end - begin)));
    tree.nodes.push_back(leaf);
    return static_cast<int>(tree.nodes.size()) - 1;
  }

  int build(int begin, int end, int depth) {
    const int n = end - begin;
    if (n < 2 * params.min_leaf || (params.max_depth > 0 && depth >= params.max_depth))
      return make_leaf(begin, end);

    std::fill(total_sum.begin(), total_sum.end(), 0.0);
    for (int r = begin; r < end; ++r) {
      const double* t = &targets[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]) * width];
      for (int k = 0; k < width; ++k) total_sum[static_cast<std::size_t>(k)] += t[k];
    }
    double parent = 0.0;
    for (int k = 0; k < width; ++k) parent += total_sum[static_cast<std::size_t>(k)] * total_sum[static_cast<std::size_t>(k)];
    parent /= n;

    const int p = data.cols;
    const int tries = (params.mtry > 0 && params.mtry < p) ? params.mtry : p;
    if (tries < p) {
      // Partial Fisher-Yates draw of `tries` distinct features.
      for (int k = 0; k < tries; ++k) {
        std::uniform_int_distribution<int> pick(k, p - 1);
        std::swap(features[static_cast<std::size_t>(k)], features[static_cast<std::size_t>(pick(*rng))]);
      }
    }

    double best_gain = parent + 1e-12 * std::max(1.0, std::fabs(parent));
    int best_feature = -1, best_bin = -1;
    for (int t = 0; t < tries; ++t) {
      const int f = features[static_cast<std::size_t>(t)];
      const int nb = bins.bins(f);
      if (nb < 2) continue;
      std::fill(counts.begin(), counts.begin() + nb, 0.0);
      std::fill(sums.begin(), sums.begin() + static_cast<std::ptrdiff_t>(nb) * width, 0.0);
      const std::uint8_t* col = &data.codes[static_cast<std::size_t>(f) * static_cast<std::size_t>(data.rows)];
      if (width == 1) {
        const double* tv = targets.data();
        double* cn = counts.data();
        double* sm = sums.data();
        const int* rp = rows.data();
        for (int r = begin; r < end; ++r) {
          const int row = rp[r];
          const int b = col[row];
          cn[b] += 1.0;
          sm[b] += tv[row];
        }
      } else {
        for (int r = begin; r < end; ++r) {
          const int row = rows[static_cast<std::size_t>(r)];
          const int b = col[row];
          counts[static_cast<std::size_t>(b)] += 1.0;
          const double* tv = &targets[static_cast<std::size_t>(row) * width];
          double* s = &sums[static_cast<std::size_t>(b) * width];
          for (int k = 0; k < width; ++k) s[k] += tv[k];
        }
      }
      std::fill(left_sum.begin(), left_sum.end(), 0.0);
      double left_n = 0.0;
      for (int b = 0; b + 1 < nb; ++b) {
        const double c = counts[static_cast<std::size_t>(b)];
        if (c == 0.0) continue;
        left_n += c;
        const double* s = &sums[static_cast<std::size_t>(b) * width];
        for (int k = 0; k < width; ++k) left_sum[static_cast<std::size_t>(k)] += s[k];
        const double right_n = n - left_n;
        if (left_n < params.min_leaf) continue;
        if (right_n < params.min_leaf) break;
        double gain_l = 0.0, gain_r = 0.0;
        for (int k = 0; k < width; ++k) {
          const double l = left_sum[static_cast<std::size_t>(k)];
          const double r = total_sum[static_cast<std::size_t>(k)] - l;
          gain_l += l * l;
          gain_r += r * r;
        }
        const double gain = gain_l / left_n + gain_r / right_n;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          best_bin = b;
        }
      }
    }
    if (best_feature < 0) return make_leaf(begin, end);

    const std::uint8_t* col =
        &data.codes[static_cast<std::size_t>(best_feature) * static_cast<std::size_t>(data.rows)];
    const auto mid_it = std::partition(rows.begin() + begin, rows.begin() + end,
                                       [&](int row) { return col[row] <= best_bin; });
    const int mid = static_cast<int>(mid_it - rows.begin());

    const int self = static_cast<int>(tree.nodes.size());
    Node node;
    node.feature = best_feature;
    node.bin = best_bin;
    node.threshold = bins.cuts[static_cast<std::size_t>(best_feature)][static_cast<std::size_t>(best_bin)];
    tree.nodes.push_back(node);
    const int left = build(begin, mid, depth + 1);
    const int right = build(mid, end, depth + 1);
    tree.nodes[static_cast<std::size_t>(self)].left = left;
    tree.nodes[static_cast<std::size_t>(self)].right = right;
    return self;
  }
};

}  // namespace

Tree grow(const BinnedMatrix& data, const FeatureBins& bins, std::vector<int> rows,
          std::span<const double> targets, int width, const GrowParams& params, Rng* rng,
          const LeafValue& leaf_value) {
  if (params.mtry > 0 && params.mtry < data.cols && rng == nullptr)
    throw std::invalid_argument("trees::grow: feature subsampling needs an rng");
  int max_bins = 2;
  for (int f = 0; f < bins.features(); ++f) max_bins = std::max(max_bins, bins.bins(f));
  Builder b{data, bins, rows, targets, width, params, rng, leaf_value, {}, {}, {}, {}, {}, {}};
  b.features.resize(static_cast<std::size_t>(data.cols));
  std::iota(b.features.begin(), b.features.end(), 0);
  b.counts.resize(static_cast<std::size_t>(max_bins));
  b.sums.resize(static_cast<std::size_t>(max_bins) * static_cast<std::size_t>(width));
  b.left_sum.resize(static_cast<std::size_t>(width));
  b.total_sum.resize(static_cast<std::size_t>(width));
  b.tree.nodes.reserve(rows.size() / std::max(1, params.min_leaf) * 2 + 1);
  if (rows.empty()) throw std::invalid_argument("trees::grow: no rows");
  b.build(0, static_cast<int>(rows.size()), 0);
  return std::move(b.tree);
}

}  // namespace calibra::trees
