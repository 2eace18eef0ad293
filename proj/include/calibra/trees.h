#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "calibra/rng.h"

namespace calibra::trees {

// Quantile cut points per feature. A value v falls in bin b when
// cuts[b-1] < v <= cuts[b]; with at most max_bins distinct values every
// midpoint is a cut, so splits are exact.
struct FeatureBins {
  std::vector<std::vector<double>> cuts;

  static FeatureBins fit(const Eigen::MatrixXd& z, int max_bins);
  int features() const { return static_cast<int>(cuts.size()); }
  int bins(int f) const { return static_cast<int>(cuts[static_cast<std::size_t>(f)].size()) + 1; }
};

// Column-major bin codes for a fixed matrix.
struct BinnedMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> codes;

  static BinnedMatrix encode(const Eigen::MatrixXd& z, const FeatureBins& bins);
  std::uint8_t code(int row, int feature) const {
    return codes[static_cast<std::size_t>(feature) * static_cast<std::size_t>(rows) +
                 static_cast<std::size_t>(row)];
  }
};

struct Node {
  int feature = -1;  // -1 marks a leaf
  int bin = 0;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

class Tree {
 public:
  std::vector<Node> nodes;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  double predict_binned(const BinnedMatrix& data, int row) const;
  int leaves() const;
};

struct GrowParams {
  int max_depth = 0;  // 0: unlimited
  int min_leaf = 5;
  int mtry = 0;       // 0: all features
};

// Leaf value from the rows that reach the leaf.
using LeafValue = std::function<double(std::span<const int> rows)>;

// Grows a CART tree on `rows` (duplicates allowed, e.g. bootstrap draws).
// Targets are row-major with `width` columns; the split criterion is the
// summed squared-error reduction over target columns, which for one-hot
// class indicators equals the Gini criterion. `rng` is required when
// mtry < features.
Tree grow(const BinnedMatrix& data, const FeatureBins& bins, std::vector<int> rows,
          std::span<const double> targets, int width, const GrowParams& params, Rng* rng,
          const LeafValue& leaf_value);

}  // namespace calibra::trees
