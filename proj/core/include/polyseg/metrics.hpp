#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace polyseg::metrics {

/// Probability map and binary label, both row-major height x width.
struct MaskPair {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pred;
  std::vector<double> label;

  void validate() const;  // ShapeError / NumericError on bad input
};

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
  double mae = 0.0;
};

struct MetricReport {
  double dice = 0.0;
  double iou = 0.0;
  double mae = 0.0;
  double boundary_f = 0.0;
  double s_measure = 0.0;
};

inline constexpr double kThreshold = 0.5;

/// Overlap on pred >= threshold; MAE on the soft map. Empty vs empty is 1.
Overlap dice_iou_mae(const MaskPair& pair, double threshold = kThreshold);

/// Boundary F-measure: 1-pixel boundaries of both binarized masks, matched
/// within tol_px via Euclidean distance transforms.
double boundary_f(const MaskPair& pair, std::size_t tol_px, double threshold = kThreshold);

/// Default tolerance: 0.8% of the image diagonal, rounded, at least 1 px.
std::size_t default_tolerance(std::size_t height, std::size_t width);

/// Structure measure alpha * S_object + (1 - alpha) * S_region.
double s_measure(const MaskPair& pair, double alpha = 0.5);

MetricReport evaluate(const MaskPair& pair, std::size_t tol_px);
MetricReport mean_report(std::span<const MetricReport> reports);

/// Foreground pixels that touch background (4-neighbourhood; outside the
/// image counts as background).
std::vector<unsigned char> boundary_map(std::span<const unsigned char> mask, std::size_t height, std::size_t width);

/// Exact squared Euclidean distance to the nearest set pixel of `sites`
/// (infinity when there are none).
std::vector<double> squared_distance_transform(std::span<const unsigned char> sites, std::size_t height,
                                               std::size_t width);

}  // namespace polyseg::metrics
