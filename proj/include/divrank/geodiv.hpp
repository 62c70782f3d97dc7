#pragma once

// Spatial partition of listings: median-split KD-tree over (lat, lng),
// engagement-driven merging of sparse leaves, and per-query target location
// distributions.

#include <span>
#include <vector>

#include <json.hpp>

#include "divrank/corpus.hpp"
#include "divrank/metrics.hpp"
#include "divrank/types.hpp"

namespace divrank {

struct KdNode {
  int axis = -1;      // 0 = lat, 1 = lng; -1 for leaves
  double split = 0.0; // left child holds coord < split
  int left = -1;
  int right = -1;
  int parent = -1;
  int leaf_index = -1;  // dense index over leaves, left-to-right
  // Half-open cell [lo, hi) per axis; the root cell is unbounded.
  double lat_lo = 0.0, lat_hi = 0.0, lng_lo = 0.0, lng_hi = 0.0;
  std::vector<std::int64_t> listing_ids;  // leaves only, ascending

  bool is_leaf() const { return axis < 0; }
};

class GeoKdTree {
 public:
  // Median split on alternating axes, ties broken by listing id; every leaf
  // holds at most max_leaf_size listings.
  static GeoKdTree build(std::span<const Listing> listings,
                         int max_leaf_size);

  int root() const { return 0; }
  const KdNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int leaf_count() const { return leaf_count_; }
  int max_depth() const { return max_depth_; }

  // Descends by split comparisons; out-of-bounds coordinates clamp into the
  // nearest boundary leaf naturally. Returns the leaf's dense index.
  int leaf_of(double lat, double lng) const;
  // Node index of the leaf with the given dense leaf index.
  int leaf_node(int leaf_index) const {
    return leaf_nodes_[static_cast<std::size_t>(leaf_index)];
  }

  nlohmann::json to_json() const;
  static GeoKdTree from_json(const nlohmann::json& j);

 private:
  std::vector<KdNode> nodes_;
  std::vector<int> leaf_nodes_;
  int leaf_count_ = 0;
  int max_depth_ = 0;
};

// Antichain of tree nodes covering all leaves, each with engagement mass at
// or above the merge threshold (the root may fall below it).
struct MergedRegionSet {
  std::vector<int> region_nodes;   // node index per region
  std::vector<double> engagement;  // mass per region
  std::vector<int> leaf_to_region; // dense leaf index -> region index
};

// Bottom-up sibling-constrained merge: a node whose subtree mass falls below
// the threshold collapses into its parent region.
MergedRegionSet merge_sparse_regions(const GeoKdTree& tree,
                                     std::span<const double> leaf_mass,
                                     double threshold);

// Engagement-proportional target over regions; uniform when total mass is 0.
Distribution location_target(const MergedRegionSet& regions);

int region_of(const Listing& l, const GeoKdTree& tree,
              const MergedRegionSet& regions);

// Per-leaf engagement mass for one query's records.
std::vector<double> leaf_engagement(const GeoKdTree& tree,
                                    std::span<const EngagementRecord> records,
                                    const CorpusIndex& index);

}  // namespace divrank
