#include "divrank/geodiv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace divrank {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Item {
  double lat, lng;
  std::int64_t id;
};

double coord(const Item& it, int axis) { return axis == 0 ? it.lat : it.lng; }

}  // namespace

GeoKdTree GeoKdTree::build(std::span<const Listing> listings,
                           int max_leaf_size) {
  if (listings.empty()) throw std::domain_error("kdtree: empty listing set");
  if (max_leaf_size < 1) throw std::domain_error("kdtree: max_leaf_size < 1");

  std::vector<Item> items;
  items.reserve(listings.size());
  for (const Listing& l : listings) items.push_back({l.lat, l.lng, l.id});

  GeoKdTree tree;
  struct Frame {
    std::size_t lo, hi;  // item range
    int node;
    int depth;
  };

  tree.nodes_.push_back(KdNode{});
  tree.nodes_[0].lat_lo = -kInf;
  tree.nodes_[0].lat_hi = kInf;
  tree.nodes_[0].lng_lo = -kInf;
  tree.nodes_[0].lng_hi = kInf;

  // Splits land on coordinate boundaries so that construction placement and
  // descent by `coord < split` agree exactly, ties or not.
  auto sort_range = [&items](std::size_t lo, std::size_t hi, int axis) {
    std::sort(items.begin() + static_cast<std::ptrdiff_t>(lo),
              items.begin() + static_cast<std::ptrdiff_t>(hi),
              [axis](const Item& a, const Item& b) {
                const double ca = coord(a, axis), cb = coord(b, axis);
                if (ca != cb) return ca < cb;
                return a.id < b.id;
              });
  };
  auto find_split = [&items, &sort_range](std::size_t lo, std::size_t hi,
                                          int axis,
                                          std::size_t& split_at) -> bool {
    sort_range(lo, hi, axis);
    const std::size_t mid = lo + (hi - lo) / 2;
    for (std::size_t s = mid; s > lo && s < hi; ++s) {
      if (coord(items[s - 1], axis) != coord(items[s], axis)) {
        split_at = s;
        return true;
      }
    }
    for (std::size_t s = mid; s-- > lo + 1;) {
      if (coord(items[s - 1], axis) != coord(items[s], axis)) {
        split_at = s;
        return true;
      }
    }
    return false;
  };

  std::vector<Frame> stack{{0, items.size(), 0, 0}};
  while (!stack.empty()) {
    const Frame f = stack.back();
    stack.pop_back();
    tree.max_depth_ = std::max(tree.max_depth_, f.depth);
    const std::size_t n = f.hi - f.lo;
    int axis = f.depth % 2;
    std::size_t split_at = 0;
    bool splittable = false;
    if (n > static_cast<std::size_t>(max_leaf_size)) {
      splittable = find_split(f.lo, f.hi, axis, split_at);
      if (!splittable) {
        axis ^= 1;
        splittable = find_split(f.lo, f.hi, axis, split_at);
      }
    }
    if (!splittable) {
      // Leaf: either small enough or coordinate-degenerate.
      KdNode& node = tree.nodes_[static_cast<std::size_t>(f.node)];
      node.axis = -1;
      node.leaf_index = tree.leaf_count_++;
      for (std::size_t i = f.lo; i < f.hi; ++i)
        node.listing_ids.push_back(items[i].id);
      std::sort(node.listing_ids.begin(), node.listing_ids.end());
      continue;
    }
    const double split = coord(items[split_at], axis);

    const int left = static_cast<int>(tree.nodes_.size());
    tree.nodes_.push_back(KdNode{});
    const int right = static_cast<int>(tree.nodes_.size());
    tree.nodes_.push_back(KdNode{});
    KdNode& parent = tree.nodes_[static_cast<std::size_t>(f.node)];
    parent.axis = axis;
    parent.split = split;
    parent.left = left;
    parent.right = right;
    KdNode& ln = tree.nodes_[static_cast<std::size_t>(left)];
    KdNode& rn = tree.nodes_[static_cast<std::size_t>(right)];
    ln.parent = rn.parent = f.node;
    ln.lat_lo = rn.lat_lo = parent.lat_lo;
    ln.lat_hi = rn.lat_hi = parent.lat_hi;
    ln.lng_lo = rn.lng_lo = parent.lng_lo;
    ln.lng_hi = rn.lng_hi = parent.lng_hi;
    if (axis == 0) {
      ln.lat_hi = split;
      rn.lat_lo = split;
    } else {
      ln.lng_hi = split;
      rn.lng_lo = split;
    }
    // Right pushed first so leaves get left-to-right indices.
    stack.push_back({split_at, f.hi, right, f.depth + 1});
    stack.push_back({f.lo, split_at, left, f.depth + 1});
  }

  tree.leaf_nodes_.assign(static_cast<std::size_t>(tree.leaf_count_), -1);
  for (std::size_t i = 0; i < tree.nodes_.size(); ++i) {
    if (tree.nodes_[i].is_leaf())
      tree.leaf_nodes_[static_cast<std::size_t>(tree.nodes_[i].leaf_index)] =
          static_cast<int>(i);
  }
  return tree;
}

int GeoKdTree::leaf_of(double lat, double lng) const {
  int cur = 0;
  while (!nodes_[static_cast<std::size_t>(cur)].is_leaf()) {
    const KdNode& n = nodes_[static_cast<std::size_t>(cur)];
    const double c = n.axis == 0 ? lat : lng;
    cur = c < n.split ? n.left : n.right;
  }
  return nodes_[static_cast<std::size_t>(cur)].leaf_index;
}

json GeoKdTree::to_json() const {
  json nodes = json::array();
  for (const KdNode& n : nodes_) {
    json jn{{"axis", n.axis},       {"split", n.split},
            {"left", n.left},       {"right", n.right},
            {"parent", n.parent},   {"leaf_index", n.leaf_index}};
    if (n.is_leaf()) jn["listing_ids"] = n.listing_ids;
    nodes.push_back(std::move(jn));
  }
  return json{{"format", "divrank-kdtree-v1"},
              {"leaf_count", leaf_count_},
              {"max_depth", max_depth_},
              {"nodes", nodes}};
}

GeoKdTree GeoKdTree::from_json(const json& j) {
  if (j.at("format").get<std::string>() != "divrank-kdtree-v1")
    throw data_error("kdtree: unknown serialization format");
  GeoKdTree tree;
  tree.leaf_count_ = j.at("leaf_count").get<int>();
  tree.max_depth_ = j.at("max_depth").get<int>();
  for (const json& jn : j.at("nodes")) {
    KdNode n;
    n.axis = jn.at("axis").get<int>();
    n.split = jn.at("split").get<double>();
    n.left = jn.at("left").get<int>();
    n.right = jn.at("right").get<int>();
    n.parent = jn.at("parent").get<int>();
    n.leaf_index = jn.at("leaf_index").get<int>();
    if (n.is_leaf())
      n.listing_ids = jn.at("listing_ids").get<std::vector<std::int64_t>>();
    tree.nodes_.push_back(std::move(n));
  }
  // Cell boxes are reconstructed from the splits.
  if (!tree.nodes_.empty()) {
    tree.nodes_[0].lat_lo = tree.nodes_[0].lng_lo = -kInf;
    tree.nodes_[0].lat_hi = tree.nodes_[0].lng_hi = kInf;
    for (std::size_t i = 0; i < tree.nodes_.size(); ++i) {
      const KdNode& n = tree.nodes_[i];
      if (n.is_leaf()) continue;
      for (int child : {n.left, n.right}) {
        KdNode& c = tree.nodes_[static_cast<std::size_t>(child)];
        c.lat_lo = n.lat_lo;
        c.lat_hi = n.lat_hi;
        c.lng_lo = n.lng_lo;
        c.lng_hi = n.lng_hi;
      }
      if (n.axis == 0) {
        tree.nodes_[static_cast<std::size_t>(n.left)].lat_hi = n.split;
        tree.nodes_[static_cast<std::size_t>(n.right)].lat_lo = n.split;
      } else {
        tree.nodes_[static_cast<std::size_t>(n.left)].lng_hi = n.split;
        tree.nodes_[static_cast<std::size_t>(n.right)].lng_lo = n.split;
      }
    }
  }
  tree.leaf_nodes_.assign(static_cast<std::size_t>(tree.leaf_count_), -1);
  for (std::size_t i = 0; i < tree.nodes_.size(); ++i) {
    if (tree.nodes_[i].is_leaf())
      tree.leaf_nodes_[static_cast<std::size_t>(tree.nodes_[i].leaf_index)] =
          static_cast<int>(i);
  }
  return tree;
}

MergedRegionSet merge_sparse_regions(const GeoKdTree& tree,
                                     std::span<const double> leaf_mass,
                                     double threshold) {
  if (static_cast<int>(leaf_mass.size()) != tree.leaf_count())
    throw std::domain_error("merge: leaf mass size mismatch");
  for (double m : leaf_mass)
    if (m < 0.0) throw std::domain_error("merge: negative engagement mass");

  // Subtree mass per node, children first (children have larger indices).
  std::vector<double> mass(static_cast<std::size_t>(tree.node_count()), 0.0);
  for (int i = tree.node_count() - 1; i >= 0; --i) {
    const KdNode& n = tree.node(i);
    mass[static_cast<std::size_t>(i)] =
        n.is_leaf() ? leaf_mass[static_cast<std::size_t>(n.leaf_index)]
                    : mass[static_cast<std::size_t>(n.left)] +
                          mass[static_cast<std::size_t>(n.right)];
  }

  MergedRegionSet out;
  out.leaf_to_region.assign(static_cast<std::size_t>(tree.leaf_count()), -1);

  // A node becomes a region when its own mass clears the threshold but some
  // descendant side would not; descend only while both children clear it.
  std::vector<int> stack{tree.root()};
  while (!stack.empty()) {
    const int ni = stack.back();
    stack.pop_back();
    const KdNode& n = tree.node(ni);
    const double m = mass[static_cast<std::size_t>(ni)];
    const bool take =
        n.is_leaf() || m < threshold ||
        mass[static_cast<std::size_t>(n.left)] < threshold ||
        mass[static_cast<std::size_t>(n.right)] < threshold;
    if (take && (m >= threshold || ni == tree.root())) {
      const int region = static_cast<int>(out.region_nodes.size());
      out.region_nodes.push_back(ni);
      out.engagement.push_back(m);
      // Mark all leaves under this node.
      std::vector<int> sub{ni};
      while (!sub.empty()) {
        const int si = sub.back();
        sub.pop_back();
        const KdNode& sn = tree.node(si);
        if (sn.is_leaf())
          out.leaf_to_region[static_cast<std::size_t>(sn.leaf_index)] = region;
        else {
          sub.push_back(sn.right);
          sub.push_back(sn.left);
        }
      }
    } else if (!take) {
      stack.push_back(n.right);
      stack.push_back(n.left);
    }
    // A non-root node with mass < threshold is never reached here: its
    // parent stopped descending and covered it.
  }
  return out;
}

Distribution location_target(const MergedRegionSet& regions) {
  double total = 0.0;
  for (double m : regions.engagement) total += m;
  if (total <= 0.0) return Distribution::uniform(regions.region_nodes.size());
  std::vector<double> mass;
  mass.reserve(regions.engagement.size());
  for (double m : regions.engagement) mass.push_back(m / total);
  return Distribution{std::move(mass)};
}

int region_of(const Listing& l, const GeoKdTree& tree,
              const MergedRegionSet& regions) {
  const int leaf = tree.leaf_of(l.lat, l.lng);
  return regions.leaf_to_region[static_cast<std::size_t>(leaf)];
}

std::vector<double> leaf_engagement(const GeoKdTree& tree,
                                    std::span<const EngagementRecord> records,
                                    const CorpusIndex& index) {
  std::vector<double> mass(static_cast<std::size_t>(tree.leaf_count()), 0.0);
  for (const EngagementRecord& r : records) {
    const Listing& l = index.listing(r.listing_id);
    mass[static_cast<std::size_t>(tree.leaf_of(l.lat, l.lng))] += r.weight;
  }
  return mass;
}

}  // namespace divrank
