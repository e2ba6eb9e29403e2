#pragma once

// The three-level attack taxonomy. Level-1 nodes are {live, physical,
// digital}; live is a leaf, the fake branches have exactly two more levels
// below them, and every level-3 node owns one or more leaf attack methods.
// Node ids are dense and assigned breadth-first in declaration order, so
// the same description always yields the same ids.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hiptune {

using NodeId = int;

struct TaxonomyNode {
  NodeId id = -1;
  std::string name;
  int level = 0;                 // 1, 2 or 3
  std::optional<NodeId> parent;  // none for level-1 nodes
  std::vector<NodeId> children;
  std::vector<int> method_ids;   // level-3 only
};

struct LeafMethod {
  int id = -1;
  std::string name;
  NodeId node = -1;  // owning level-3 node
  int variant = 0;   // index among the node's methods
};

// (level-1, level-2, level-3) node ids of a fake sample.
struct HierPath {
  NodeId l1 = -1;
  NodeId l2 = -1;
  NodeId l3 = -1;

  NodeId at(int level) const { return level == 1 ? l1 : level == 2 ? l2 : l3; }
  friend bool operator==(const HierPath&, const HierPath&) = default;
};

// Nested description used to build a taxonomy.
struct TaxonomySpec {
  struct Leaf {
    std::string name;
    int methods = 1;
  };
  struct Mid {
    std::string name;
    std::vector<Leaf> children;
  };
  struct Top {
    std::string name;
    std::vector<Mid> children;
  };
  std::string live_name = "live";
  std::vector<Top> fake_branches;
};

class AttackTaxonomy {
 public:
  // Validates and freezes the description. Throws ConfigError on duplicate
  // names, empty branches, or level-3 nodes with no methods.
  explicit AttackTaxonomy(const TaxonomySpec& spec);

  const std::vector<TaxonomyNode>& nodes() const { return nodes_; }
  const TaxonomyNode& node(NodeId id) const;
  const std::vector<LeafMethod>& methods() const { return methods_; }
  const LeafMethod& method(int id) const;

  NodeId live() const { return live_; }
  // Level-1 nodes in canonical order (live first).
  const std::vector<NodeId>& level1() const { return level1_; }
  std::vector<NodeId> level_nodes(int level) const;
  const std::vector<NodeId>& children(NodeId id) const { return node(id).children; }

  // Position of a node among its siblings (level-1 nodes: among level1()).
  int child_index(NodeId id) const;
  NodeId find(const std::string& name) const;  // throws ConfigError if absent
  bool contains(NodeId id) const { return id >= 0 && id < static_cast<NodeId>(nodes_.size()); }

  HierPath path_of_method(int method_id) const;
  bool is_parent_chain(const HierPath& path) const;

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t method_count() const { return methods_.size(); }

  // Methods per level-3 node, in level-3 id order.
  std::vector<int> leaf_counts() const;
  // Stable fingerprint of the structure (names, ids, method counts).
  std::uint64_t fingerprint() const;

  const TaxonomySpec& spec() const { return spec_; }

 private:
  TaxonomySpec spec_;
  std::vector<TaxonomyNode> nodes_;
  std::vector<LeafMethod> methods_;
  std::vector<NodeId> level1_;
  NodeId live_ = -1;
};

// Default description: physical {2D: print, replay, cutouts; 3D:
// transparent, plaster, resin}, digital {manipulation: attribute-edit,
// face-swap, video-driven; adversarial: pixel-level, semantic-level;
// generation: ID-consistent, style-transfer, prompt-based}.
// The default method counts add up to 54.
TaxonomySpec default_taxonomy_spec();

// Default structure with method counts overridden per level-3 node name.
AttackTaxonomy build_taxonomy(const std::map<std::string, int>& methods_per_node = {});
// Default structure with explicit per-node counts in level-3 order.
AttackTaxonomy build_taxonomy(const std::vector<int>& leaf_counts);
// Default structure with the same number of methods on every level-3 node.
AttackTaxonomy build_uniform_taxonomy(int methods_per_node);

}  // namespace hiptune
