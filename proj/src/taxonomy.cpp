#include "hiptune/taxonomy.hpp"

#include "hiptune/errors.hpp"

#include <set>
#include <sstream>

namespace hiptune {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

TaxonomySpec default_taxonomy_spec() {
  TaxonomySpec spec;
  spec.fake_branches = {
      {"physical",
       {{"2D", {{"print", 2}, {"replay", 3}, {"cutouts", 6}}},
        {"3D", {{"transparent", 1}, {"plaster", 1}, {"resin", 1}}}}},
      {"digital",
       {{"manipulation", {{"attribute-edit", 2}, {"face-swap", 13}, {"video-driven", 2}}},
        {"adversarial", {{"pixel-level", 11}, {"semantic-level", 5}}},
        {"generation", {{"ID-consistent", 3}, {"style-transfer", 1}, {"prompt-based", 3}}}}},
  };
  return spec;
}

AttackTaxonomy::AttackTaxonomy(const TaxonomySpec& spec) : spec_(spec) {
  if (spec.fake_branches.empty()) throw ConfigError("taxonomy needs at least one fake branch");

  std::set<std::string> names;
  auto claim = [&names](const std::string& name) {
    if (name.empty()) throw ConfigError("taxonomy node with empty name");
    if (!names.insert(name).second) throw ConfigError("duplicate taxonomy node name '" + name + "'");
  };

  claim(spec.live_name);
  for (const auto& top : spec.fake_branches) {
    claim(top.name);
    if (top.children.empty()) throw ConfigError("level-1 node '" + top.name + "' has no children");
    for (const auto& mid : top.children) {
      claim(mid.name);
      if (mid.children.empty()) throw ConfigError("level-2 node '" + mid.name + "' has no children");
      for (const auto& leaf : mid.children) {
        claim(leaf.name);
        if (leaf.methods < 1) {
          throw ConfigError("level-3 node '" + leaf.name + "' needs at least one method");
        }
      }
    }
  }

  auto add = [this](const std::string& name, int level, std::optional<NodeId> parent) {
    TaxonomyNode n;
    n.id = static_cast<NodeId>(nodes_.size());
    n.name = name;
    n.level = level;
    n.parent = parent;
    nodes_.push_back(n);
    if (parent) nodes_[*parent].children.push_back(n.id);
    return n.id;
  };

  // Breadth-first id assignment.
  live_ = add(spec.live_name, 1, std::nullopt);
  level1_.push_back(live_);
  std::vector<NodeId> tops;
  for (const auto& top : spec.fake_branches) {
    tops.push_back(add(top.name, 1, std::nullopt));
    level1_.push_back(tops.back());
  }
  std::vector<std::pair<NodeId, const TaxonomySpec::Mid*>> mids;
  for (std::size_t i = 0; i < spec.fake_branches.size(); ++i) {
    for (const auto& mid : spec.fake_branches[i].children) {
      mids.emplace_back(add(mid.name, 2, tops[i]), &mid);
    }
  }
  std::vector<std::pair<NodeId, int>> leaves;
  for (const auto& [mid_id, mid] : mids) {
    for (const auto& leaf : mid->children) leaves.emplace_back(add(leaf.name, 3, mid_id), leaf.methods);
  }
  for (const auto& [leaf_id, count] : leaves) {
    for (int v = 0; v < count; ++v) {
      LeafMethod m;
      m.id = static_cast<int>(methods_.size());
      m.name = nodes_[leaf_id].name + "#" + std::to_string(v + 1);
      m.node = leaf_id;
      m.variant = v;
      nodes_[leaf_id].method_ids.push_back(m.id);
      methods_.push_back(m);
    }
  }
}

const TaxonomyNode& AttackTaxonomy::node(NodeId id) const {
  if (!contains(id)) throw ValidationError("unknown taxonomy node id " + std::to_string(id));
  return nodes_[static_cast<std::size_t>(id)];
}

const LeafMethod& AttackTaxonomy::method(int id) const {
  if (id < 0 || id >= static_cast<int>(methods_.size())) {
    throw ValidationError("unknown method id " + std::to_string(id));
  }
  return methods_[static_cast<std::size_t>(id)];
}

std::vector<NodeId> AttackTaxonomy::level_nodes(int level) const {
  std::vector<NodeId> out;
  for (const auto& n : nodes_) {
    if (n.level == level) out.push_back(n.id);
  }
  return out;
}

int AttackTaxonomy::child_index(NodeId id) const {
  const TaxonomyNode& n = node(id);
  const std::vector<NodeId>& siblings = n.parent ? nodes_[*n.parent].children : level1_;
  for (std::size_t i = 0; i < siblings.size(); ++i) {
    if (siblings[i] == id) return static_cast<int>(i);
  }
  throw ContractError("node missing from its parent's child list");
}

NodeId AttackTaxonomy::find(const std::string& name) const {
  for (const auto& n : nodes_) {
    if (n.name == name) return n.id;
  }
  throw ConfigError("no taxonomy node named '" + name + "'");
}

HierPath AttackTaxonomy::path_of_method(int method_id) const {
  const LeafMethod& m = method(method_id);
  HierPath p;
  p.l3 = m.node;
  p.l2 = *nodes_[p.l3].parent;
  p.l1 = *nodes_[p.l2].parent;
  return p;
}

bool AttackTaxonomy::is_parent_chain(const HierPath& path) const {
  if (!contains(path.l1) || !contains(path.l2) || !contains(path.l3)) return false;
  const auto& n1 = nodes_[path.l1];
  const auto& n2 = nodes_[path.l2];
  const auto& n3 = nodes_[path.l3];
  return n1.level == 1 && n2.level == 2 && n3.level == 3 && n2.parent == path.l1 &&
         n3.parent == path.l2;
}

std::vector<int> AttackTaxonomy::leaf_counts() const {
  std::vector<int> out;
  for (const auto& n : nodes_) {
    if (n.level == 3) out.push_back(static_cast<int>(n.method_ids.size()));
  }
  return out;
}

std::uint64_t AttackTaxonomy::fingerprint() const {
  std::ostringstream os;
  for (const auto& n : nodes_) {
    os << n.id << ':' << n.name << ':' << n.level << ':' << (n.parent ? *n.parent : -1) << ':'
       << n.method_ids.size() << ';';
  }
  return fnv1a(os.str());
}

AttackTaxonomy build_taxonomy(const std::map<std::string, int>& methods_per_node) {
  TaxonomySpec spec = default_taxonomy_spec();
  std::set<std::string> used;
  for (auto& top : spec.fake_branches) {
    for (auto& mid : top.children) {
      for (auto& leaf : mid.children) {
        if (auto it = methods_per_node.find(leaf.name); it != methods_per_node.end()) {
          leaf.methods = it->second;
          used.insert(leaf.name);
        }
      }
    }
  }
  for (const auto& [name, count] : methods_per_node) {
    if (!used.count(name)) throw ConfigError("'" + name + "' is not a level-3 node");
  }
  return AttackTaxonomy(spec);
}

AttackTaxonomy build_taxonomy(const std::vector<int>& leaf_counts) {
  TaxonomySpec spec = default_taxonomy_spec();
  std::size_t i = 0;
  for (auto& top : spec.fake_branches) {
    for (auto& mid : top.children) {
      for (auto& leaf : mid.children) {
        if (i >= leaf_counts.size()) throw ConfigError("too few leaf counts for the taxonomy");
        leaf.methods = leaf_counts[i++];
      }
    }
  }
  if (i != leaf_counts.size()) throw ConfigError("too many leaf counts for the taxonomy");
  return AttackTaxonomy(spec);
}

AttackTaxonomy build_uniform_taxonomy(int methods_per_node) {
  TaxonomySpec spec = default_taxonomy_spec();
  for (auto& top : spec.fake_branches) {
    for (auto& mid : top.children) {
      for (auto& leaf : mid.children) leaf.methods = methods_per_node;
    }
  }
  return AttackTaxonomy(spec);
}

}  // namespace hiptune
