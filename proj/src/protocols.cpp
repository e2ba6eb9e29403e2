#include "hiptune/protocols.hpp"

#include "hiptune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

namespace hiptune {
namespace {

template <typename T>
std::vector<T> shuffled(std::vector<T> v, std::mt19937_64& rng) {
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

template <typename T>
std::vector<T> sorted(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<int> identities_of(const Manifest& m) {
  std::set<int> ids;
  for (const auto& r : m.records) ids.insert(r.identity);
  return {ids.begin(), ids.end()};
}

// Split a shuffled list into (train, val, test) with val = floor(val_frac * n),
// test = floor(test_frac * n) and the remainder to train.
struct Three {
  std::vector<int> train, val, test;
};

Three cut(const std::vector<int>& items, std::size_t n_val, std::size_t n_test) {
  Three t;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i < n_val) {
      t.val.push_back(items[i]);
    } else if (i < n_val + n_test) {
      t.test.push_back(items[i]);
    } else {
      t.train.push_back(items[i]);
    }
  }
  t.train = sorted(t.train);
  t.val = sorted(t.val);
  t.test = sorted(t.test);
  return t;
}

// Lives split by identity in 50/20/30 proportions (val floor, train
// rounded half up, test the remainder).
Three split_identities_502030(const std::vector<int>& ids, std::mt19937_64& rng) {
  const std::size_t n = ids.size();
  const std::size_t n_val = n / 5;
  const std::size_t n_train = (n + 1) / 2;
  return cut(shuffled(ids, rng), n_val, n - n_val - n_train);
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

const char* to_string(ProtocolId p) {
  switch (p) {
    case ProtocolId::P1: return "p1";
    case ProtocolId::P2: return "p2";
    case ProtocolId::P3_1: return "p3.1";
    case ProtocolId::P3_2: return "p3.2";
  }
  return "?";
}

ProtocolId parse_protocol(const std::string& s) {
  if (s == "p1" || s == "P1") return ProtocolId::P1;
  if (s == "p2" || s == "P2") return ProtocolId::P2;
  if (s == "p3.1" || s == "P3.1") return ProtocolId::P3_1;
  if (s == "p3.2" || s == "P3.2") return ProtocolId::P3_2;
  throw ConfigError("unknown protocol '" + s + "' (expected p1, p2, p3.1 or p3.2)");
}

void ProtocolOptions::validate() const {
  if (!(p1_val >= 0.0 && p1_test > 0.0 && p1_val + p1_test < 1.0)) {
    throw ConfigError("P1 fractions must satisfy val >= 0, test > 0, val + test < 1");
  }
}

Manifest ProtocolSplit::apply(const Manifest& manifest) const {
  Manifest out = manifest;
  for (auto& r : out.records) r.split = Split::Unassigned;
  for (std::size_t i : train) out.records.at(i).split = Split::Train;
  for (std::size_t i : val) out.records.at(i).split = Split::Val;
  for (std::size_t i : test) out.records.at(i).split = Split::Test;
  return out;
}

ProtocolSplit make_protocol_split(const Manifest& manifest, ProtocolId protocol, std::uint64_t seed,
                                  const ProtocolOptions& options) {
  options.validate();
  const AttackTaxonomy tax = manifest.taxonomy();
  validate_manifest(manifest, tax);
  std::mt19937_64 rng(seed);
  ProtocolSplit s;
  s.protocol = protocol;
  s.seed = seed;
  const auto ids = identities_of(manifest);

  auto place = [&](std::size_t i, Split where) {
    (where == Split::Train ? s.train : where == Split::Val ? s.val : s.test).push_back(i);
  };
  auto place_lives = [&](const Three& by_id) {
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto& r = manifest.records[i];
      if (!r.is_live) continue;
      if (contains(by_id.train, r.identity)) place(i, Split::Train);
      if (contains(by_id.val, r.identity)) place(i, Split::Val);
      if (contains(by_id.test, r.identity)) place(i, Split::Test);
    }
  };

  switch (protocol) {
    case ProtocolId::P1: {
      if (ids.size() < 3) throw ProtocolError("P1 needs at least 3 identities");
      const auto n = ids.size();
      auto n_val = static_cast<std::size_t>(std::floor(options.p1_val * static_cast<double>(n)));
      auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(options.p1_test * static_cast<double>(n))));
      if (options.p1_val > 0.0) n_val = std::max<std::size_t>(1, n_val);
      const Three t = cut(shuffled(ids, rng), n_val, n_test);
      s.train_identities = t.train;
      s.val_identities = t.val;
      s.test_identities = t.test;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const int id = manifest.records[i].identity;
        place(i, contains(t.train, id) ? Split::Train : contains(t.val, id) ? Split::Val : Split::Test);
      }
      // Every attack type must be present in each split.
      for (NodeId leaf : tax.level_nodes(3)) {
        for (const auto* part : {&s.train, &s.val, &s.test}) {
          if (part == &s.val && t.val.empty()) continue;
          const bool found = std::any_of(part->begin(), part->end(), [&](std::size_t i) {
            const auto& r = manifest.records[i];
            return !r.is_live && r.path->l3 == leaf;
          });
          if (!found) throw ProtocolError("P1 split misses attack type '" + tax.node(leaf).name + "'");
        }
      }
      break;
    }
    case ProtocolId::P2: {
      std::set<int> present;
      for (const auto& r : manifest.records) {
        if (!r.is_live) present.insert(*r.method);
      }
      if (present.size() < 3) throw ProtocolError("P2 needs at least 3 attack methods in the manifest");
      const std::size_t n = present.size();
      const std::size_t n_val = n / 5;
      const std::size_t n_train = (n + 1) / 2;
      // Seed the training set with one method of every level-3 node that is
      // present, so that test methods are unseen but their nodes are not.
      std::map<NodeId, std::vector<int>> by_node;
      for (int m : present) by_node[tax.method(m).node].push_back(m);
      std::vector<int> train, rest;
      for (auto& [node, ms] : by_node) {
        auto sh = shuffled(ms, rng);
        if (train.size() < n_train) {
          train.push_back(sh.front());
          rest.insert(rest.end(), sh.begin() + 1, sh.end());
        } else {
          rest.insert(rest.end(), sh.begin(), sh.end());
        }
      }
      rest = shuffled(sorted(rest), rng);
      while (train.size() < n_train) {
        train.push_back(rest.back());
        rest.pop_back();
      }
      const Three t = cut(rest, n_val, rest.size() - n_val);
      s.train_methods = sorted(train);
      s.val_methods = t.val;
      s.test_methods = t.test;
      const Three lives = split_identities_502030(ids, rng);
      s.train_identities = lives.train;
      s.val_identities = lives.val;
      s.test_identities = lives.test;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        if (r.is_live) continue;
        place(i, contains(s.train_methods, *r.method) ? Split::Train
                 : contains(s.val_methods, *r.method) ? Split::Val
                                                      : Split::Test);
      }
      place_lives(lives);
      break;
    }
    case ProtocolId::P3_1:
    case ProtocolId::P3_2: {
      const std::vector<std::string> low{"2D", "manipulation", "adversarial"};
      const std::vector<std::string> high{"3D", "generation"};
      const auto& seen = protocol == ProtocolId::P3_1 ? low : high;
      const auto& unseen = protocol == ProtocolId::P3_1 ? high : low;
      std::map<NodeId, std::vector<std::size_t>> by_branch;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        if (!r.is_live) by_branch[r.path->l2].push_back(i);
      }
      for (const auto* names : {&seen, &unseen}) {
        for (const auto& name : *names) {
          if (by_branch[tax.find(name)].empty()) {
            throw ProtocolError(std::string(to_string(protocol)) + " needs samples of the '" + name + "' branch");
          }
        }
      }
      std::vector<std::size_t> pool;
      for (const auto& name : seen) {
        const auto& v = by_branch[tax.find(name)];
        pool.insert(pool.end(), v.begin(), v.end());
      }
      std::sort(pool.begin(), pool.end());
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::size_t n_val = static_cast<std::size_t>(std::floor(0.3 * static_cast<double>(pool.size())));
      for (std::size_t k = 0; k < pool.size(); ++k) place(pool[k], k < n_val ? Split::Val : Split::Train);
      for (const auto& name : unseen) {
        for (std::size_t i : by_branch[tax.find(name)]) place(i, Split::Test);
      }
      const Three lives = split_identities_502030(ids, rng);
      s.train_identities = lives.train;
      s.val_identities = lives.val;
      s.test_identities = lives.test;
      place_lives(lives);
      break;
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  check_protocol_split(manifest, s);
  return s;
}

ProtocolSplit split_from_tags(const Manifest& manifest) {
  ProtocolSplit s;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    switch (manifest.records[i].split) {
      case Split::Train: s.train.push_back(i); break;
      case Split::Val: s.val.push_back(i); break;
      case Split::Test: s.test.push_back(i); break;
      case Split::Unassigned: break;
    }
  }
  return s;
}

void check_protocol_split(const Manifest& manifest, const ProtocolSplit& split) {
  auto fail = [&](const std::string& msg) {
    throw InvariantViolation(std::string(to_string(split.protocol)) + " split: " + msg);
  };
  std::set<std::size_t> seen;
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (std::size_t i : *part) {
      if (i >= manifest.records.size()) fail("record index out of range");
      if (!seen.insert(i).second) fail("record " + std::to_string(i) + " is in two splits");
    }
  }
  auto collect = [&](const std::vector<std::size_t>& part, bool live, auto key) {
    std::set<int> out;
    for (std::size_t i : part) {
      const auto& r = manifest.records[i];
      if (r.is_live == live) out.insert(key(r));
    }
    return out;
  };
  auto disjoint = [](const std::set<int>& a, const std::set<int>& b) {
    return std::none_of(a.begin(), a.end(), [&](int x) { return b.count(x) > 0; });
  };
  const auto identity = [](const ManifestRecord& r) { return r.identity; };
  switch (split.protocol) {
    case ProtocolId::P1: {
      auto ids = [&](const std::vector<std::size_t>& part) {
        auto a = collect(part, true, identity);
        auto b = collect(part, false, identity);
        a.insert(b.begin(), b.end());
        return a;
      };
      const auto tr = ids(split.train), va = ids(split.val), te = ids(split.test);
      if (!disjoint(tr, va) || !disjoint(tr, te) || !disjoint(va, te)) fail("identities shared across splits");
      break;
    }
    case ProtocolId::P2: {
      const auto method = [](const ManifestRecord& r) { return *r.method; };
      const auto tr = collect(split.train, false, method), va = collect(split.val, false, method),
                 te = collect(split.test, false, method);
      if (!disjoint(tr, va) || !disjoint(tr, te) || !disjoint(va, te)) fail("attack methods shared across splits");
      break;
    }
    case ProtocolId::P3_1:
    case ProtocolId::P3_2: {
      const auto branch = [](const ManifestRecord& r) { return r.path->l2; };
      const auto tr = collect(split.train, false, branch), va = collect(split.val, false, branch),
                 te = collect(split.test, false, branch);
      if (!disjoint(tr, te) || !disjoint(va, te)) fail("test shares attack categories with train/val");
      break;
    }
  }
}

}  // namespace hiptune
