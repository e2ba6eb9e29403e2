#pragma once

// Train/val/test splits of a manifest:
//   P1   identity-disjoint splits covering every attack type;
//   P2   leaf methods partitioned 50/20/30 (unseen methods at test);
//   P3.1 train/val on {2D, manipulation, adversarial}, test on {3D, generation};
//   P3.2 the reverse direction.

#include "hiptune/manifest.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hiptune {

enum class ProtocolId { P1, P2, P3_1, P3_2 };

const char* to_string(ProtocolId p);
ProtocolId parse_protocol(const std::string& s);  // "p1", "p2", "p3.1", "p3.2"

struct ProtocolOptions {
  double p1_val = 0.2;
  double p1_test = 0.2;
  void validate() const;
};

struct ProtocolSplit {
  ProtocolId protocol = ProtocolId::P1;
  std::uint64_t seed = 0;
  std::vector<std::size_t> train, val, test;  // record indices, ascending
  // Partition metadata: identities per split (P1, and lives elsewhere) and
  // leaf methods per split (P2).
  std::vector<int> train_identities, val_identities, test_identities;
  std::vector<int> train_methods, val_methods, test_methods;

  // Copy of the manifest with split tags set; other records unassigned.
  Manifest apply(const Manifest& manifest) const;
  friend bool operator==(const ProtocolSplit&, const ProtocolSplit&) = default;
};

// Throws ProtocolError if a required category is absent.
ProtocolSplit make_protocol_split(const Manifest& manifest, ProtocolId protocol, std::uint64_t seed,
                                  const ProtocolOptions& options = {});

// Reads the split tags back out of a tagged manifest.
ProtocolSplit split_from_tags(const Manifest& manifest);

// Set assertions for a split. Throws InvariantViolation naming the first
// broken property (overlap, protocol-specific leakage).
void check_protocol_split(const Manifest& manifest, const ProtocolSplit& split);

}  // namespace hiptune
