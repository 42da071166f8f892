#pragma once

#include <string>
#include <vector>

#include "transhp/hierarchy.hpp"

namespace transhp {

// Built-in CIFAR-100 taxonomy: 100 fine classes, one coarse level of 20
// superclasses (0 aquatic mammals, 1 fish, ..., 19 vehicles-2).
const LabelHierarchy& cifar100_taxonomy();
const std::vector<std::string>& cifar100_coarse_names();

// Stock groupings that merge the 20 CIFAR-100 superclasses down to 10/5/2.
// Valid names: "cifar10", "cifar5", "cifar2".
const MergeSpec& cifar_merge_preset(const std::string& name);
std::vector<std::string> cifar_merge_preset_names();

// Published balance-parameter/placement presets, kept as documentation and
// selectable for paper-scale configurations. layer is 1-based.
struct LambdaEntry {
  int layer;
  double lambda;
};
struct LambdaPreset {
  std::string name;
  int depth;
  std::vector<LambdaEntry> entries;
};
const std::vector<LambdaPreset>& lambda_presets();
const LambdaPreset& lambda_preset(const std::string& name);

}  // namespace transhp
