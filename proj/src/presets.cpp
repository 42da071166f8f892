#include "transhp/presets.hpp"

#include <algorithm>

namespace transhp {

namespace {

// Coarse superclass of each CIFAR-100 fine label (fine labels in the usual
// alphabetical order: 0 apple, 1 aquarium_fish, ..., 99 worm).
constexpr int kCifarCoarseOfFine[100] = {
    4,  1,  14, 8,  0,  6,  7,  7,  18, 3,  3,  14, 9,  18, 7,  11, 3,  9,  7,  11,
    6,  11, 5,  10, 7,  6,  13, 15, 3,  15, 0,  11, 1,  10, 12, 14, 16, 9,  11, 5,
    5,  19, 8,  8,  15, 13, 14, 17, 18, 10, 16, 4,  17, 4,  2,  0,  17, 4,  18, 17,
    10, 3,  2,  12, 12, 16, 12, 1,  9,  19, 2,  10, 0,  1,  16, 12, 9,  13, 15, 13,
    16, 19, 2,  4,  6,  19, 5,  5,  8,  19, 18, 1,  2,  15, 6,  0,  17, 8,  14, 13};

}  // namespace

const LabelHierarchy& cifar100_taxonomy() {
  static const LabelHierarchy h = [] {
    HierarchyLevel lv;
    lv.name = "superclass";
    lv.coarse_count = 20;
    lv.parent_of.assign(kCifarCoarseOfFine, kCifarCoarseOfFine + 100);
    return LabelHierarchy(100, {lv});
  }();
  return h;
}

const std::vector<std::string>& cifar100_coarse_names() {
  static const std::vector<std::string> names = {
      "aquatic mammals",
      "fish",
      "flowers",
      "food containers",
      "fruit and vegetables",
      "household electrical devices",
      "household furniture",
      "insects",
      "large carnivores",
      "large man-made outdoor things",
      "large natural outdoor scenes",
      "large omnivores and herbivores",
      "medium mammals",
      "non-insect invertebrates",
      "people",
      "reptiles",
      "small mammals",
      "trees",
      "vehicles-1",
      "vehicles-2"};
  return names;
}

const MergeSpec& cifar_merge_preset(const std::string& name) {
  static const MergeSpec ten{{{0, 1}, {2, 17}, {3, 4}, {5, 6}, {12, 16}, {8, 11}, {14, 15}, {9, 10}, {7, 13}, {18, 19}}};
  static const MergeSpec five{{{0, 1, 12, 16}, {2, 17, 3, 4}, {5, 6, 9, 10}, {8, 11, 18, 19}, {7, 13, 14, 15}}};
  static const MergeSpec two{{{0, 1, 7, 8, 11, 12, 13, 14, 15, 16}, {2, 3, 4, 5, 6, 9, 10, 17, 18, 19}}};
  if (name == "cifar10") return ten;
  if (name == "cifar5") return five;
  if (name == "cifar2") return two;
  throw ValidationError("unknown merge preset '" + name + "' (expected cifar10, cifar5, cifar2)");
}

std::vector<std::string> cifar_merge_preset_names() { return {"cifar10", "cifar5", "cifar2"}; }

const std::vector<LambdaPreset>& lambda_presets() {
  // Table columns are 0-based transformer layers; stored 1-based. The final
  // fine-classification weight is always 1 and is not an entry here.
  static const std::vector<LambdaPreset> presets = {
      {"imagenet", 12, {{1, 0.1}, {2, 0.1}, {3, 0.1}, {4, 0.1}, {5, 0.1}, {6, 0.15}, {7, 0.15}, {8, 0.15}, {9, 0.15}, {10, 1.0}, {11, 1.0}}},
      {"inaturalist-2018", 12, {{7, 1.0}}},
      {"inaturalist-2019", 12, {{7, 1.0}}},
      {"cifar-100", 12, {{9, 1.0}}},
      {"deepfashion", 12, {{7, 0.5}, {9, 1.0}}},
  };
  return presets;
}

const LambdaPreset& lambda_preset(const std::string& name) {
  for (const auto& p : lambda_presets())
    if (p.name == name) return p;
  throw ValidationError("unknown balance-parameter preset '" + name + "'");
}

}  // namespace transhp
