#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "transhp/common.hpp"

namespace transhp {

// One coarse level: maps every fine class to a coarse class in [0, coarse_count).
struct HierarchyLevel {
  std::string name;
  int coarse_count = 0;
  std::vector<int> parent_of;  // length fine_count
};

// Multi-level label taxonomy, levels ordered coarse to fine. Immutable after
// construction; construction validates:
//   - every fine class has exactly one ancestor per level,
//   - coarse_count equals the number of distinct parents,
//   - consecutive levels are tree-consistent,
//   - coarse counts never decrease from coarser to finer levels.
class LabelHierarchy {
 public:
  LabelHierarchy(int fine_count, std::vector<HierarchyLevel> levels);

  int fine_count() const { return fine_count_; }
  int level_count() const { return static_cast<int>(levels_.size()); }
  const HierarchyLevel& level(int i) const;

  int ancestor_of(int fine_index, int level) const;

  std::string serialize() const;

 private:
  int fine_count_;
  std::vector<HierarchyLevel> levels_;
};

// Partition of a level's coarse indices into new (merged) coarse classes.
struct MergeSpec {
  std::vector<std::vector<int>> groups;
};

// Plain-text hierarchy format, line oriented, '#' starts a comment:
//   fine=<count> levels=<n>
//   level <name> M=<count>
//   <fine_index> <coarse_index>     (one line per fine class)
//   ... further levels, coarse to fine
LabelHierarchy load_hierarchy(std::istream& in);
LabelHierarchy load_hierarchy_file(const std::string& path);
void save_hierarchy_file(const LabelHierarchy& h, const std::string& path);

// New hierarchy whose given level has one coarse class per group; the spec
// must partition [0, M) exactly. The result is re-validated.
LabelHierarchy merge_coarse(const LabelHierarchy& h, int level, const MergeSpec& spec);

}  // namespace transhp
