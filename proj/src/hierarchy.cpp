#include "transhp/hierarchy.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace transhp {

namespace {

void validate_level(int fine_count, const HierarchyLevel& lv) {
  if (static_cast<int>(lv.parent_of.size()) != fine_count)
    throw ValidationError("level '" + lv.name + "' maps " + std::to_string(lv.parent_of.size()) +
                          " fine classes, hierarchy declares " + std::to_string(fine_count));
  std::set<int> distinct;
  for (int f = 0; f < fine_count; ++f) {
    const int c = lv.parent_of[static_cast<size_t>(f)];
    if (c < 0 || c >= lv.coarse_count)
      throw ValidationError("level '" + lv.name + "': fine class " + std::to_string(f) +
                            " maps to coarse " + std::to_string(c) + " outside [0," +
                            std::to_string(lv.coarse_count) + ")");
    distinct.insert(c);
  }
  if (static_cast<int>(distinct.size()) != lv.coarse_count)
    throw ValidationError("level '" + lv.name + "' declares M=" + std::to_string(lv.coarse_count) +
                          " but only " + std::to_string(distinct.size()) +
                          " coarse classes are used");
}

// Coarser level A and finer level B: classes sharing a B ancestor must share
// an A ancestor.
void validate_consistency(const HierarchyLevel& a, const HierarchyLevel& b) {
  std::unordered_map<int, int> b_to_a;
  std::unordered_map<int, int> b_witness;
  for (int f = 0; f < static_cast<int>(b.parent_of.size()); ++f) {
    const int bc = b.parent_of[static_cast<size_t>(f)];
    const int ac = a.parent_of[static_cast<size_t>(f)];
    auto it = b_to_a.find(bc);
    if (it == b_to_a.end()) {
      b_to_a[bc] = ac;
      b_witness[bc] = f;
    } else if (it->second != ac) {
      throw ValidationError("tree consistency violated between levels '" + a.name + "' and '" +
                            b.name + "': fine classes " + std::to_string(b_witness[bc]) + " and " +
                            std::to_string(f) + " share '" + b.name + "' ancestor " +
                            std::to_string(bc) + " but have '" + a.name + "' ancestors " +
                            std::to_string(it->second) + " and " + std::to_string(ac));
    }
  }
}

}  // namespace

LabelHierarchy::LabelHierarchy(int fine_count, std::vector<HierarchyLevel> levels)
    : fine_count_(fine_count), levels_(std::move(levels)) {
  if (fine_count_ <= 0) throw ValidationError("hierarchy needs at least one fine class");
  if (levels_.empty()) throw ValidationError("hierarchy needs at least one level");
  for (const auto& lv : levels_) validate_level(fine_count_, lv);
  for (size_t i = 0; i + 1 < levels_.size(); ++i) {
    if (levels_[i].coarse_count > levels_[i + 1].coarse_count)
      throw ValidationError("levels must coarsen bottom-up: level '" + levels_[i].name + "' has M=" +
                            std::to_string(levels_[i].coarse_count) + " > M=" +
                            std::to_string(levels_[i + 1].coarse_count) + " of finer level '" +
                            levels_[i + 1].name + "'");
    validate_consistency(levels_[i], levels_[i + 1]);
  }
}

const HierarchyLevel& LabelHierarchy::level(int i) const {
  if (i < 0 || i >= level_count())
    throw IndexError("level " + std::to_string(i) + " out of range [0," +
                     std::to_string(level_count()) + ")");
  return levels_[static_cast<size_t>(i)];
}

int LabelHierarchy::ancestor_of(int fine_index, int lvl) const {
  const HierarchyLevel& l = level(lvl);
  if (fine_index < 0 || fine_index >= fine_count_)
    throw IndexError("fine index " + std::to_string(fine_index) + " out of range [0," +
                     std::to_string(fine_count_) + ")");
  return l.parent_of[static_cast<size_t>(fine_index)];
}

std::string LabelHierarchy::serialize() const {
  std::ostringstream out;
  out << "fine=" << fine_count_ << " levels=" << level_count() << "\n";
  for (const auto& lv : levels_) {
    out << "level " << lv.name << " M=" << lv.coarse_count << "\n";
    for (int f = 0; f < fine_count_; ++f)
      out << f << " " << lv.parent_of[static_cast<size_t>(f)] << "\n";
  }
  return out.str();
}

LabelHierarchy load_hierarchy(std::istream& in) {
  std::string line;
  int lineno = 0;
  auto next_line = [&](std::string& out) -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream probe(line);
      std::string tok;
      if (probe >> tok) {
        out = line;
        return true;
      }
    }
    return false;
  };

  std::string l;
  if (!next_line(l)) throw ParseError("empty hierarchy file");
  int fine_count = -1, level_n = -1;
  if (std::sscanf(l.c_str(), "fine=%d levels=%d", &fine_count, &level_n) != 2)
    throw ParseError("line " + std::to_string(lineno) + ": expected 'fine=<count> levels=<n>'");
  if (fine_count <= 0 || level_n <= 0)
    throw ParseError("line " + std::to_string(lineno) + ": counts must be positive");

  std::vector<HierarchyLevel> levels;
  for (int li = 0; li < level_n; ++li) {
    if (!next_line(l))
      throw ParseError("line " + std::to_string(lineno) + ": missing header for level " +
                       std::to_string(li));
    HierarchyLevel lv;
    {
      std::istringstream hs(l);
      std::string kw, mtok;
      if (!(hs >> kw >> lv.name >> mtok) || kw != "level" ||
          std::sscanf(mtok.c_str(), "M=%d", &lv.coarse_count) != 1)
        throw ParseError("line " + std::to_string(lineno) + ": expected 'level <name> M=<count>'");
    }
    lv.parent_of.assign(static_cast<size_t>(fine_count), -1);
    for (int i = 0; i < fine_count; ++i) {
      if (!next_line(l))
        throw ParseError("line " + std::to_string(lineno) + ": level '" + lv.name + "' truncated, " +
                         std::to_string(i) + " of " + std::to_string(fine_count) + " pairs read");
      std::istringstream ps(l);
      int f = -1, c = -1;
      if (!(ps >> f >> c))
        throw ParseError("line " + std::to_string(lineno) + ": expected '<fine> <coarse>' pair");
      if (f < 0 || f >= fine_count)
        throw ParseError("line " + std::to_string(lineno) + ": unknown fine index " +
                         std::to_string(f));
      if (lv.parent_of[static_cast<size_t>(f)] != -1)
        throw ParseError("line " + std::to_string(lineno) + ": fine index " + std::to_string(f) +
                         " mapped twice in level '" + lv.name + "'");
      lv.parent_of[static_cast<size_t>(f)] = c;
    }
    levels.push_back(std::move(lv));
  }
  return LabelHierarchy(fine_count, std::move(levels));
}

LabelHierarchy load_hierarchy_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open hierarchy file '" + path + "'");
  return load_hierarchy(in);
}

void save_hierarchy_file(const LabelHierarchy& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write hierarchy file '" + path + "'");
  out << h.serialize();
  if (!out) throw IoError("write failed for '" + path + "'");
}

LabelHierarchy merge_coarse(const LabelHierarchy& h, int level, const MergeSpec& spec) {
  const HierarchyLevel& lv = h.level(level);
  const int M = lv.coarse_count;
  std::vector<int> group_of(static_cast<size_t>(M), -1);
  for (size_t g = 0; g < spec.groups.size(); ++g) {
    for (int c : spec.groups[g]) {
      if (c < 0 || c >= M)
        throw ContractError("merge group contains coarse index " + std::to_string(c) +
                            " outside [0," + std::to_string(M) + ")");
      if (group_of[static_cast<size_t>(c)] != -1)
        throw ContractError("merge groups overlap on coarse index " + std::to_string(c));
      group_of[static_cast<size_t>(c)] = static_cast<int>(g);
    }
  }
  for (int c = 0; c < M; ++c)
    if (group_of[static_cast<size_t>(c)] == -1)
      throw ContractError("merge groups do not cover coarse index " + std::to_string(c));

  std::vector<HierarchyLevel> levels;
  for (int i = 0; i < h.level_count(); ++i) levels.push_back(h.level(i));
  HierarchyLevel& target = levels[static_cast<size_t>(level)];
  target.coarse_count = static_cast<int>(spec.groups.size());
  for (int f = 0; f < h.fine_count(); ++f)
    target.parent_of[static_cast<size_t>(f)] = group_of[static_cast<size_t>(target.parent_of[static_cast<size_t>(f)])];
  return LabelHierarchy(h.fine_count(), std::move(levels));
}

}  // namespace transhp
