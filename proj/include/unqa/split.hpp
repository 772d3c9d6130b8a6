#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "unqa/core.hpp"
#include "unqa/media.hpp"

namespace unqa {

struct DatabaseSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SplitAssignment {
  std::uint64_t seed = 0;
  std::map<std::string, DatabaseSplit> databases;

  const DatabaseSplit& at(const std::string& name) const {
    auto it = databases.find(name);
    require(it != databases.end(), ErrorCode::invalid_argument, "no split for database '" + name + "'");
    return it->second;
  }
};

struct SplitSizes {
  std::size_t train, val, test;
  bool operator==(const SplitSizes&) const = default;
};

/// 7:1:2 with val and test floored and the remainder assigned to train.
inline SplitSizes split_sizes(std::size_t n) {
  const std::size_t val = n / 10;
  const std::size_t test = (2 * n) / 10;
  return {n - val - test, val, test};
}

inline DatabaseSplit split_database(const Database& db, std::uint64_t seed) {
  const std::size_t n = db.samples.size();
  require(n >= 10, ErrorCode::invalid_argument,
          "database '" + db.spec.name + "' has " + std::to_string(n) + " samples; at least 10 are needed to split");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Fnv1a tag;
  tag.update(db.spec.name);
  Rng rng(derive_seed(seed, tag.digest()));
  rng.shuffle(order);
  const SplitSizes sizes = split_sizes(n);
  DatabaseSplit split;
  for (std::size_t k = 0; k < n; ++k) {
    const std::string& id = db.samples[order[k]].sample_id;
    if (k < sizes.train) split.train.push_back(id);
    else if (k < sizes.train + sizes.val) split.val.push_back(id);
    else split.test.push_back(id);
  }
  return split;
}

inline SplitAssignment split_databases(const std::vector<std::shared_ptr<const Database>>& dbs, std::uint64_t seed) {
  SplitAssignment out;
  out.seed = seed;
  for (const auto& db : dbs) out.databases[db->spec.name] = split_database(*db, seed);
  return out;
}

}  // namespace unqa
