#pragma once

// In-memory response, feature and item-bank tables shared by every module.

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "autoirt/irt.hpp"

namespace autoirt {

struct Response {
  std::string session_id;
  std::string item_id;
  Grade grade;
  std::optional<std::string> timestamp;  // ISO-8601; row order defines time when absent

  bool operator==(const Response&) const = default;
};

/// The sparse set of graded (item, session) pairs. Row order is meaningful: it is the
/// time order whenever timestamps are absent.
struct ResponseTable {
  std::vector<Response> rows;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
  void add(std::string session, std::string item, int grade) {
    rows.push_back({std::move(session), std::move(item), Grade(grade), std::nullopt});
  }
  bool operator==(const ResponseTable&) const = default;

  std::set<std::string> item_ids() const {
    std::set<std::string> out;
    for (const auto& r : rows) out.insert(r.item_id);
    return out;
  }
  std::set<std::string> session_ids() const {
    std::set<std::string> out;
    for (const auto& r : rows) out.insert(r.session_id);
    return out;
  }
};

struct ItemResponse {
  std::string item_id;
  Grade grade;
  bool operator==(const ItemResponse&) const = default;
};

struct SessionResponses {
  std::string session_id;
  std::vector<ItemResponse> responses;
};

/// Groups rows by session, sessions ordered by id. Throws if a session answers an item twice.
inline std::vector<SessionResponses> group_by_session(const ResponseTable& table) {
  std::map<std::string, std::vector<ItemResponse>> grouped;
  for (const auto& r : table.rows) grouped[r.session_id].push_back({r.item_id, r.grade});
  std::vector<SessionResponses> out;
  out.reserve(grouped.size());
  for (auto& [sid, responses] : grouped) {
    std::set<std::string> seen;
    for (const auto& ir : responses) {
      if (!seen.insert(ir.item_id).second) {
        throw Error("session '" + sid + "' answers item '" + ir.item_id + "' more than once");
      }
    }
    out.push_back({sid, std::move(responses)});
  }
  return out;
}

using ItemBank = std::map<std::string, ItemParams>;

/// Numeric item features keyed by item id; every vector has names.size() entries.
struct FeatureTable {
  std::vector<std::string> names;
  std::map<std::string, std::vector<double>> rows;

  std::size_t dimension() const { return names.size(); }
  bool contains(const std::string& id) const { return rows.count(id) > 0; }
  const std::vector<double>& at(const std::string& id) const {
    auto it = rows.find(id);
    if (it == rows.end()) throw Error("no features for item '" + id + "'");
    return it->second;
  }
  void set(const std::string& id, std::vector<double> values) {
    if (values.size() != names.size()) {
      throw Error("feature row for '" + id + "' has " + std::to_string(values.size()) +
                  " values, expected " + std::to_string(names.size()));
    }
    rows[id] = std::move(values);
  }
  bool operator==(const FeatureTable&) const = default;
};

}  // namespace autoirt
