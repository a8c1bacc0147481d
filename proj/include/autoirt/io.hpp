#pragma once

// File formats: CSV tables, JSON artifacts with provenance, atomic writes and the run
// configuration.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "autoirt/baselines.hpp"
#include "autoirt/data.hpp"
#include "autoirt/learner.hpp"
#include "autoirt/mcem.hpp"
#include "autoirt/metrics.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/projection.hpp"
#include "autoirt/simgen.hpp"

namespace autoirt {

using nlohmann::json;

inline constexpr const char* kToolName = "autoirt";
inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------------------------
// provenance and atomic output
// ---------------------------------------------------------------------------------------------

struct Provenance {
  std::string tool = kToolName;
  std::string version = kToolVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json provenance_json(const Provenance& p) {
  return {{"tool", p.tool}, {"version", p.version}, {"config_hash", hex64(p.config_hash)}, {"seed", p.seed}};
}

inline std::string provenance_comment(const Provenance& p) {
  return "# " + p.tool + " " + p.version + " config_hash=" + hex64(p.config_hash) +
         " seed=" + std::to_string(p.seed) + " schema_version=" + std::to_string(kSchemaVersion) + "\n";
}

/// Writes through a sibling temp file and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out << content;
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error("failed writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot move output into place at '" + path.string() + "': " + ec.message());
  }
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("cannot format number");
  return std::string(buf, end);
}

// ---------------------------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------------------------

struct CsvTable {
  std::string source;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based source line of each row

  std::size_t column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    throw Error(source + ": missing column '" + name + "'");
  }
  std::optional<std::size_t> find_column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    return std::nullopt;
  }
  [[noreturn]] void fail(std::size_t row, const std::string& what) const {
    throw Error(source + ":" + std::to_string(lines[row]) + ": " + what);
  }
};

/// RFC-4180 style: quoted fields may hold commas, doubled quotes and newlines. Lines
/// starting with '#' before the header are comments.
inline CsvTable parse_csv(const std::string& text, const std::string& source = "<csv>") {
  CsvTable t;
  t.source = source;
  std::size_t pos = 0, line = 1;
  const std::size_t n = text.size();
  if (n >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) pos = 3;
  while (pos < n && text[pos] == '#') {
    while (pos < n && text[pos] != '\n') ++pos;
    if (pos < n) ++pos;
    ++line;
  }
  bool have_header = false;
  while (pos < n) {
    const std::size_t start_line = line;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false, was_quoted = false;
    for (;;) {
      if (pos >= n) {
        if (quoted) throw Error(source + ":" + std::to_string(start_line) + ": unterminated quoted field");
        record.push_back(std::move(field));
        break;
      }
      const char ch = text[pos++];
      if (quoted) {
        if (ch == '"') {
          if (pos < n && text[pos] == '"') {
            field.push_back('"');
            ++pos;
          } else {
            quoted = false;
          }
        } else {
          if (ch == '\n') ++line;
          field.push_back(ch);
        }
        continue;
      }
      if (ch == '"' && field.empty() && !was_quoted) {
        quoted = was_quoted = true;
      } else if (ch == ',') {
        record.push_back(std::move(field));
        field.clear();
        was_quoted = false;
      } else if (ch == '\n' || ch == '\r') {
        if (ch == '\r' && pos < n && text[pos] == '\n') ++pos;
        ++line;
        record.push_back(std::move(field));
        break;
      } else {
        if (was_quoted) {
          throw Error(source + ":" + std::to_string(line) + ": text after closing quote");
        }
        field.push_back(ch);
      }
    }
    if (record.size() == 1 && record[0].empty()) continue;  // blank line
    if (!have_header) {
      t.header = std::move(record);
      have_header = true;
      std::set<std::string> seen;
      for (const auto& h : t.header) {
        if (!seen.insert(h).second) throw Error(source + ": duplicate column '" + h + "'");
      }
      continue;
    }
    if (record.size() != t.header.size()) {
      throw Error(source + ":" + std::to_string(start_line) + ": expected " + std::to_string(t.header.size()) +
                  " fields, found " + std::to_string(record.size()));
    }
    t.rows.push_back(std::move(record));
    t.lines.push_back(start_line);
  }
  if (!have_header) throw Error(source + ": missing header row");
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_text(path), path.string()); }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos && (s.empty() || s[0] != '#')) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void append_row(std::string& out, const std::vector<std::string>& fields) {
  for (std::size_t j = 0; j < fields.size(); ++j) {
    if (j) out.push_back(',');
    out += csv_field(fields[j]);
  }
  out.push_back('\n');
}

inline double parse_number(const CsvTable& t, std::size_t row, std::size_t col, bool allow_missing = false) {
  const std::string& s = t.rows[row][col];
  if (s.empty() || s == "NA" || s == "nan" || s == "NaN") {
    if (allow_missing) return std::numeric_limits<double>::quiet_NaN();
    t.fail(row, "column '" + t.header[col] + "' is empty");
  }
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e || !std::isfinite(v)) {
    t.fail(row, "column '" + t.header[col] + "' value '" + s + "' is not a finite number");
  }
  return v;
}

// ---------------------------------------------------------------------------------------------
// responses, features, scores and other tables
// ---------------------------------------------------------------------------------------------

/// `session_id,item_id,grade[,timestamp]`; grades must be 0 or 1, (session, item) pairs unique.
inline ResponseTable parse_responses(const CsvTable& t) {
  const std::size_t cs = t.column("session_id"), ci = t.column("item_id"), cg = t.column("grade");
  const auto ct = t.find_column("timestamp");
  ResponseTable out;
  out.rows.reserve(t.rows.size());
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row[cs].empty()) t.fail(r, "empty session_id");
    if (row[ci].empty()) t.fail(r, "empty item_id");
    if (row[cg] != "0" && row[cg] != "1") t.fail(r, "grade '" + row[cg] + "' must be 0 or 1");
    auto [it, fresh] = seen.emplace(std::make_pair(row[cs], row[ci]), t.lines[r]);
    if (!fresh) {
      t.fail(r, "duplicate response for session '" + row[cs] + "', item '" + row[ci] + "' (first at line " +
                    std::to_string(it->second) + ")");
    }
    Response resp{row[cs], row[ci], Grade(row[cg] == "1" ? 1 : 0), std::nullopt};
    if (ct && !row[*ct].empty()) resp.timestamp = row[*ct];
    out.rows.push_back(std::move(resp));
  }
  return out;
}

inline ResponseTable read_responses(const std::filesystem::path& path) { return parse_responses(read_csv(path)); }

inline std::string format_responses(const ResponseTable& table, const std::optional<Provenance>& prov = {}) {
  const bool stamped = std::any_of(table.rows.begin(), table.rows.end(),
                                   [](const Response& r) { return r.timestamp.has_value(); });
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, stamped ? std::vector<std::string>{"session_id", "item_id", "grade", "timestamp"}
                          : std::vector<std::string>{"session_id", "item_id", "grade"});
  for (const auto& r : table.rows) {
    std::vector<std::string> f{r.session_id, r.item_id, std::to_string(r.grade.value())};
    if (stamped) f.push_back(r.timestamp.value_or(""));
    append_row(out, f);
  }
  return out;
}

inline void write_responses(const std::filesystem::path& path, const ResponseTable& table,
                            const std::optional<Provenance>& prov = {}) {
  write_atomic(path, format_responses(table, prov));
}

/// `item_id,<feature>...`; empty cells (or NA) are missing values.
inline FeatureTable parse_features(const CsvTable& t) {
  const std::size_t ci = t.column("item_id");
  FeatureTable f;
  for (std::size_t j = 0; j < t.header.size(); ++j) {
    if (j != ci) f.names.push_back(t.header[j]);
  }
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& id = t.rows[r][ci];
    if (id.empty()) t.fail(r, "empty item_id");
    if (f.contains(id)) t.fail(r, "duplicate item '" + id + "'");
    std::vector<double> x;
    for (std::size_t j = 0; j < t.header.size(); ++j) {
      if (j != ci) x.push_back(parse_number(t, r, j, true));
    }
    f.rows.emplace(id, std::move(x));
  }
  return f;
}

inline FeatureTable read_features(const std::filesystem::path& path) { return parse_features(read_csv(path)); }

inline std::string format_features(const FeatureTable& f, const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  std::vector<std::string> header{"item_id"};
  header.insert(header.end(), f.names.begin(), f.names.end());
  append_row(out, header);
  for (const auto& [id, x] : f.rows) {
    std::vector<std::string> row{id};
    for (double v : x) row.push_back(format_double(v));
    append_row(out, row);
  }
  return out;
}

inline void write_features(const std::filesystem::path& path, const FeatureTable& f,
                           const std::optional<Provenance>& prov = {}) {
  write_atomic(path, format_features(f, prov));
}

/// `session_id,score,posterior_sd`.
inline void write_scores(const std::filesystem::path& path, const std::map<std::string, SessionScore>& scores,
                         const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, {"session_id", "score", "posterior_sd"});
  for (const auto& [sid, s] : scores) append_row(out, {sid, format_double(s.score), format_double(s.sd)});
  write_atomic(path, out);
}

inline std::map<std::string, SessionScore> read_scores(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t cs = t.column("session_id"), cv = t.column("score");
  const auto csd = t.find_column("posterior_sd");
  std::map<std::string, SessionScore> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    SessionScore s{parse_number(t, r, cv), csd ? parse_number(t, r, *csd) : 0.0};
    if (!out.emplace(t.rows[r][cs], s).second) t.fail(r, "duplicate session '" + t.rows[r][cs] + "'");
  }
  return out;
}

/// `iteration,nonparametric_loss,parametric_loss`.
inline void write_trace(const std::filesystem::path& path, const std::vector<TraceEntry>& trace,
                        const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, {"iteration", "nonparametric_loss", "parametric_loss"});
  for (const auto& e : trace) {
    append_row(out, {std::to_string(e.iteration), format_double(e.nonparametric_loss),
                     format_double(e.parametric_loss)});
  }
  write_atomic(path, out);
}

inline std::vector<TraceEntry> read_trace(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t ci = t.column("iteration"), cn = t.column("nonparametric_loss"), cp = t.column("parametric_loss");
  std::vector<TraceEntry> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out.push_back({static_cast<int>(parse_number(t, r, ci)), parse_number(t, r, cn), parse_number(t, r, cp)});
  }
  return out;
}

/// `item_id,residual,converged,low_information`.
inline void write_diagnostics(const std::filesystem::path& path,
                              const std::map<std::string, ProjectionResult>& diagnostics,
                              const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, {"item_id", "residual", "converged", "low_information"});
  for (const auto& [id, d] : diagnostics) {
    append_row(out, {id, format_double(d.residual), d.converged ? "1" : "0", d.low_information ? "1" : "0"});
  }
  write_atomic(path, out);
}

/// `bin,mean_grade,mean_pred,count`.
inline void write_calibration_table(const std::filesystem::path& path, const std::vector<CalibrationBin>& bins,
                                    const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, {"bin", "mean_grade", "mean_pred", "count"});
  for (const auto& b : bins) {
    append_row(out, {std::to_string(b.bin), format_double(b.mean_grade), format_double(b.mean_pred),
                     std::to_string(b.count)});
  }
  write_atomic(path, out);
}

using RepeatPairs = std::vector<std::pair<std::string, std::string>>;

/// `session_a,session_b`.
inline RepeatPairs read_pairs(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t ca = t.column("session_a"), cb = t.column("session_b");
  RepeatPairs out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.rows[r][ca].empty() || t.rows[r][cb].empty()) t.fail(r, "empty session id in pair");
    out.emplace_back(t.rows[r][ca], t.rows[r][cb]);
  }
  return out;
}

inline void write_pairs(const std::filesystem::path& path, const RepeatPairs& pairs,
                        const std::optional<Provenance>& prov = {}) {
  std::string out = prov ? provenance_comment(*prov) : "";
  append_row(out, {"session_a", "session_b"});
  for (const auto& [a, b] : pairs) append_row(out, {a, b});
  write_atomic(path, out);
}

// ---------------------------------------------------------------------------------------------
// JSON artifacts
// ---------------------------------------------------------------------------------------------

inline json artifact(const std::string& kind, const Provenance& prov) {
  return {{"schema_version", kSchemaVersion}, {"kind", kind}, {"provenance", provenance_json(prov)}};
}

inline void check_artifact(const json& j, const std::string& kind, const std::string& source) {
  if (!j.is_object() || j.value("kind", std::string{}) != kind) {
    throw Error(source + ": not a " + kind + " document");
  }
  if (j.value("schema_version", 0) != kSchemaVersion) {
    throw Error(source + ": unsupported schema_version " + j.value("schema_version", json(nullptr)).dump());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw Error(path.string() + ": invalid JSON: " + e.what());
  }
}

inline json item_json(const std::string& id, const ItemParams& p) {
  return {{"item_id", id}, {"a", p.a}, {"d", p.d}, {"c", p.c}, {"log_a", std::log(p.a)}};
}

inline json bank_json(const ItemBank& bank, const ModelFamily& family, const Provenance& prov) {
  json j = artifact("item_bank", prov);
  j["family"] = family.name();
  if (family.kind == FamilyKind::ThreePLFixedC) j["fixed_c"] = family.fixed_c;
  json items = json::array();
  for (const auto& [id, p] : bank) items.push_back(item_json(id, p));
  j["items"] = std::move(items);
  return j;
}

/// Accepts the enveloped document or a bare array of item records.
inline ItemBank parse_bank(const json& j, const std::string& source = "<bank>") {
  const json* items = &j;
  if (j.is_object()) {
    check_artifact(j, "item_bank", source);
    items = &j.at("items");
  }
  if (!items->is_array()) throw Error(source + ": item bank must be an array of item records");
  ItemBank bank;
  for (std::size_t k = 0; k < items->size(); ++k) {
    const json& rec = (*items)[k];
    try {
      const std::string id = rec.at("item_id").get<std::string>();
      double a = rec.contains("a") ? rec.at("a").get<double>() : std::exp(rec.at("log_a").get<double>());
      ItemParams p{a, rec.value("c", 0.0), rec.at("d").get<double>()};
      p.validate();
      if (!bank.emplace(id, p).second) throw Error("duplicate item '" + id + "'");
    } catch (const json::exception& e) {
      throw Error(source + ": item record " + std::to_string(k) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(source + ": item record " + std::to_string(k) + ": " + e.what());
    }
  }
  return bank;
}

inline void write_bank(const std::filesystem::path& path, const ItemBank& bank, const ModelFamily& family,
                       const Provenance& prov) {
  write_json(path, bank_json(bank, family, prov));
}

inline ItemBank read_bank(const std::filesystem::path& path) { return parse_bank(read_json(path), path.string()); }

// --- gradient-boosted classifier ---

inline json learner_config_json(const LearnerConfig& c) {
  return {{"rounds", c.rounds},
          {"max_depth", c.max_depth},
          {"learning_rate", c.learning_rate},
          {"validation_fraction", c.validation_fraction},
          {"early_stopping_patience", c.early_stopping_patience},
          {"l2", c.l2},
          {"min_child_hessian", c.min_child_hessian},
          {"min_split_gain", c.min_split_gain},
          {"min_rows_per_leaf", c.min_rows_per_leaf},
          {"max_bins", c.max_bins},
          {"cat_smooth", c.cat_smooth},
          {"cat_l2", c.cat_l2},
          {"max_cat_threshold", c.max_cat_threshold},
          {"min_data_per_group", c.min_data_per_group},
          {"use_item_id", c.use_item_id},
          {"marginalize_unseen", c.marginalize_unseen},
          {"item_offset_l2", c.item_offset_l2},
          {"subsample", c.subsample},
          {"features_first", c.features_first},
          {"refit_full", c.refit_full}};
}

namespace detail {

/// Strict object reader: every key must be consumed, or `finish` names the stray one.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(where() + "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<std::int64_t>() >= 0)) {
          throw Error("expected a non-negative integer");
        }
      }
      if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw Error("expected an integer");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw Error(where() + "key '" + key + "': " + e.what());
    } catch (const Error& e) {
      throw Error(where() + "key '" + key + "': " + e.what());
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw Error("unknown configuration key '" + path(it.key().c_str()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config '" + path_ + "': "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline LearnerConfig parse_learner_config(const json& j, const std::string& path = "learner") {
  LearnerConfig c;
  detail::ObjectReader r(j, path);
  r.get("rounds", c.rounds);
  r.get("max_depth", c.max_depth);
  r.get("learning_rate", c.learning_rate);
  r.get("validation_fraction", c.validation_fraction);
  r.get("early_stopping_patience", c.early_stopping_patience);
  r.get("l2", c.l2);
  r.get("min_child_hessian", c.min_child_hessian);
  r.get("min_split_gain", c.min_split_gain);
  r.get("min_rows_per_leaf", c.min_rows_per_leaf);
  r.get("max_bins", c.max_bins);
  r.get("cat_smooth", c.cat_smooth);
  r.get("cat_l2", c.cat_l2);
  r.get("max_cat_threshold", c.max_cat_threshold);
  r.get("min_data_per_group", c.min_data_per_group);
  r.get("use_item_id", c.use_item_id);
  r.get("marginalize_unseen", c.marginalize_unseen);
  r.get("item_offset_l2", c.item_offset_l2);
  r.get("subsample", c.subsample);
  r.get("features_first", c.features_first);
  r.get("refit_full", c.refit_full);
  r.finish();
  GbtLearner{c};  // range checks
  return c;
}

inline json classifier_json(const GbtModel& m, const Provenance& prov) {
  json j = artifact("gbt_classifier", prov);
  j["feature_dim"] = m.feature_dim;
  j["use_item_id"] = m.use_item_id;
  j["feature_names"] = m.feature_names;
  j["medians"] = m.medians;
  j["item_vocabulary"] = m.item_vocabulary;
  j["base_score"] = m.base_score;
  j["item_offsets"] = m.item_offsets;
  j["config"] = learner_config_json(m.config);
  j["metadata"] = {{"rounds", m.meta.rounds},
                   {"rounds_trained", m.meta.rounds_trained},
                   {"feature_rounds", m.meta.feature_rounds},
                   {"validation_loss", m.meta.validation_loss},
                   {"baseline_loss", m.meta.baseline_loss},
                   {"seed", m.meta.seed},
                   {"n_train", m.meta.n_train},
                   {"n_validation", m.meta.n_validation}};
  json trees = json::array();
  for (const Tree& t : m.trees) {
    json nodes = json::array();
    for (const TreeNode& n : t.nodes) {
      if (n.is_leaf()) {
        nodes.push_back({{"value", n.value}, {"cover", n.cover}});
      } else if (n.categorical) {
        nodes.push_back({{"column", n.column}, {"left_set", n.left_set}, {"left", n.left},
                         {"right", n.right}, {"cover", n.cover}});
      } else {
        nodes.push_back({{"column", n.column}, {"threshold", n.threshold}, {"left", n.left},
                         {"right", n.right}, {"cover", n.cover}});
      }
    }
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  return j;
}

inline GbtModel parse_classifier(const json& j, const std::string& source = "<classifier>") {
  check_artifact(j, "gbt_classifier", source);
  try {
    GbtModel m;
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.use_item_id = j.at("use_item_id").get<bool>();
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.medians = j.at("medians").get<std::vector<double>>();
    m.item_vocabulary = j.at("item_vocabulary").get<std::vector<std::string>>();
    m.base_score = j.at("base_score").get<double>();
    m.item_offsets = j.value("item_offsets", std::vector<double>{});
    m.config = parse_learner_config(j.at("config"), "config");
    const json& meta = j.at("metadata");
    m.meta.rounds = meta.at("rounds").get<int>();
    m.meta.rounds_trained = meta.at("rounds_trained").get<int>();
    m.meta.feature_rounds = meta.at("feature_rounds").get<int>();
    m.meta.validation_loss = meta.at("validation_loss").get<double>();
    m.meta.baseline_loss = meta.at("baseline_loss").get<double>();
    m.meta.seed = meta.at("seed").get<std::uint64_t>();
    m.meta.n_train = meta.at("n_train").get<std::size_t>();
    m.meta.n_validation = meta.at("n_validation").get<std::size_t>();
    if (m.medians.size() != m.feature_dim + 1) throw Error("medians do not match feature_dim");
    if (!m.item_offsets.empty() && m.item_offsets.size() != m.item_vocabulary.size()) {
      throw Error("item_offsets do not match the vocabulary");
    }
    const int n_cols = static_cast<int>(m.feature_dim) + 1 + (m.use_item_id ? 1 : 0);
    for (const json& tj : j.at("trees")) {
      Tree t;
      for (const json& nj : tj) {
        TreeNode n;
        n.cover = nj.value("cover", 0.0);
        if (nj.contains("value")) {
          n.value = nj.at("value").get<double>();
        } else {
          n.column = nj.at("column").get<int>();
          n.left = nj.at("left").get<int>();
          n.right = nj.at("right").get<int>();
          if (n.column < 0 || n.column >= n_cols) throw Error("tree node column out of range");
          if (nj.contains("left_set")) {
            n.categorical = true;
            n.left_set = nj.at("left_set").get<std::vector<std::uint64_t>>();
          } else {
            n.threshold = nj.at("threshold").get<double>();
          }
        }
        t.nodes.push_back(std::move(n));
      }
      const int size = static_cast<int>(t.nodes.size());
      for (int k = 0; k < size; ++k) {
        const TreeNode& n = t.nodes[static_cast<std::size_t>(k)];
        if (!n.is_leaf() && (n.left <= k || n.right <= k || n.left >= size || n.right >= size)) {
          throw Error("tree node children out of range");
        }
      }
      if (t.nodes.empty()) throw Error("empty tree");
      m.trees.push_back(std::move(t));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(source + ": " + e.what());
  } catch (const Error& e) {
    throw Error(source + ": " + e.what());
  }
}

// --- linear explanatory model ---

inline json linear_model_json(const LinearExplanatoryModel& m, const Provenance& prov) {
  json j = artifact("linear_explanatory_model", prov);
  j["family"] = m.family.name();
  if (m.family.kind == FamilyKind::ThreePLFixedC) j["fixed_c"] = m.family.fixed_c;
  j["feature_names"] = m.feature_names;
  j["feature_means"] = m.feature_means;
  j["w_a"] = m.w_a;
  j["b_a"] = m.b_a;
  j["w_d"] = m.w_d;
  j["b_d"] = m.b_d;
  j["delta_a"] = m.delta_a;
  j["delta_d"] = m.delta_d;
  j["lambda_coef"] = m.lambda_coef;
  j["lambda_effects"] = m.lambda_effects;
  return j;
}

inline LinearExplanatoryModel parse_linear_model(const json& j, const std::string& source = "<linear>") {
  check_artifact(j, "linear_explanatory_model", source);
  try {
    LinearExplanatoryModel m;
    m.family = ModelFamily::parse(j.at("family").get<std::string>(), j.value("fixed_c", 0.25));
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.feature_means = j.value("feature_means", std::vector<double>{});
    m.w_a = j.at("w_a").get<std::vector<double>>();
    m.b_a = j.at("b_a").get<double>();
    m.w_d = j.at("w_d").get<std::vector<double>>();
    m.b_d = j.at("b_d").get<double>();
    m.delta_a = j.at("delta_a").get<std::map<std::string, double>>();
    m.delta_d = j.at("delta_d").get<std::map<std::string, double>>();
    m.lambda_coef = j.at("lambda_coef").get<double>();
    m.lambda_effects = j.at("lambda_effects").get<double>();
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw Error(source + ": " + e.what());
  }
}

// --- simulation truth ---

inline json sim_config_json(const SimConfig& c) {
  return {{"n_items", c.n_items},         {"n_sessions", c.n_sessions},
          {"items_per_session", c.items_per_session}, {"sigma_rand", c.sigma_rand},
          {"n_oos_items", c.n_oos_items}, {"n_test_sessions", c.n_test_sessions},
          {"seed", c.seed},               {"theta_sd", c.theta_sd},
          {"chance", c.chance},           {"feature_range", c.feature_range}};
}

inline SimConfig parse_sim_config(const json& j, const std::string& path = "simulate") {
  SimConfig c;
  detail::ObjectReader r(j, path);
  r.get("n_items", c.n_items);
  r.get("n_sessions", c.n_sessions);
  r.get("items_per_session", c.items_per_session);
  r.get("sigma_rand", c.sigma_rand);
  r.get("n_oos_items", c.n_oos_items);
  r.get("n_test_sessions", c.n_test_sessions);
  r.get("seed", c.seed);
  r.get("theta_sd", c.theta_sd);
  r.get("chance", c.chance);
  r.get("feature_range", c.feature_range);
  r.finish();
  c.validate();
  return c;
}

/// Truth document. Items carry x1, x2, z, d_mean, a_mean, a, d, c; abilities are keyed by
/// session id for the training, warm-test and cold-test populations.
inline json truth_json(const SimDataset& ds, const Provenance& prov) {
  json j = artifact("simulation_truth", prov);
  j["config"] = sim_config_json(ds.config);
  auto items = [](const std::vector<SimItem>& v) {
    json arr = json::array();
    for (const auto& it : v) {
      arr.push_back({{"item_id", it.item_id}, {"x1", it.x1}, {"x2", it.x2}, {"z", it.z}, {"d_mean", it.d_mean},
                     {"a_mean", it.a_mean}, {"a", it.a}, {"d", it.d}, {"c", it.c}});
    }
    return arr;
  };
  j["items"] = items(ds.truth.items);
  j["oos_items"] = items(ds.truth.oos_items);
  j["train_thetas"] = ds.truth.train_thetas;
  j["warm_test_thetas"] = ds.truth.warm_test_thetas;
  j["cold_test_thetas"] = ds.truth.cold_test_thetas;
  return j;
}

inline SimTruth parse_truth(const json& j, const std::string& source = "<truth>") {
  check_artifact(j, "simulation_truth", source);
  try {
    SimTruth t;
    auto items = [](const json& arr) {
      std::vector<SimItem> v;
      for (const json& o : arr) {
        SimItem it;
        it.item_id = o.at("item_id").get<std::string>();
        it.x1 = o.at("x1").get<double>();
        it.x2 = o.at("x2").get<double>();
        it.z = o.at("z").get<double>();
        it.d_mean = o.at("d_mean").get<double>();
        it.a_mean = o.at("a_mean").get<double>();
        it.a = o.at("a").get<double>();
        it.d = o.at("d").get<double>();
        it.c = o.at("c").get<double>();
        v.push_back(std::move(it));
      }
      return v;
    };
    t.items = items(j.at("items"));
    t.oos_items = items(j.at("oos_items"));
    t.train_thetas = j.at("train_thetas").get<std::map<std::string, double>>();
    t.warm_test_thetas = j.at("warm_test_thetas").get<std::map<std::string, double>>();
    t.cold_test_thetas = j.at("cold_test_thetas").get<std::map<std::string, double>>();
    return t;
  } catch (const json::exception& e) {
    throw Error(source + ": " + e.what());
  }
}

// --- evaluation report ---

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json eval_report_json(const EvalReport& r) {
  return {{"test_loss", r.test_loss},
          {"pearson", optional_json(r.pearson)},
          {"spearman", optional_json(r.spearman)},
          {"retest_reliability", optional_json(r.retest_reliability)},
          {"n_items", r.n_items},
          {"n_sessions", r.n_sessions},
          {"n_responses", r.n_responses}};
}

// ---------------------------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------------------------

struct GridSpec {
  double lo = -4.0;
  double hi = 4.0;
  double step = 0.1;
  std::string prior = "normal";
  double prior_mean = 0.0;
  double prior_sd = 1.0;

  GridPtr make() const {
    PriorSpec p;
    if (prior == "normal") {
      p = PriorSpec::normal(prior_mean, prior_sd);
    } else if (prior == "uniform") {
      p = PriorSpec::uniform();
    } else {
      throw Error("grid prior must be 'normal' or 'uniform', got '" + prior + "'");
    }
    return make_grid(lo, hi, step, p);
  }
};

struct ExperimentSpec {
  std::vector<int> items{100, 400, 1600};
  std::vector<int> sessions{1250, 2500, 10000, 40000, 160000};
  std::vector<std::string> methods{"autoirt", "irt"};
  std::string irt_family = "2pl";
  std::string linear_family = "2pl";
  GridSpec truth_grid{-10.0, 10.0, 0.1, "normal", 0.0, 2.5};
  int calibration_bins = 10;
};

/// Every tunable the CLI exposes, with built-in defaults.
struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<int> workers;
  SimConfig simulate;
  GridSpec grid;
  std::string family = "3pl-fixed";
  double chance = 0.25;
  McemConfig mcem;
  MmlConfig mml;
  LinearConfig linear;
  SplitSpec split;
  ExperimentSpec experiment;
  bool leave_one_out = false;

  ModelFamily model_family() const { return ModelFamily::parse(family, chance); }
};

inline std::string split_mode_name(SplitSpec::Mode m) {
  switch (m) {
    case SplitSpec::Mode::Cold:
      return "cold";
    case SplitSpec::Mode::Jump:
      return "jump";
    case SplitSpec::Mode::Warm:
      return "warm";
  }
  return "warm";
}

inline SplitSpec::Mode parse_split_mode(const std::string& s) {
  if (s == "cold") return SplitSpec::Mode::Cold;
  if (s == "jump") return SplitSpec::Mode::Jump;
  if (s == "warm") return SplitSpec::Mode::Warm;
  throw Error("split mode must be cold, jump or warm, got '" + s + "'");
}

inline json grid_json(const GridSpec& g) {
  return {{"lo", g.lo}, {"hi", g.hi}, {"step", g.step}, {"prior", g.prior}, {"prior_mean", g.prior_mean},
          {"prior_sd", g.prior_sd}};
}

inline GridSpec parse_grid(const json& j, const std::string& path) {
  GridSpec g;
  detail::ObjectReader r(j, path);
  r.get("lo", g.lo);
  r.get("hi", g.hi);
  r.get("step", g.step);
  r.get("prior", g.prior);
  r.get("prior_mean", g.prior_mean);
  r.get("prior_sd", g.prior_sd);
  r.finish();
  g.make();
  return g;
}

inline json projection_json(const ProjectionConfig& p) {
  return {{"a_min", p.a_min},
          {"a_max", p.a_max},
          {"d_min", p.d_min ? json(*p.d_min) : json(nullptr)},
          {"d_max", p.d_max ? json(*p.d_max) : json(nullptr)},
          {"c_max", p.c_max},
          {"multistarts", p.multistarts},
          {"tolerance", p.tolerance},
          {"max_iterations", p.max_iterations},
          {"prior_weighted", p.prior_weighted}};
}

/// Canonical JSON form of a configuration; hashing this gives the provenance config hash.
inline json config_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["workers"] = c.workers ? json(*c.workers) : json(nullptr);
  j["simulate"] = sim_config_json(c.simulate);
  j["simulate"].erase("seed");
  j["grid"] = grid_json(c.grid);
  j["family"] = c.family;
  j["chance"] = c.chance;
  j["mcem"] = {{"iterations", c.mcem.iterations}, {"draws_per_session", c.mcem.draws_per_session}};
  j["learner"] = learner_config_json(c.mcem.learner);
  j["projection"] = projection_json(c.mcem.projection);
  j["mml"] = {{"max_iterations", c.mml.max_iterations}, {"tolerance", c.mml.tolerance},
              {"newton_steps", c.mml.newton_steps}};
  j["linear"] = {{"lambda_coef", c.linear.lambda_coef ? json(*c.linear.lambda_coef) : json(nullptr)},
                 {"lambda_effects", c.linear.lambda_effects ? json(*c.linear.lambda_effects) : json(nullptr)},
                 {"lambda_grid", c.linear.lambda_grid},
                 {"validation_fraction", c.linear.validation_fraction},
                 {"max_iterations", c.linear.max_iterations},
                 {"tolerance", c.linear.tolerance}};
  j["split"] = {{"mode", split_mode_name(c.split.mode)},
                {"jump_responses", c.split.jump_responses},
                {"split_fraction", c.split.split_fraction},
                {"split_date", c.split.split_date ? json(*c.split.split_date) : json(nullptr)},
                {"pilot_fraction", c.split.pilot_fraction}};
  j["experiment"] = {{"items", c.experiment.items},
                     {"sessions", c.experiment.sessions},
                     {"methods", c.experiment.methods},
                     {"irt_family", c.experiment.irt_family},
                     {"linear_family", c.experiment.linear_family},
                     {"truth_grid", grid_json(c.experiment.truth_grid)},
                     {"calibration_bins", c.experiment.calibration_bins}};
  j["leave_one_out"] = c.leave_one_out;
  return j;
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(config_json(c).dump()); }

/// Builds a validated configuration from a (possibly partial) JSON object; unknown keys and
/// out-of-range values are errors.
inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "");
  top.get("seed", c.seed);
  top.get("workers", c.workers);
  if (const json* s = top.child("simulate")) {
    json sj = *s;
    sj["seed"] = c.seed;
    c.simulate = parse_sim_config(sj, "simulate");
  }
  c.simulate.seed = c.seed;
  if (const json* g = top.child("grid")) c.grid = parse_grid(*g, "grid");
  top.get("family", c.family);
  top.get("chance", c.chance);
  if (const json* m = top.child("mcem")) {
    detail::ObjectReader r(*m, "mcem");
    r.get("iterations", c.mcem.iterations);
    r.get("draws_per_session", c.mcem.draws_per_session);
    r.finish();
  }
  if (const json* l = top.child("learner")) c.mcem.learner = parse_learner_config(*l, "learner");
  if (const json* p = top.child("projection")) {
    detail::ObjectReader r(*p, "projection");
    auto& pc = c.mcem.projection;
    r.get("a_min", pc.a_min);
    r.get("a_max", pc.a_max);
    r.get("d_min", pc.d_min);
    r.get("d_max", pc.d_max);
    r.get("c_max", pc.c_max);
    r.get("multistarts", pc.multistarts);
    r.get("tolerance", pc.tolerance);
    r.get("max_iterations", pc.max_iterations);
    r.get("prior_weighted", pc.prior_weighted);
    r.finish();
  }
  if (const json* m = top.child("mml")) {
    detail::ObjectReader r(*m, "mml");
    r.get("max_iterations", c.mml.max_iterations);
    r.get("tolerance", c.mml.tolerance);
    r.get("newton_steps", c.mml.newton_steps);
    r.finish();
  }
  if (const json* l = top.child("linear")) {
    detail::ObjectReader r(*l, "linear");
    r.get("lambda_coef", c.linear.lambda_coef);
    r.get("lambda_effects", c.linear.lambda_effects);
    r.get("lambda_grid", c.linear.lambda_grid);
    r.get("validation_fraction", c.linear.validation_fraction);
    r.get("max_iterations", c.linear.max_iterations);
    r.get("tolerance", c.linear.tolerance);
    r.finish();
  }
  if (const json* s = top.child("split")) {
    detail::ObjectReader r(*s, "split");
    std::string mode = split_mode_name(c.split.mode);
    r.get("mode", mode);
    c.split.mode = parse_split_mode(mode);
    r.get("jump_responses", c.split.jump_responses);
    r.get("split_fraction", c.split.split_fraction);
    r.get("split_date", c.split.split_date);
    r.get("pilot_fraction", c.split.pilot_fraction);
    r.finish();
  }
  if (const json* e = top.child("experiment")) {
    detail::ObjectReader r(*e, "experiment");
    r.get("items", c.experiment.items);
    r.get("sessions", c.experiment.sessions);
    r.get("methods", c.experiment.methods);
    r.get("irt_family", c.experiment.irt_family);
    r.get("linear_family", c.experiment.linear_family);
    if (const json* tg = r.child("truth_grid")) c.experiment.truth_grid = parse_grid(*tg, "experiment.truth_grid");
    r.get("calibration_bins", c.experiment.calibration_bins);
    r.finish();
  }
  top.get("leave_one_out", c.leave_one_out);
  top.finish();

  if (c.workers && *c.workers < 1) throw Error("config: workers must be >= 1");
  const ModelFamily family = c.model_family();
  c.mcem.family = family;
  c.mcem.grid = c.grid.make();
  c.mcem.seed = c.seed;
  c.mcem.validate();
  c.mml.validate();
  c.linear.family = family;
  c.linear.seed = c.seed;
  c.split.validate();
  for (const auto& m : c.experiment.methods) {
    if (m != "autoirt" && m != "irt" && m != "linear") throw Error("config: unknown method '" + m + "'");
  }
  ModelFamily::parse(c.experiment.irt_family, c.chance);
  LinearConfig probe = c.linear;
  probe.family = ModelFamily::parse(c.experiment.linear_family, c.chance);
  probe.validate();
  if (c.experiment.calibration_bins < 1) throw Error("config: calibration_bins must be >= 1");
  return c;
}

/// Sets `dotted.key` in a JSON object, creating intermediate objects.
inline void set_config_value(json& j, const std::string& dotted, json value) {
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw Error("malformed configuration key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

/// Value text from `--set key=value`: JSON when it parses, a plain string otherwise.
inline json override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

/// Precedence: overrides (CLI) over the config file over built-in defaults.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<std::pair<std::string, json>>& overrides = {}) {
  json j = json::object();
  if (file) {
    j = read_json(*file);
    if (!j.is_object()) throw Error(file->string() + ": configuration must be a JSON object");
  }
  for (const auto& [key, value] : overrides) set_config_value(j, key, value);
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------------------------
// dataset bundles
// ---------------------------------------------------------------------------------------------

struct DatasetPaths {
  std::filesystem::path responses;
  std::optional<std::filesystem::path> features;
  std::optional<std::filesystem::path> truth;
  std::optional<std::filesystem::path> pairs;
};

struct ValidationReport {
  std::size_t n_responses = 0;
  std::size_t n_sessions = 0;
  std::size_t n_items = 0;
  std::size_t n_feature_items = 0;
};

struct DatasetBundle {
  ResponseTable responses;
  FeatureTable features;
  std::optional<SimTruth> truth;
  RepeatPairs pairs;
  ValidationReport report;
};

/// Loads the declared files and checks referential integrity. With `require_features`, every
/// responded item must have a feature row.
inline DatasetBundle load_and_validate(const DatasetPaths& paths, bool require_features) {
  DatasetBundle b;
  b.responses = read_responses(paths.responses);
  if (paths.features) b.features = read_features(*paths.features);
  if (require_features) {
    if (!paths.features) throw Error("a feature file is required for this method");
    for (const auto& id : b.responses.item_ids()) {
      if (!b.features.contains(id)) {
        throw Error(paths.features->string() + ": no feature row for responded item '" + id + "'");
      }
    }
  }
  if (paths.truth) b.truth = parse_truth(read_json(*paths.truth), paths.truth->string());
  if (paths.pairs) b.pairs = read_pairs(*paths.pairs);
  b.report.n_responses = b.responses.size();
  b.report.n_sessions = b.responses.session_ids().size();
  b.report.n_items = b.responses.item_ids().size();
  b.report.n_feature_items = b.features.rows.size();
  return b;
}

}  // namespace autoirt
