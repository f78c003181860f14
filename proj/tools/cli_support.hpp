#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronscope/average_precision.hpp"
#include "neuronscope/concept_corpus.hpp"
#include "neuronscope/detail/binary_io.hpp"
#include "neuronscope/error.hpp"

namespace nscope::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::BadInput: return 2;
    case ErrorCategory::FormatError: return 3;
    case ErrorCategory::DegenerateData: return 4;
    case ErrorCategory::Internal: return 5;
  }
  return 5;
}

inline void print_error(std::string_view category, std::string_view code, std::string_view message) {
  json j;
  j["error"] = {{"category", category}, {"code", code}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

inline std::size_t default_jobs() {
  if (const char* env = std::getenv("NEURONSCOPE_JOBS")) {
    try {
      const auto v = std::stoul(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

// Records what a run read, wrote and how it was configured.
class Manifest {
 public:
  explicit Manifest(std::string command)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  json& config() { return config_; }
  json& summary() { return summary_; }
  void input(const fs::path& p) { inputs_.push_back(p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }
  void seed(std::uint64_t s) { seed_ = s; }
  void path(const fs::path& p) { path_ = p; }
  const fs::path& path() const { return path_; }

  std::string config_hash() const {
    detail::Fnv1a h;
    h.update(command_);
    h.update(config_.dump());
    for (const auto& i : inputs_) h.update(i);
    return h.hex();
  }

  void write() const {
    json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["inputs"] = inputs_;
    j["config"] = config_;
    j["config_hash"] = config_hash();
    if (seed_) j["seed"] = *seed_;
    else j["seed"] = nullptr;
    j["outputs"] = outputs_;
    j["wall_time_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (!summary_.empty()) j["summary"] = summary_;
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write manifest " + path_.string());
    out << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  json summary_ = json::object();
  std::vector<std::string> inputs_, outputs_;
  std::optional<std::uint64_t> seed_;
  fs::path path_;
};

// Filesystem-safe stem for a concept id, with a hash suffix so distinct ids
// never collide after sanitizing.
inline std::string concept_stem(const std::string& id) {
  std::string s;
  for (unsigned char c : id)
    s.push_back(std::isalnum(c) || c == '.' || c == '-' || c == '_' ? static_cast<char>(c) : '_');
  if (s.size() > 80) s.resize(80);
  detail::Fnv1a h;
  h.update(id);
  return s + "-" + h.hex().substr(0, 8);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create directory " + dir.string() + ": " + ec.message());
}

// Writes through a temporary name and renames, so an interrupted run never
// leaves a complete-looking partial file.
template <typename Fn>
void write_atomically(const fs::path& target, Fn&& fn) {
  auto tmp = target;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot create " + tmp.string());
    fn(out);
    out.flush();
    if (!out) fail(ErrorCode::Io, "failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorCode::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline void require_file(const fs::path& p) {
  require(fs::is_regular_file(p), ErrorCode::InvalidArgument, "no such file: " + p.string());
}

// Expands directories into their files with the given suffix, sorted.
inline std::vector<fs::path> expand_inputs(const std::vector<std::string>& args,
                                           std::string_view suffix) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    const fs::path p(a);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && e.path().string().ends_with(suffix)) found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      require_file(p);
      out.push_back(p);
    }
  }
  return out;
}

inline std::string strip_suffix(const std::string& name, std::string_view suffix) {
  return name.ends_with(suffix) ? name.substr(0, name.size() - suffix.size()) : name;
}

// AP tables are stored as <stem>.ap.csv plus <stem>.ap.json.
inline fs::path ap_sidecar_path(const fs::path& csv) {
  return csv.parent_path() / (strip_suffix(csv.filename().string(), ".csv") + ".json");
}

inline std::vector<ApTable> load_ap_tables(const std::vector<std::string>& args,
                                           std::vector<fs::path>* paths = nullptr) {
  std::vector<ApTable> tables;
  for (const auto& p : expand_inputs(args, ".ap.csv")) {
    tables.push_back(load_ap_table(p.string(), ap_sidecar_path(p).string()));
    if (paths) paths->push_back(p);
  }
  require(!tables.empty(), ErrorCode::EmptyInput, "no AP tables found");
  return tables;
}

inline ConceptCategory category_from_id(const std::string& id) {
  return id.find(" VS. ") != std::string::npos ? ConceptCategory::Homograph : ConceptCategory::Sense;
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace nscope::cli
