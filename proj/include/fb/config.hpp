#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fb/attacks.hpp"
#include "fb/encoder.hpp"
#include "fb/errors.hpp"

namespace fb {

// Epsilon strings are rationals like "8/255" and must parse exactly as
// numerator/denominator in double, never through a decimal detour.
inline double parse_epsilon(const std::string& s) {
  const std::size_t slash = s.find('/');
  try {
    if (slash == std::string::npos) {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ConfigError("bad epsilon: " + s);
      if (!(v >= 0.0)) throw ConfigError("epsilon must be >= 0: " + s);
      return v;
    }
    const std::string num = s.substr(0, slash);
    const std::string den = s.substr(slash + 1);
    std::size_t un = 0, ud = 0;
    const double n = std::stod(num, &un);
    const double d = std::stod(den, &ud);
    if (un != num.size() || ud != den.size() || d == 0.0) {
      throw ConfigError("bad epsilon fraction: " + s);
    }
    const double v = n / d;
    if (!(v >= 0.0)) throw ConfigError("epsilon must be >= 0: " + s);
    return v;
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad epsilon: " + s);
  } catch (const std::out_of_range&) {
    throw ConfigError("bad epsilon: " + s);
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline nlohmann::json parse_toml_scalar(const std::string& raw, int line_no) {
  const std::string v = trim(raw);
  if (v.empty()) {
    throw ConfigError("line " + std::to_string(line_no) + ": empty value");
  }
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": unterminated string");
    }
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) {
        ++i;
        switch (v[i]) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          default:
            throw ConfigError("line " + std::to_string(line_no) +
                              ": unsupported escape");
        }
      } else {
        out.push_back(v[i]);
      }
    }
    return out;
  }
  if (v == "true") return true;
  if (v == "false") return false;
  // Integer, then float.
  {
    std::size_t used = 0;
    try {
      const long long i = std::stoll(v, &used);
      if (used == v.size()) return i;
    } catch (...) {
    }
  }
  {
    std::size_t used = 0;
    try {
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (...) {
    }
  }
  throw ConfigError("line " + std::to_string(line_no) + ": cannot parse value " + v);
}

// Split a single-line array body on top-level commas (strings may contain
// commas).
inline std::vector<std::string> split_array_items(const std::string& body,
                                                  int line_no) {
  std::vector<std::string> items;
  std::string cur;
  bool in_string = false;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (in_string) {
      cur.push_back(c);
      if (c == '\\' && i + 1 < body.size()) {
        cur.push_back(body[++i]);
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
      cur.push_back(c);
    } else if (c == ',') {
      items.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (in_string) {
    throw ConfigError("line " + std::to_string(line_no) +
                      ": unterminated string in array");
  }
  if (!trim(cur).empty()) items.push_back(cur);
  return items;
}

}  // namespace detail

// Declarative key/value config with [tables]; scalars, single-line arrays,
// comments. Returns a two-level JSON object.
inline nlohmann::json parse_toml_subset(const std::string& text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) {
      // Only strip comments outside strings; cheap scan.
      bool in_string = false;
      std::size_t cut = std::string::npos;
      for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) {
          in_string = !in_string;
        } else if (line[i] == '#' && !in_string) {
          cut = i;
          break;
        }
      }
      if (cut != std::string::npos) line = line.substr(0, cut);
    }
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": bad table header");
      }
      const std::string name = detail::trim(t.substr(1, t.size() - 2));
      if (name.empty()) {
        throw ConfigError("line " + std::to_string(line_no) + ": empty table name");
      }
      if (root.contains(name)) {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": duplicate table " + name);
      }
      root[name] = nlohmann::json::object();
      table = &root[name];
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    if (table->contains(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key " + key);
    }
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": arrays must close on the same line");
      }
      nlohmann::json arr = nlohmann::json::array();
      for (const std::string& item :
           detail::split_array_items(val.substr(1, val.size() - 2), line_no)) {
        arr.push_back(detail::parse_toml_scalar(item, line_no));
      }
      (*table)[key] = std::move(arr);
    } else {
      (*table)[key] = detail::parse_toml_scalar(val, line_no);
    }
  }
  return root;
}

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_toml_subset(buf.str());
}

// Encoder selection: an in-process toy descriptor or a gradient-service
// address.
struct EncoderSelection {
  std::string kind = "toy";  // "toy" | "remote"
  ToyEncoderConfig toy;
  std::string address;  // remote only; falls back to FB_GRADIENT_SERVICE
};

struct DatasetSelection {
  std::vector<std::string> images;
  std::string images_dir;
  std::vector<std::string> segmaps;
  std::string resize = "none";  // "none" | "shortest_edge"
  int shortest_edge = 512;
};

struct AttackSelection {
  std::string method = "apgd";  // "pgd" | "apgd" | "multicrop"
  std::vector<std::string> epsilon_labels = {"1/255", "2/255", "4/255",
                                             "8/255"};
  int iterations = 100;
  std::optional<double> step_size;  // empty = auto
  AttackInit init = AttackInit::RANDOM_UNIFORM;
  double p_crop = 0.8;
  double min_frac = 0.3;
  double max_frac = 0.9;
};

struct UniversalSelection {
  std::vector<std::string> epsilon_labels = {"8/255"};
  int iterations = 500;
  std::string step_size = "1/255";
  int native_height = 1024;
  int native_width = 1024;
  int pool = 0;  // 0 = all provided images
  int batch = 10;
  AttackInit init = AttackInit::RANDOM_UNIFORM;
  bool normalize_pre_pullback = false;
};

// A full declarative run: validated before any compute, unknown keys are
// hard errors.
struct ExperimentConfig {
  std::string kind = "attack";  // "attack" | "universal"
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string created_at;  // empty = wall clock at save time
  int jobs = 1;
  DatasetSelection dataset;
  EncoderSelection encoder;
  AttackSelection attack;
  UniversalSelection universal;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& where,
                       const std::vector<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("unknown key '" + it.key() + "' in [" + where + "]");
    }
  }
}

inline AttackInit parse_init(const std::string& s) {
  if (s == "zero") return AttackInit::ZERO;
  if (s == "random") return AttackInit::RANDOM_UNIFORM;
  throw ConfigError("init must be \"zero\" or \"random\", got " + s);
}

inline std::vector<std::string> string_list(const nlohmann::json& j,
                                            const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(what + " must contain strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::check_keys(j, "<root>",
                     {"experiment", "dataset", "encoder", "attack", "universal"});
  if (j.contains("experiment")) {
    const auto& e = j["experiment"];
    detail::check_keys(e, "experiment",
                       {"kind", "name", "seed", "output_dir", "created_at",
                        "jobs"});
    cfg.kind = e.value("kind", cfg.kind);
    cfg.name = e.value("name", cfg.name);
    cfg.seed = e.value("seed", cfg.seed);
    cfg.output_dir = e.value("output_dir", cfg.output_dir);
    cfg.created_at = e.value("created_at", cfg.created_at);
    cfg.jobs = e.value("jobs", cfg.jobs);
  }
  if (cfg.kind != "attack" && cfg.kind != "universal") {
    throw ConfigError("experiment.kind must be \"attack\" or \"universal\"");
  }
  if (cfg.jobs < 1) throw ConfigError("experiment.jobs must be >= 1");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::check_keys(
        d, "dataset",
        {"images", "images_dir", "segmaps", "resize", "shortest_edge"});
    if (d.contains("images")) {
      cfg.dataset.images = detail::string_list(d["images"], "dataset.images");
    }
    cfg.dataset.images_dir = d.value("images_dir", cfg.dataset.images_dir);
    if (d.contains("segmaps")) {
      cfg.dataset.segmaps = detail::string_list(d["segmaps"], "dataset.segmaps");
    }
    cfg.dataset.resize = d.value("resize", cfg.dataset.resize);
    cfg.dataset.shortest_edge =
        d.value("shortest_edge", cfg.dataset.shortest_edge);
    if (cfg.dataset.resize != "none" && cfg.dataset.resize != "shortest_edge") {
      throw ConfigError("dataset.resize must be \"none\" or \"shortest_edge\"");
    }
  }

  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    detail::check_keys(e, "encoder",
                       {"kind", "seed", "weight_scale", "channels", "kernels",
                        "strides", "in_channels", "address", "id"});
    cfg.encoder.kind = e.value("kind", cfg.encoder.kind);
    if (cfg.encoder.kind != "toy" && cfg.encoder.kind != "remote") {
      throw ConfigError("encoder.kind must be \"toy\" or \"remote\"");
    }
    cfg.encoder.toy.seed = e.value("seed", cfg.encoder.toy.seed);
    cfg.encoder.toy.weight_scale =
        e.value("weight_scale", cfg.encoder.toy.weight_scale);
    cfg.encoder.toy.in_channels =
        e.value("in_channels", cfg.encoder.toy.in_channels);
    cfg.encoder.toy.id = e.value("id", cfg.encoder.toy.id);
    if (e.contains("channels") || e.contains("kernels") || e.contains("strides")) {
      if (!e.contains("channels") || !e.contains("kernels") ||
          !e.contains("strides")) {
        throw ConfigError(
            "encoder.channels/kernels/strides must be given together");
      }
      const auto& ch = e["channels"];
      const auto& ke = e["kernels"];
      const auto& st = e["strides"];
      if (!ch.is_array() || ch.size() != ke.size() || ch.size() != st.size()) {
        throw ConfigError("encoder layer arrays must have equal lengths");
      }
      cfg.encoder.toy.layers.clear();
      for (std::size_t i = 0; i < ch.size(); ++i) {
        cfg.encoder.toy.layers.push_back(ConvLayerSpec{
            ch[i].get<int>(), ke[i].get<int>(), st[i].get<int>()});
      }
    }
    cfg.encoder.address = e.value("address", cfg.encoder.address);
  }

  if (j.contains("attack")) {
    const auto& a = j["attack"];
    detail::check_keys(a, "attack",
                       {"method", "epsilons", "iterations", "step_size",
                        "init", "p_crop", "min_frac", "max_frac"});
    cfg.attack.method = a.value("method", cfg.attack.method);
    if (cfg.attack.method != "pgd" && cfg.attack.method != "apgd" &&
        cfg.attack.method != "multicrop") {
      throw ConfigError("attack.method must be pgd, apgd, or multicrop");
    }
    if (a.contains("epsilons")) {
      cfg.attack.epsilon_labels =
          detail::string_list(a["epsilons"], "attack.epsilons");
    }
    cfg.attack.iterations = a.value("iterations", cfg.attack.iterations);
    if (a.contains("step_size")) {
      const auto& s = a["step_size"];
      if (s.is_string() && s.get<std::string>() == "auto") {
        cfg.attack.step_size.reset();
      } else if (s.is_string()) {
        cfg.attack.step_size = parse_epsilon(s.get<std::string>());
      } else {
        cfg.attack.step_size = s.get<double>();
      }
    }
    if (a.contains("init")) {
      cfg.attack.init = detail::parse_init(a["init"].get<std::string>());
    }
    cfg.attack.p_crop = a.value("p_crop", cfg.attack.p_crop);
    cfg.attack.min_frac = a.value("min_frac", cfg.attack.min_frac);
    cfg.attack.max_frac = a.value("max_frac", cfg.attack.max_frac);
  }

  if (j.contains("universal")) {
    const auto& u = j["universal"];
    detail::check_keys(u, "universal",
                       {"epsilons", "epsilon", "iterations", "step_size",
                        "native", "pool", "batch", "init",
                        "normalize_pre_pullback"});
    if (u.contains("epsilon") && u.contains("epsilons")) {
      throw ConfigError("give universal.epsilon or universal.epsilons, not both");
    }
    if (u.contains("epsilon")) {
      cfg.universal.epsilon_labels = {u["epsilon"].get<std::string>()};
    }
    if (u.contains("epsilons")) {
      cfg.universal.epsilon_labels =
          detail::string_list(u["epsilons"], "universal.epsilons");
    }
    cfg.universal.iterations = u.value("iterations", cfg.universal.iterations);
    cfg.universal.step_size = u.value("step_size", cfg.universal.step_size);
    if (u.contains("native")) {
      const auto& n = u["native"];
      if (!n.is_array() || n.size() != 2) {
        throw ConfigError("universal.native must be [height, width]");
      }
      cfg.universal.native_height = n[0].get<int>();
      cfg.universal.native_width = n[1].get<int>();
    }
    cfg.universal.pool = u.value("pool", cfg.universal.pool);
    cfg.universal.batch = u.value("batch", cfg.universal.batch);
    if (u.contains("init")) {
      cfg.universal.init = detail::parse_init(u["init"].get<std::string>());
    }
    cfg.universal.normalize_pre_pullback = u.value(
        "normalize_pre_pullback", cfg.universal.normalize_pre_pullback);
  }

  // Epsilon labels must parse.
  for (const auto& s : cfg.attack.epsilon_labels) parse_epsilon(s);
  for (const auto& s : cfg.universal.epsilon_labels) parse_epsilon(s);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_json(load_config_file(path));
}

}  // namespace fb
