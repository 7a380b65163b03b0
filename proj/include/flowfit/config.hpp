#pragma once

// Experiment configuration: INI-style text files of dotted keys plus
// key=value overrides.
//
//   seed = 3
//   [train]
//   lambda_of = 0.01     # same as train.lambda_of

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "flowfit/training.hpp"

namespace flowfit {

struct EvalConfig {
  Split split = Split::kTest;
  std::vector<int> delta_t{1, 3, 5, 7};
  bool oracle = true;
  int stride = 1;
  bool plots = true;
};

struct PathConfig {
  std::string dataset;     // archive directory
  std::string checkpoint;  // model to evaluate or refine
  std::string template_file;  // empty: built-in toy template
};

struct ExperimentConfig {
  uint64_t seed = 0;
  SynthConfig data;
  RegressorConfig model;
  TrainConfig train;
  EvalConfig eval;
  PathConfig paths;

  // Pushes the global seed and image size into the sections.
  void resolve() {
    data.seed = seed;
    train.seed = seed;
    model.init_seed = seed;
    model.input = data.size;
  }

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
    if (eval.stride < 1) throw ConfigError("eval.stride must be >= 1");
    if (eval.delta_t.empty()) throw ConfigError("eval.delta_t must not be empty");
    for (int d : eval.delta_t)
      if (d < 1) throw ConfigError("eval.delta_t entries must be >= 1");
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + std::to_string(v[k]);
  return s;
}

template <typename T>
ConfigField number_field(const std::string& key, T& ref) {
  return {key, [&ref, key](const std::string& s) { ref = parse_number<T>(key, s); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) return format_double(ref);
            else return std::to_string(ref);
          }};
}

inline ConfigField bool_field(const std::string& key, bool& ref) {
  return {key, [&ref, key](const std::string& s) { ref = parse_bool(key, s); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

inline ConfigField string_field(const std::string& key, std::string& ref) {
  return {key, [&ref](const std::string& s) { ref = s; }, [&ref] { return ref; }};
}

inline ConfigField list_field(const std::string& key, std::vector<int>& ref) {
  return {key, [&ref, key](const std::string& s) { ref = parse_int_list(key, s); }, [&ref] { return join(ref); }};
}

inline std::vector<ConfigField> config_fields(ExperimentConfig& c) {
  std::vector<ConfigField> f;
  f.push_back(number_field("seed", c.seed));

  auto& d = c.data;
  f.push_back(number_field("data.num_sequences", d.num_sequences));
  f.push_back(number_field("data.test_sequences", d.test_sequences));
  f.push_back(number_field("data.frames", d.frames));
  f.push_back(number_field("data.height", d.size.height));
  f.push_back(number_field("data.width", d.size.width));
  f.push_back(number_field("data.fps", d.fps));
  f.push_back(number_field("data.label_fraction", d.label_fraction));
  f.push_back(number_field("data.pose_amplitude", d.pose_amplitude));
  f.push_back(number_field("data.out_of_plane", d.out_of_plane));
  f.push_back(number_field("data.base_frequency", d.base_frequency));
  f.push_back(number_field("data.speed_min", d.speed_min));
  f.push_back(number_field("data.speed_max", d.speed_max));
  f.push_back(number_field("data.yaw_amplitude", d.yaw_amplitude));
  f.push_back(number_field("data.camera_drift", d.camera_drift));
  f.push_back(number_field("data.beta_std", d.beta_std));
  f.push_back(number_field("data.occluder_probability", d.occluder_probability));

  auto& m = c.model;
  f.push_back(number_field("model.feature_dim", m.feature_dim));
  f.push_back(list_field("model.encoder_widths", m.encoder_widths));
  f.push_back(number_field("model.iterative_refinement_steps", m.iterative_refinement_steps));
  f.push_back(number_field("model.head_hidden", m.head_hidden));
  f.push_back(number_field("model.mean_scale", m.mean_scale));
  f.push_back(number_field("model.mean_ty", m.mean_ty));

  auto& t = c.train;
  f.push_back(number_field("train.lambda_sup", t.lambda_sup));
  f.push_back(number_field("train.lambda_of", t.lambda_of));
  f.push_back(number_field("train.lambda_tp", t.lambda_tp));
  f.push_back(number_field("train.lambda_2d", t.lambda_2d));
  f.push_back(number_field("train.lambda_theta", t.lambda_theta));
  f.push_back(number_field("train.lambda_beta", t.lambda_beta));
  f.push_back(number_field("train.lambda_smooth", t.lambda_smooth));
  f.push_back(number_field("train.smooth_window", t.smooth_window));
  f.push_back(number_field("train.label_fraction", t.label_fraction));
  f.push_back(number_field("train.unlabeled_fraction", t.unlabeled_fraction));
  f.push_back(number_field("train.labeled_batch", t.labeled_batch));
  f.push_back(number_field("train.pair_batch", t.pair_batch));
  f.push_back(number_field("train.color_noise_std", t.color_noise_std));
  f.push_back(bool_field("train.flow_threshold", t.flow_threshold));
  f.push_back(bool_field("train.flow_scale", t.flow_scale));
  f.push_back(number_field("train.learning_rate", t.learning_rate));
  f.push_back(number_field("train.steps", t.steps));
  f.push_back(number_field("train.context_length", t.context_length));
  f.push_back(bool_field("train.freeze_baseline", t.freeze_baseline));
  f.push_back(number_field("train.context_refresh", t.context_refresh));
  f.push_back(number_field("train.workers", t.workers));
  f.push_back(number_field("train.sup.rotation", t.sup.rotation));
  f.push_back(number_field("train.sup.beta", t.sup.beta));
  f.push_back(number_field("train.sup.camera", t.sup.camera));
  f.push_back(number_field("train.sup.joints_2d", t.sup.joints_2d));
  f.push_back(number_field("train.sup.joints_3d", t.sup.joints_3d));

  auto& e = c.eval;
  f.push_back({"eval.split",
               [&e](const std::string& s) {
                 if (s == "train") e.split = Split::kTrain;
                 else if (s == "test") e.split = Split::kTest;
                 else throw ConfigError("eval.split must be 'train' or 'test'");
               },
               [&e] { return std::string(split_name(e.split)); }});
  f.push_back(list_field("eval.delta_t", e.delta_t));
  f.push_back(bool_field("eval.oracle", e.oracle));
  f.push_back(number_field("eval.stride", e.stride));
  f.push_back(bool_field("eval.plots", e.plots));

  f.push_back(string_field("paths.dataset", c.paths.dataset));
  f.push_back(string_field("paths.checkpoint", c.paths.checkpoint));
  f.push_back(string_field("paths.template", c.paths.template_file));
  return f;
}

}  // namespace detail

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::config_fields(c)) {
    if (f.key == key) {
      f.set(detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Applies one "key=value" override.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_config(ExperimentConfig& c, std::istream& in, const std::string& origin = "config") {
  std::string line, section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("malformed section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      const std::string key = detail::trim(line.substr(0, eq));
      set_config_value(c, section.empty() ? key : section + "." + key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

inline void load_config_file(ExperimentConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  parse_config(c, in, path);
}

// Every key with its current value, one "key = value" line each.
inline void write_config(const ExperimentConfig& c, std::ostream& os) {
  ExperimentConfig copy = c;
  for (const auto& f : detail::config_fields(copy)) os << f.key << " = " << f.get() << "\n";
}

}  // namespace flowfit
