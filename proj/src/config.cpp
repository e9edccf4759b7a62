// SPDX-License-Identifier: Apache-2.0

#include "ordbal/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

namespace ordbal {

namespace pt = boost::property_tree;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  text = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError(fmt::format("{} = '{}' is not a valid number", key, text));
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(fmt::format("{} = '{}' is not a boolean", key, text));
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view text) {
  std::vector<T> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = text.substr(0, comma);
    out.push_back(parse_number<T>(key, item));
    if (comma == std::string_view::npos) break;
    text = text.substr(comma + 1);
  }
  if (out.empty()) throw ConfigError(fmt::format("{} must list at least one value", key));
  return out;
}

std::vector<std::string> split_names(std::string_view text) {
  std::vector<std::string> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    out.emplace_back(trim(text.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    text = text.substr(comma + 1);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  return fmt::format("{}", fmt::join(values, ","));
}

EngineSpec parse_engine(std::string_view key, std::string_view text) {
  try {
    return EngineSpec::parse(trim(text));
  } catch (const DomainError& e) {
    throw ConfigError(fmt::format("{}: {}", key, e.what()));
  }
}

pt::ptree read_ini(std::string_view text) {
  std::istringstream stream{std::string(text)};
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(stream, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("malformed config at line {}: {}", e.line(), e.message()));
  }
  return tree;
}

// Visits every key of `tree`, rejecting anything outside `sections`.
template <typename Handler>
void for_each_key(const pt::ptree& tree, const std::set<std::string>& sections,
                  Handler&& handler) {
  for (const auto& [section, body] : tree) {
    if (!sections.contains(section) || body.empty()) {
      throw ConfigError(fmt::format("unexpected section or top-level key '{}'", section));
    }
    for (const auto& [key, value] : body) {
      handler(section, key, std::string(trim(value.data())));
    }
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

ExperimentConfig parse_experiment_config(std::string_view ini_text,
                                         const ConfigOverrides& overrides) {
  ExperimentConfig c;
  for_each_key(read_ini(ini_text), {"task", "run"},
               [&c](const std::string& section, const std::string& key, const std::string& v) {
                 const std::string name = section + "." + key;
                 if (section == "task") {
                   if (key == "kind") {
                     c.task.kind = parse_task(v);
                   } else if (key == "source") {
                     if (v == "synthetic") {
                       c.task.source = DataSource::kSynthetic;
                     } else if (v == "csv") {
                       c.task.source = DataSource::kCsv;
                     } else {
                       throw ConfigError(fmt::format("{} = '{}' (expected synthetic or csv)", name, v));
                     }
                   } else if (key == "examples") {
                     c.task.examples = parse_number<std::size_t>(name, v);
                   } else if (key == "dim") {
                     c.task.dim = parse_number<std::size_t>(name, v);
                   } else if (key == "noise") {
                     c.task.noise = parse_number<double>(name, v);
                   } else if (key == "data_seed") {
                     c.task.data_seed = parse_number<std::uint64_t>(name, v);
                   } else if (key == "lambda") {
                     c.task.lambda = parse_number<double>(name, v);
                   } else if (key == "csv_path") {
                     c.task.csv_path = v;
                   } else if (key == "standardize") {
                     c.task.standardize = parse_bool(name, v);
                   } else if (key == "label_map") {
                     c.task.label_map = v;
                   } else {
                     throw ConfigError(fmt::format("unknown key '{}'", name));
                   }
                   return;
                 }
                 if (key == "policy") {
                   c.policy.kind = parse_policy(v);
                 } else if (key == "m") {
                   c.workers = parse_number<std::size_t>(name, v);
                 } else if (key == "b") {
                   c.block = parse_number<std::size_t>(name, v);
                 } else if (key == "epochs") {
                   c.epochs = parse_number<std::uint32_t>(name, v);
                 } else if (key == "alpha") {
                   c.alpha = parse_number<double>(name, v);
                 } else if (key == "seeds") {
                   c.seeds = parse_list<std::uint64_t>(name, v);
                 } else if (key == "engine") {
                   c.policy.engine = parse_engine(name, v);
                 } else if (key == "transport") {
                   c.transport = TransportSpec::parse(v);
                 } else if (key == "out") {
                   c.out = v;
                 } else if (key == "wall_clock") {
                   c.wall_clock = parse_bool(name, v);
                 } else if (key == "per_step_loss") {
                   c.per_step_loss = parse_bool(name, v);
                 } else {
                   throw ConfigError(fmt::format("unknown key '{}'", name));
                 }
               });

  if (overrides.out) c.out = *overrides.out;
  if (overrides.seed) c.seeds = {*overrides.seed};
  if (overrides.policy) c.policy.kind = parse_policy(*overrides.policy);
  if (overrides.m) c.workers = *overrides.m;
  if (overrides.epochs) c.epochs = *overrides.epochs;
  if (overrides.alpha) c.alpha = *overrides.alpha;
  if (overrides.engine) c.policy.engine = parse_engine("--engine", *overrides.engine);
  if (overrides.transport) c.transport = TransportSpec::parse(*overrides.transport);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ConfigOverrides& overrides) {
  return parse_experiment_config(read_file(path), overrides);
}

VectorExperimentConfig parse_vector_config(std::string_view ini_text,
                                           const ConfigOverrides& overrides) {
  VectorExperimentConfig c;
  for_each_key(read_ini(ini_text), {"vectors"},
               [&c](const std::string& section, const std::string& key, const std::string& v) {
                 const std::string name = section + "." + key;
                 if (key == "count") {
                   c.count = parse_number<std::size_t>(name, v);
                 } else if (key == "dim") {
                   c.dim = parse_number<std::size_t>(name, v);
                 } else if (key == "m") {
                   c.workers = parse_list<std::size_t>(name, v);
                 } else if (key == "epochs") {
                   c.epochs = parse_number<std::uint32_t>(name, v);
                 } else if (key == "policies") {
                   c.policies.clear();
                   for (const auto& p : split_names(v)) c.policies.push_back(parse_policy(p));
                 } else if (key == "seeds") {
                   c.seeds = parse_list<std::uint64_t>(name, v);
                 } else if (key == "engine") {
                   c.engine = parse_engine(name, v);
                 } else if (key == "out") {
                   c.out = v;
                 } else {
                   throw ConfigError(fmt::format("unknown key '{}'", name));
                 }
               });

  if (overrides.out) c.out = *overrides.out;
  if (overrides.seed) c.seeds = {*overrides.seed};
  if (overrides.policy) c.policies = {parse_policy(*overrides.policy)};
  if (overrides.m) c.workers = {*overrides.m};
  if (overrides.epochs) c.epochs = *overrides.epochs;
  if (overrides.engine) c.engine = parse_engine("--engine", *overrides.engine);
  if (overrides.alpha || overrides.transport) {
    throw ConfigError("--alpha and --transport do not apply to herding-bound runs");
  }
  c.validate();
  return c;
}

VectorExperimentConfig load_vector_config(const std::filesystem::path& path,
                                          const ConfigOverrides& overrides) {
  return parse_vector_config(read_file(path), overrides);
}

std::string render_config(const ExperimentConfig& c) {
  std::string out = "[task]\n";
  out += fmt::format("kind = {}\n", task_name(c.task.kind));
  if (c.task.source == DataSource::kSynthetic) {
    out += "source = synthetic\n";
    out += fmt::format("examples = {}\ndim = {}\nnoise = {}\ndata_seed = {}\n", c.task.examples,
                       c.task.dim, c.task.noise, c.task.data_seed);
  } else {
    out += "source = csv\n";
    out += fmt::format("csv_path = {}\nstandardize = {}\n", c.task.csv_path.string(),
                       c.task.standardize);
    if (!c.task.label_map.empty()) out += fmt::format("label_map = {}\n", c.task.label_map);
  }
  out += fmt::format("lambda = {}\n", c.task.lambda);
  out += "\n[run]\n";
  out += fmt::format("policy = {}\nm = {}\nb = {}\nepochs = {}\nalpha = {}\nseeds = {}\n",
                     policy_name(c.policy.kind), c.workers, c.block, c.epochs, c.alpha,
                     join(c.seeds));
  out += fmt::format("engine = {}\ntransport = {}\nout = {}\n", c.policy.engine.to_string(),
                     c.transport.to_string(), c.out.string());
  out += fmt::format("wall_clock = {}\nper_step_loss = {}\n", c.wall_clock, c.per_step_loss);
  return out;
}

std::string render_config(const VectorExperimentConfig& c) {
  std::vector<std::string_view> policies;
  for (auto p : c.policies) policies.push_back(policy_name(p));
  return fmt::format(
      "[vectors]\ncount = {}\ndim = {}\nm = {}\nepochs = {}\npolicies = {}\nseeds = {}\n"
      "engine = {}\nout = {}\n",
      c.count, c.dim, join(c.workers), c.epochs, fmt::join(policies, ","), join(c.seeds),
      c.engine.to_string(), c.out.string());
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json task = {{"kind", task_name(c.task.kind)}, {"lambda", c.task.lambda}};
  if (c.task.source == DataSource::kSynthetic) {
    task["source"] = "synthetic";
    task["examples"] = c.task.examples;
    task["dim"] = c.task.dim;
    task["noise"] = c.task.noise;
    task["data_seed"] = c.task.data_seed;
  } else {
    task["source"] = "csv";
    task["csv_path"] = c.task.csv_path.string();
    task["standardize"] = c.task.standardize;
    task["label_map"] = c.task.label_map;
  }
  return {{"task", task},
          {"run",
           {{"policy", policy_name(c.policy.kind)},
            {"m", c.workers},
            {"b", c.block},
            {"epochs", c.epochs},
            {"alpha", c.alpha},
            {"seeds", c.seeds},
            {"engine", c.policy.engine.to_string()},
            {"transport", c.transport.to_string()},
            {"out", c.out.string()},
            {"wall_clock", c.wall_clock},
            {"per_step_loss", c.per_step_loss}}}};
}

nlohmann::json config_to_json(const VectorExperimentConfig& c) {
  std::vector<std::string> policies;
  for (auto p : c.policies) policies.emplace_back(policy_name(p));
  return {{"vectors",
           {{"count", c.count},
            {"dim", c.dim},
            {"m", c.workers},
            {"epochs", c.epochs},
            {"policies", policies},
            {"seeds", c.seeds},
            {"engine", c.engine.to_string()},
            {"out", c.out.string()}}}};
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  ExperimentConfig canonical = config;
  canonical.out.clear();
  canonical.transport = TransportSpec{};
  canonical.wall_clock = false;
  canonical.per_step_loss = false;
  return fnv1a64(render_config(canonical));
}

}  // namespace ordbal
