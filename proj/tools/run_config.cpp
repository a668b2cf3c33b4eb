#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "kvec/error.hpp"

namespace kvec::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& raw) {
  std::string s = trim(raw);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
    return s.substr(1, s.size() - 2);
  return s;
}

template <typename T>
T parse_number(const std::string& text, const std::string& name) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty())
    throw UsageError("setting " + name + ": cannot parse '" + text + "' as a number");
  return v;
}

}  // namespace

void RunConfig::declare(const std::string& section, const std::string& key, std::string value,
                        std::string help) {
  if (has(section + "." + key)) throw std::logic_error("duplicate setting " + section + "." + key);
  settings_.push_back(Setting{section, key, std::move(value), std::move(help)});
}

bool RunConfig::has(const std::string& qualified) const {
  return std::any_of(settings_.begin(), settings_.end(),
                     [&](const Setting& s) { return s.qualified() == qualified; });
}

Setting& RunConfig::find(const std::string& qualified) {
  for (auto& s : settings_)
    if (s.qualified() == qualified) return s;
  throw UsageError("unknown setting '" + qualified + "'");
}

const Setting& RunConfig::find(const std::string& qualified) const {
  return const_cast<RunConfig*>(this)->find(qualified);
}

void RunConfig::load_file(const std::filesystem::path& path, const std::vector<std::string>& allowed) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  // The INI parser only knows ';' comments.
  std::ostringstream cleaned;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    cleaned << (!t.empty() && t.front() == '#' ? ";" : line) << '\n';
  }
  std::istringstream src(cleaned.str());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(src, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw UsageError("config file " + path.string() + " line " + std::to_string(e.line()) + ": " +
                     e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw UsageError("config file " + path.string() + ": key '" + section + "' outside a section");
    if (std::find(allowed.begin(), allowed.end(), section) == allowed.end())
      throw UsageError("config file " + path.string() + ": section [" + section + "] is not used by this command");
    for (const auto& [key, node] : body) {
      const std::string q = section + "." + key;
      if (!has(q)) throw UsageError("config file " + path.string() + ": unknown key '" + q + "'");
      set(q, unquote(node.get_value<std::string>()));
    }
  }
}

void RunConfig::set(const std::string& qualified, const std::string& value) { find(qualified).value = value; }

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("expected section.key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), unquote(assignment.substr(eq + 1)));
}

const std::string& RunConfig::text(const std::string& qualified) const { return find(qualified).value; }

double RunConfig::get_double(const std::string& qualified) const {
  return parse_number<double>(text(qualified), qualified);
}

std::int64_t RunConfig::get_int(const std::string& qualified) const {
  return parse_number<std::int64_t>(text(qualified), qualified);
}

std::size_t RunConfig::get_size(const std::string& qualified) const {
  return parse_number<std::size_t>(text(qualified), qualified);
}

std::uint64_t RunConfig::get_u64(const std::string& qualified) const {
  return parse_number<std::uint64_t>(text(qualified), qualified);
}

bool RunConfig::get_bool(const std::string& qualified) const {
  std::string v = text(qualified);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("setting " + qualified + ": expected a boolean, got '" + text(qualified) + "'");
}

std::vector<double> RunConfig::get_doubles(const std::string& qualified) const {
  std::vector<double> out;
  std::stringstream ss(text(qualified));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<double>(item, qualified));
  }
  return out;
}

std::vector<const Setting*> RunConfig::section(const std::string& name) const {
  std::vector<const Setting*> out;
  for (const auto& s : settings_)
    if (s.section == name) out.push_back(&s);
  return out;
}

void RunConfig::write(std::ostream& out, const std::vector<std::string>& sections) const {
  bool first = true;
  for (const auto& name : sections) {
    if (!first) out << '\n';
    first = false;
    out << '[' << name << "]\n";
    for (const Setting* s : section(name)) out << s->key << " = " << s->value << '\n';
  }
}

RunConfig default_config() {
  RunConfig c;
  c.declare("generate", "classes", "2", "number of classes");
  c.declare("generate", "flows", "1000", "flows to generate");
  c.declare("generate", "len", "100", "items per flow");
  c.declare("generate", "signal_len", "10", "length of the class-revealing segment");
  c.declare("generate", "signal", "early", "segment position: early|late");
  c.declare("generate", "k", "10", "concurrent flows while tangling");
  c.declare("generate", "flows_per_sequence", "20", "flows per tangled sequence");
  c.declare("generate", "codes_per_class", "4", "signal size-bin codes owned by each class");
  c.declare("generate", "pattern_share", "0.5", "weight of the per-class global code pattern");
  c.declare("generate", "mean_run_length", "2.1", "mean direction run length");
  c.declare("generate", "seed", "7", "generator seed");
  c.declare("generate", "out", "", "dataset directory (default: <run dir>/data)");

  c.declare("model", "profile", "traffic", "base sizes: traffic|small|tiny");
  c.declare("model", "embed_dim", "auto", "embedding width d");
  c.declare("model", "blocks", "auto", "attention blocks");
  c.declare("model", "ffn_dim", "auto", "feed-forward width");
  c.declare("model", "hidden", "auto", "fusion state width h");
  c.declare("model", "slot_count", "auto", "membership embedding slots");
  c.declare("model", "max_seq_pos", "auto", "relative-position table size");
  c.declare("model", "window", "auto", "attention window in items");
  c.declare("model", "dropout", "auto", "dropout rate after the feed-forward layer");
  c.declare("model", "residual", "auto", "residual connection around each block");
  c.declare("model", "policy_bias_init", "auto", "initial halting logit");
  c.declare("model", "ablation", "none", "none|key|value|time|membership");

  c.declare("train", "data", "", "dataset directory");
  c.declare("train", "epochs", "100", "training epochs");
  c.declare("train", "lr", "1e-4", "learning rate of encoder and heads");
  c.declare("train", "baseline_lr", "1e-3", "learning rate of the baseline network");
  c.declare("train", "batch", "1", "tangled sequences per update");
  c.declare("train", "alpha", "0.1", "weight of the policy loss");
  c.declare("train", "beta", "0.1", "weight of the time penalty");
  c.declare("train", "seed", "1", "model and training seed");
  c.declare("train", "policy_to_encoder", "false", "let policy losses reach the encoder");
  c.declare("train", "srn", "false", "train the SRN baseline (no value correlation, every-step loss)");
  c.declare("train", "checkpoint_every", "0", "epochs between periodic checkpoints (0: off)");
  c.declare("train", "out", "", "final checkpoint path (default: <run dir>/model.ckpt)");

  c.declare("eval", "data", "", "dataset directory");
  c.declare("eval", "checkpoint", "", "model checkpoint");
  c.declare("eval", "split", "test", "train|validation|test");
  c.declare("eval", "rule", "policy", "halting rule: policy|fixed|confidence|full");
  c.declare("eval", "tau", "10", "halting step for rule=fixed");
  c.declare("eval", "mu", "0.9", "confidence threshold for rule=confidence");
  c.declare("eval", "srn", "false", "evaluate with value correlation masked out");
  c.declare("eval", "bins", "10", "halting histogram bins");

  c.declare("sweep", "param", "beta", "swept setting: alpha|beta|tau|mu|k");
  c.declare("sweep", "values", "", "comma-separated grid");
  c.declare("sweep", "seeds", "1,2,3", "comma-separated seeds");
  c.declare("sweep", "split", "test", "split scored at each point");
  c.declare("sweep", "checkpoint", "", "trained model for tau/mu sweeps");

  c.declare("analyze", "data", "", "dataset directory");
  c.declare("analyze", "checkpoint", "", "model checkpoint");
  c.declare("analyze", "split", "test", "train|validation|test");
  c.declare("analyze", "bins", "10", "histogram bins");
  c.declare("analyze", "srn", "false", "analyze with value correlation masked out");

  c.declare("stream", "checkpoint", "", "model checkpoint");
  c.declare("stream", "input", "-", "JSON-lines item file ('-' for stdin)");
  c.declare("stream", "output", "-", "decision output ('-' for stdout)");
  c.declare("stream", "threshold", "0.5", "halting probability threshold");
  c.declare("stream", "cache_kv", "true", "cache projected keys and values");

  c.declare("gradcheck", "step", "1e-5", "finite-difference step");
  c.declare("gradcheck", "tolerance", "1e-4", "maximum relative error");
  c.declare("gradcheck", "seed", "1", "seed of the probe model");
  return c;
}

}  // namespace kvec::cli
