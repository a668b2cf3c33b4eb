#include "kvec/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "kvec/error.hpp"
#include "kvec/model.hpp"

namespace kvec {

SignalPosition parse_signal_position(const std::string& name) {
  if (name == "early") return SignalPosition::kEarly;
  if (name == "late") return SignalPosition::kLate;
  throw UsageError("unknown signal position '" + name + "' (expected early|late)");
}

std::string to_string(SignalPosition p) { return p == SignalPosition::kEarly ? "early" : "late"; }

void GeneratorConfig::validate() const {
  if (classes < 2) throw ValidationError("generator needs at least 2 classes");
  if (flows < 1) throw ValidationError("generator needs at least one flow");
  if (flow_length < 1) throw ValidationError("flow length must be positive");
  if (signal_length > flow_length)
    throw ValidationError("signal length " + std::to_string(signal_length) + " exceeds flow length " +
                          std::to_string(flow_length));
  if (concurrency < 1) throw ValidationError("concurrency must be >= 1");
  if (flows_per_sequence < 1) throw ValidationError("flows per sequence must be >= 1");
  if (codes_per_class < 1) throw ValidationError("codes per class must be >= 1");
  if (pattern_share < 0.0 || pattern_share > 1.0) throw ValidationError("pattern share must lie in [0, 1]");
  if (!(mean_run_length >= 1.0)) throw ValidationError("mean run length must be >= 1");
}

ValueSchema GeneratorConfig::schema() const {
  ValueSchema s;
  s.fields = {
      FieldSpec{"size_bin", FieldKind::kCategorical, static_cast<int>(1 + classes * codes_per_class), 0.0, 1.0},
      FieldSpec{"direction", FieldKind::kCategorical, 2, 0.0, 1.0},
      FieldSpec{"size", FieldKind::kNumeric, 0, 0.0, 1.0},
  };
  s.session_dim = 1;
  return s;
}

std::size_t GeneratorConfig::signal_begin() const {
  return signal == SignalPosition::kEarly ? 0 : flow_length - signal_length;
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"classes", c.classes},
       {"flows", c.flows},
       {"flow_length", c.flow_length},
       {"signal_length", c.signal_length},
       {"signal", to_string(c.signal)},
       {"concurrency", c.concurrency},
       {"flows_per_sequence", c.flows_per_sequence},
       {"codes_per_class", c.codes_per_class},
       {"pattern_share", c.pattern_share},
       {"mean_run_length", c.mean_run_length},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.classes = j.at("classes").get<std::size_t>();
  c.flows = j.at("flows").get<std::size_t>();
  c.flow_length = j.at("flow_length").get<std::size_t>();
  c.signal_length = j.at("signal_length").get<std::size_t>();
  c.signal = parse_signal_position(j.at("signal").get<std::string>());
  c.concurrency = j.at("concurrency").get<std::size_t>();
  c.flows_per_sequence = j.at("flows_per_sequence").get<std::size_t>();
  c.codes_per_class = j.at("codes_per_class").get<std::size_t>();
  c.pattern_share = j.at("pattern_share").get<double>();
  c.mean_run_length = j.at("mean_run_length").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

double normal(Rng& rng) {
  // Box-Muller on the portable uniform stream.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double sum = 0.0;
  for (auto& x : w) sum += (x = -std::log(1.0 - uniform01(rng)));
  for (auto& x : w) x /= sum;
  return w;
}

std::size_t sample_index(Rng& rng, std::span<const double> weights) {
  double u = uniform01(rng);
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

template <typename... Args>
std::string format(const char* fmt, Args... args) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

}  // namespace

std::vector<Flow> generate_flows(const GeneratorConfig& config, Rng& rng) {
  config.validate();
  const std::size_t m = config.codes_per_class;
  std::vector<std::vector<double>> patterns;
  for (std::size_t c = 0; c < config.classes; ++c) patterns.push_back(random_simplex(rng, m));

  const double switch_p = 1.0 / config.mean_run_length;
  const std::size_t begin = config.signal_begin();
  const std::size_t end = begin + config.signal_length;

  std::vector<Flow> flows(config.flows);
  for (std::size_t f = 0; f < config.flows; ++f) {
    Flow& flow = flows[f];
    flow.key = format("f%05zu", f);
    flow.label = static_cast<int>(uniform_index(rng, config.classes));
    const auto& global = patterns[static_cast<std::size_t>(flow.label)];
    std::vector<double> weights = random_simplex(rng, m);
    for (std::size_t i = 0; i < m; ++i)
      weights[i] = config.pattern_share * global[i] + (1.0 - config.pattern_share) * weights[i];

    int direction = uniform01(rng) < 0.5 ? 0 : 1;
    flow.values.reserve(config.flow_length);
    for (std::size_t i = 0; i < config.flow_length; ++i) {
      if (i > 0 && uniform01(rng) < switch_p) direction = 1 - direction;
      double code = 0.0;
      double size = 40.0 + 4.0 * normal(rng);
      if (i >= begin && i < end) {
        const std::size_t local = sample_index(rng, weights);
        code = static_cast<double>(1 + static_cast<std::size_t>(flow.label) * m + local);
        size = 200.0 + 150.0 * static_cast<double>(local) + 20.0 * normal(rng);
      }
      flow.values.push_back({code, static_cast<double>(direction), size});
    }
  }
  return flows;
}

TangledSequence interleave(std::span<const Flow> flows, std::size_t concurrency, Rng& rng,
                           const ValueSchema& schema) {
  if (flows.empty()) throw ValidationError("interleave: empty flow pool");
  if (concurrency < 1) throw ValidationError("interleave: concurrency must be >= 1");
  TangledSequence seq(schema);
  struct Cursor {
    std::size_t flow, next;
  };
  std::vector<Cursor> active;
  std::size_t pool = 0;
  auto refill = [&] {
    while (active.size() < concurrency && pool < flows.size()) {
      if (!flows[pool].values.empty()) active.push_back({pool, 0});
      ++pool;
    }
  };
  refill();
  while (!active.empty()) {
    const std::size_t a = uniform_index(rng, active.size());
    Cursor& cur = active[a];
    const Flow& flow = flows[cur.flow];
    seq.ingest(flow.key, flow.values[cur.next]);
    if (++cur.next == flow.values.size()) {
      active.erase(active.begin() + static_cast<std::ptrdiff_t>(a));
      refill();
    }
  }
  for (const auto& flow : flows) seq.set_label(flow.key, flow.label);
  return seq;
}

FlowSplits split_by_key(std::span<const Flow> flows, std::uint64_t seed) {
  const std::size_t n = flows.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  if (n < 10 || n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw ValidationError("too few keys (" + std::to_string(n) + ") for a non-empty 8:1:1 split");
  std::unordered_set<std::string> seen;
  for (const auto& f : flows)
    if (!seen.insert(f.key).second) throw ValidationError("duplicate flow key '" + f.key + "'");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FlowSplits out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.validation : out.test);
    dst.push_back(flows[order[i]]);
  }
  return out;
}

std::vector<TangledSequence> tangle_split(std::span<const Flow> flows, const GeneratorConfig& config,
                                          const ValueSchema& schema, Rng& rng) {
  std::vector<TangledSequence> out;
  for (std::size_t b = 0; b < flows.size(); b += config.flows_per_sequence) {
    const std::size_t e = std::min(flows.size(), b + config.flows_per_sequence);
    out.push_back(interleave(flows.subspan(b, e - b), config.concurrency, rng, schema));
  }
  return out;
}

double average_session_length(std::span<const TangledSequence> seqs) {
  std::size_t items = 0, sessions = 0;
  for (const auto& s : seqs) {
    items += s.size();
    for (KeyId k = 0; k < s.key_count(); ++k) sessions += s.sessions_of(k).size();
  }
  return sessions ? static_cast<double>(items) / static_cast<double>(sessions) : 0.0;
}

namespace {

SplitCounts count(std::span<const TangledSequence> seqs) {
  SplitCounts c;
  c.sequences = seqs.size();
  for (const auto& s : seqs) {
    c.keys += s.key_count();
    c.items += s.size();
  }
  return c;
}


}  // namespace

void to_json(nlohmann::json& j, const SplitCounts& c) {
  j = {{"sequences", c.sequences}, {"keys", c.keys}, {"items", c.items}};
}

void from_json(const nlohmann::json& j, SplitCounts& c) {
  c.sequences = j.at("sequences").get<std::size_t>();
  c.keys = j.at("keys").get<std::size_t>();
  c.items = j.at("items").get<std::size_t>();
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"format", "kvec-dataset"},
       {"version", 1},
       {"schema", m.schema},
       {"class_names", m.class_names},
       {"splits", {{"train", m.train}, {"validation", m.validation}, {"test", m.test}}},
       {"avg_session_length", m.avg_session_length},
       {"generator", m.generator},
       {"seed", m.seed}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  if (j.value("format", std::string{}) != "kvec-dataset")
    throw ValidationError("manifest is not a kvec dataset manifest");
  m.schema = j.at("schema").get<ValueSchema>();
  m.schema.validate();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  if (m.class_names.size() < 2) throw ValidationError("manifest needs at least 2 classes");
  const auto& splits = j.at("splits");
  m.train = splits.at("train").get<SplitCounts>();
  m.validation = splits.at("validation").get<SplitCounts>();
  m.test = splits.at("test").get<SplitCounts>();
  m.avg_session_length = j.at("avg_session_length").get<double>();
  m.generator = j.value("generator", nlohmann::json());
  m.seed = j.value("seed", std::uint64_t{0});
}

const std::vector<TangledSequence>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation") return validation;
  if (name == "test") return test;
  throw UsageError("unknown split '" + name + "' (expected train|validation|test)");
}

Dataset generate_dataset(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::vector<Flow> flows = generate_flows(config, rng);
  const FlowSplits splits = split_by_key(flows, derive_seed(config.seed, 1));

  ValueSchema schema = config.schema();
  for (std::size_t d = 0; d < schema.fields.size(); ++d) {
    auto& f = schema.fields[d];
    if (f.kind != FieldKind::kNumeric) continue;
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& flow : splits.train)
      for (const auto& v : flow.values) {
        sum += v[d];
        sq += v[d] * v[d];
        ++n;
      }
    f.mean = sum / static_cast<double>(n);
    f.stddev = std::sqrt(std::max(sq / static_cast<double>(n) - f.mean * f.mean, 1e-12));
  }

  Dataset ds;
  Rng train_rng(derive_seed(config.seed, 2)), val_rng(derive_seed(config.seed, 3)),
      test_rng(derive_seed(config.seed, 4));
  ds.train = tangle_split(splits.train, config, schema, train_rng);
  ds.validation = tangle_split(splits.validation, config, schema, val_rng);
  ds.test = tangle_split(splits.test, config, schema, test_rng);

  auto& m = ds.manifest;
  m.schema = schema;
  for (std::size_t c = 0; c < config.classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  m.train = count(ds.train);
  m.validation = count(ds.validation);
  m.test = count(ds.test);
  std::vector<TangledSequence> all(ds.train);
  all.insert(all.end(), ds.validation.begin(), ds.validation.end());
  all.insert(all.end(), ds.test.begin(), ds.test.end());
  m.avg_session_length = average_session_length(all);
  m.generator = config;
  m.seed = config.seed;
  return ds;
}

void write_split(std::ostream& items, std::ostream& labels, std::span<const TangledSequence> seqs) {
  for (std::size_t s = 0; s < seqs.size(); ++s)
    for (const Item& item : seqs[s].items())
      items << nlohmann::json{{"seq", s}, {"t", item.arrival_index}, {"key", item.key}, {"v", item.value}}.dump()
            << '\n';
  for (const auto& seq : seqs)
    for (KeyId k = 0; k < seq.key_count(); ++k)
      labels << nlohmann::json{{"key", seq.key_name(k)}, {"label", seq.label(k)}}.dump() << '\n';
}

ItemRecord parse_item_record(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("malformed JSON: ") + e.what());
  }
  try {
    ItemRecord r;
    r.seq = j.value("seq", std::size_t{0});
    r.t = j.at("t").get<std::int64_t>();
    r.key = j.at("key").get<std::string>();
    r.value = j.at("v").get<std::vector<double>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed item record: ") + e.what());
  }
}

std::vector<TangledSequence> read_split(std::istream& items, std::istream& labels,
                                        const ValueSchema& schema, std::size_t classes,
                                        const std::string& what) {
  std::vector<TangledSequence> seqs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(items, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = what + "/items.jsonl line " + std::to_string(lineno) + ": ";
    try {
      ItemRecord r = parse_item_record(line);
      if (r.seq == seqs.size()) seqs.emplace_back(schema);
      if (r.seq + 1 != seqs.size())
        throw ValidationError("sequence id " + std::to_string(r.seq) + " out of order");
      seqs.back().ingest_at(r.t, r.key, std::move(r.value));
    } catch (const SchemaError& e) {
      throw SchemaError(where + e.what());
    } catch (const Error& e) {
      throw ValidationError(where + e.what());
    }
  }

  std::unordered_map<std::string, int> label_of;
  lineno = 0;
  while (std::getline(labels, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = what + "/labels.jsonl line " + std::to_string(lineno) + ": ";
    int label = 0;
    std::string key;
    try {
      const auto j = nlohmann::json::parse(line);
      key = j.at("key").get<std::string>();
      label = j.at("label").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + "malformed label record: " + e.what());
    }
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw ValidationError(where + "label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")");
    if (!label_of.emplace(key, label).second)
      throw ValidationError(where + "duplicate label for key '" + key + "'");
  }
  for (auto& seq : seqs) {
    for (KeyId k = 0; k < seq.key_count(); ++k) {
      const auto it = label_of.find(seq.key_name(k));
      if (it == label_of.end())
        throw ValidationError(what + ": missing label for key '" + seq.key_name(k) + "'");
      seq.set_label(it->first, it->second);
    }
  }
  return seqs;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json");
    out << nlohmann::json(dataset.manifest).dump(2) << '\n';
    if (!out) throw ValidationError("cannot write " + (dir / "manifest.json").string());
  }
  for (const std::string name : {"train", "validation", "test"}) {
    std::filesystem::create_directories(dir / name);
    std::ofstream items(dir / name / "items.jsonl");
    std::ofstream labels(dir / name / "labels.jsonl");
    write_split(items, labels, dataset.split(name));
    if (!items || !labels) throw ValidationError("cannot write split " + (dir / name).string());
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw ValidationError("cannot open " + (dir / "manifest.json").string());
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(mf).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed manifest: " + std::string(e.what()));
  }
  const std::size_t classes = ds.manifest.class_names.size();
  for (const std::string name : {"train", "validation", "test"}) {
    std::ifstream items(dir / name / "items.jsonl");
    std::ifstream labels(dir / name / "labels.jsonl");
    if (!items || !labels) throw ValidationError("missing split files under " + (dir / name).string());
    auto seqs = read_split(items, labels, ds.manifest.schema, classes, (dir / name).string());
    const SplitCounts expected = name == "train" ? ds.manifest.train
                                 : name == "validation" ? ds.manifest.validation : ds.manifest.test;
    if (count(seqs) != expected)
      throw ValidationError("split '" + name + "' does not match the manifest counts");
    (name == "train" ? ds.train : name == "validation" ? ds.validation : ds.test) = std::move(seqs);
  }
  return ds;
}

double frequency_oracle_accuracy(std::span<const Flow> train, std::span<const Flow> test,
                                 const GeneratorConfig& config) {
  if (test.empty()) throw ValidationError("frequency oracle: empty test set");
  const std::size_t codes = 1 + config.classes * config.codes_per_class;
  std::vector<std::vector<double>> counts(codes, std::vector<double>(config.classes, 0.0));
  std::vector<double> totals(config.classes, 0.0);
  const std::size_t begin = config.signal_begin();
  const std::size_t end = begin + config.signal_length;
  for (const auto& f : train)
    for (std::size_t i = begin; i < end && i < f.values.size(); ++i) {
      counts[static_cast<std::size_t>(f.values[i][0])][static_cast<std::size_t>(f.label)] += 1.0;
      totals[static_cast<std::size_t>(f.label)] += 1.0;
    }

  std::size_t correct = 0;
  std::vector<double> score(config.classes);
  for (const auto& f : test) {
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t i = begin; i < end && i < f.values.size(); ++i) {
      const auto code = static_cast<std::size_t>(f.values[i][0]);
      for (std::size_t c = 0; c < config.classes; ++c)
        score[c] += std::log((counts[code][c] + 1.0) / (totals[c] + static_cast<double>(codes)));
    }
    const auto best = static_cast<int>(std::max_element(score.begin(), score.end()) - score.begin());
    correct += best == f.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace kvec
