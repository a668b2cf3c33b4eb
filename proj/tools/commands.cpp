#include "commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "kvec/checkpoint.hpp"
#include "kvec/datasets.hpp"
#include "kvec/error.hpp"
#include "kvec/evalkit.hpp"
#include "kvec/gradcheck.hpp"
#include "kvec/streaming.hpp"
#include "kvec/training.hpp"
#include "run_config.hpp"

namespace kvec::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Command {
  std::string name;
  std::string description;
  std::vector<std::string> sections;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> list = {
      {"generate", "Generate a synthetic tangled dataset", {"generate"}},
      {"train", "Train a model on a dataset", {"train", "model"}},
      {"eval", "Evaluate a checkpoint on one split", {"eval"}},
      {"sweep", "Trace an earliness-accuracy curve over one setting", {"sweep", "train", "model", "generate"}},
      {"analyze", "Attention split and halting-position histogram", {"analyze"}},
      {"stream", "Online inference over a JSON-lines item stream", {"stream"}},
      {"gradcheck", "Finite-difference check of every gradient path", {"gradcheck"}},
  };
  return list;
}

struct Context {
  RunConfig config;
  fs::path run_dir;
  std::shared_ptr<spdlog::logger> log;
};

fs::path make_run_dir(const std::string& base_flag, const std::string& command) {
  fs::path base = base_flag;
  if (base.empty()) {
    const char* env = std::getenv("KVEC_RUN_DIR");
    base = env && *env ? fs::path(env) : fs::path("runs");
  }
  fs::create_directories(base);
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
  for (int n = 1;; ++n) {
    fs::path dir = base / (n == 1 ? stamp.str() : stamp.str() + "-" + std::to_string(n));
    if (fs::create_directory(dir)) return dir;
  }
}

std::shared_ptr<spdlog::logger> make_logger(const fs::path& run_dir) {
  auto console = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((run_dir / "log.txt").string(), true);
  auto log = std::make_shared<spdlog::logger>("kvec", spdlog::sinks_init_list{console, file});
  log->set_pattern("[%Y-%m-%d %H:%M:%S] [%l] %v");
  log->flush_on(spdlog::level::info);
  return log;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  return out;
}

json eval_json(const EvalResult& r) {
  return {{"keys", r.outcomes.size()}, {"accuracy", r.accuracy}, {"earliness", r.earliness},
          {"precision", r.precision},  {"recall", r.recall},     {"f1", r.f1},
          {"hm", r.hm},                {"median_halt", r.outcomes.empty() ? 0.0 : halting_histogram(r.outcomes).median}};
}

std::string require(const RunConfig& c, const std::string& key) {
  std::string v = c.text(key);
  if (v.empty()) throw UsageError("missing required setting " + key);
  return v;
}

std::optional<std::string> explicit_value(const RunConfig& c, const std::string& key) {
  const std::string& v = c.text(key);
  if (v == "auto") return std::nullopt;
  return v;
}

GeneratorConfig generator_config(const RunConfig& c) {
  GeneratorConfig g;
  g.classes = c.get_size("generate.classes");
  g.flows = c.get_size("generate.flows");
  g.flow_length = c.get_size("generate.len");
  g.signal_length = c.get_size("generate.signal_len");
  g.signal = parse_signal_position(c.text("generate.signal"));
  g.concurrency = c.get_size("generate.k");
  g.flows_per_sequence = c.get_size("generate.flows_per_sequence");
  g.codes_per_class = c.get_size("generate.codes_per_class");
  g.pattern_share = c.get_double("generate.pattern_share");
  g.mean_run_length = c.get_double("generate.mean_run_length");
  g.seed = c.get_u64("generate.seed");
  return g;
}

ModelConfig model_config(const RunConfig& c, const DatasetManifest& manifest) {
  const std::string profile = c.text("model.profile");
  const std::size_t classes = manifest.class_names.size();
  ModelConfig m;
  if (profile == "traffic") {
    m = ModelConfig::traffic(manifest.schema, classes);
  } else if (profile == "small") {
    m = ModelConfig::small(manifest.schema, classes);
  } else if (profile == "tiny") {
    m = ModelConfig::tiny(manifest.schema, classes);
  } else {
    throw UsageError("unknown model profile '" + profile + "' (expected traffic|small|tiny)");
  }
  auto size_of = [&](const char* key, std::size_t& field) {
    if (explicit_value(c, key)) field = c.get_size(key);
  };
  size_of("model.embed_dim", m.embed_dim);
  size_of("model.blocks", m.blocks);
  size_of("model.ffn_dim", m.ffn_dim);
  size_of("model.hidden", m.hidden);
  size_of("model.slot_count", m.slot_count);
  size_of("model.max_seq_pos", m.max_seq_pos);
  size_of("model.window", m.mask.window);
  if (explicit_value(c, "model.dropout")) m.dropout = c.get_double("model.dropout");
  if (explicit_value(c, "model.residual")) m.residual = c.get_bool("model.residual");
  if (explicit_value(c, "model.policy_bias_init")) m.policy_bias_init = c.get_double("model.policy_bias_init");
  m = apply_ablation(m, parse_ablation(c.text("model.ablation")));
  m.validate();
  return m;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = c.get_size("train.epochs");
  t.learning_rate = c.get_double("train.lr");
  t.baseline_learning_rate = c.get_double("train.baseline_lr");
  t.batch = c.get_size("train.batch");
  t.loss.alpha = c.get_double("train.alpha");
  t.loss.beta = c.get_double("train.beta");
  t.loss.policy_to_encoder = c.get_bool("train.policy_to_encoder");
  t.seed = c.get_u64("train.seed");
  t.checkpoint_every = c.get_size("train.checkpoint_every");
  if (t.batch == 0) throw UsageError("train.batch must be positive");
  return t;
}

/// SRN baseline: key-only attention, classifier trained at every prefix,
/// no halting policy.
void make_srn(ModelConfig& m, TrainConfig& t) {
  m.mask.key_correlation = true;
  m.mask.value_correlation = false;
  t.loss.classify_every_step = true;
  t.loss.alpha = 0.0;
  t.loss.beta = 0.0;
  t.rollout_rule = HaltRule::kNever;
}

struct Trained {
  KvecModel model;
  std::vector<EpochRecord> history;
};

Trained fit(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data, spdlog::logger* log) {
  KvecModel model(mc, derive_seed(tc.seed, 100));
  auto history = train(model, data.train, tc, [&](const EpochRecord& r, KvecModel&) {
    if (log)
      log->info("epoch {} loss {:.5f} (l1 {:.5f} l2 {:.5f} l3 {:.5f}) acc {:.4f} earliness {:.4f}", r.epoch,
                r.total, r.l1, r.l2, r.l3, r.accuracy, r.earliness);
  });
  return {std::move(model), std::move(history)};
}

HaltRule parse_rule(const std::string& name) {
  if (name == "policy") return HaltRule::kPolicyThreshold;
  if (name == "fixed") return HaltRule::kFixed;
  if (name == "confidence") return HaltRule::kConfidence;
  if (name == "full") return HaltRule::kNever;
  throw UsageError("unknown halting rule '" + name + "' (expected policy|fixed|confidence|full)");
}

json checkpoint_extra(const Dataset& data, bool srn) {
  return {{"class_names", data.manifest.class_names}, {"srn", srn}};
}

int cmd_generate(Context& ctx) {
  const GeneratorConfig g = generator_config(ctx.config);
  const Dataset ds = generate_dataset(g);
  const std::string out_setting = ctx.config.text("generate.out");
  const fs::path out = out_setting.empty() ? ctx.run_dir / "data" : fs::path(out_setting);
  save_dataset(ds, out);
  const auto& m = ds.manifest;
  ctx.log->info("wrote {} ({} / {} / {} sequences, avg session length {:.4f})", out.string(), m.train.sequences,
                m.validation.sequences, m.test.sequences, m.avg_session_length);
  std::cout << json{{"dataset", out.string()},
                    {"train", m.train},
                    {"validation", m.validation},
                    {"test", m.test},
                    {"avg_session_length", m.avg_session_length}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_train(Context& ctx) {
  const RunConfig& c = ctx.config;
  TrainConfig tc = train_config(c);
  const bool srn = c.get_bool("train.srn");
  const Dataset data = load_dataset(require(c, "train.data"));
  ModelConfig mc = model_config(c, data.manifest);
  if (srn) make_srn(mc, tc);
  if (tc.checkpoint_every > 0) tc.checkpoint_dir = ctx.run_dir / "checkpoints";
  ctx.log->info("training on {} sequences for {} epochs", data.train.size(), tc.epochs);

  Trained t = fit(mc, tc, data, ctx.log.get());
  const std::string out_setting = c.text("train.out");
  const fs::path ckpt = out_setting.empty() ? ctx.run_dir / "model.ckpt" : fs::path(out_setting);
  t.model.save(ckpt, checkpoint_extra(data, srn));
  {
    auto out = open_out(ctx.run_dir / "history.csv");
    write_history_csv(out, t.history);
  }
  const HaltRule rule = srn ? HaltRule::kNever : HaltRule::kPolicyThreshold;
  const EvalResult val = evaluate(t.model, data.validation, rule);
  const EvalResult tst = evaluate(t.model, data.test, rule);
  {
    auto out = open_out(ctx.run_dir / "metrics.csv");
    const std::vector<std::pair<std::string, EvalResult>> rows = {{"validation", val}, {"test", tst}};
    write_metrics_csv(out, rows);
  }
  ctx.log->info("test accuracy {:.4f} earliness {:.4f} hm {:.4f}", tst.accuracy, tst.earliness, tst.hm);
  std::cout << json{{"checkpoint", ckpt.string()}, {"validation", eval_json(val)}, {"test", eval_json(tst)}}.dump()
            << '\n';
  return 0;
}

KvecModel load_view(const std::string& path, bool srn) {
  KvecModel model = KvecModel::load(path);
  return srn ? srn_view(model) : model;
}

int cmd_eval(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Dataset data = load_dataset(require(c, "eval.data"));
  const KvecModel model = load_view(require(c, "eval.checkpoint"), c.get_bool("eval.srn"));
  const std::string split = c.text("eval.split");
  const HaltRule rule = parse_rule(c.text("eval.rule"));
  const std::size_t tau = c.get_size("eval.tau");
  if (rule == HaltRule::kFixed && tau == 0) throw ValidationError("eval.tau must be at least 1");
  const EvalResult r = evaluate(model, data.split(split), rule, tau, c.get_double("eval.mu"));
  {
    auto out = open_out(ctx.run_dir / "metrics.csv");
    const std::vector<std::pair<std::string, EvalResult>> rows = {{split, r}};
    write_metrics_csv(out, rows);
  }
  {
    auto out = open_out(ctx.run_dir / "halting_hist.csv");
    write_histogram_csv(out, halting_histogram(r.outcomes, c.get_size("eval.bins")));
  }
  std::cout << json{{"split", split}, {"metrics", eval_json(r)}}.dump() << '\n';
  return 0;
}

int cmd_sweep(Context& ctx) {
  const RunConfig& c = ctx.config;
  const std::string param = c.text("sweep.param");
  const std::vector<double> grid = c.get_doubles("sweep.values");
  std::vector<std::uint64_t> seeds;
  for (double s : c.get_doubles("sweep.seeds")) {
    if (s < 0 || s != static_cast<double>(static_cast<std::uint64_t>(s)))
      throw UsageError("sweep.seeds must be non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(s));
  }
  const std::string split = c.text("sweep.split");
  PointRunner runner;
  std::map<double, Dataset> generated;

  if (param == "alpha" || param == "beta") {
    auto data = std::make_shared<Dataset>(load_dataset(require(c, "train.data")));
    const ModelConfig mc = model_config(c, data->manifest);
    runner = [&, data, mc](double value, std::uint64_t seed) {
      TrainConfig tc = train_config(c);
      (param == "alpha" ? tc.loss.alpha : tc.loss.beta) = value;
      tc.seed = seed;
      ctx.log->info("{} = {} seed {}", param, value, seed);
      const Trained t = fit(mc, tc, *data, nullptr);
      return evaluate(t.model, data->split(split));
    };
  } else if (param == "tau" || param == "mu") {
    auto data = std::make_shared<Dataset>(load_dataset(require(c, "train.data")));
    auto model = std::make_shared<KvecModel>(KvecModel::load(require(c, "sweep.checkpoint")));
    seeds.resize(std::min<std::size_t>(seeds.size(), 1));  // deterministic: one pass suffices
    runner = [&, data, model](double value, std::uint64_t) {
      return halting_baseline(*model, data->split(split), param == "tau" ? BaselineKind::kFixed : BaselineKind::kConfidence,
                              value);
    };
  } else if (param == "k") {
    runner = [&](double value, std::uint64_t seed) {
      if (value < 1 || value != static_cast<double>(static_cast<std::size_t>(value)))
        throw ValidationError("k must be a positive integer");
      auto it = generated.find(value);
      if (it == generated.end()) {
        GeneratorConfig g = generator_config(c);
        g.concurrency = static_cast<std::size_t>(value);
        it = generated.emplace(value, generate_dataset(g)).first;
      }
      const Dataset& data = it->second;
      TrainConfig tc = train_config(c);
      tc.seed = seed;
      ctx.log->info("k = {} seed {}", value, seed);
      const Trained t = fit(model_config(c, data.manifest), tc, data, nullptr);
      return evaluate(t.model, data.split(split));
    };
  } else {
    throw UsageError("unknown sweep parameter '" + param + "' (expected alpha|beta|tau|mu|k)");
  }

  const std::vector<CurvePoint> points = sweep(param, grid, seeds, runner);
  {
    auto out = open_out(ctx.run_dir / "curve.csv");
    write_curve_csv(out, points);
  }
  json rows = json::array();
  for (const auto& p : points) {
    json row = {{"value", p.value}, {"seed", p.seed}, {"earliness", p.earliness}, {"accuracy", p.accuracy}, {"hm", p.hm}};
    if (p.failed) row["error"] = p.error;
    rows.push_back(row);
    if (p.failed) ctx.log->warn("{} = {} seed {} failed: {}", param, p.value, p.seed, p.error);
  }
  std::cout << json{{"param", param}, {"points", rows}}.dump() << '\n';
  return 0;
}

int cmd_analyze(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Dataset data = load_dataset(require(c, "analyze.data"));
  const KvecModel model = load_view(require(c, "analyze.checkpoint"), c.get_bool("analyze.srn"));
  const auto& seqs = data.split(c.text("analyze.split"));
  const std::size_t bins = c.get_size("analyze.bins");
  const AttentionSplit att = attention_split(model, seqs, bins);
  const EvalResult r = evaluate(model, seqs);
  const HaltingHistogram hist = halting_histogram(r.outcomes, bins);
  {
    auto out = open_out(ctx.run_dir / "attention_split.csv");
    write_attention_csv(out, att);
  }
  {
    auto out = open_out(ctx.run_dir / "halting_hist.csv");
    write_histogram_csv(out, hist);
  }
  std::cout << json{{"rows", att.rows},
                    {"internal", att.internal},
                    {"external", att.external},
                    {"max_sum_error", att.max_sum_error},
                    {"median_halt", hist.median},
                    {"metrics", eval_json(r)}}
                   .dump()
            << '\n';
  return 0;
}

json outcome_json(std::size_t seq, const StepOutcome& o, const std::vector<std::string>& names) {
  json j = {{"seq", seq}, {"t", o.arrival_index}, {"key", o.key}};
  if (o.skipped) {
    j["skipped"] = true;
    return j;
  }
  j["step"] = o.step;
  j["action"] = to_string(o.action);
  j["p_halt"] = o.p_halt;
  if (o.forced) j["forced"] = true;
  if (o.classification) {
    j["label"] = o.classification->label;
    const auto idx = static_cast<std::size_t>(o.classification->label);
    if (idx < names.size()) j["class"] = names[idx];
    j["confidence"] = o.classification->confidence();
  }
  return j;
}

int cmd_stream(Context& ctx) {
  const RunConfig& c = ctx.config;
  const std::string ckpt = require(c, "stream.checkpoint");
  const KvecModel model = KvecModel::load(ckpt);
  std::vector<std::string> names;
  if (const auto meta = read_checkpoint(ckpt).meta; meta.contains("extra") && meta["extra"].contains("class_names"))
    names = meta["extra"]["class_names"].get<std::vector<std::string>>();
  StreamOptions opts;
  opts.threshold = c.get_double("stream.threshold");
  opts.cache_kv = c.get_bool("stream.cache_kv");

  std::ifstream in_file;
  std::istream* in = &std::cin;
  if (c.text("stream.input") != "-") {
    in_file.open(c.text("stream.input"));
    if (!in_file) throw UsageError("cannot open stream input " + c.text("stream.input"));
    in = &in_file;
  }
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (c.text("stream.output") != "-") {
    out_file = open_out(c.text("stream.output"));
    out = &out_file;
  }

  std::optional<StreamEngine> engine;
  std::size_t current = 0, lineno = 0, items = 0, halted = 0;
  std::uint64_t madds = 0;
  auto flush = [&] {
    if (!engine) return;
    for (const auto& o : engine->finish()) *out << outcome_json(current, o, names).dump() << '\n';
    items += engine->stats().items;
    halted += engine->stats().halted;
    madds += engine->stats().multiply_adds;
  };
  std::string line;
  while (std::getline(*in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      ItemRecord r = parse_item_record(line);
      if (!engine || r.seq != current) {
        flush();
        engine.emplace(model, opts);
        current = r.seq;
      }
      const StepOutcome o = engine->step_at(r.t, r.key, std::move(r.value));
      *out << outcome_json(current, o, names).dump() << '\n';
    } catch (const Error& e) {
      throw ValidationError("stream input line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  flush();
  out->flush();
  ctx.log->info("streamed {} items, {} keys halted by the policy, {} multiply-adds", items, halted, madds);
  return 0;
}

int cmd_gradcheck(Context& ctx) {
  const RunConfig& c = ctx.config;
  GradCheckOptions opts;
  opts.step = c.get_double("gradcheck.step");
  opts.tolerance = c.get_double("gradcheck.tolerance");
  opts.seed = c.get_u64("gradcheck.seed");
  const GradCheckReport report = run_gradcheck(opts);
  write_gradcheck_table(std::cout, report);
  {
    auto out = open_out(ctx.run_dir / "gradcheck.txt");
    write_gradcheck_table(out, report);
  }
  if (!report.passed()) {
    std::ostringstream msg;
    msg << "gradient check failed: max relative error " << report.max_rel_error() << " > " << report.tolerance;
    throw NumericalError(msg.str());
  }
  ctx.log->info("all gradient checks passed, max relative error {:.3e}", report.max_rel_error());
  return 0;
}

int dispatch(const std::string& name, Context& ctx) {
  if (name == "generate") return cmd_generate(ctx);
  if (name == "train") return cmd_train(ctx);
  if (name == "eval") return cmd_eval(ctx);
  if (name == "sweep") return cmd_sweep(ctx);
  if (name == "analyze") return cmd_analyze(ctx);
  if (name == "stream") return cmd_stream(ctx);
  if (name == "gradcheck") return cmd_gradcheck(ctx);
  throw UsageError("unknown command " + name);
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& ch : f)
    if (ch == '_') ch = '-';
  return "--" + f;
}

int report(const char* kind, int code, const std::string& message) {
  std::cerr << json{{"error", kind}, {"code", code}, {"message", message}}.dump() << std::endl;
  return code;
}

struct SubcommandArgs {
  std::string config_path;
  std::string run_dir;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // qualified key -> flag value
  std::map<std::string, CLI::Option*> options;
};

}  // namespace

int run(const std::vector<std::string>& args) {
  const RunConfig defaults = default_config();
  CLI::App app{"Key-value sequence early co-classification"};
  app.name("kvec");
  app.require_subcommand(1, 1);

  std::map<std::string, SubcommandArgs> parsed;
  for (const auto& cmd : commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.description);
    SubcommandArgs& a = parsed[cmd.name];
    sub->add_option("--config", a.config_path, "INI config file with [section] key = value lines");
    sub->add_option("--run-dir", a.run_dir, "parent of the run directory (default: $KVEC_RUN_DIR or ./runs)");
    sub->add_option("--set", a.sets, "override any setting: section.key=value")->allow_extra_args(false);
    std::set<std::string> taken;
    for (const auto& section : cmd.sections) {
      for (const Setting* s : defaults.section(section)) {
        if (!taken.insert(s->key).second) continue;  // reachable through --set
        CLI::Option* opt = sub->add_option(flag_name(s->key), a.flags[s->qualified()],
                                           s->help + " [" + s->qualified() + "]");
        opt->default_str(s->value.empty() ? "\"\"" : s->value);
        a.options[s->qualified()] = opt;
      }
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", 1, e.what());
  }

  const CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  const Command& cmd = *std::find_if(commands().begin(), commands().end(),
                                     [&](const Command& c) { return c.name == name; });
  SubcommandArgs& a = parsed[name];
  try {
    Context ctx;
    ctx.config = defaults;
    if (!a.config_path.empty()) ctx.config.load_file(a.config_path, cmd.sections);
    for (const auto& s : a.sets) {
      const std::string section = s.substr(0, s.find('.'));
      if (std::find(cmd.sections.begin(), cmd.sections.end(), section) == cmd.sections.end())
        throw UsageError("--set " + s + ": section [" + section + "] is not used by " + name);
      ctx.config.set_assignment(s);
    }
    for (const auto& [key, opt] : a.options)
      if (opt->count() > 0) ctx.config.set(key, a.flags[key]);

    ctx.run_dir = make_run_dir(a.run_dir, name);
    {
      auto out = open_out(ctx.run_dir / "config.ini");
      out << "; kvec " << name << "\n";
      ctx.config.write(out, cmd.sections);
    }
    ctx.log = make_logger(ctx.run_dir);
    ctx.log->info("kvec {} -> {}", name, ctx.run_dir.string());
    return dispatch(name, ctx);
  } catch (const Error& e) {
    return report(e.kind(), e.exit_code(), e.what());
  } catch (const fs::filesystem_error& e) {
    return report("validation", 2, e.what());
  } catch (const std::exception& e) {
    return report("validation", 2, e.what());
  }
}

}  // namespace kvec::cli
