#include "kvec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>

#include "kvec/datasets.hpp"
#include "kvec/ectl.hpp"
#include "kvec/kvrl.hpp"
#include "kvec/training.hpp"

namespace kvec {

bool GradCheckReport::passed() const {
  return std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.max_rel_error);
  return m;
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

std::vector<double> gaussian_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * uniform01(rng) - 1.0;
  return v;
}

ModelConfig tiny_config() {
  GeneratorConfig g;
  ValueSchema schema = g.schema();
  schema.fields[2].mean = 100.0;
  schema.fields[2].stddev = 50.0;
  ModelConfig c;
  c.schema = schema;
  c.classes = 2;
  c.embed_dim = 4;
  c.blocks = 2;
  c.ffn_dim = 8;
  c.hidden = 4;
  c.slot_count = 3;
  c.max_seq_pos = 4;
  c.mask.window = 10;
  c.dropout = 0.0;
  c.policy_bias_init = 0.0;
  return c;
}

TangledSequence tiny_sequence(const ModelConfig& c, Rng& rng) {
  TangledSequence seq(c.schema);
  const char* keys[] = {"a", "b", "c", "d"};
  for (int i = 0; i < 14; ++i) {
    const std::string key = keys[std::min<std::size_t>(3, static_cast<std::size_t>(uniform01(rng) * 4))];
    const double code = std::floor(uniform01(rng) * c.schema.fields[0].cardinality);
    const double dir = uniform01(rng) < 0.5 ? 0.0 : 1.0;
    seq.ingest(key, {code, dir, 50.0 + 150.0 * uniform01(rng)});
  }
  for (KeyId k = 0; k < seq.key_count(); ++k) seq.set_label(seq.key_name(k), static_cast<int>(k % 2));
  return seq;
}

class Runner {
 public:
  Runner(GradCheckReport& report, double step, double tol) : report_(report), step_(step), tol_(tol) {}

  /// `analytic` must leave gradients in `store`; `loss` re-evaluates from scratch.
  void check(const std::string& name, ParameterStore& store, const std::function<void()>& analytic,
             const std::function<double()>& loss, const std::vector<std::string>& prefixes) {
    store.zero_grad();
    analytic();
    auto select = [&](const std::string& p) {
      return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& x) { return starts_with(p, x); });
    };
    for (const auto& e : finite_diff_check(loss, store, step_, tol_, select))
      report_.rows.push_back({name, e.name, e.max_rel_error, e.analytic, e.numeric, e.passed});
    store.zero_grad();
  }

 private:
  GradCheckReport& report_;
  double step_, tol_;
};

}  // namespace

GradCheckReport run_gradcheck(const GradCheckOptions& options) {
  GradCheckReport report;
  report.step = options.step;
  report.tolerance = options.tolerance;
  Runner run(report, options.step, options.tolerance);

  Rng rng(options.seed);
  const ModelConfig cfg = tiny_config();
  KvecModel model(cfg, derive_seed(options.seed, 1));
  // Nonzero biases so every term of the gradient is exercised.
  for (auto& p : model.params().params())
    for (auto& v : p.value.data())
      if (v == 0.0) v = 0.2 * (2.0 * uniform01(rng) - 1.0);
  for (auto& p : model.baseline_params().params())
    for (auto& v : p.value.data())
      if (v == 0.0) v = 0.2 * (2.0 * uniform01(rng) - 1.0);

  const TangledSequence seq = tiny_sequence(cfg, rng);
  const DynamicMask mask = DynamicMask::build(seq, cfg.mask);
  const std::size_t t = seq.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t h = cfg.hidden;
  ParameterStore& params = model.params();

  // Embeddings: L = <R, E_0>.
  {
    const Tensor r(d, t, gaussian_vector(rng, d * t));
    auto loss = [&] {
      const Tensor e0 = input_embedding(model, seq, t);
      return dot(e0.data(), r.data());
    };
    auto analytic = [&] {
      for (std::size_t i = 0; i < t; ++i)
        embed_item_backward(model, features_of(seq, i, cfg.slot_count), r.col(i), params);
    };
    run.check("embeddings", params, analytic, loss, {"embed."});
  }

  // Attention stack and FFN: L = <R, E_L>, also back into the embeddings.
  {
    const Tensor r(d, t, gaussian_vector(rng, d * t));
    auto loss = [&] {
      EncoderTape tape(model, seq, mask);
      return dot(tape.layer_matrix(tape.layers() - 1).data(), r.data());
    };
    auto analytic = [&] {
      EncoderTape tape(model, seq, mask);
      tape.compute_all();
      for (std::size_t i = 0; i < t; ++i) tape.add_output_grad(i, r.col(i));
      tape.backward(params);
    };
    run.check("attention", params, analytic, loss, {"block0.wq", "block0.wk", "block0.wv", "block1.wq", "block1.wk", "block1.wv"});
    run.check("ffn", params, analytic, loss, {"block0.w1", "block0.b1", "block0.w2", "block0.b2", "block1.w1", "block1.b1", "block1.w2", "block1.b2"});
    run.check("encoder input", params, analytic, loss, {"embed."});
  }

  // Fusion gates over a short chain of random item embeddings.
  {
    std::vector<std::vector<double>> es;
    for (int i = 0; i < 4; ++i) es.push_back(gaussian_vector(rng, d));
    const auto rs = gaussian_vector(rng, h), rc = gaussian_vector(rng, h);
    auto loss = [&] {
      SequenceState st = SequenceState::zero(h);
      for (const auto& e : es) st = fuse(model, st, e);
      return dot(st.s, rs) + dot(st.cell, rc);
    };
    auto analytic = [&] {
      SequenceState st = SequenceState::zero(h);
      std::vector<FusionTrace> traces(es.size());
      for (std::size_t i = 0; i < es.size(); ++i) st = fuse(model, st, es[i], &traces[i]);
      std::vector<double> ds = rs, dc = rc;
      for (std::size_t i = es.size(); i-- > 0;) {
        FusionGrad g = fuse_backward(model, traces[i], ds, dc, params);
        ds = g.ds_prev;
        dc = g.dcell_prev;
      }
    };
    run.check("fusion", params, analytic, loss, {"fusion."});
  }

  std::vector<std::vector<double>> states;
  for (int i = 0; i < 6; ++i) states.push_back(gaussian_vector(rng, h));

  // Policy: alpha * l2 + beta * l3 on frozen states.
  {
    const std::vector<Action> actions = {Action::kWait, Action::kHalt, Action::kWait,
                                         Action::kWait, Action::kHalt, Action::kHalt};
    const auto adv = gaussian_vector(rng, states.size());
    auto loss = [&] {
      ParameterStore scratch = params;
      const PolicyLoss pl = policy_losses(model, states, actions, adv, 0.0, 0.0, scratch);
      return 0.7 * pl.l2 + 0.3 * pl.l3;
    };
    auto analytic = [&] { policy_losses(model, states, actions, adv, 0.7, 0.3, params); };
    run.check("policy", params, analytic, loss, {"policy."});
  }

  // Classifier cross-entropy.
  {
    auto loss = [&] {
      double l = 0.0;
      for (std::size_t i = 0; i < states.size(); ++i)
        l -= std::log(classify(model, states[i]).distribution[i % 2]);
      return l;
    };
    auto analytic = [&] {
      for (std::size_t i = 0; i < states.size(); ++i)
        classifier_log_prob_backward(model, states[i], classify(model, states[i]), static_cast<int>(i % 2),
                                     -1.0, params);
    };
    run.check("classifier", params, analytic, loss, {"classifier."});
  }

  // Baseline regression.
  {
    const auto targets = gaussian_vector(rng, states.size());
    auto loss = [&] {
      double l = 0.0;
      for (std::size_t i = 0; i < states.size(); ++i) {
        const double e = baseline_value(model, states[i]) - targets[i];
        l += e * e;
      }
      return l;
    };
    auto analytic = [&] {
      for (std::size_t i = 0; i < states.size(); ++i) {
        BaselineTrace tr;
        const double b = baseline_value(model, states[i], &tr);
        baseline_backward(model, tr, 2.0 * (b - targets[i]), model.baseline_params());
      }
    };
    run.check("baseline", model.baseline_params(), analytic, loss, {"baseline."});
  }

  // Full losses through a fixed-horizon rollout (actions do not depend on
  // the parameters, so the loss is smooth in them).
  struct LossCase {
    const char* name;
    LossWeights weights;
  };
  const LossCase cases[] = {
      {"loss l1", {0.0, 0.0, true, false}},
      {"loss l1 every step", {0.0, 0.0, true, true}},
      {"loss l1+l2", {1.0, 0.0, true, false}},
      {"loss l1+l3", {0.0, 1.0, true, false}},
      {"loss total", {0.1, 0.5, true, false}},
  };
  for (const auto& c : cases) {
    RolloutOptions opt;
    opt.rule = HaltRule::kFixed;
    opt.tau = 3;
    opt.record = true;
    auto loss = [&] { return Rollout(model, seq, mask, opt).loss(c.weights).total; };
    auto analytic = [&] {
      Rollout r(model, seq, mask, opt);
      ParameterStore baseline_grads = model.baseline_params();
      r.backward(c.weights, params, baseline_grads);
    };
    run.check(c.name, params, analytic, loss, {""});
  }
  return report;
}

void write_gradcheck_table(std::ostream& out, const GradCheckReport& report) {
  out << std::left << std::setw(20) << "check" << std::setw(26) << "parameter" << std::setw(14)
      << "max_rel_err" << "status\n";
  for (const auto& r : report.rows) {
    out << std::left << std::setw(20) << r.check << std::setw(26) << r.parameter << std::setw(14)
        << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat
        << (r.passed ? "ok" : "FAIL") << '\n';
  }
  out << "max relative error " << std::scientific << std::setprecision(3) << report.max_rel_error()
      << std::defaultfloat << " (tolerance " << report.tolerance << ", step " << report.step << "): "
      << (report.passed() ? "PASS" : "FAIL") << '\n';
}

}  // namespace kvec
