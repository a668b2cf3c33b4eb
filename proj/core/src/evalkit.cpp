#include "kvec/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "kvec/error.hpp"

namespace kvec {

double harmonic_mean(double accuracy, double earliness) {
  const double denom = (1.0 - earliness) + accuracy;
  if (denom == 0.0) return 0.0;
  return 2.0 * (1.0 - earliness) * accuracy / denom;
}

EvalResult metrics(std::span<const KeyOutcome> outcomes, std::size_t classes) {
  if (outcomes.empty()) throw ValidationError("metrics of an empty result set");
  EvalResult r;
  r.outcomes.assign(outcomes.begin(), outcomes.end());
  const double k = static_cast<double>(outcomes.size());
  std::vector<double> tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0);
  double early = 0.0, correct = 0.0;
  for (const auto& o : outcomes) {
    early += static_cast<double>(o.halt_step) / static_cast<double>(o.length);
    const auto p = static_cast<std::size_t>(o.predicted);
    const auto t = static_cast<std::size_t>(o.truth);
    if (p >= classes || t >= classes) throw ValidationError("outcome label outside the class range");
    if (p == t) {
      correct += 1.0;
      tp[t] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[t] += 1.0;
    }
  }
  r.earliness = early / k;
  r.accuracy = correct / k;
  for (std::size_t c = 0; c < classes; ++c) {
    const double prec = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    const double rec = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    r.precision += prec;
    r.recall += rec;
    r.f1 += prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  const auto c = static_cast<double>(classes);
  r.precision /= c;
  r.recall /= c;
  r.f1 /= c;
  r.hm = harmonic_mean(r.accuracy, r.earliness);
  return r;
}

std::vector<KeyOutcome> outcomes_of(const Rollout& rollout) {
  std::vector<KeyOutcome> out;
  for (const auto& ep : rollout.episodes()) {
    out.push_back({rollout.sequence().key_name(ep.key), ep.halt_step(), ep.length, ep.predicted(),
                   ep.truth, static_cast<std::int64_t>(ep.halt_position()) + 1});
  }
  return out;
}

EvalResult evaluate(const KvecModel& model, std::span<const TangledSequence> data, HaltRule rule,
                    std::size_t tau, double mu) {
  if (rule == HaltRule::kPolicySample) throw UsageError("evaluation uses a deterministic halting rule");
  std::vector<KeyOutcome> all;
  for (const auto& seq : data) {
    const DynamicMask mask = DynamicMask::build(seq, model.config().mask);
    RolloutOptions opt;
    opt.rule = rule;
    opt.tau = tau;
    opt.mu = mu;
    const Rollout r(model, seq, mask, opt);
    auto o = outcomes_of(r);
    all.insert(all.end(), o.begin(), o.end());
  }
  return metrics(all, model.config().classes);
}

KvecModel srn_view(const KvecModel& model) {
  KvecModel copy = model;
  MaskOptions mask = model.config().mask;
  mask.key_correlation = true;
  mask.value_correlation = false;
  copy.set_mask_options(mask);
  return copy;
}

EvalResult halting_baseline(const KvecModel& model, std::span<const TangledSequence> data,
                            BaselineKind kind, double threshold) {
  const KvecModel srn = srn_view(model);
  if (kind == BaselineKind::kFixed) {
    if (!(threshold >= 1.0)) throw ValidationError("halting time threshold must be >= 1");
    const double capped = std::min(threshold, 1e15);
    return evaluate(srn, data, HaltRule::kFixed, static_cast<std::size_t>(capped));
  }
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw ValidationError("halting confidence threshold must lie in [0, 1]");
  return evaluate(srn, data, HaltRule::kConfidence, 1, threshold);
}

std::vector<CurvePoint> sweep(const std::string& parameter, std::span<const double> grid,
                              std::span<const std::uint64_t> seeds, const PointRunner& run) {
  if (grid.empty()) throw UsageError("sweep grid is empty");
  if (seeds.empty()) throw UsageError("sweep needs at least one seed");
  std::vector<CurvePoint> points;
  for (double v : grid) {
    for (auto seed : seeds) {
      CurvePoint p;
      p.parameter = parameter;
      p.value = v;
      p.seed = seed;
      try {
        const EvalResult r = run(v, seed);
        p.earliness = r.earliness;
        p.accuracy = r.accuracy;
        p.hm = r.hm;
      } catch (const std::exception& e) {
        p.failed = true;
        p.error = e.what();
      }
      points.push_back(std::move(p));
    }
  }
  std::stable_sort(points.begin(), points.end(), [](const CurvePoint& a, const CurvePoint& b) {
    if (a.failed != b.failed) return !a.failed;
    return a.earliness < b.earliness;
  });
  return points;
}

AttentionSplit attention_split(const KvecModel& model, std::span<const TangledSequence> data,
                               std::size_t bins) {
  if (bins == 0) throw UsageError("attention split needs at least one bin");
  AttentionSplit out;
  for (std::size_t b = 0; b < bins; ++b)
    out.bins.push_back({static_cast<double>(b) / static_cast<double>(bins),
                        static_cast<double>(b + 1) / static_cast<double>(bins), 0, 0.0, 0.0});
  for (const auto& seq : data) {
    const DynamicMask mask = DynamicMask::build(seq, model.config().mask);
    RolloutOptions opt;
    opt.rule = HaltRule::kPolicyThreshold;
    Rollout r(model, seq, mask, opt);
    EncoderTape& tape = r.tape();
    for (const auto& ep : r.episodes()) {
      for (std::size_t i = 0; i < ep.positions.size(); ++i) {
        const std::size_t pos = ep.positions[i];
        const double frac = static_cast<double>(i + 1) / static_cast<double>(ep.length);
        const auto bin = std::min(bins - 1, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(bins))) - 1);
        const auto vis = tape.visible(pos);
        for (std::size_t blk = 0; blk < model.config().blocks; ++blk) {
          const auto& w = tape.record(blk, pos).weights;
          double internal = 0.0, external = 0.0;
          for (std::size_t n = 0; n < vis.size(); ++n)
            (seq[vis[n]].key_id == ep.key ? internal : external) += w[n];
          out.max_sum_error = std::max(out.max_sum_error, std::abs(internal + external - 1.0));
          auto& b = out.bins[bin];
          ++b.rows;
          b.internal += internal;
          b.external += external;
          ++out.rows;
          out.internal += internal;
          out.external += external;
        }
      }
    }
  }
  for (auto& b : out.bins) {
    if (b.rows == 0) continue;
    b.internal /= static_cast<double>(b.rows);
    b.external /= static_cast<double>(b.rows);
  }
  if (out.rows > 0) {
    out.internal /= static_cast<double>(out.rows);
    out.external /= static_cast<double>(out.rows);
  }
  return out;
}

HaltingHistogram halting_histogram(std::span<const KeyOutcome> outcomes, std::size_t bins) {
  if (bins == 0) throw UsageError("histogram needs at least one bin");
  HaltingHistogram h;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(static_cast<double>(b) / static_cast<double>(bins));
  h.counts.assign(bins, 0);
  h.mass.assign(bins, 0.0);
  if (outcomes.empty()) return h;
  std::vector<double> fracs;
  for (const auto& o : outcomes) {
    const double f = static_cast<double>(o.halt_step) / static_cast<double>(o.length);
    fracs.push_back(f);
    const auto raw = static_cast<std::size_t>(std::ceil(f * static_cast<double>(bins)));
    ++h.counts[std::clamp<std::size_t>(raw, 1, bins) - 1];
  }
  for (std::size_t b = 0; b < bins; ++b)
    h.mass[b] = static_cast<double>(h.counts[b]) / static_cast<double>(outcomes.size());
  std::sort(fracs.begin(), fracs.end());
  const std::size_t n = fracs.size();
  h.median = n % 2 ? fracs[n / 2] : 0.5 * (fracs[n / 2 - 1] + fracs[n / 2]);
  return h;
}

void write_metrics_csv(std::ostream& out, std::span<const std::pair<std::string, EvalResult>> rows) {
  out << "config,keys,earliness,accuracy,precision,recall,f1,hm,median_halt\n";
  out.precision(10);
  for (const auto& [name, r] : rows) {
    const HaltingHistogram h = halting_histogram(r.outcomes, 10);
    out << name << ',' << r.outcomes.size() << ',' << r.earliness << ',' << r.accuracy << ','
        << r.precision << ',' << r.recall << ',' << r.f1 << ',' << r.hm << ',' << h.median << '\n';
  }
}

void write_curve_csv(std::ostream& out, std::span<const CurvePoint> points) {
  out << "parameter,value,seed,earliness,accuracy,hm,failed,error\n";
  out.precision(10);
  for (const auto& p : points) {
    std::string error = p.error;
    std::replace(error.begin(), error.end(), '"', '\'');
    out << p.parameter << ',' << p.value << ',' << p.seed << ',' << p.earliness << ',' << p.accuracy
        << ',' << p.hm << ',' << (p.failed ? 1 : 0) << ",\"" << error << "\"\n";
  }
}

void write_attention_csv(std::ostream& out, const AttentionSplit& split) {
  out << "bin_lo,bin_hi,rows,internal,external\n";
  out.precision(10);
  for (const auto& b : split.bins)
    out << b.lo << ',' << b.hi << ',' << b.rows << ',' << b.internal << ',' << b.external << '\n';
}

void write_histogram_csv(std::ostream& out, const HaltingHistogram& hist) {
  out << "bin_lo,bin_hi,count,mass\n";
  out.precision(10);
  for (std::size_t b = 0; b < hist.counts.size(); ++b)
    out << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.counts[b] << ',' << hist.mass[b] << '\n';
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::span<const TangledSequence> train,
                                std::span<const TangledSequence> validation,
                                std::span<const TangledSequence> test, std::uint64_t seed) {
  ModelConfig mc = apply_ablation(config.model, config.ablation);
  KvecModel model(mc, derive_seed(seed, 100));
  TrainConfig tc = config.train;
  tc.seed = seed;
  auto history = kvec::train(model, train, tc);
  EvalResult val = validation.empty() ? EvalResult{} : evaluate(model, validation);
  EvalResult tst = test.empty() ? EvalResult{} : evaluate(model, test);
  return ExperimentResult{std::move(model), std::move(history), std::move(val), std::move(tst)};
}

}  // namespace kvec
