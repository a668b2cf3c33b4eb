#include "kvec/kvrl.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kvec {
namespace {

std::size_t clamp_row(std::int64_t one_based, std::size_t rows) {
  if (one_based < 1) return 0;
  return std::min(static_cast<std::size_t>(one_based), rows) - 1;
}

std::size_t category_row(double code, int cardinality) {
  const auto c = static_cast<std::int64_t>(code);
  return static_cast<std::size_t>(std::clamp<std::int64_t>(c, 0, cardinality - 1));
}

double standardize(const FieldSpec& f, double v) { return (v - f.mean) / f.stddev; }

}  // namespace

ItemFeatures features_of(const TangledSequence& seq, std::size_t pos, std::size_t slot_count) {
  const Item& item = seq[pos];
  return ItemFeatures{item.value, item.key_id % slot_count, item.seq_index, item.arrival_index};
}

void embed_item(const KvecModel& model, const ItemFeatures& item, std::span<double> out) {
  const auto& cfg = model.config();
  const auto& params = model.params();
  const auto& tables = model.embedding();
  std::fill(out.begin(), out.end(), 0.0);

  for (std::size_t d = 0; d < cfg.schema.fields.size(); ++d) {
    const auto& field = cfg.schema.fields[d];
    const auto& ve = tables.value[d];
    if (field.kind == FieldKind::kCategorical) {
      axpy(1.0, params.value(ve.table).row(category_row(item.value[d], field.cardinality)), out);
    } else {
      axpy(standardize(field, item.value[d]), params.value(ve.table).row(0), out);
      axpy(1.0, params.value(*ve.bias).row(0), out);
    }
  }
  if (cfg.membership_embedding) {
    axpy(1.0, params.value(tables.membership).row(item.slot % cfg.slot_count), out);
  }
  if (cfg.time_embedding) {
    axpy(1.0, params.value(tables.position).row(clamp_row(item.seq_index, cfg.max_seq_pos)), out);
    axpy(1.0, params.value(tables.time).row(clamp_row(item.arrival_index, cfg.mask.window)), out);
  }
}

void embed_item_backward(const KvecModel& model, const ItemFeatures& item,
                         std::span<const double> grad, ParameterStore& grads) {
  const auto& cfg = model.config();
  const auto& tables = model.embedding();
  for (std::size_t d = 0; d < cfg.schema.fields.size(); ++d) {
    const auto& field = cfg.schema.fields[d];
    const auto& ve = tables.value[d];
    if (field.kind == FieldKind::kCategorical) {
      axpy(1.0, grad, grads.grad(ve.table).row(category_row(item.value[d], field.cardinality)));
    } else {
      axpy(standardize(field, item.value[d]), grad, grads.grad(ve.table).row(0));
      axpy(1.0, grad, grads.grad(*ve.bias).row(0));
    }
  }
  if (cfg.membership_embedding) {
    axpy(1.0, grad, grads.grad(tables.membership).row(item.slot % cfg.slot_count));
  }
  if (cfg.time_embedding) {
    axpy(1.0, grad, grads.grad(tables.position).row(clamp_row(item.seq_index, cfg.max_seq_pos)));
    axpy(1.0, grad, grads.grad(tables.time).row(clamp_row(item.arrival_index, cfg.mask.window)));
  }
}

Tensor input_embedding(const KvecModel& model, const TangledSequence& seq, std::size_t t) {
  if (t == 0 || t > seq.size()) throw std::out_of_range("input_embedding: invalid prefix length");
  const std::size_t d = model.config().embed_dim;
  Tensor e0(d, t);
  std::vector<double> col(d);
  for (std::size_t i = 0; i < t; ++i) {
    embed_item(model, features_of(seq, i, model.config().slot_count), col);
    e0.set_col(i, col);
  }
  return e0;
}

void project_kv(const KvecModel& model, const AttentionBlock& block, std::span<const double> x,
                std::span<double> key, std::span<double> value) {
  matvec(model.params().value(block.wk), x, key);
  matvec(model.params().value(block.wv), x, value);
}

void attend_row(const KvecModel& model, const AttentionBlock& block, std::span<const double> x,
                std::span<const std::span<const double>> keys,
                std::span<const std::span<const double>> values, AttentionRecord& rec,
                Rng* dropout_rng) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  const std::size_t d = cfg.embed_dim;
  const std::size_t n = keys.size();
  if (n == 0) throw std::invalid_argument("attend_row: empty visible set");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  rec.query.resize(d);
  matvec(p.value(block.wq), x, rec.query);

  rec.weights.resize(n);
  for (std::size_t j = 0; j < n; ++j) rec.weights[j] = dot(rec.query, keys[j]) * scale;
  softmax_inplace(rec.weights);

  rec.mixed.assign(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) axpy(rec.weights[j], values[j], rec.mixed);

  rec.pre_activation.resize(cfg.ffn_dim);
  affine_into(p.value(block.w1), p.value(block.b1).data(), rec.mixed, rec.pre_activation);
  rec.hidden.resize(cfg.ffn_dim);
  for (std::size_t k = 0; k < cfg.ffn_dim; ++k) rec.hidden[k] = std::max(rec.pre_activation[k], 0.0);
  rec.output.resize(d);
  affine_into(p.value(block.w2), p.value(block.b2).data(), rec.hidden, rec.output);

  rec.dropout_scale.clear();
  if (dropout_rng != nullptr && cfg.dropout > 0.0) {
    rec.dropout_scale.resize(d);
    const double keep = 1.0 / (1.0 - cfg.dropout);
    for (std::size_t k = 0; k < d; ++k) {
      rec.dropout_scale[k] = uniform01(*dropout_rng) < cfg.dropout ? 0.0 : keep;
      rec.output[k] *= rec.dropout_scale[k];
    }
  }
  if (cfg.residual) axpy(1.0, x, rec.output);
}

std::uint64_t attend_row_cost(const ModelConfig& c, std::size_t visible) {
  const std::uint64_t d = c.embed_dim;
  return d * d + 2 * visible * d + 2 * d * c.ffn_dim;
}

std::uint64_t project_kv_cost(const ModelConfig& c) { return 2 * c.embed_dim * c.embed_dim; }

EncoderTape::EncoderTape(const KvecModel& model, const TangledSequence& seq, const DynamicMask& mask,
                         Rng* dropout_rng)
    : model_(&model), seq_(&seq), mask_(&mask), dropout_rng_(dropout_rng),
      blocks_(model.config().blocks) {
  if (mask.size() > seq.size()) throw std::invalid_argument("mask is longer than the sequence");
  init();
}

EncoderTape::EncoderTape(const KvecModel& model, Tensor e0, const DynamicMask& mask, Rng* dropout_rng)
    : model_(&model), mask_(&mask), e0_override_(std::move(e0)), dropout_rng_(dropout_rng),
      blocks_(model.config().blocks) {
  if (e0_override_->rows() != model.config().embed_dim)
    throw std::invalid_argument("E_0 rows must equal the embedding width");
  if (e0_override_->cols() != mask.size())
    throw std::invalid_argument("mask dimension " + std::to_string(mask.size()) +
                                " does not match E_0 columns " + std::to_string(e0_override_->cols()));
  init();
}

void EncoderTape::init() {
  const std::size_t t = mask_->size();
  embed_.assign(t, {});
  embed_grad_.assign(t, {});
  proj_.resize(blocks_);
  rows_.resize(blocks_);
  for (std::size_t b = 0; b < blocks_; ++b) {
    proj_[b].resize(t);
    rows_[b].resize(t);
  }
}

std::span<const double> EncoderTape::embed(std::size_t pos) {
  auto& col = embed_.at(pos);
  if (!col.empty()) return col;
  const std::size_t d = model_->config().embed_dim;
  if (e0_override_) {
    col = e0_override_->col(pos);
  } else {
    col.resize(d);
    embed_item(*model_, features_of(*seq_, pos, model_->config().slot_count), col);
  }
  order_.push_back({NodeKind::kEmbed, 0, pos});
  return col;
}

const EncoderTape::Projection& EncoderTape::projection(std::size_t block, std::size_t pos) {
  auto& slot = proj_[block][pos];
  if (slot) return *slot;
  const auto x = column(block, pos);
  auto p = std::make_unique<Projection>();
  const std::size_t d = model_->config().embed_dim;
  p->key.resize(d);
  p->value.resize(d);
  project_kv(*model_, model_->blocks()[block], x, p->key, p->value);
  madds_ += project_kv_cost(model_->config());
  slot = std::move(p);
  order_.push_back({NodeKind::kProject, static_cast<std::uint32_t>(block), pos});
  return *slot;
}

std::span<const double> EncoderTape::column(std::size_t layer, std::size_t pos) {
  if (pos >= size()) throw std::out_of_range("encoder column beyond mask length");
  if (layer == 0) return embed(pos);
  const std::size_t b = layer - 1;
  if (rows_[b][pos]) return rows_[b][pos]->rec.output;

  const auto x = column(b, pos);
  const auto vis = mask_->row(pos);
  std::vector<std::span<const double>> keys, values;
  keys.reserve(vis.size());
  values.reserve(vis.size());
  for (std::size_t j : vis) {
    const auto& p = projection(b, j);
    keys.emplace_back(p.key);
    values.emplace_back(p.value);
  }
  auto row = std::make_unique<Row>();
  attend_row(*model_, model_->blocks()[b], x, keys, values, row->rec, dropout_rng_);
  madds_ += attend_row_cost(model_->config(), vis.size());
  rows_[b][pos] = std::move(row);
  order_.push_back({NodeKind::kRow, static_cast<std::uint32_t>(b), pos});
  return rows_[b][pos]->rec.output;
}

void EncoderTape::compute_all() {
  for (std::size_t i = 0; i < size(); ++i) output(i);
}

Tensor EncoderTape::layer_matrix(std::size_t layer) {
  Tensor m(model_->config().embed_dim, size());
  for (std::size_t i = 0; i < size(); ++i) m.set_col(i, column(layer, i));
  return m;
}

bool EncoderTape::has_record(std::size_t block, std::size_t pos) const {
  return rows_.at(block).at(pos) != nullptr;
}

const AttentionRecord& EncoderTape::record(std::size_t block, std::size_t pos) const {
  const auto& row = rows_.at(block).at(pos);
  if (!row) throw std::logic_error("attention row not computed");
  return row->rec;
}

std::vector<double>& EncoderTape::grad_slot(std::size_t layer, std::size_t pos) {
  auto& g = layer == 0 ? embed_grad_[pos] : rows_[layer - 1][pos]->grad;
  if (g.empty()) g.assign(model_->config().embed_dim, 0.0);
  return g;
}

void EncoderTape::add_output_grad(std::size_t pos, std::span<const double> grad) {
  output(pos);
  axpy(1.0, grad, grad_slot(blocks_, pos));
}

void EncoderTape::backward(ParameterStore& grads) {
  const auto& cfg = model_->config();
  const std::size_t d = cfg.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dy(d), dhidden(cfg.ffn_dim), dmixed(d), dq(d);
  std::vector<double> dweights, dlogits;

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const Node node = *it;
    switch (node.kind) {
      case NodeKind::kRow: {
        Row& row = *rows_[node.block][node.pos];
        if (row.grad.empty()) break;
        const auto& blk = model_->blocks()[node.block];
        const auto& rec = row.rec;
        const auto x = column(node.block, node.pos);
        const auto vis = mask_->row(node.pos);

        if (cfg.residual) axpy(1.0, row.grad, grad_slot(node.block, node.pos));
        for (std::size_t k = 0; k < d; ++k)
          dy[k] = rec.dropout_scale.empty() ? row.grad[k] : row.grad[k] * rec.dropout_scale[k];

        outer_accumulate(grads.grad(blk.w2), dy, rec.hidden);
        axpy(1.0, dy, grads.grad(blk.b2).data());
        std::fill(dhidden.begin(), dhidden.end(), 0.0);
        matvec_t_accumulate(model_->params().value(blk.w2), dy, dhidden);
        for (std::size_t k = 0; k < cfg.ffn_dim; ++k)
          if (rec.pre_activation[k] <= 0.0) dhidden[k] = 0.0;
        outer_accumulate(grads.grad(blk.w1), dhidden, rec.mixed);
        axpy(1.0, dhidden, grads.grad(blk.b1).data());
        std::fill(dmixed.begin(), dmixed.end(), 0.0);
        matvec_t_accumulate(model_->params().value(blk.w1), dhidden, dmixed);

        dweights.resize(vis.size());
        dlogits.resize(vis.size());
        for (std::size_t j = 0; j < vis.size(); ++j) {
          auto& p = *proj_[node.block][vis[j]];
          dweights[j] = dot(dmixed, p.value);
          if (p.dvalue.empty()) p.dvalue.assign(d, 0.0);
          axpy(rec.weights[j], dmixed, p.dvalue);
        }
        softmax_backward(rec.weights, dweights, dlogits);
        std::fill(dq.begin(), dq.end(), 0.0);
        for (std::size_t j = 0; j < vis.size(); ++j) {
          auto& p = *proj_[node.block][vis[j]];
          const double g = dlogits[j] * scale;
          axpy(g, p.key, dq);
          if (p.dkey.empty()) p.dkey.assign(d, 0.0);
          axpy(g, rec.query, p.dkey);
        }
        outer_accumulate(grads.grad(blk.wq), dq, x);
        matvec_t_accumulate(model_->params().value(blk.wq), dq, grad_slot(node.block, node.pos));
        break;
      }
      case NodeKind::kProject: {
        Projection& p = *proj_[node.block][node.pos];
        if (p.dkey.empty() && p.dvalue.empty()) break;
        const auto& blk = model_->blocks()[node.block];
        const auto x = column(node.block, node.pos);
        auto& dx = grad_slot(node.block, node.pos);
        if (!p.dkey.empty()) {
          outer_accumulate(grads.grad(blk.wk), p.dkey, x);
          matvec_t_accumulate(model_->params().value(blk.wk), p.dkey, dx);
        }
        if (!p.dvalue.empty()) {
          outer_accumulate(grads.grad(blk.wv), p.dvalue, x);
          matvec_t_accumulate(model_->params().value(blk.wv), p.dvalue, dx);
        }
        break;
      }
      case NodeKind::kEmbed: {
        if (e0_override_ || embed_grad_[node.pos].empty()) break;
        embed_item_backward(*model_, features_of(*seq_, node.pos, cfg.slot_count),
                            embed_grad_[node.pos], grads);
        break;
      }
    }
  }
}

std::vector<double> EncoderTape::input_grad(std::size_t pos) const {
  if (embed_grad_.at(pos).empty()) return std::vector<double>(model_->config().embed_dim, 0.0);
  return embed_grad_[pos];
}

Tensor attention_stack(const KvecModel& model, const Tensor& e0, const DynamicMask& mask) {
  EncoderTape tape(model, e0, mask);
  return tape.layer_matrix(tape.layers() - 1);
}

SequenceState SequenceState::zero(std::size_t hidden) {
  return SequenceState{std::vector<double>(hidden, 0.0), std::vector<double>(hidden, 0.0), 0, false};
}

SequenceState fuse(const KvecModel& model, const SequenceState& state, std::span<const double> e,
                   FusionTrace* trace) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  const auto& cell = model.fusion();
  const std::size_t h = cfg.hidden;
  if (state.halted) throw std::invalid_argument("fuse: sequence already halted");
  if (e.size() != cfg.embed_dim)
    throw std::invalid_argument("fuse: item embedding width " + std::to_string(e.size()) +
                                " != " + std::to_string(cfg.embed_dim));
  if (state.s.size() != h || state.cell.size() != h)
    throw std::invalid_argument("fuse: state width mismatch");

  FusionTrace local;
  FusionTrace& t = trace ? *trace : local;
  t.input.resize(h + cfg.embed_dim);
  std::copy(state.s.begin(), state.s.end(), t.input.begin());
  std::copy(e.begin(), e.end(), t.input.begin() + static_cast<std::ptrdiff_t>(h));

  t.forget.resize(h);
  t.in.resize(h);
  t.out.resize(h);
  t.candidate.resize(h);
  affine_into(p.value(cell.wf), p.value(cell.bf).data(), t.input, t.forget);
  affine_into(p.value(cell.wi), p.value(cell.bi).data(), t.input, t.in);
  affine_into(p.value(cell.wo), p.value(cell.bo).data(), t.input, t.out);
  affine_into(p.value(cell.wc), p.value(cell.bc).data(), t.input, t.candidate);

  SequenceState next;
  next.s.resize(h);
  next.cell.resize(h);
  t.cell_prev = state.cell;
  t.cell_tanh.resize(h);
  for (std::size_t k = 0; k < h; ++k) {
    t.forget[k] = sigmoid(t.forget[k]);
    t.in[k] = sigmoid(t.in[k]);
    t.out[k] = sigmoid(t.out[k]);
    t.candidate[k] = std::tanh(t.candidate[k]);
    next.cell[k] = t.forget[k] * state.cell[k] + t.in[k] * t.candidate[k];
    t.cell_tanh[k] = std::tanh(next.cell[k]);
    next.s[k] = t.out[k] * t.cell_tanh[k];
  }
  t.cell = next.cell;
  next.n = state.n + 1;
  return next;
}

FusionGrad fuse_backward(const KvecModel& model, const FusionTrace& t, std::span<const double> ds,
                         std::span<const double> dcell, ParameterStore& grads) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  const auto& cell = model.fusion();
  const std::size_t h = cfg.hidden;

  std::vector<double> dzf(h), dzi(h), dzo(h), dzc(h);
  FusionGrad g;
  g.dcell_prev.resize(h);
  for (std::size_t k = 0; k < h; ++k) {
    const double dout = ds[k] * t.cell_tanh[k];
    const double dc = dcell[k] + ds[k] * t.out[k] * (1.0 - t.cell_tanh[k] * t.cell_tanh[k]);
    dzf[k] = dc * t.cell_prev[k] * t.forget[k] * (1.0 - t.forget[k]);
    dzi[k] = dc * t.candidate[k] * t.in[k] * (1.0 - t.in[k]);
    dzc[k] = dc * t.in[k] * (1.0 - t.candidate[k] * t.candidate[k]);
    dzo[k] = dout * t.out[k] * (1.0 - t.out[k]);
    g.dcell_prev[k] = dc * t.forget[k];
  }

  std::vector<double> dinput(t.input.size(), 0.0);
  const std::pair<ParamId, ParamId> gates[] = {{cell.wf, cell.bf}, {cell.wi, cell.bi},
                                               {cell.wo, cell.bo}, {cell.wc, cell.bc}};
  const std::vector<double>* dz[] = {&dzf, &dzi, &dzo, &dzc};
  for (int k = 0; k < 4; ++k) {
    outer_accumulate(grads.grad(gates[k].first), *dz[k], t.input);
    axpy(1.0, *dz[k], grads.grad(gates[k].second).data());
    matvec_t_accumulate(p.value(gates[k].first), *dz[k], dinput);
  }
  g.ds_prev.assign(dinput.begin(), dinput.begin() + static_cast<std::ptrdiff_t>(h));
  g.de.assign(dinput.begin() + static_cast<std::ptrdiff_t>(h), dinput.end());
  return g;
}

}  // namespace kvec
