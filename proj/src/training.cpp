#include "emcomm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace emcomm {

void TrainingConfig::validate() const {
  auto req = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("TrainingConfig: ") + what);
  };
  req(epochs > 0, "epochs must be positive");
  req(batch_size > 0, "batch_size must be positive");
  req(sender_lr > 0 && receiver_lr > 0 && oracle_lr > 0, "learning rates must be positive");
  req(population_size > 0, "population_size must be positive");
  req(reset_interval > 0, "reset_interval must be positive");
  req(epochs % reset_interval == 0, "reset_interval must divide epochs");
  req(temperature_start > 0 && temperature_end > 0, "temperatures must be positive");
  req(entropy_coeff >= 0 && entropy_floor_fraction >= 0, "entropy settings must be non-negative");
  req(grad_clip > 0, "grad_clip must be positive");
  req(pairs_per_train_scene > 0, "pairs_per_train_scene must be positive");
  req(lazimpa_lambda >= 0, "lazimpa_lambda must be non-negative");
}

double temperature_at(const TrainingConfig& cfg, std::size_t epoch) {
  if (cfg.epochs <= 1) return cfg.temperature_end;
  const double f = static_cast<double>(std::min(epoch, cfg.epochs - 1)) / static_cast<double>(cfg.epochs - 1);
  return cfg.temperature_start + f * (cfg.temperature_end - cfg.temperature_start);
}

bool is_reset_epoch(const TrainingConfig& cfg, std::size_t epoch) {
  return cfg.iterated_learning && epoch > 0 && epoch < cfg.epochs && epoch % cfg.reset_interval == 0;
}

std::size_t resets_completed(const TrainingConfig& cfg, std::size_t epochs_done) {
  if (!cfg.iterated_learning || epochs_done == 0) return 0;
  // Resets fire at the start of epochs interval, 2*interval, ... (< epochs).
  const std::size_t last = std::min(epochs_done - 1, cfg.epochs - 1);
  return last / cfg.reset_interval;
}

PairBatch make_batch(std::span<const ComparisonPair> pairs) {
  PairBatch b;
  b.labels = pairs.empty() ? 0 : pairs[0].labels.size();
  for (const auto& p : pairs) {
    if (p.labels.size() != b.labels) throw std::invalid_argument("make_batch: ragged labels");
    b.a.push_back(p.a);
    b.b.push_back(p.b);
    for (Order o : p.labels) b.targets.push_back(o == Order::kAHigher ? 1.0 : 0.0);
  }
  return b;
}

Accuracy score_logits(const Tensor& logits, const PairBatch& batch) {
  const std::size_t n = batch.size(), L = batch.labels;
  if (logits.size() != n * L) throw std::invalid_argument("score_logits: shape mismatch");
  Accuracy acc;
  acc.per_property.assign(L, 0.0);
  acc.pairs = n;
  if (n == 0) return acc;
  std::size_t both = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool all = true;
    for (std::size_t j = 0; j < L; ++j) {
      const bool right = (logits[i * L + j] > 0.0) == (batch.targets[i * L + j] > 0.5);
      acc.per_property[j] += right ? 1.0 : 0.0;
      all = all && right;
    }
    both += all ? 1 : 0;
  }
  for (double& a : acc.per_property) a /= static_cast<double>(n);
  acc.both = static_cast<double>(both) / static_cast<double>(n);
  return acc;
}

Accuracy mean_accuracy(const std::vector<Accuracy>& parts) {
  Accuracy out;
  if (parts.empty()) return out;
  out.per_property.assign(parts[0].per_property.size(), 0.0);
  out.pairs = parts[0].pairs;
  for (const auto& a : parts) {
    for (std::size_t j = 0; j < out.per_property.size(); ++j) out.per_property[j] += a.per_property.at(j);
    out.both += a.both;
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (double& v : out.per_property) v *= inv;
  out.both *= inv;
  return out;
}

namespace {

// Distinct scene ids of a batch plus each side's row into that list.
struct UniqueRows {
  std::vector<std::size_t> ids, ra, rb;
};

UniqueRows unique_rows(const PairBatch& b) {
  UniqueRows u;
  u.ids = b.a;
  u.ids.insert(u.ids.end(), b.b.begin(), b.b.end());
  std::sort(u.ids.begin(), u.ids.end());
  u.ids.erase(std::unique(u.ids.begin(), u.ids.end()), u.ids.end());
  auto row = [&](std::size_t id) {
    return static_cast<std::size_t>(std::lower_bound(u.ids.begin(), u.ids.end(), id) - u.ids.begin());
  };
  for (std::size_t id : b.a) u.ra.push_back(row(id));
  for (std::size_t id : b.b) u.rb.push_back(row(id));
  return u;
}

std::vector<Tensor> gather_all(const std::vector<Tensor>& xs, std::span<const std::size_t> rows) {
  std::vector<Tensor> out;
  for (const Tensor& x : xs) out.push_back(gather_rows(x, rows));
  return out;
}

ParamRefs concat_params(std::initializer_list<ParamRefs> groups) {
  ParamRefs out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

void scale_grads(const ParamRefs& params, double s) {
  for (Parameter* p : params)
    if (p->trainable && p->tensor.has_grad())
      for (double& g : p->tensor.mutable_grad()) g *= s;
}

std::size_t steps_for(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

std::vector<ComparisonPair> epoch_pairs(const TrainingConfig& cfg, const TaskContext& ctx, Rng& rng) {
  return make_comparison_pairs(*ctx.data, ctx.split.train_ids, ctx.properties,
                               cfg.pairs_per_train_scene * ctx.split.train_ids.size(), rng);
}

Accuracy accumulate(const std::vector<Accuracy>& steps) {
  // Pair-weighted average over the steps of an epoch.
  Accuracy out;
  if (steps.empty()) return out;
  out.per_property.assign(steps[0].per_property.size(), 0.0);
  for (const auto& s : steps) {
    for (std::size_t j = 0; j < out.per_property.size(); ++j)
      out.per_property[j] += s.per_property[j] * static_cast<double>(s.pairs);
    out.both += s.both * static_cast<double>(s.pairs);
    out.pairs += s.pairs;
  }
  for (double& v : out.per_property) v /= static_cast<double>(out.pairs);
  out.both /= static_cast<double>(out.pairs);
  return out;
}

double entropy_of_counts(std::span<const double> counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  double h = 0.0;
  for (double c : counts)
    if (c > 0) h -= (c / total) * std::log(c / total);
  return h;
}

}  // namespace

// ---- oracle ------------------------------------------------------------------------

OracleResult pretrain_oracle(const TrainingConfig& cfg, const TaskContext& ctx, std::size_t hidden, Rng& rng) {
  cfg.validate();
  const std::uint64_t base = rng();
  Rng init = derive_rng(base, "oracle-init");
  Rng pair_rng = derive_rng(base, "oracle-pairs");
  OracleResult res{Oracle(ctx.bank->width, hidden, ctx.properties.size(), init), {}, {}, {}};
  std::vector<std::size_t> frames(ctx.bank->frames);
  std::iota(frames.begin(), frames.end(), 0);
  auto params = res.oracle.parameters();
  auto opt = OptimizerState::for_params(params, cfg.oracle_lr);

  for (std::size_t e = 0; e < cfg.oracle_epochs; ++e) {
    auto pairs = epoch_pairs(cfg, ctx, pair_rng);
    double loss_sum = 0.0;
    std::vector<Accuracy> accs;
    for (std::size_t s = 0; s < steps_for(pairs.size(), cfg.batch_size); ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(pairs.size(), lo + cfg.batch_size);
      PairBatch batch = make_batch(std::span(pairs).subspan(lo, hi - lo));
      Tensor logits;
      Tensor loss;
      try {
        logits = res.oracle.forward(*ctx.bank, batch.a, batch.b, frames);
        loss = bce_with_logits(logits, batch.targets);
        forward_backward(loss, params);
      } catch (const NonFiniteError& err) {
        throw std::runtime_error("oracle diverged at epoch " + std::to_string(e) + " in op '" + err.op() + "'");
      }
      clip_gradients(params, cfg.grad_clip);
      optimizer_step(opt, params);
      loss_sum += loss.item();
      accs.push_back(score_logits(logits, batch));
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(steps_for(pairs.size(), cfg.batch_size)));
    res.train = accumulate(accs);
  }

  auto test_pairs = all_comparison_pairs(*ctx.data, ctx.split.test_ids, ctx.properties);
  PairBatch tb = make_batch(test_pairs);
  res.holdout = score_logits(res.oracle.forward(*ctx.bank, tb.a, tb.b, frames), tb);
  return res;
}

// ---- entropy regularizer ---------------------------------------------------------

EntropyTerm entropy_regularizer(const std::vector<Tensor>& logits, std::size_t positions, std::size_t vocab,
                                double coeff, double floor_fraction) {
  EntropyTerm term;
  const double floor = floor_fraction * std::log(static_cast<double>(vocab));
  std::vector<Tensor> gated;
  for (const Tensor& l : logits) {
    const std::size_t B = l.dim(0);
    for (std::size_t k = 0; k < positions; ++k) {
      std::vector<double> counts(vocab, 0.0);
      for (std::size_t i = 0; i < B; ++i) {
        const double* row = l.values().data() + i * positions * vocab + k * vocab;
        counts[static_cast<std::size_t>(std::max_element(row, row + vocab) - row)] += 1.0;
      }
      const double h = entropy_of_counts(counts);
      term.hard_entropy.push_back(h);
      const bool on = h < floor;
      term.active.push_back(on);
      if (on) gated.push_back(row_entropy(mean_rows(softmax_rows(slice_cols(l, k * vocab, (k + 1) * vocab)))));
    }
  }
  if (gated.empty() || coeff == 0.0) {
    term.loss = Tensor::scalar(0.0);
    return term;
  }
  Tensor h = gated[0];
  for (std::size_t i = 1; i < gated.size(); ++i) h = add(h, gated[i]);
  term.loss = scale(h, -coeff);
  return term;
}

// ---- messages ----------------------------------------------------------------------

Tensor MessageMatrix::gather(std::span<const std::size_t> ids, std::span<const double> mask) const {
  if (!mask.empty() && mask.size() != width) throw std::invalid_argument("MessageMatrix::gather: mask width mismatch");
  std::vector<double> out;
  out.reserve(ids.size() * width);
  for (std::size_t id : ids) {
    if (id >= rows) throw std::out_of_range("MessageMatrix::gather: scene id out of range");
    for (std::size_t j = 0; j < width; ++j) out.push_back(values[id * width + j] * (mask.empty() ? 1.0 : mask[j]));
  }
  return Tensor::from({ids.size(), width}, std::move(out));
}

MessageMatrix harvest_messages(const SenderGroup& sender, const FeatureBank& bank) {
  MessageMatrix m;
  m.rows = bank.per_scene.size();
  m.width = sender.config().bundle_width();
  std::vector<std::size_t> ids(m.rows);
  std::iota(ids.begin(), ids.end(), 0);
  Rng unused(0);
  Tensor bundle = sender.emit(bank, ids, 1.0, SampleMode::kEval, unused).bundle;
  m.values.assign(bundle.values().begin(), bundle.values().end());
  return m;
}

Accuracy evaluate_receivers(const std::vector<Receiver>& receivers, const MessageMatrix& msgs,
                            std::span<const ComparisonPair> pairs, std::span<const double> mask) {
  PairBatch batch = make_batch(pairs);
  Tensor x = pair_input(msgs.gather(batch.a, mask), msgs.gather(batch.b, mask));
  std::vector<Accuracy> parts;
  for (const Receiver& r : receivers) parts.push_back(score_logits(r.forward(x), batch));
  return mean_accuracy(parts);
}

bool messages_collapsed(const MessageMatrix& msgs, const SenderConfig& cfg) {
  if (msgs.rows == 0) return true;
  if (cfg.channel == ChannelMode::kDiscrete) {
    for (std::size_t j = 0; j < msgs.width; ++j) {
      const double first = msgs.values[j];
      for (std::size_t i = 1; i < msgs.rows; ++i)
        if (msgs.values[i * msgs.width + j] != first) return false;
    }
    return true;
  }
  for (std::size_t j = 0; j < msgs.width; ++j) {
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < msgs.rows; ++i) {
      const double v = msgs.values[i * msgs.width + j];
      s += v;
      ss += v * v;
    }
    const double mu = s / static_cast<double>(msgs.rows);
    if (std::sqrt(std::max(0.0, ss / static_cast<double>(msgs.rows) - mu * mu)) >= 1e-3) return false;
  }
  return true;
}

// ---- iterated learning --------------------------------------------------------------

GameResult train_iterated_learning(const TrainingConfig& cfg, const TaskContext& ctx, SenderGroup& sender, Rng& rng) {
  cfg.validate();
  const SenderConfig& sc = sender.config();
  const std::size_t P = cfg.population_size;
  const std::uint64_t base = rng();
  Rng pair_rng = derive_rng(base, "pairs");
  Rng noise = derive_rng(base, "gumbel");

  GameResult res;
  ReceiverConfig rc{2 * sc.bundle_width(), ctx.properties.size(), 1};
  for (std::size_t r = 0; r < P; ++r) {
    Rng init = derive_rng(base, "receiver", r);
    res.receivers.emplace_back(rc, init);
  }
  ParamRefs sender_params = sender.parameters();
  std::vector<ParamRefs> recv_params;
  for (auto& r : res.receivers) recv_params.push_back(r.parameters());
  ParamRefs all = sender_params;
  for (auto& rp : recv_params) all.insert(all.end(), rp.begin(), rp.end());

  auto sender_opt = OptimizerState::for_params(sender_params, cfg.sender_lr);
  std::vector<OptimizerState> recv_opt;
  for (auto& rp : recv_params) recv_opt.push_back(OptimizerState::for_params(rp, cfg.receiver_lr));

  const bool discrete = sc.channel == ChannelMode::kDiscrete;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    if (is_reset_epoch(cfg, e)) {
      ++res.resets;
      for (std::size_t r = 0; r < P; ++r) {
        Rng init = derive_rng(base, "receiver", res.resets * P + r);
        res.receivers[r].reinitialize(init);
        recv_opt[r].reset();
      }
    }
    const double tau = temperature_at(cfg, e);
    const SampleMode mode = e < cfg.soft_warmup ? SampleMode::kSoft : SampleMode::kHard;
    auto pairs = epoch_pairs(cfg, ctx, pair_rng);
    const std::size_t steps = steps_for(pairs.size(), cfg.batch_size);

    EpochLog log;
    log.epoch = e;
    log.temperature = tau;
    log.head_entropy.assign(sc.n_agents * sc.positions, 0.0);
    log.regularizer_active.assign(sc.n_agents * sc.positions, false);
    std::vector<Accuracy> accs;
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t lo = s * cfg.batch_size, hi = std::min(pairs.size(), lo + cfg.batch_size);
        PairBatch batch = make_batch(std::span(pairs).subspan(lo, hi - lo));
        UniqueRows u = unique_rows(batch);
        auto logits = sender.logits(*ctx.bank, u.ids);
        Tensor ba = sender.sample(gather_all(logits, u.ra), tau, mode, noise);
        Tensor bb = sender.sample(gather_all(logits, u.rb), tau, mode, noise);
        Tensor x = pair_input(ba, bb);

        Tensor total;
        std::vector<Accuracy> per_recv;
        for (auto& r : res.receivers) {
          Tensor out = r.forward(x);
          Tensor l = bce_with_logits(out, batch.targets);
          total = total.defined() ? add(total, l) : l;
          per_recv.push_back(score_logits(out, batch));
        }
        const double mean_recv_loss = total.item() / static_cast<double>(P);
        if (discrete) {
          EntropyTerm reg = entropy_regularizer(logits, sc.positions, sc.vocab, cfg.entropy_coeff,
                                                cfg.entropy_floor_fraction);
          for (std::size_t h = 0; h < reg.hard_entropy.size(); ++h) {
            log.head_entropy[h] += reg.hard_entropy[h] / static_cast<double>(steps);
            if (reg.active[h]) log.regularizer_active[h] = true;
          }
          // Receivers see only their own loss; the sender sees the population
          // mean plus the regularizer, restored by the 1/P rescale below.
          if (reg.loss.requires_grad()) total = add(total, scale(reg.loss, static_cast<double>(P)));
        }
        forward_backward(total, all);
        scale_grads(sender_params, 1.0 / static_cast<double>(P));
        clip_gradients(sender_params, cfg.grad_clip);
        optimizer_step(sender_opt, sender_params);
        for (std::size_t r = 0; r < P; ++r) {
          clip_gradients(recv_params[r], cfg.grad_clip);
          optimizer_step(recv_opt[r], recv_params[r]);
        }
        log.train_loss += mean_recv_loss / static_cast<double>(steps);
        Accuracy a = mean_accuracy(per_recv);
        a.pairs = batch.size();
        accs.push_back(a);
      }
    } catch (const NonFiniteError& err) {
      res.instability = {true, "nan", e, err.op()};
      return res;
    }
    Accuracy ep = accumulate(accs);
    log.train_acc = ep.per_property;
    log.train_both = ep.both;
    log.resets = res.resets;
    res.logs.push_back(std::move(log));
  }
  if (messages_collapsed(harvest_messages(sender, *ctx.bank), sc))
    res.instability = {true, "collapse", cfg.epochs - 1, ""};
  return res;
}

// ---- LazImpa -------------------------------------------------------------------------

Tensor prefix_mask_input(const Tensor& bundle, std::size_t n_agents, std::size_t positions, std::size_t vocab,
                         std::size_t prefix) {
  if (bundle.rank() != 2 || bundle.dim(1) != n_agents * positions * vocab)
    throw std::invalid_argument("prefix_mask_input: bundle width mismatch");
  if (prefix >= positions) return bundle;
  const std::size_t B = bundle.dim(0);
  std::vector<double> mask(bundle.size(), 0.0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t a = 0; a < n_agents; ++a)
      for (std::size_t k = 0; k < prefix; ++k)
        for (std::size_t v = 0; v < vocab; ++v) mask[i * bundle.dim(1) + (a * positions + k) * vocab + v] = 1.0;
  return mul(bundle, Tensor::from(bundle.shape(), std::move(mask)));
}

GameResult train_lazimpa_baseline(const TrainingConfig& cfg, const TaskContext& ctx, SenderGroup& sender, Rng& rng) {
  cfg.validate();
  const SenderConfig& sc = sender.config();
  if (sc.channel != ChannelMode::kDiscrete) throw std::invalid_argument("LazImpa requires a discrete channel");
  const std::uint64_t base = rng();
  Rng pair_rng = derive_rng(base, "pairs");
  Rng noise = derive_rng(base, "gumbel");
  Rng init = derive_rng(base, "receiver", 0);

  GameResult res;
  ReceiverConfig rc{2 * sc.bundle_width(), ctx.properties.size(), sc.positions};
  res.receivers.emplace_back(rc, init);
  Receiver& recv = res.receivers[0];
  ParamRefs sender_params = sender.parameters();
  ParamRefs recv_params = recv.parameters();
  ParamRefs all = concat_params({sender_params, recv_params});
  auto sender_opt = OptimizerState::for_params(sender_params, cfg.sender_lr);
  auto recv_opt = OptimizerState::for_params(recv_params, cfg.receiver_lr);
  const std::size_t heads = sc.n_agents * sc.positions;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double tau = temperature_at(cfg, e);
    const SampleMode mode = e < cfg.soft_warmup ? SampleMode::kSoft : SampleMode::kHard;
    auto pairs = epoch_pairs(cfg, ctx, pair_rng);
    const std::size_t steps = steps_for(pairs.size(), cfg.batch_size);
    EpochLog log;
    log.epoch = e;
    log.temperature = tau;
    log.head_entropy.assign(heads, 0.0);
    log.regularizer_active.assign(heads, true);
    std::vector<Accuracy> accs;
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t lo = s * cfg.batch_size, hi = std::min(pairs.size(), lo + cfg.batch_size);
        PairBatch batch = make_batch(std::span(pairs).subspan(lo, hi - lo));
        UniqueRows u = unique_rows(batch);
        auto logits = sender.logits(*ctx.bank, u.ids);
        Tensor ba = sender.sample(gather_all(logits, u.ra), tau, mode, noise);
        Tensor bb = sender.sample(gather_all(logits, u.rb), tau, mode, noise);

        Tensor total;
        Tensor last;
        for (std::size_t p = 1; p <= sc.positions; ++p) {
          Tensor x = pair_input(prefix_mask_input(ba, sc.n_agents, sc.positions, sc.vocab, p),
                                prefix_mask_input(bb, sc.n_agents, sc.positions, sc.vocab, p));
          Tensor out = recv.forward_head(x, p - 1);
          Tensor l = bce_with_logits(out, batch.targets);
          total = total.defined() ? add(total, l) : l;
          last = out;
        }
        const double task_loss = total.item();
        // Lazy speaker: mean per-head softmax entropy, always penalized.
        Tensor ent;
        for (const Tensor& l : logits)
          for (std::size_t k = 0; k < sc.positions; ++k) {
            Tensor h = mean(row_entropy(softmax_rows(slice_cols(l, k * sc.vocab, (k + 1) * sc.vocab))));
            ent = ent.defined() ? add(ent, h) : h;
          }
        total = add(total, scale(ent, cfg.lazimpa_lambda / static_cast<double>(heads)));
        EntropyTerm probe = entropy_regularizer(logits, sc.positions, sc.vocab, 0.0, 0.0);
        for (std::size_t h = 0; h < heads; ++h) log.head_entropy[h] += probe.hard_entropy[h] / static_cast<double>(steps);

        forward_backward(total, all);
        clip_gradients(sender_params, cfg.grad_clip);
        clip_gradients(recv_params, cfg.grad_clip);
        optimizer_step(sender_opt, sender_params);
        optimizer_step(recv_opt, recv_params);
        log.train_loss += task_loss / static_cast<double>(steps);
        accs.push_back(score_logits(last, batch));
      }
    } catch (const NonFiniteError& err) {
      res.instability = {true, "nan", e, err.op()};
      return res;
    }
    Accuracy ep = accumulate(accs);
    log.train_acc = ep.per_property;
    log.train_both = ep.both;
    res.logs.push_back(std::move(log));
  }
  if (messages_collapsed(harvest_messages(sender, *ctx.bank), sc))
    res.instability = {true, "collapse", cfg.epochs - 1, ""};
  return res;
}

// ---- frozen-message receivers -----------------------------------------------------

ReceiverFit fit_receiver(const MessageMatrix& msgs, std::size_t outputs,
                         const std::function<std::vector<ComparisonPair>(Rng&)>& sample_epoch,
                         std::span<const ComparisonPair> holdout_pairs, const FitOptions& opt, Rng& rng) {
  const std::uint64_t base = rng();
  Rng init = derive_rng(base, "fit-init");
  Rng pair_rng = derive_rng(base, "fit-pairs");
  ReceiverFit fit{Receiver({2 * msgs.width, outputs, 1}, init), {}, {}};
  ParamRefs params = fit.receiver.parameters();
  auto state = OptimizerState::for_params(params, opt.lr);
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    auto pairs = sample_epoch(pair_rng);
    double loss_sum = 0.0;
    const std::size_t steps = steps_for(pairs.size(), opt.batch_size);
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t lo = s * opt.batch_size, hi = std::min(pairs.size(), lo + opt.batch_size);
      PairBatch batch = make_batch(std::span(pairs).subspan(lo, hi - lo));
      Tensor x = pair_input(msgs.gather(batch.a), msgs.gather(batch.b));
      Tensor loss = bce_with_logits(fit.receiver.forward(x), batch.targets);
      forward_backward(loss, params);
      clip_gradients(params, opt.grad_clip);
      optimizer_step(state, params);
      loss_sum += loss.item();
    }
    fit.epoch_loss.push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
  }
  fit.holdout = evaluate_receivers({fit.receiver}, msgs, holdout_pairs);
  return fit;
}

// ---- downstream prediction ------------------------------------------------------

DownstreamResult train_downstream_predictor(const MessageMatrix& msgs, std::span<const double> outcomes,
                                            const DatasetSplit& split, std::size_t epochs, Rng& rng) {
  if (outcomes.size() != msgs.rows) throw std::invalid_argument("train_downstream_predictor: outcome count mismatch");
  DownstreamResult res;
  // Rank-based median split: exactly half of the scenes are labeled 1.
  std::vector<std::size_t> order(outcomes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return outcomes[a] < outcomes[b]; });
  std::vector<double> label(outcomes.size(), 0.0);
  for (std::size_t r = outcomes.size() / 2; r < order.size(); ++r) label[order[r]] = 1.0;
  res.positives = order.size() - outcomes.size() / 2;
  res.negatives = outcomes.size() / 2;
  res.threshold = order.empty() ? 0.0 : outcomes[order[outcomes.size() / 2]];

  const std::uint64_t base = rng();
  Rng init = derive_rng(base, "downstream-init");
  Rng shuffle = derive_rng(base, "downstream-order");
  Parameter w1 = make_linear_weight("down.w1", msgs.width, 64, init);
  Parameter b1 = make_linear_bias("down.b1", msgs.width, 64, init);
  Parameter w2 = make_linear_weight("down.w2", 64, 1, init);
  Parameter b2 = make_linear_bias("down.b2", 64, 1, init);
  ParamRefs params{&w1, &b1, &w2, &b2};
  auto state = OptimizerState::for_params(params, 1e-3);
  auto forward = [&](const Tensor& x) {
    return add_row(matmul(relu(add_row(matmul(x, w1.tensor), b1.tensor)), w2.tensor), b2.tensor);
  };
  auto accuracy = [&](std::span<const std::size_t> ids) {
    if (ids.empty()) return 0.0;
    Tensor out = forward(msgs.gather(ids));
    std::size_t right = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) right += ((out[i] > 0.0) == (label[ids[i]] > 0.5)) ? 1 : 0;
    return static_cast<double>(right) / static_cast<double>(ids.size());
  };

  std::vector<std::size_t> train = split.train_ids;
  constexpr std::size_t kBatch = 64;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(train.begin(), train.end(), shuffle);
    for (std::size_t lo = 0; lo < train.size(); lo += kBatch) {
      std::span<const std::size_t> ids(train.data() + lo, std::min(kBatch, train.size() - lo));
      std::vector<double> y;
      for (std::size_t id : ids) y.push_back(label[id]);
      forward_backward(bce_with_logits(forward(msgs.gather(ids)), y), params);
      clip_gradients(params, 1.0);
      optimizer_step(state, params);
    }
  }
  res.train_acc = accuracy(split.train_ids);
  res.holdout_acc = accuracy(split.test_ids);
  return res;
}

}  // namespace emcomm
