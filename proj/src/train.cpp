#include "slicehier/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "slicehier/error.hpp"
#include "slicehier/eval.hpp"
#include "slicehier/parallel.hpp"

namespace slicehier {

namespace {

template <class T>
std::vector<Tensor<T>*> tensors_of(Parameters<T>& p) {
  std::vector<Tensor<T>*> out;
  p.visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <class T>
std::vector<std::string> names_of(const Parameters<T>& p) {
  std::vector<std::string> out;
  p.visit([&](const std::string& name, const Tensor<T>&) { out.push_back(name); });
  return out;
}

template <class T>
void add_into(Parameters<T>& dst, Parameters<T>& src) {
  auto d = tensors_of(dst);
  auto s = tensors_of(src);
  for (std::size_t k = 0; k < d.size(); ++k) {
    for (std::size_t i = 0; i < d[k]->size(); ++i) (*d[k])[i] += (*s[k])[i];
  }
}

std::string describe(const LossBreakdown& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "l_app=%g l_type=%g l_center=%g l_coherence=%g l_2d=%g total=%g", b.l_app,
                b.l_type, b.l_center, b.l_coherence, b.l_2d, b.total);
  return buf;
}

template <class T>
struct VolumeTerms {
  T app = 0, type = 0, coherence = 0;
};

}  // namespace

template <class T>
void sgd_step(Parameters<T>& params, const Parameters<T>& grads, OptimizerState<T>& state) {
  if (state.velocity.scalar_count() == 0) state.velocity = params.zeros_like();
  auto theta = tensors_of(params);
  auto grad = tensors_of(const_cast<Parameters<T>&>(grads));
  auto vel = tensors_of(state.velocity);
  const auto names = names_of(params);
  if (theta.size() != grad.size() || theta.size() != vel.size()) {
    throw Error(Errc::shape_mismatch, "sgd_step: parameter, gradient and velocity layouts differ");
  }
  for (std::size_t k = 0; k < theta.size(); ++k) {
    if (theta[k]->shape != grad[k]->shape || theta[k]->shape != vel[k]->shape) {
      throw Error(Errc::shape_mismatch, "sgd_step: shape mismatch in " + names[k]);
    }
    for (T g : grad[k]->data) {
      if (!std::isfinite(g)) throw Error(Errc::numeric, "sgd_step: non-finite gradient in " + names[k]);
    }
  }
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.learning_rate);
  const T wd = static_cast<T>(state.weight_decay);
  for (std::size_t k = 0; k < theta.size(); ++k) {
    auto& th = theta[k]->data;
    const auto& g = grad[k]->data;
    auto& v = vel[k]->data;
    for (std::size_t i = 0; i < th.size(); ++i) {
      v[i] = mu * v[i] - lr * (g[i] + wd * th[i]);
      th[i] += v[i];
    }
  }
}

double scheduler_update(SchedulerState& s, double val_auc) {
  if (val_auc > s.best + s.min_delta) {
    s.best = val_auc;
    s.epochs_since_improvement = 0;
  } else {
    ++s.epochs_since_improvement;
    if (s.epochs_since_improvement >= s.patience) {
      s.learning_rate = std::max(s.learning_rate * s.factor, s.min_lr);
      s.epochs_since_improvement = 0;
    }
  }
  return s.learning_rate;
}

template <class T>
LossBreakdown batch_objective(const Model<T>& m, std::span<const PreparedVolume* const> volumes,
                              std::span<const Slice2D* const> aux, const ObjectiveConfig& obj, Parameters<T>* grads,
                              const std::vector<std::vector<T>>* frozen_align,
                              std::vector<std::vector<T>>* align_out, int threads) {
  obj.weights.validate();
  const auto& w = obj.weights;
  const std::size_t nv = volumes.size();
  const bool want_grads = grads != nullptr;
  if (frozen_align != nullptr && frozen_align->size() != nv) {
    throw Error(Errc::shape_mismatch, "batch_objective: frozen alignment targets do not match the batch");
  }

  std::size_t type_count = 0;
  for (const auto* v : volumes) {
    if (!obj.type_loss_on_positives_only || v->y_app == 1) ++type_count;
  }

  std::vector<VolumeTerms<T>> terms(nv);
  std::vector<std::vector<T>> targets(nv);
  std::vector<Parameters<T>> volume_grads(want_grads ? nv : 0);
  const std::span<const T> c_pos = m.params.center_pos.data;

  parallel_for(nv, threads, [&](std::size_t b) {
    const PreparedVolume& v = *volumes[b];
    const auto trace = forward_full(m, v, want_grads);
    auto& out = terms[b];
    out.app = bce(trace.p_app, v.y_app);
    const bool type_counted = !obj.type_loss_on_positives_only || v.y_app == 1;
    if (type_counted) out.type = bce(trace.p_type, v.y_type);

    targets[b] = frozen_align != nullptr ? (*frozen_align)[b]
                                         : align_weights<T>(trace.features, c_pos, static_cast<T>(obj.epsilon),
                                                            v.padded);
    const bool coherence_counted = !obj.coherence_on_positives_only || v.y_app == 1;
    if (coherence_counted) out.coherence = coherence_loss<T>(trace.w_app, targets[b]);

    if (!want_grads) return;
    TraceGradient<T> up;
    up.d_logit_app = static_cast<T>(w.alpha / static_cast<double>(nv)) * bce_logit_grad(trace.p_app, v.y_app);
    if (type_counted) {
      up.d_logit_type =
          static_cast<T>(w.beta / static_cast<double>(type_count)) * bce_logit_grad(trace.p_type, v.y_type);
    }
    if (coherence_counted && w.delta != 0.0) {
      up.d_w_app = coherence_loss_grad<T>(trace.w_app, targets[b]);
      const T scale = static_cast<T>(w.delta / static_cast<double>(nv));
      for (auto& g : up.d_w_app) g *= scale;
      // Padded slices carry no attention; the target there is 0 as well.
      for (std::size_t i = 0; i < v.slices; ++i) {
        if (v.padded[i]) up.d_w_app[i] = T(0);
      }
    }
    volume_grads[b] = m.params.zeros_like();
    backward_full(m, v, trace, up, volume_grads[b]);
  });

  LossBreakdown raw;
  for (const auto& t : terms) {
    raw.l_app += static_cast<double>(t.app);
    raw.l_type += static_cast<double>(t.type);
    raw.l_coherence += static_cast<double>(t.coherence);
  }
  if (nv > 0) {
    raw.l_app /= static_cast<double>(nv);
    raw.l_coherence /= static_cast<double>(nv);
  }
  if (type_count > 0) raw.l_type /= static_cast<double>(type_count);

  const std::size_t na = aux.size();
  if (na > 0) {
    std::vector<Prediction2D<T>> preds(na);
    const bool aux_grads = want_grads && (w.gamma != 0.0 || w.lambda != 0.0);
    parallel_for(na, threads, [&](std::size_t j) { preds[j] = predict_2d(m, *aux[j], aux_grads); });
    Matrix<T> feats(na, m.feature_dim());
    std::vector<int> labels(na);
    double l2d = 0;
    for (std::size_t j = 0; j < na; ++j) {
      std::copy(preds[j].feature.begin(), preds[j].feature.end(), feats.row(j).begin());
      labels[j] = aux[j]->y_slice;
      l2d += static_cast<double>(bce(preds[j].probability, labels[j]));
    }
    raw.l_2d = l2d / static_cast<double>(na);
    raw.l_center = static_cast<double>(center_loss<T>(feats, labels, m.params.center_pos.data, m.params.center_neg.data));

    if (aux_grads) {
      Matrix<T> d_feats(na, m.feature_dim());
      center_loss_grad<T>(feats, labels, m.params.center_pos.data, m.params.center_neg.data,
                          static_cast<T>(w.gamma), d_feats, grads->center_pos.data, grads->center_neg.data);
      std::vector<Parameters<T>> slice_grads(na);
      parallel_for(na, threads, [&](std::size_t j) {
        const T d_logit =
            static_cast<T>(w.lambda / static_cast<double>(na)) * bce_logit_grad(preds[j].probability, labels[j]);
        slice_grads[j] = m.params.zeros_like();
        backward_2d(m, *aux[j], preds[j], d_logit, std::span<const T>(d_feats.row(j)), slice_grads[j]);
      });
      for (auto& g : slice_grads) add_into(*grads, g);
    }
  }
  for (auto& g : volume_grads) add_into(*grads, g);

  if (align_out != nullptr) *align_out = std::move(targets);

  for (double c : {raw.l_app, raw.l_type, raw.l_center, raw.l_coherence, raw.l_2d}) {
    if (!std::isfinite(c)) throw Error(Errc::numeric, "non-finite loss: " + describe(raw));
  }
  return total_loss(raw.l_app, raw.l_type, raw.l_center, raw.l_coherence, raw.l_2d, w);
}

template <class T>
LossBreakdown train_step(Model<T>& m, OptimizerState<T>& opt, std::span<const PreparedVolume* const> volumes,
                         std::span<const Slice2D* const> aux, const ObjectiveConfig& obj, int threads) {
  auto grads = m.params.zeros_like();
  const auto loss = batch_objective<T>(m, volumes, aux, obj, &grads, nullptr, nullptr, threads);
  sgd_step(m.params, grads, opt);
  return loss;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(Errc::invalid_argument, "train.epochs must be >= 1");
  if (batch_size < 1) throw Error(Errc::invalid_argument, "train.batch_size must be >= 1");
  if (aux_every_k_steps < 1) throw Error(Errc::invalid_argument, "train.aux_every_k_steps must be >= 1");
  if (!(initial_lr > 0.0)) throw Error(Errc::invalid_argument, "train.lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw Error(Errc::invalid_argument, "optimizer.momentum must be in [0,1)");
  if (weight_decay < 0.0) throw Error(Errc::invalid_argument, "optimizer.weight_decay must be >= 0");
  if (scheduler_patience < 1) throw Error(Errc::invalid_argument, "scheduler.patience must be >= 1");
  if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0)) {
    throw Error(Errc::invalid_argument, "scheduler.factor must be in (0,1)");
  }
  if (scheduler_min_delta < 0.0) throw Error(Errc::invalid_argument, "scheduler.min_delta must be >= 0");
  if (!(scheduler_min_lr > 0.0)) throw Error(Errc::invalid_argument, "scheduler.min_lr must be > 0");
  objective.weights.validate();
  if (!(objective.epsilon > 0.0)) throw Error(Errc::invalid_argument, "loss.epsilon must be > 0");
}

FitResult fit(const ModelConfig& model_cfg, std::span<const PreparedVolume> train, std::span<const PreparedVolume> val,
              std::span<const Slice2D> aux, const TrainConfig& cfg, const std::filesystem::path& checkpoint_dir,
              const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train.empty()) throw Error(Errc::invalid_argument, "fit: empty training split");
  if (val.empty()) throw Error(Errc::invalid_argument, "fit: empty validation split");
  const auto val_pos = std::count_if(val.begin(), val.end(), [](const PreparedVolume& v) { return v.y_app == 1; });
  if (val_pos == 0 || static_cast<std::size_t>(val_pos) == val.size()) {
    throw Error(Errc::undefined_metric, "fit: validation split has a single appendicitis class; AUC is undefined");
  }

  Model<float> model = Model<float>::init(model_cfg, cfg.seed);
  OptimizerState<float> opt;
  opt.learning_rate = cfg.initial_lr;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  SchedulerState sched;
  sched.learning_rate = cfg.initial_lr;
  sched.patience = cfg.scheduler_patience;
  sched.factor = cfg.scheduler_factor;
  sched.min_delta = cfg.scheduler_min_delta;
  sched.min_lr = cfg.scheduler_min_lr;

  std::mt19937_64 rng(cfg.seed ^ 0x747261696eULL);
  std::vector<std::size_t> order(train.size());
  // Auxiliary slices are drawn from one shuffled cycle, or from one cycle
  // per label when batches are balanced.
  std::vector<std::vector<std::size_t>> aux_pools(1);
  if (cfg.aux_balanced) {
    aux_pools.assign(2, {});
    for (std::size_t i = 0; i < aux.size(); ++i) aux_pools[aux[i].y_slice == 1 ? 0 : 1].push_back(i);
    std::erase_if(aux_pools, [](const auto& pool) { return pool.empty(); });
  } else {
    aux_pools[0].resize(aux.size());
    std::iota(aux_pools[0].begin(), aux_pools[0].end(), 0);
  }
  std::vector<std::size_t> aux_cursor(aux_pools.size(), 0);

  FitResult result;
  result.best = model;
  result.best_meta.val_auc = -1.0;
  std::size_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (auto& pool : aux_pools) std::shuffle(pool.begin(), pool.end(), rng);
    std::fill(aux_cursor.begin(), aux_cursor.end(), 0);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.learning_rate;
    std::size_t steps_this_epoch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const PreparedVolume*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(&train[order[k]]);
      }
      std::vector<const Slice2D*> aux_batch;
      if (!aux.empty() && cfg.aux_batch_size > 0 && step % static_cast<std::size_t>(cfg.aux_every_k_steps) == 0) {
        for (std::size_t k = 0; k < cfg.aux_batch_size; ++k) {
          const std::size_t p = k % aux_pools.size();
          aux_batch.push_back(&aux[aux_pools[p][aux_cursor[p]]]);
          aux_cursor[p] = (aux_cursor[p] + 1) % aux_pools[p].size();
        }
      }
      const auto loss = train_step<float>(model, opt, batch, aux_batch, cfg.objective, cfg.threads);
      result.steps.push_back({step, loss, opt.learning_rate});
      rec.train.l_app += loss.l_app;
      rec.train.l_type += loss.l_type;
      rec.train.l_center += loss.l_center;
      rec.train.l_coherence += loss.l_coherence;
      rec.train.l_2d += loss.l_2d;
      rec.train.total += loss.total;
      ++steps_this_epoch;
      ++step;
    }
    const double denom = static_cast<double>(steps_this_epoch);
    rec.train.l_app /= denom;
    rec.train.l_type /= denom;
    rec.train.l_center /= denom;
    rec.train.l_coherence /= denom;
    rec.train.l_2d /= denom;
    rec.train.total /= denom;

    const auto scored = score_volumes(model, val, cfg.threads);
    rec.val_auc_app = roc_auc(scored.p_app, scored.y_app);
    std::vector<double> ts;
    std::vector<int> tl;
    type_population(scored, Thresholds{}, TypePopulation::gt_positive, ts, tl);
    try {
      rec.val_auc_type = roc_auc(ts, tl);
    } catch (const Error& e) {
      if (e.code() != Errc::undefined_metric) throw;
    }
    result.history.push_back(rec);

    if (rec.val_auc_app >= result.best_meta.val_auc) {
      result.best = model;
      result.best_meta = {epoch, rec.val_auc_app};
      if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir / "checkpoint.bin", model, result.best_meta);
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%03d.bin", epoch);
      save_checkpoint(checkpoint_dir / name, model, {epoch, rec.val_auc_app});
    }
    opt.learning_rate = scheduler_update(sched, rec.val_auc_app);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream os;
  os << "epoch,l_app,l_type,l_center,l_coherence,l_2d,total,val_auc_app,val_auc_type,lr\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << fmt(r.train.l_app) << ',' << fmt(r.train.l_type) << ',' << fmt(r.train.l_center) << ','
       << fmt(r.train.l_coherence) << ',' << fmt(r.train.l_2d) << ',' << fmt(r.train.total) << ','
       << fmt(r.val_auc_app) << ',' << fmt(r.val_auc_type) << ',' << fmt(r.lr) << '\n';
  }
  return os.str();
}

std::string steps_csv(std::span<const StepRecord> steps) {
  std::ostringstream os;
  os << "step,l_app,l_type,l_center,l_coherence,l_2d,total,lr\n";
  for (const auto& s : steps) {
    os << s.step << ',' << fmt(s.loss.l_app) << ',' << fmt(s.loss.l_type) << ',' << fmt(s.loss.l_center) << ','
       << fmt(s.loss.l_coherence) << ',' << fmt(s.loss.l_2d) << ',' << fmt(s.loss.total) << ',' << fmt(s.lr)
       << '\n';
  }
  return os.str();
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, double h) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

const char* to_string(LossTerm t) {
  switch (t) {
    case LossTerm::app: return "L_app";
    case LossTerm::type: return "L_type";
    case LossTerm::center: return "L_center";
    case LossTerm::coherence: return "L_coherence";
    case LossTerm::aux2d: return "L_2D";
    case LossTerm::total: return "L_total";
  }
  return "?";
}

LossWeights weights_for(LossTerm term, const LossWeights& total) {
  LossWeights w{0, 0, 0, 0, 0};
  switch (term) {
    case LossTerm::app: w.alpha = 1; break;
    case LossTerm::type: w.beta = 1; break;
    case LossTerm::center: w.gamma = 1; break;
    case LossTerm::coherence: w.delta = 1; break;
    case LossTerm::aux2d: w.lambda = 1; break;
    case LossTerm::total: w = total; break;
  }
  return w;
}

GradCheckInstance make_gradcheck_instance(std::uint64_t seed, std::size_t slices, std::size_t feature_dim) {
  GradCheckInstance inst;
  ModelConfig cfg;
  cfg.backbone = {8, 8, 2, 3, feature_dim};
  cfg.hierarchical = true;
  inst.model = Model<double>::init(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x67726164ULL);
  std::normal_distribution<double> normal(0.0, 0.3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  inst.model.params.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.data) x = normal(rng);
  });

  const int labels[3][2] = {{1, 1}, {1, 0}, {0, 0}};
  for (int c = 0; c < 3; ++c) {
    PreparedVolume v;
    v.case_id = "gc_" + std::to_string(c);
    v.slices = slices;
    v.height = 8;
    v.width = 8;
    v.y_app = labels[c][0];
    v.y_type = labels[c][1];
    v.pixels.resize(slices * 64);
    for (auto& x : v.pixels) x = static_cast<float>(unit(rng));
    v.padded.assign(slices, 0);
    v.lesion.assign(slices, 0);
    if (c == 0 && slices > 1) {
      v.padded[slices - 1] = 1;  // exercise masking
      std::fill(v.pixels.end() - 64, v.pixels.end(), 0.0f);
    }
    inst.volumes.push_back(std::move(v));
  }
  for (int j = 0; j < 4; ++j) {
    Slice2D s;
    s.height = 8;
    s.width = 8;
    s.y_slice = j % 2 == 0 ? 1 : 0;
    s.pixels.resize(64);
    for (auto& x : s.pixels) x = static_cast<float>(unit(rng));
    inst.aux.push_back(std::move(s));
  }
  inst.objective.weights = {1.0, 0.7, 0.3, 0.5, 0.9};
  return inst;
}

GradCheckResult gradient_check(const GradCheckInstance& inst, LossTerm term, const GradCheckOptions& opt) {
  ObjectiveConfig obj = inst.objective;
  obj.weights = weights_for(term, inst.objective.weights);
  std::vector<const PreparedVolume*> vols;
  for (const auto& v : inst.volumes) vols.push_back(&v);
  std::vector<const Slice2D*> aux;
  for (const auto& s : inst.aux) aux.push_back(&s);

  std::vector<std::vector<double>> targets;
  batch_objective<double>(inst.model, vols, aux, obj, nullptr, nullptr, &targets);
  auto grads = inst.model.params.zeros_like();
  batch_objective<double>(inst.model, vols, aux, obj, &grads, &targets);

  std::vector<double> analytic;
  std::vector<std::string> owner;
  grads.visit([&](const std::string& name, const Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      analytic.push_back(t[i]);
      owner.push_back(name + "[" + std::to_string(i) + "]");
    }
  });
  if (opt.corrupt && *opt.corrupt == term && !analytic.empty()) {
    const auto it = std::max_element(analytic.begin(), analytic.end(),
                                      [](double a, double b) { return std::abs(a) < std::abs(b); });
    *it = *it * 1.05 + 1e-3;
  }

  Model<double> probe = inst.model;
  std::vector<double*> slots;
  probe.params.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.data) slots.push_back(&x);
  });
  std::vector<double> x0(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) x0[i] = *slots[i];
  const auto loss_at = [&](std::span<const double> x) {
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = x[i];
    return batch_objective<double>(probe, vols, aux, obj, nullptr, &targets).total;
  };
  const auto numeric = central_difference(loss_at, x0, opt.h);

  GradCheckResult r;
  r.term = term;
  r.checked = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_parameter = owner[i];
    }
  }
  r.pass = r.max_rel_error < opt.tolerance;
  return r;
}

#define SLICEHIER_INSTANTIATE(T)                                                                                  \
  template void sgd_step<T>(Parameters<T>&, const Parameters<T>&, OptimizerState<T>&);                            \
  template LossBreakdown batch_objective<T>(const Model<T>&, std::span<const PreparedVolume* const>,             \
                                            std::span<const Slice2D* const>, const ObjectiveConfig&,              \
                                            Parameters<T>*, const std::vector<std::vector<T>>*,                   \
                                            std::vector<std::vector<T>>*, int);                                   \
  template LossBreakdown train_step<T>(Model<T>&, OptimizerState<T>&, std::span<const PreparedVolume* const>,   \
                                       std::span<const Slice2D* const>, const ObjectiveConfig&, int);

SLICEHIER_INSTANTIATE(float)
SLICEHIER_INSTANTIATE(double)
#undef SLICEHIER_INSTANTIATE

}  // namespace slicehier
