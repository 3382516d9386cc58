#include "slicehier/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "slicehier/error.hpp"
#include "slicehier/parallel.hpp"
#include "slicehier/volume_io.hpp"

namespace slicehier {

namespace fs = std::filesystem;

const std::vector<PreparedVolume>& Dataset::part(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw Error(Errc::invalid_argument, "unknown split '" + name + "' (expected train, val or test)");
}

namespace {

fs::path require_path(const Config& c, const std::string& key) {
  const auto& v = c.get(key);
  if (v.empty()) throw Error(Errc::invalid_argument, key + " is required");
  return v;
}

fs::path out_dir(const Config& c) { return require_path(c, "run.out"); }

fs::path checkpoint_path(const Config& c) {
  if (!c.get("run.checkpoint").empty()) return c.get("run.checkpoint");
  return out_dir(c) / "checkpoint.bin";
}

fs::path thresholds_path(const Config& c) {
  if (!c.get("run.thresholds").empty()) return c.get("run.thresholds");
  return out_dir(c) / "thresholds.json";
}

void write_snapshot(const Config& c, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  write_text(dir / ("config." + command + ".txt"), c.snapshot());
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

std::string fmt_opt(const std::optional<double>& x) { return x ? fmt(*x) : std::string("NA"); }

SplitManifest split_for(const Config& c, const std::vector<Volume>& volumes) {
  std::vector<CaseLabel> labels;
  labels.reserve(volumes.size());
  for (const auto& v : volumes) labels.push_back({v.case_id, v.y_app, v.y_type});
  return split_corpus(labels, split_fractions_from(c), c.get_u64("seed"));
}

TrainResult train_on(const Config& c, const Dataset& data, const fs::path& dir, std::ostream& log) {
  const auto model_cfg = model_config_from(c);
  const auto train_cfg = train_config_from(c);
  fs::create_directories(dir);
  const bool uses_aux = train_cfg.objective.weights.gamma != 0.0 || train_cfg.objective.weights.lambda != 0.0;
  const std::span<const Slice2D> aux = uses_aux ? std::span<const Slice2D>(data.aux) : std::span<const Slice2D>();

  TrainResult out;
  out.fit = fit(model_cfg, data.train, data.val, aux, train_cfg, dir, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " lr=" << r.lr << " loss=" << fmt(r.train.total)
        << " val_auc_app=" << fmt(r.val_auc_app) << " val_auc_type=" << fmt(r.val_auc_type) << "\n";
  });
  out.checkpoint = dir / "checkpoint.bin";
  write_text(dir / "history.csv", history_csv(out.fit.history));
  write_text(dir / "steps.csv", steps_csv(out.fit.steps));
  save_split(dir / "split.txt", data.split);
  return out;
}

Thresholds calibrate_on(const Config& c, const Model<float>& model, const std::vector<PreparedVolume>& vols) {
  Thresholds t = threshold_targets_from(c);
  const auto scored = score_volumes(model, vols, threads_from_env());
  t.tau_app = calibrate_threshold(scored.p_app, scored.y_app, t.target_sens_app);
  std::vector<double> ts;
  std::vector<int> tl;
  type_population(scored, t, type_population_from(c), ts, tl);
  t.tau_type = calibrate_threshold(ts, tl, t.target_sens_type);
  return t;
}

void print_report(std::ostream& log, const MetricsReport& r) {
  auto task = [&](const char* name, const TaskMetrics& m) {
    log << name << ": n=" << m.n << " positives=" << m.positives << " auc=" << fmt_opt(m.auc)
        << " acc=" << fmt_opt(m.confusion.accuracy) << " sens=" << fmt_opt(m.confusion.sensitivity)
        << " spec=" << fmt_opt(m.confusion.specificity) << " tau=" << m.threshold;
    if (!m.auc) log << " (" << m.auc_error << ")";
    log << "\n";
  };
  task("appendicitis", r.appendicitis);
  task("complicated", r.type);
}

}  // namespace

Dataset load_dataset(const Config& c) {
  const fs::path dir = require_path(c, "run.corpus");
  if (!fs::exists(dir / "corpus.json")) {
    throw Error(Errc::io, "corpus not found: " + (dir / "corpus.json").string() + " (run `slicehier synth` first)");
  }
  const auto corpus = load_corpus(dir);
  const auto pre = preprocess_from(c);

  Dataset d;
  d.split = fs::exists(dir / "split.txt") ? load_split(dir / "split.txt") : split_for(c, corpus.volumes);

  std::map<std::string, const Volume*> by_id;
  for (const auto& v : corpus.volumes) by_id[v.case_id] = &v;
  auto gather = [&](const std::vector<std::string>& ids, std::vector<PreparedVolume>& out) {
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw Error(Errc::corrupt_file, "split manifest names unknown case '" + id + "'");
      out.push_back(preprocess(*it->second, pre));
    }
  };
  gather(d.split.train, d.train);
  gather(d.split.val, d.val);
  gather(d.split.test, d.test);
  d.aux = make_aux_slices(corpus.aux_volumes, pre);
  return d;
}

SynthResult cmd_synth(const Config& c, std::ostream& log) {
  const fs::path dir = out_dir(c);
  const auto spec = corpus_spec_from(c);
  const auto pre = preprocess_from(c);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!c.get_bool("run.force")) {
      throw Error(Errc::invalid_argument, "output directory " + dir.string() + " is not empty (use --force)");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);

  const auto corpus = generate_corpus(spec, pre);
  save_corpus(dir, corpus, spec);
  SynthResult r{dir, split_for(c, corpus.volumes)};
  save_split(dir / "split.txt", r.split);
  write_snapshot(c, dir, "synth");

  std::array<std::size_t, 3> counts{};
  for (const auto& v : corpus.volumes) ++counts[static_cast<int>(case_class(v.y_app, v.y_type))];
  log << "synth: " << corpus.volumes.size() << " volumes (normal " << counts[0] << ", simple " << counts[1]
      << ", complicated " << counts[2] << "), " << corpus.aux_volumes.size() << " auxiliary volumes -> "
      << dir.string() << "\n";
  log << "split: train " << r.split.train.size() << ", val " << r.split.val.size() << ", test "
      << r.split.test.size() << ", hash " << split_hash(r.split) << "\n";
  return r;
}

TrainResult cmd_train(const Config& c, std::ostream& log) {
  const fs::path dir = out_dir(c);
  const auto data = load_dataset(c);
  write_snapshot(c, dir, "train");
  auto r = train_on(c, data, dir, log);
  log << "train: best epoch " << r.fit.best_meta.epoch << " val_auc_app=" << fmt(r.fit.best_meta.val_auc) << " -> "
      << r.checkpoint.string() << "\n";
  return r;
}

Thresholds cmd_calibrate(const Config& c, std::ostream& log) {
  const auto data = load_dataset(c);
  const auto& split = c.get("run.calibration_split");
  const auto ck = load_checkpoint(checkpoint_path(c));
  const auto t = calibrate_on(c, ck.model, data.part(split));
  const auto path = thresholds_path(c);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, thresholds_to_json(t));
  write_snapshot(c, out_dir(c), "calibrate");
  log << "calibrate (" << split << "): tau_app=" << t.tau_app << " tau_type=" << t.tau_type << " -> "
      << path.string() << "\n";
  return t;
}

MetricsReport cmd_eval(const Config& c, std::ostream& log) {
  const auto tpath = thresholds_path(c);
  if (!fs::exists(tpath)) {
    throw Error(Errc::io, "thresholds file " + tpath.string() + " not found; run `slicehier calibrate` first");
  }
  const auto t = thresholds_from_json(read_text(tpath));
  const auto data = load_dataset(c);
  const auto& split = c.get("run.split");
  const auto ck = load_checkpoint(checkpoint_path(c));
  const auto& vols = data.part(split);
  const auto scored = score_volumes(ck.model, vols, threads_from_env());
  auto report = evaluate_scores(scored, t, type_population_from(c));
  report.split = split;

  const fs::path dir = out_dir(c);
  write_snapshot(c, dir, "eval");
  write_text(dir / "metrics.json", report_to_json(report));
  if (c.get_bool("run.roc")) {
    write_text(dir / "roc_app.csv", roc_csv(roc_curve(scored.p_app, scored.y_app)));
    std::vector<double> ts;
    std::vector<int> tl;
    type_population(scored, t, report.type_population, ts, tl);
    if (report.type.auc) write_text(dir / "roc_type.csv", roc_csv(roc_curve(ts, tl)));
  }
  log << "eval (" << split << "):\n";
  print_report(log, report);
  if (!report.appendicitis.auc) {
    throw Error(Errc::undefined_metric, "appendicitis AUC undefined: " + report.appendicitis.auc_error);
  }
  if (!report.type.auc) throw Error(Errc::undefined_metric, "type AUC undefined: " + report.type.auc_error);
  return report;
}

std::vector<GradCheckResult> cmd_gradcheck(const Config& c, std::ostream& log) {
  const auto slices = c.get_int("gradcheck.slices");
  const auto dim = c.get_int("gradcheck.feature_dim");
  if (slices < 2 || slices > 4) throw Error(Errc::invalid_argument, "gradcheck.slices must lie in [2,4]");
  if (dim < 1 || dim > 3) throw Error(Errc::invalid_argument, "gradcheck.feature_dim must lie in [1,3]");
  GradCheckOptions opt;
  opt.h = c.get_double("gradcheck.h");
  opt.tolerance = c.get_double("gradcheck.tolerance");
  if (const auto& corrupt = c.get("gradcheck.corrupt"); !corrupt.empty()) {
    for (auto term : kAllLossTerms) {
      if (corrupt == to_string(term) || "L_" + corrupt == to_string(term)) opt.corrupt = term;
    }
    if (!opt.corrupt) throw Error(Errc::invalid_argument, "gradcheck.corrupt: unknown loss term '" + corrupt + "'");
  }
  const auto inst =
      make_gradcheck_instance(c.get_u64("seed"), static_cast<std::size_t>(slices), static_cast<std::size_t>(dim));

  std::vector<GradCheckResult> results;
  std::ostringstream report;
  report << "term,max_rel_error,worst_parameter,checked,status\n";
  for (auto term : kAllLossTerms) {
    results.push_back(gradient_check(inst, term, opt));
    const auto& r = results.back();
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", r.max_rel_error);
    report << to_string(term) << ',' << err << ',' << r.worst_parameter << ',' << r.checked << ','
           << (r.pass ? "PASS" : "FAIL") << '\n';
    log << (r.pass ? "PASS " : "FAIL ") << to_string(term) << " max_rel_error=" << err << " (" << r.worst_parameter
        << ", " << r.checked << " parameters)\n";
  }
  if (!c.get("run.out").empty()) {
    write_snapshot(c, out_dir(c), "gradcheck");
    write_text(out_dir(c) / "gradcheck.csv", report.str());
  }
  return results;
}

Config ablation_variant(const Config& c, const std::string& variant) {
  Config v = c;
  if (variant == "base") {
    v.set("model.hierarchical", "false");
  } else if (variant == "base+hierarchy") {
    v.set("model.hierarchical", "true");
  } else if (variant == "base+hierarchy+2D") {
    v.set("model.hierarchical", "true");
    return v;
  } else {
    throw Error(Errc::invalid_argument, "unknown ablation variant '" + variant + "'");
  }
  v.set("loss.gamma", "0");
  v.set("loss.delta", "0");
  v.set("loss.lambda", "0");
  return v;
}

std::vector<AblationRow> cmd_ablate(const Config& c, std::ostream& log) {
  const fs::path dir = out_dir(c);
  const auto data = load_dataset(c);
  write_snapshot(c, dir, "ablate");
  const auto hash = split_hash(data.split);

  std::vector<AblationRow> rows;
  for (const char* name : kAblationVariants) {
    const Config vc = ablation_variant(c, name);
    const fs::path vdir = dir / name;
    log << "variant " << name << "\n";
    write_snapshot(vc, vdir, "train");
    const auto trained = train_on(vc, data, vdir, log);
    const auto& model = trained.fit.best;
    const auto t = calibrate_on(vc, model, data.val);
    write_text(vdir / "thresholds.json", thresholds_to_json(t));
    const auto scored = score_volumes(model, data.test, threads_from_env());
    AblationRow row{name, evaluate_scores(scored, t, type_population_from(vc)), hash, trained.fit.best_meta.val_auc};
    row.report.split = "test";
    write_text(vdir / "metrics.json", report_to_json(row.report));
    print_report(log, row.report);
    rows.push_back(std::move(row));
  }
  write_text(dir / "ablation.csv", ablation_csv(rows));
  write_text(dir / "ablation.md", ablation_markdown(rows));
  log << "ablate: split hash " << hash << " -> " << (dir / "ablation.csv").string() << "\n";
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,app_auc,app_acc,app_sens,app_spec,type_auc,type_acc,type_sens,type_spec,split_hash\n";
  for (const auto& r : rows) {
    const auto& a = r.report.appendicitis;
    const auto& t = r.report.type;
    os << r.variant << ',' << fmt_opt(a.auc) << ',' << fmt_opt(a.confusion.accuracy) << ','
       << fmt_opt(a.confusion.sensitivity) << ',' << fmt_opt(a.confusion.specificity) << ',' << fmt_opt(t.auc) << ','
       << fmt_opt(t.confusion.accuracy) << ',' << fmt_opt(t.confusion.sensitivity) << ','
       << fmt_opt(t.confusion.specificity) << ',' << r.split_hash << '\n';
  }
  return os.str();
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| Variant | App AUC | App ACC | App Sens | App Spec | Type AUC | Type ACC | Type Sens | Type Spec |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto& a = r.report.appendicitis;
    const auto& t = r.report.type;
    os << "| " << r.variant << " | " << fmt_opt(a.auc) << " | " << fmt_opt(a.confusion.accuracy) << " | "
       << fmt_opt(a.confusion.sensitivity) << " | " << fmt_opt(a.confusion.specificity) << " | " << fmt_opt(t.auc)
       << " | " << fmt_opt(t.confusion.accuracy) << " | " << fmt_opt(t.confusion.sensitivity) << " | "
       << fmt_opt(t.confusion.specificity) << " |\n";
  }
  if (!rows.empty()) os << "\nSplit hash: " << rows.front().split_hash << "\n";
  return os.str();
}

namespace {

class NullBuffer : public std::streambuf {
protected:
  int overflow(int c) override { return c; }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical slice-attention appendicitis classifier: synthetic corpus, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "slicehier 1.0");

  std::string config_file;
  app.add_option("--config", config_file, "key=value configuration file")->check(CLI::ExistingFile);

  struct Alias {
    const char* flag;
    const char* key;
    const char* help;
  };
  static const Alias aliases[] = {
      {"--out", "run.out", "output directory"},
      {"--seed", "seed", "master seed"},
      {"--cases", "corpus.n_cases", "number of 3D volumes"},
      {"--mix", "corpus.class_mix", "class fractions normal,simple,complicated"},
      {"--lr", "train.lr", "initial learning rate"},
      {"--batch", "train.batch_size", "3D volumes per step"},
      {"--epochs", "train.epochs", "training epochs"},
      {"--corpus", "run.corpus", "corpus directory"},
      {"--checkpoint", "run.checkpoint", "checkpoint file"},
      {"--thresholds", "run.thresholds", "thresholds file"},
      {"--split", "run.split", "split evaluated by eval"},
      {"--target-sens-app", "eval.target_sens_app", "sensitivity target for appendicitis"},
      {"--target-sens-type", "eval.target_sens_type", "sensitivity target for complicated"},
  };
  std::map<std::string, std::string> alias_values;
  for (const auto& a : aliases) app.add_option(a.flag, alias_values[a.key], a.help)->option_text("VALUE");
  bool force = false, quiet = false, roc = false;
  app.add_flag("--force", force, "replace a non-empty synth output directory");
  app.add_flag("--quiet", quiet, "suppress progress output");
  app.add_flag("--roc", roc, "eval also writes ROC curve CSVs");
  app.footer("Any configuration key can be set as --<key> VALUE, e.g. --loss.gamma 0 or --model.feature_dim 16.\n"
             "Environment: SLICEHIER_THREADS caps worker threads (default 1).");

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "generate the synthetic corpus, auxiliary 2D set and split manifest"},
      {"train", "train a model and write checkpoint, history and config snapshot"},
      {"calibrate", "choose decision thresholds on the validation split"},
      {"eval", "evaluate a checkpoint hierarchically and write metrics JSON"},
      {"gradcheck", "compare analytic gradients with finite differences"},
      {"ablate", "train and evaluate the three ablation variants"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
  }

  // Dotted keys are pulled out before CLI11 sees them; CLI11 would read
  // `--train.lr` as an option of the `train` subcommand.
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> rest;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    const auto eq = arg.find('=');
    const std::string name = arg.substr(0, eq);
    if (name.rfind("--", 0) != 0 || name.find('.') == std::string::npos) {
      rest.push_back(arg);
      continue;
    }
    const std::string key = name.substr(2);
    if (!Config::known(key)) {
      err << "error: unknown option " << name << "\n";
      return 1;
    }
    if (eq != std::string::npos) {
      overrides.emplace_back(key, arg.substr(eq + 1));
    } else if (i + 1 < argc) {
      overrides.emplace_back(key, argv[++i]);
    } else {
      err << "error: option " << name << " needs a value\n";
      return 1;
    }
  }
  std::reverse(rest.begin(), rest.end());

  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  NullBuffer null_buffer;
  std::ostream null_stream(&null_buffer);
  try {
    Config config;
    if (!config_file.empty()) config.merge_file(config_file);
    for (const auto& [key, value] : alias_values) {
      if (!value.empty()) config.set(key, value);
    }
    if (force) config.set("run.force", "true");
    if (quiet) config.set("run.quiet", "true");
    if (roc) config.set("run.roc", "true");

    for (const auto& [key, value] : overrides) config.set(key, value);
    validate_config(config);
    CLI::App* sub = app.get_subcommands().front();

    std::ostream& log = config.get_bool("run.quiet") ? null_stream : out;
    const std::string name = sub->get_name();
    if (name == "synth") {
      cmd_synth(config, log);
    } else if (name == "train") {
      cmd_train(config, log);
    } else if (name == "calibrate") {
      cmd_calibrate(config, log);
    } else if (name == "eval") {
      cmd_eval(config, log);
    } else if (name == "gradcheck") {
      const auto results = cmd_gradcheck(config, log);
      for (const auto& r : results) {
        if (!r.pass) {
          err << "error: gradient check failed for " << to_string(r.term) << " (max relative error " << r.max_rel_error
              << " at " << r.worst_parameter << ")\n";
          return 2;
        }
      }
    } else if (name == "ablate") {
      cmd_ablate(config, log);
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == Errc::invalid_argument ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace slicehier
