// flowfit command-line workbench.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "flowfit/config.hpp"
#include "flowfit/evaluation.hpp"

#ifndef FLOWFIT_VERSION
#define FLOWFIT_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace flowfit;

namespace {

struct Options {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string out;
  bool force = false;
};

class Run {
 public:
  Run(const std::string& command, const Options& o) : command_(command), out_(o.out) {
    if (!o.config_file.empty()) load_config_file(cfg_, o.config_file);
    for (const auto& s : o.overrides) apply_override(cfg_, s);
    if (o.seed) cfg_.seed = *o.seed;
    cfg_.resolve();
    if (const char* env = std::getenv("FLOWFIT_NUM_WORKERS"); env && *env) {
      cfg_.train.workers = std::min(cfg_.train.workers, default_workers());
    }
    cfg_.validate();
    prepare_output(o.force);
    std::ofstream(out_ / "config.ini") << config_text();
    std::ofstream run(out_ / "run.txt");
    run << "command=" << command_ << "\nversion=" << FLOWFIT_VERSION << "\nseed=" << cfg_.seed << "\n";
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const fs::path& out() const { return out_; }

  MeshTemplate body_template() const {
    return cfg_.paths.template_file.empty() ? build_toy_template() : load_template(cfg_.paths.template_file);
  }

  Dataset dataset() const {
    if (cfg_.paths.dataset.empty()) throw ConfigError("paths.dataset is not set (use --set paths.dataset=DIR)");
    Dataset ds = load_dataset(cfg_.paths.dataset);
    if (ds.size.height != cfg_.model.input.height || ds.size.width != cfg_.model.input.width) {
      throw ConfigError("dataset images are " + std::to_string(ds.size.width) + "x" + std::to_string(ds.size.height) +
                        " but the model expects data.width x data.height = " + std::to_string(cfg_.model.input.width) +
                        "x" + std::to_string(cfg_.model.input.height));
    }
    return ds;
  }

  Model<float> checkpoint() const {
    if (cfg_.paths.checkpoint.empty()) throw ConfigError("paths.checkpoint is not set (use --set paths.checkpoint=FILE)");
    if (!fs::exists(cfg_.paths.checkpoint)) throw Error("checkpoint " + cfg_.paths.checkpoint + " does not exist");
    return load_model<float>(cfg_.paths.checkpoint);
  }

  void save(Model<float> m) const {
    m.metadata["command"] = command_;
    m.metadata["version"] = FLOWFIT_VERSION;
    m.metadata["seed"] = cfg_.seed;
    m.metadata["config"] = config_text();
    save_model(m, (out_ / "model.ffck").string());
  }

  void metrics(const std::string& text) const {
    std::ofstream os(out_ / "metrics.txt");
    os << text;
    if (!os) throw Error("failed writing metrics.txt");
    std::cout << text;
  }

  std::string config_text() const {
    std::ostringstream os;
    write_config(cfg_, os);
    return os.str();
  }

 private:
  void prepare_output(bool force) {
    if (out_.empty()) throw ConfigError("--out is required");
    if (fs::exists(out_) && !fs::is_empty(out_)) {
      if (!force) throw ConfigError("output directory " + out_.string() + " is not empty (use --force)");
    }
    fs::create_directories(out_);
  }

  std::string command_;
  fs::path out_;
  ExperimentConfig cfg_;
};

std::string prefixed(const std::string& prefix, const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) out += prefix + line + "\n";
  return out;
}

template <typename R>
std::string report_text(const R& r) {
  std::ostringstream os;
  r.write(os);
  return os.str();
}

void write_log(const fs::path& path, const std::vector<StepLog>& steps) {
  std::ofstream os(path);
  os << std::setprecision(10) << "step,total,sup,of,keypoints,anchor,smooth,pairs_used,pairs_skipped\n";
  for (const auto& s : steps) {
    os << s.step << "," << s.total << "," << s.sup << "," << s.of << "," << s.keypoints << "," << s.anchor << ","
       << s.smooth << "," << s.pairs_used << "," << s.pairs_skipped << "\n";
  }
}

void plot_losses(const Run& run, const std::vector<StepLog>& steps) {
  if (!run.cfg().eval.plots || steps.empty()) return;
  std::vector<double> total, of;
  for (const auto& s : steps) {
    total.push_back(s.total);
    if (s.pairs_used > 0) of.push_back(s.of);
  }
  std::ofstream curves(run.out() / "loss_curve.svg");
  write_svg_curves(curves, {total}, {"total"}, "training loss");
  if (!of.empty()) {
    std::ofstream hist(run.out() / "flow_loss_hist.svg");
    write_svg_histogram(hist, of, 30, "flow loss per step");
  }
}

std::string final_loss_text(const std::vector<StepLog>& steps) {
  if (steps.empty()) return "";
  const size_t n = std::max<size_t>(1, steps.size() / 10);
  double total = 0, of = 0;
  for (size_t k = steps.size() - n; k < steps.size(); ++k) {
    total += steps[k].total / n;
    of += steps[k].of / n;
  }
  std::ostringstream os;
  os << std::setprecision(10) << "train.final_loss=" << total << "\ntrain.final_of=" << of << "\n";
  return os.str();
}

void plot_accel(const Run& run, const MeshTemplate& tpl, const Dataset& ds,
                const std::vector<std::pair<std::string, std::vector<BodyParams<double>>>>& preds, const Sequence& q) {
  if (!run.cfg().eval.plots) return;
  const auto gt = ground_truth_trajectory(ds, q);
  std::vector<Points3<double>> jg;
  for (const auto& p : gt) jg.push_back(joints_mm(tpl, p));
  std::vector<std::vector<double>> curves;
  std::vector<std::string> labels;
  for (const auto& [label, pred] : preds) {
    std::vector<Points3<double>> jp;
    for (const auto& p : pred) jp.push_back(joints_mm(tpl, p));
    curves.push_back(acceleration_error_curve(jp, jg, ds.fps));
    labels.push_back(label);
  }
  std::ofstream os(run.out() / ("accel_seq_" + std::to_string(q.id) + ".svg"));
  write_svg_curves(os, curves, labels, "acceleration error per frame, sequence " + std::to_string(q.id));
}

void cmd_synth_gen(Run& run) {
  const auto tpl = run.body_template();
  const Dataset ds = generate_dataset(tpl, run.cfg().data);
  save_dataset(ds, run.out().string());
  long frames = 0, labeled = 0, pairs = 0;
  for (const auto& q : ds.sequences) {
    frames += q.length();
    pairs += q.length() - 1;
    for (auto l : q.labeled) labeled += l;
  }
  std::ostringstream os;
  os << "sequences=" << ds.sequences.size() << "\ntrain_sequences=" << ds.split(Split::kTrain).size()
     << "\ntest_sequences=" << ds.split(Split::kTest).size() << "\nframes=" << frames << "\npairs=" << pairs
     << "\nlabeled_frames=" << labeled << "\n";
  run.metrics(os.str());
}

void cmd_pretrain(Run& run) {
  const auto tpl = run.body_template();
  const Dataset ds = run.dataset();
  TrainLog log;
  // A checkpoint path continues training from those weights.
  std::optional<Model<float>> init;
  if (!run.cfg().paths.checkpoint.empty()) init = run.checkpoint();
  const auto model = pretrain_baseline(tpl, ds, run.cfg().train, run.cfg().model, &log, init ? &*init : nullptr);
  run.save(model);
  write_log(run.out() / "train_log.csv", log.steps);
  plot_losses(run, log.steps);
  run.metrics(final_loss_text(log.steps) + report_text(evaluate_model(tpl, model, ds, run.cfg().eval.split)));
}

template <typename Refine>
void refine_command(Run& run, Refine&& refine) {
  const auto tpl = run.body_template();
  const Dataset ds = run.dataset();
  const auto baseline = run.checkpoint();
  TrainLog log;
  const auto model = refine(tpl, baseline, ds, &log);
  run.save(model);
  write_log(run.out() / "train_log.csv", log.steps);
  plot_losses(run, log.steps);
  const Split split = run.cfg().eval.split;
  run.metrics(final_loss_text(log.steps) + "train.skipped_pairs=" + std::to_string(log.skipped_pairs) + "\n" +
              prefixed("baseline.", report_text(evaluate_model(tpl, baseline, ds, split))) +
              report_text(evaluate_model(tpl, model, ds, split)));
}

void cmd_optimize_seq(Run& run) {
  const auto tpl = run.body_template();
  const Dataset ds = run.dataset();
  const auto model = run.checkpoint();
  std::vector<std::vector<BodyParams<double>>> initial, optimized, gt;
  std::vector<int> ids;
  fs::create_directories(run.out() / "trajectories");
  for (const Sequence* q : ds.split(run.cfg().eval.split)) {
    initial.push_back(predict_sequence(model, *q));
    SequenceLog log;
    std::vector<const FlowMap*> fwd, bwd;
    for (const auto& f : q->flow_fwd) fwd.push_back(&f);
    for (const auto& f : q->flow_bwd) bwd.push_back(&f);
    optimized.push_back(optimize_sequence(tpl, initial.back(), fwd, bwd, run.cfg().train, &log));
    gt.push_back(ground_truth_trajectory(ds, *q));
    ids.push_back(q->id);
    write_log(run.out() / ("sequence_log_" + std::to_string(q->id) + ".csv"), log.steps);
    std::ofstream traj(run.out() / "trajectories" / ("seq_" + std::to_string(q->id) + ".txt"));
    for (const auto& p : optimized.back()) {
      const VecX<double> v = p.flat();
      for (int k = 0; k < v.size(); ++k) traj << (k ? " " : "") << detail::format_double(v[k]);
      traj << "\n";
    }
    plot_accel(run, tpl, ds, {{"initial", initial.back()}, {"optimized", optimized.back()}}, *q);
  }
  if (ids.empty()) throw ConfigError("no sequences in the evaluation split");
  run.metrics(prefixed("baseline.", report_text(evaluate_trajectories(tpl, initial, gt, ids, ds.fps))) +
              report_text(evaluate_trajectories(tpl, optimized, gt, ids, ds.fps)));
}

void cmd_eval(Run& run) {
  const auto tpl = run.body_template();
  const Dataset ds = run.dataset();
  const auto model = run.checkpoint();
  const auto report = evaluate_model(tpl, model, ds, run.cfg().eval.split);
  if (run.cfg().eval.plots) {
    for (const Sequence* q : ds.split(run.cfg().eval.split)) plot_accel(run, tpl, ds, {{"model", predict_sequence(model, *q)}}, *q);
  }
  run.metrics(report_text(report));
}

void cmd_flow_audit(Run& run) {
  const auto tpl = run.body_template();
  const Dataset ds = run.dataset();
  const auto model = run.checkpoint();
  const auto& e = run.cfg().eval;
  std::string text;
  std::vector<double> means;
  for (int dt : e.delta_t) {
    const auto r = flow_quality_audit(tpl, model, ds, dt, e.oracle, e.split, e.stride);
    text += prefixed("delta_t." + std::to_string(dt) + ".", report_text(r));
    means.push_back(r.ratio_mean);
  }
  if (e.plots) {
    std::ofstream os(run.out() / "ratio_vs_delta_t.svg");
    write_svg_curves(os, {means}, {"ratio_mean"}, "d_B / d_OF against delta_t index");
  }
  run.metrics(text);
}

void cmd_make_template(Run& run) {
  save_template(build_toy_template(), (run.out() / "toy_humanoid.fftm").string());
  run.metrics("template=toy_humanoid.fftm\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowfit: body-model regression with optical-flow supervision"};
  app.set_version_flag("--version", std::string(FLOWFIT_VERSION));
  app.require_subcommand(1);
  Options opts;
  std::optional<std::function<void(Run&)>> action;
  std::string name;

  auto add = [&](const std::string& cmd, const std::string& help, std::function<void(Run&)> fn) {
    CLI::App* sub = app.add_subcommand(cmd, help);
    sub->add_option("--config", opts.config_file, "Config file (key = value lines, [section] headers)")->check(CLI::ExistingFile);
    sub->add_option("--set", opts.overrides, "Override a config key: --set train.lambda_of=0.01")->take_all();
    sub->add_option("--seed", opts.seed, "Global seed");
    sub->add_option("--out", opts.out, "Output directory")->required();
    sub->add_flag("--force", opts.force, "Replace a non-empty output directory");
    sub->callback([&, cmd, fn] {
      name = cmd;
      action = fn;
    });
  };
  add("synth-gen", "Generate a synthetic video archive", cmd_synth_gen);
  add("pretrain", "Supervised baseline training", cmd_pretrain);
  add("refine", "Refine a checkpoint with flow supervision on unlabeled pairs", [](Run& run) {
    refine_command(run, [&](const MeshTemplate& tpl, const Model<float>& base, const Dataset& ds, TrainLog* log) {
      return refine_with_flow(tpl, base, ds, run.cfg().train, log);
    });
  });
  add("refine-unsup", "Unsupervised refinement anchored to the checkpoint's predictions", [](Run& run) {
    refine_command(run, [&](const MeshTemplate& tpl, const Model<float>& base, const Dataset& ds, TrainLog* log) {
      return refine_anchored_unsupervised(tpl, base, ds, run.cfg().train, log);
    });
  });
  add("optimize-seq", "Optimize each sequence's trajectory directly", cmd_optimize_seq);
  add("eval", "P-MPJPE and acceleration error of a checkpoint", cmd_eval);
  add("flow-audit", "Compare flow-propagated and predicted keypoint motion", cmd_flow_audit);
  add("make-template", "Write the built-in toy body template", cmd_make_template);

  CLI11_PARSE(app, argc, argv);
  std::unique_ptr<Run> run;
  try {
    run = std::make_unique<Run>(name, opts);
    (*action)(*run);
    return 0;
  } catch (const TrainingError& e) {
    std::cerr << "flowfit " << name << ": " << e.what() << "\n";
    if (run) std::ofstream(run->out() / "nan_dump.txt") << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "flowfit " << name << ": configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "flowfit " << name << ": " << e.what() << "\n";
    return 1;
  }
}
