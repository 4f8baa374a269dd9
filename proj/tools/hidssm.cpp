// hidssm command-line tool: synth, train, eval, check, export-delta, export-mixer.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hidssm/hidssm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4, kPropertyFailure = 5 };

struct UsageError : hidssm::Error {
  using Error::Error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  hidssm::write_file_bytes(path, text);
}

void stamp(const fs::path& dir, const std::string& command, json config) {
  json j = {{"command", command}};
  j["config"] = std::move(config);
  write_text(dir / "run_config.json", j.dump(2) + "\n");
}

json to_json(const hidssm::LayerStackConfig& c) {
  return {{"n_global", c.n_global}, {"n_local", c.n_local},     {"n_ppn", c.n_ppn},
          {"d_model", c.d_model},   {"state_dim", c.state_dim}, {"n_phases", c.n_phases},
          {"causal", c.causal},     {"min_segment", c.min_segment}};
}

// Output goes to a file when a path is given, otherwise to stdout.
void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
  } else {
    write_text(out, text);
  }
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  std::size_t n = 20;
  std::size_t n_eval = 0;
  std::size_t t = 100;
  std::size_t d = 16;
  std::size_t phases = 7;
  double noise = 1.0;
  double drift = 1.0;
  double scale = 4.0;
  bool interleaved = false;
  std::uint64_t seed = 1;
  std::string out = "data";
};

void write_split(const fs::path& dir, const std::string& prefix, const std::vector<hidssm::FeatureSequence>& seqs,
                 const std::string& manifest_name) {
  json files = json::array();
  char name[64];
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::snprintf(name, sizeof name, "%s_%03zu.feat", prefix.c_str(), i);
    hidssm::save_features(seqs[i], dir / name);
    files.push_back(name);
  }
  json m = {{"format", hidssm::kManifestFormat}, {"version", 1}, {"files", files}};
  write_text(dir / manifest_name, m.dump(2) + "\n");
}

int cmd_synth(const SynthArgs& a) {
  hidssm::SyntheticSpec spec;
  spec.n_sequences = a.n;
  spec.t_min = spec.t_max = a.t;
  spec.channels = a.d;
  spec.n_phases = a.phases;
  spec.noise_std = a.noise;
  spec.drift = a.drift;
  spec.prototype_scale = a.scale;
  spec.monotone = !a.interleaved;
  spec.seed = a.seed;
  try {
    spec.validate();
  } catch (const hidssm::SpecError& e) {
    throw UsageError(e.what());
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_split(dir, "train", hidssm::synth_generate(spec).sequences, "manifest.json");
  if (a.n_eval > 0) {
    spec.n_sequences = a.n_eval;
    write_split(dir, "eval", hidssm::synth_generate(spec, a.n).sequences, "eval_manifest.json");
    spec.n_sequences = a.n;
  }
  stamp(dir, "synth",
        {{"n", a.n},
         {"n_eval", a.n_eval},
         {"t", a.t},
         {"d", a.d},
         {"phases", a.phases},
         {"prototype_scale", spec.prototype_scale},
         {"noise_std", spec.noise_std},
         {"drift", spec.drift},
         {"min_run", spec.min_run},
         {"max_run", spec.max_run},
         {"monotone", spec.monotone},
         {"seed", a.seed}});
  std::printf("wrote %zu train and %zu eval sequences to %s\n", a.n, a.n_eval, dir.string().c_str());
  return kOk;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string val;
  std::size_t epochs = 20;
  double lr = 2e-4;
  double alpha = hidssm::kDefaultAlpha;
  bool contextual = false;
  std::optional<std::size_t> global_layers;
  std::size_t local_layers = 1;
  std::size_t ppn_layers = 3;
  std::size_t state_dim = 8;
  std::size_t min_segment = 3;
  std::uint64_t seed = 1;
  std::string out = "run";
};

int cmd_train(const TrainArgs& a) {
  if (!(a.alpha >= 0.0 && a.alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
  if (!(a.lr > 0.0)) throw UsageError("--lr must be positive");
  const auto train_set = hidssm::load_manifest(a.data);
  std::vector<hidssm::FeatureSequence> val_set;
  if (!a.val.empty()) val_set = hidssm::load_manifest(a.val);

  hidssm::LayerStackConfig cfg;
  cfg.causal = !a.contextual;
  cfg.n_global = a.global_layers.value_or(cfg.causal ? 4 : 5);
  cfg.n_local = a.local_layers;
  cfg.n_ppn = a.ppn_layers;
  cfg.state_dim = a.state_dim;
  cfg.min_segment = a.min_segment;
  cfg.d_model = train_set.front().channels;
  cfg.n_phases = train_set.front().n_phases;
  auto check_set = [&](const std::vector<hidssm::FeatureSequence>& set) {
    for (const auto& s : set)
      if (s.channels != cfg.d_model || s.n_phases != cfg.n_phases || !s.has_labels())
        throw hidssm::InputError("all sequences need labels and the same feature width and phase count");
  };
  check_set(train_set);
  check_set(val_set);
  try {
    cfg.validate();
  } catch (const hidssm::ConfigError& e) {
    throw UsageError(e.what());
  }

  hidssm::TrainOptions opt;
  opt.epochs = a.epochs;
  opt.adam.lr = a.lr;
  opt.alpha = a.alpha;
  opt.seed = a.seed;

  auto model = hidssm::HidSsmModel::create(cfg, a.seed);
  const auto examples = hidssm::to_examples(train_set);
  hidssm::ValidationHook validate;
  if (!val_set.empty())
    validate = [&](const hidssm::HidSsmModel& m) -> std::optional<double> {
      return hidssm::evaluate_model(m, val_set).accuracy.mean;
    };

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::string log = "epoch,loss,ce,mse,ppn_ce,val_relaxed_accuracy\n";
  auto on_epoch = [&](const hidssm::EpochRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,", r.epoch, r.loss.objective(), r.loss.ce, r.loss.mse,
                  r.loss.ppn_ce);
    log += buf;
    if (r.validation) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.validation);
      log += buf;
    }
    log += "\n";
    std::printf("epoch %3zu  loss %.6f  ce %.6f  mse %.6f  ppn_ce %.6f", r.epoch, r.loss.objective(), r.loss.ce,
                r.loss.mse, r.loss.ppn_ce);
    if (r.validation) std::printf("  val_acc %.4f", *r.validation);
    std::printf("\n");
    std::fflush(stdout);
  };
  const auto report = hidssm::train(model, examples, opt, validate, on_epoch);

  write_text(dir / "train_log.csv", log);
  hidssm::save_checkpoint(model, dir / "model.ckpt");
  stamp(dir, "train",
        {{"data", a.data},
         {"val", a.val},
         {"model", to_json(cfg)},
         {"epochs", a.epochs},
         {"lr", a.lr},
         {"beta1", opt.adam.beta1},
         {"beta2", opt.adam.beta2},
         {"eps", opt.adam.eps},
         {"alpha", a.alpha},
         {"ppn_loss_weight", hidssm::kPpnLossWeight},
         {"seed", a.seed},
         {"parameters", hidssm::param_count(model.params)}});
  if (report.status == hidssm::TrainStatus::diverged) {
    std::fprintf(stderr, "training diverged: %s\n", report.message.c_str());
    return kNumerical;
  }
  std::printf("trained %zu steps; checkpoint %s\n", report.steps, (dir / "model.ckpt").string().c_str());
  return kOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::size_t window = hidssm::kDefaultBoundaryWindow;
  bool unrelaxed = false;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const auto model = hidssm::load_checkpoint(a.checkpoint);
  const auto videos = hidssm::load_manifest(a.data);
  const std::size_t window = a.unrelaxed ? 0 : a.window;
  const auto report = hidssm::evaluate_model(model, videos, window);
  std::printf("%s", hidssm::format_table(report).c_str());
  if (!a.out.empty()) {
    const fs::path path(a.out);
    write_text(path, hidssm::to_json(report).dump(2) + "\n");
    stamp(path.has_parent_path() ? path.parent_path() : fs::path("."), "eval",
          {{"checkpoint", a.checkpoint}, {"data", a.data}, {"boundary_window", window}, {"report", a.out}});
  }
  return kOk;
}

// ---- check -------------------------------------------------------------------

struct CheckArgs {
  std::size_t trials = 100;
  std::uint64_t seed = 7;
  std::string inject_fault;
  std::string out;
};

int cmd_check(const CheckArgs& a) {
  hidssm::CheckOptions opt{a.trials, a.seed, a.inject_fault};
  const auto results = hidssm::run_checks(opt);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::printf("%-4s %-22s max_error %.3e  tol %.1e  trials %zu\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.max_error, r.tolerance, r.trials);
    if (!r.passed) failed.push_back(r.name);
  }
  if (!a.out.empty()) write_text(a.out, hidssm::to_json(results).dump(2) + "\n");
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    std::fprintf(stderr, "failed properties: %s\n", names.c_str());
    return kPropertyFailure;
  }
  return kOk;
}

// ---- exports -----------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::vector<std::size_t> rows;
  std::string out;
};

hidssm::Mat load_input(const hidssm::HidSsmModel& model, const std::string& path) {
  const auto seq = hidssm::load_features(path);
  if (seq.channels != model.cfg.d_model)
    throw hidssm::InputError("feature width " + std::to_string(seq.channels) + " does not match the model (" +
                             std::to_string(model.cfg.d_model) + ")");
  return seq.to_mat();
}

int cmd_export_delta(const ExportArgs& a) {
  const auto model = hidssm::load_checkpoint(a.checkpoint);
  const auto out = hidssm::forward(model, load_input(model, a.data));
  emit(a.out, hidssm::delta_csv(hidssm::delta_export_rows(out)));
  return kOk;
}

int cmd_export_mixer(const ExportArgs& a) {
  const auto model = hidssm::load_checkpoint(a.checkpoint);
  const auto u = load_input(model, a.data);
  std::vector<std::size_t> rows = a.rows;
  if (rows.empty())
    for (std::size_t t = 0; t < u.rows(); ++t) rows.push_back(t);
  for (std::size_t t : rows)
    if (t >= u.rows()) throw UsageError("--rows: timestep " + std::to_string(t) + " out of range");
  emit(a.out, hidssm::mixer_csv(hidssm::mixer_export_rows(model, u, rows)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical input-dependent state space models for phase recognition"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phase-labeled dataset");
  synth->add_option("--n", sa.n, "Training sequences")->check(CLI::PositiveNumber);
  synth->add_option("--n-eval", sa.n_eval, "Evaluation sequences (same prototypes)");
  synth->add_option("--t", sa.t, "Frames per sequence")->check(CLI::PositiveNumber);
  synth->add_option("--d", sa.d, "Feature width")->check(CLI::PositiveNumber);
  synth->add_option("--phases", sa.phases, "Number of phases")->check(CLI::Range(1, 255));
  synth->add_option("--noise", sa.noise, "Per-frame noise std")->check(CLI::NonNegativeNumber);
  synth->add_option("--drift", sa.drift, "Within-run drift half-range");
  synth->add_option("--prototype-scale", sa.scale, "Prototype coordinate std")->check(CLI::NonNegativeNumber);
  synth->add_flag("--interleaved", sa.interleaved, "Random phase order instead of 0..N-1");
  synth->add_option("--seed", sa.seed, "Generator seed");
  synth->add_option("--out", sa.out, "Output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", ta.data, "Training manifest")->required();
  train->add_option("--val", ta.val, "Validation manifest");
  train->add_option("--epochs", ta.epochs, "Epochs");
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--alpha", ta.alpha, "Classification weight of the hybrid loss");
  auto* causal_flag = train->add_flag("--causal", "Online model (default)");
  train->add_flag("--contextual", ta.contextual, "Bidirectional model")->excludes(causal_flag);
  train->add_option("--global-layers", ta.global_layers, "GR-SSM depth (default 4 causal, 5 contextual)")
      ->check(CLI::PositiveNumber);
  train->add_option("--local-layers", ta.local_layers, "LA-SSM depth")->check(CLI::PositiveNumber);
  train->add_option("--ppn-layers", ta.ppn_layers, "PPN depth")->check(CLI::PositiveNumber);
  train->add_option("--state-dim", ta.state_dim, "SSM state size")->check(CLI::PositiveNumber);
  train->add_option("--min-segment", ta.min_segment, "Shortest pseudo-phase")->check(CLI::PositiveNumber);
  train->add_option("--seed", ta.seed, "Initialization and shuffling seed");
  train->add_option("--out", ta.out, "Output directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", ea.data, "Manifest")->required();
  eval->add_option("--window", ea.window, "Boundary window in frames");
  eval->add_flag("--unrelaxed", ea.unrelaxed, "Disable boundary relaxation");
  eval->add_option("--out", ea.out, "JSON report path");

  CheckArgs ca;
  auto* check = app.add_subcommand("check", "Run numerical self-checks");
  check->add_option("--trials", ca.trials, "Random instances per check")->check(CLI::PositiveNumber);
  check->add_option("--seed", ca.seed, "Seed");
  check->add_option("--inject-fault", ca.inject_fault, "Force the named check to fail (test hook)");
  check->add_option("--out", ca.out, "JSON results path");

  ExportArgs da;
  auto* export_delta = app.add_subcommand("export-delta", "Per-layer timescale traces as CSV");
  export_delta->add_option("--checkpoint", da.checkpoint, "Model checkpoint")->required();
  export_delta->add_option("--data", da.data, "Feature file")->required();
  export_delta->add_option("--out", da.out, "CSV path (default stdout)");

  ExportArgs ma;
  auto* export_mixer = app.add_subcommand("export-mixer", "Rows of the last GR-SSM mixer as CSV");
  export_mixer->add_option("--checkpoint", ma.checkpoint, "Model checkpoint")->required();
  export_mixer->add_option("--data", ma.data, "Feature file")->required();
  export_mixer->add_option("--rows", ma.rows, "Timesteps (default all)")->delimiter(',');
  export_mixer->add_option("--out", ma.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*check) return cmd_check(ca);
    if (*export_delta) return cmd_export_delta(da);
    if (*export_mixer) return cmd_export_mixer(ma);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const hidssm::ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const hidssm::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const hidssm::Error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
