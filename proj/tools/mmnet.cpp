#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmnet/data.hpp"
#include "mmnet/diagnostics.hpp"
#include "mmnet/eval.hpp"
#include "mmnet/model.hpp"
#include "mmnet/parallel.hpp"
#include "mmnet/train.hpp"

namespace fs = std::filesystem;
using namespace mmnet;

namespace {

constexpr int kOk = 0, kUsage = 1, kRuntime = 2;

// Thrown for bad user input discovered after CLI11 has accepted the flags.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("MULTIMOD_SEED");
  if (!raw) return std::nullopt;
  KeyValues one;
  one.set("MULTIMOD_SEED", raw);
  try {
    return one.number<std::uint64_t>("MULTIMOD_SEED");
  } catch (const ConfigError&) {
    throw UsageError(std::string("MULTIMOD_SEED must be a non-negative integer, got '") + raw + "'");
  }
}

bool is_within(const fs::path& inner, const fs::path& outer) {
  const auto a = fs::weakly_canonical(inner), b = fs::weakly_canonical(outer);
  auto ai = a.begin();
  for (auto bi = b.begin(); bi != b.end(); ++bi, ++ai) {
    if (bi->empty()) continue;  // trailing separator
    if (ai == a.end() || *ai != *bi) return false;
  }
  return true;
}

void guard_output(const fs::path& out, const std::vector<fs::path>& inputs) {
  for (const auto& in : inputs) {
    if (!in.empty() && is_within(out, in)) {
      throw UsageError("output directory " + out.string() + " lies inside input directory " + in.string());
    }
  }
}

// Everything needed to rerun a command: the command line, the thread count,
// the seed in effect and the fully resolved configuration text.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  int threads = 1;
  std::string seed = "none";
  std::string resolved;

  std::string text() const {
    std::ostringstream os;
    os << "command=" << command << "\nargv=";
    for (std::size_t i = 0; i < argv.size(); ++i) os << (i ? " " : "") << argv[i];
    os << "\nthreads=" << threads << "\nseed=" << seed << "\n";
    if (const char* env = std::getenv("MULTIMOD_SEED")) os << "env.MULTIMOD_SEED=" << env << "\n";
    if (!resolved.empty()) os << "[resolved]\n" << resolved;
    return os.str();
  }

  // With an output directory the manifest is a file; otherwise it heads stdout as comments.
  void emit(const fs::path& out_dir) const {
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      std::ofstream(out_dir / "run_manifest.txt") << text();
      return;
    }
    std::istringstream in(text());
    for (std::string line; std::getline(in, line);) std::cout << "# " << line << "\n";
  }
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Sample> samples;
};

Dataset load_for_model(const fs::path& root, const std::string& split, const ModelConfig& model) {
  Dataset d;
  d.meta = load_meta(root);
  if (d.meta.num_classes != model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(d.meta.num_classes) + " classes, model expects " +
                      std::to_string(model.num_classes));
  }
  d.samples = select_modalities(load_split(root, split, d.meta), modality_indices(model, d.meta));
  return d;
}

std::vector<Tensor<float>> load_sample_inputs(const fs::path& dir, const ModelConfig& cfg) {
  std::vector<Tensor<float>> xs;
  for (const auto& m : cfg.modalities) {
    fs::path found;
    for (const char* ext : {".ten", ".ppm", ".pgm"}) {
      const auto p = dir / ("mod-" + m.name + ext);
      if (fs::exists(p)) {
        found = p;
        break;
      }
    }
    if (found.empty()) throw UsageError("no raster mod-" + m.name + ".{ten,ppm,pgm} in " + dir.string());
    auto r = load_raster(found);
    if (r.dim(0) != m.encoder.in_channels) {
      throw UsageError(found.string() + " has " + std::to_string(r.dim(0)) + " channels, model expects " +
                       std::to_string(m.encoder.in_channels));
    }
    xs.emplace_back(Shape{1, r.dim(0), r.dim(1), r.dim(2)}, r.values());
  }
  for (const auto& x : xs) {
    if (x.dim(2) != xs[0].dim(2) || x.dim(3) != xs[0].dim(3)) throw UsageError("modality rasters differ in size");
  }
  return xs;
}

std::string metrics_row(const std::string& name, const Metrics& m) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << name << "," << m.oa << "," << m.mf1 << "," << m.miou;
  return os.str();
}

struct PredictFlags {
  bool tta = false;
  std::size_t window = 0, stride = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_flag("--tta", tta, "Average probabilities over horizontal/vertical flips");
    auto* w = cmd->add_option("--window", window, "Sliding-window size in pixels (0 = whole image)");
    cmd->add_option("--stride", stride, "Sliding-window stride (default: window)")->needs(w);
  }
  PredictOptions options() const { return {tta, window, stride}; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmnet: multi-modal semantic segmentation toolkit"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (1 keeps runs bitwise reproducible)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  // synth
  fs::path synth_spec, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate the height-confounded synthetic dataset");
  synth->add_option("--spec", synth_spec, "Generator spec (key=value); defaults are used when omitted")
      ->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Dataset directory to create")->required();

  // train
  fs::path train_config, train_data, train_out, train_resume;
  auto* trn = app.add_subcommand("train", "Train a model on a dataset directory");
  trn->add_option("--config", train_config, "Model and training keys (key=value)")->required()->check(CLI::ExistingFile);
  trn->add_option("--data", train_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--out", train_out, "Run directory (log.csv, best/, last/)")->required();
  trn->add_option("--resume", train_resume, "Resume from a previous run's last/ directory")
      ->check(CLI::ExistingDirectory);

  // eval
  fs::path eval_ckpt, eval_data, eval_out;
  std::string eval_split = "val";
  PredictFlags eval_pred;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", eval_split, "Split to evaluate")->capture_default_str();
  ev->add_option("--out", eval_out, "Report directory (metrics.csv, run_manifest.txt)");
  eval_pred.add_to(ev);

  // infer
  fs::path infer_ckpt, infer_input, infer_out;
  PredictFlags infer_pred;
  auto* inf = app.add_subcommand("infer", "Predict one sample directory of mod-<name> rasters");
  inf->add_option("--checkpoint", infer_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--input", infer_input, "Sample directory")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--out", infer_out, "Output directory (pred.pgm, pred.ppm, probs.ten)")->required();
  infer_pred.add_to(inf);

  // gradcheck
  std::string gc_module = "all";
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient audit (double precision)");
  gc->add_option("--module", gc_module, "ops | paf | gfu | model | all")
      ->check(CLI::IsMember({"ops", "paf", "gfu", "model", "all"}))
      ->capture_default_str();

  // robustness
  fs::path rb_ckpt, rb_data, rb_out;
  std::string rb_kind, rb_modality, rb_split = "val";
  std::uint64_t rb_seed = 1;
  auto* rb = app.add_subcommand("robustness", "Evaluate with one modality corrupted at test time");
  rb->add_option("--checkpoint", rb_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  rb->add_option("--data", rb_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  rb->add_option("--kind", rb_kind, "missing | noise | interfered")
      ->required()
      ->check(CLI::IsMember({"missing", "noise", "interfered", "missing_zero", "white_noise", "interfered_max"}));
  rb->add_option("--modality", rb_modality, "Name of the modality to corrupt")->required();
  rb->add_option("--split", rb_split, "Split to evaluate")->capture_default_str();
  rb->add_option("--seed", rb_seed, "Noise seed (MULTIMOD_SEED overrides)")->capture_default_str();
  rb->add_option("--out", rb_out, "Report directory (robustness.csv, run_manifest.txt)");

  // heatmap
  fs::path hm_ckpt, hm_input, hm_out;
  std::size_t hm_gate = 0;
  auto* hm = app.add_subcommand("heatmap", "Export the channel-mean GFU gate as a PGM image");
  hm->add_option("--checkpoint", hm_ckpt, "Checkpoint directory (gated fusion)")->required()->check(CLI::ExistingDirectory);
  hm->add_option("--input", hm_input, "Sample directory")->required()->check(CLI::ExistingDirectory);
  hm->add_option("--out", hm_out, "Output directory (gate-<k>.pgm)")->required();
  hm->add_option("--gate", hm_gate, "Which GFU gate to export (0 = fusion into the second modality)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    std::cerr << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  RunManifest manifest;
  manifest.argv.assign(argv, argv + argc);
  manifest.threads = threads;
  set_num_threads(threads);

  CLI::App* cmd = app.get_subcommands().front();
  manifest.command = cmd->get_name();
  try {
    const auto seed_override = env_seed();

    if (cmd == synth) {
      auto kv = synth_spec.empty() ? KeyValues{} : KeyValues::load(synth_spec);
      auto spec = SynthSpec::from(kv);
      kv.require_all_used();
      if (seed_override) spec.seed = *seed_override;
      spec.validate();
      if (!synth_spec.empty()) guard_output(synth_out, {synth_spec.parent_path()});
      const auto ds = synth_generate(spec);
      const auto meta = spec.meta();
      save_meta(meta, synth_out);
      save_split(ds.train, meta, synth_out, "train");
      save_split(ds.val, meta, synth_out, "val");
      if (!ds.test.empty()) save_split(ds.test, meta, synth_out, "test");
      manifest.seed = std::to_string(spec.seed);
      manifest.resolved = spec.to_string();
      manifest.emit(synth_out);
      std::cout << "wrote " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size()
                << " test samples to " << synth_out.string() << "\n";
      const auto ceiling = unimodal_ceiling(ds.val, meta);
      std::cout << "unimodal colour-only ceiling on val: mIoU " << ceiling.miou << ", pixel accuracy "
                << ceiling.pixel_accuracy << "\n";

    } else if (cmd == trn) {
      auto kv = KeyValues::load(train_config);
      if (seed_override) {
        kv.set("seed", std::to_string(*seed_override));
        kv.set("init_seed", std::to_string(*seed_override));
      }
      const auto model_cfg = ModelConfig::from(kv);
      const auto train_cfg = TrainConfig::from(kv);
      kv.require_all_used();
      guard_output(train_out, {train_data, train_resume});
      if (!train_resume.empty() && is_within(train_resume, train_out)) {
        throw UsageError("--out must differ from the run being resumed (" + train_resume.string() + ")");
      }
      const auto tr = load_for_model(train_data, "train", model_cfg);
      const auto va = load_for_model(train_data, "val", model_cfg);
      manifest.seed = std::to_string(train_cfg.seed) + " (init_seed " + std::to_string(model_cfg.init_seed) + ")";
      manifest.resolved = model_cfg.to_string() + train_cfg.to_string();
      manifest.emit(train_out);
      TrainOptions opt;
      opt.out_dir = train_out;
      opt.resume_from = train_resume;
      opt.progress = &std::cout;
      const auto res = train(train_cfg, model_cfg, tr.samples, va.samples, opt);
      std::cout << "done: " << res.iterations_done << " iterations, best val mIoU " << res.best_miou << " at epoch "
                << res.best_epoch << "\n";

    } else if (cmd == ev) {
      if (!eval_out.empty()) guard_output(eval_out, {eval_ckpt, eval_data});
      auto model = load_checkpoint<float>(eval_ckpt);
      const auto d = load_for_model(eval_data, eval_split, model.cfg);
      manifest.resolved = model.cfg.to_string() + "split=" + eval_split + "\ntta=" +
                          (eval_pred.tta ? "true" : "false") + "\nwindow=" + std::to_string(eval_pred.window) +
                          "\nstride=" + std::to_string(eval_pred.stride) + "\n";
      manifest.emit(eval_out);
      const auto r = evaluate(model_predictor(model), d.samples, d.meta.num_classes, eval_pred.options(), {}, &std::cerr);
      std::cout << metrics_table(r.metrics);
      if (!eval_out.empty()) write_metrics_csv(r.metrics, eval_out / "metrics.csv");

    } else if (cmd == inf) {
      guard_output(infer_out, {infer_ckpt, infer_input});
      auto model = load_checkpoint<float>(infer_ckpt);
      const auto xs = load_sample_inputs(infer_input, model.cfg);
      manifest.resolved = model.cfg.to_string() + "tta=" + (infer_pred.tta ? "true" : "false") +
                          "\nwindow=" + std::to_string(infer_pred.window) +
                          "\nstride=" + std::to_string(infer_pred.stride) + "\n";
      const auto probs = predict_probs(model_predictor(model), xs, infer_pred.options());
      const auto pred = argmax_map(probs);
      const auto h = probs.dim(2), w = probs.dim(3);
      manifest.emit(infer_out);
      write_pnm(infer_out / "pred.pgm", class_map_pgm(pred, h, w));
      write_pnm(infer_out / "pred.ppm", class_map_ppm(pred, h, w));
      save_ten(Tensor<float>(Shape{probs.dim(1), h, w}, probs.values()), infer_out / "probs.ten");
      std::cout << "wrote pred.pgm, pred.ppm, probs.ten to " << infer_out.string() << "\n";

    } else if (cmd == gc) {
      manifest.resolved = "module=" + gc_module + "\n";
      manifest.emit({});
      double worst = 0;
      for (const auto& r : run_gradchecks(gc_module)) {
        std::printf("%-22s max_rel_err %.3e  checked %zu\n", r.name.c_str(), r.max_rel_error, r.checked);
        worst = std::max(worst, r.max_rel_error);
      }
      std::printf("worst %.3e (%s 1e-4)\n", worst, worst < 1e-4 ? "below" : "ABOVE");
      if (!(worst < 1e-4)) return kRuntime;

    } else if (cmd == rb) {
      if (!rb_out.empty()) guard_output(rb_out, {rb_ckpt, rb_data});
      auto model = load_checkpoint<float>(rb_ckpt);
      const auto& names = model.cfg.modalities;
      auto it = std::find_if(names.begin(), names.end(), [&](const auto& m) { return m.name == rb_modality; });
      if (it == names.end()) throw UsageError("model has no modality '" + rb_modality + "'");
      Corruption c{parse_corruption(rb_kind), static_cast<std::size_t>(it - names.begin()),
                   seed_override.value_or(rb_seed)};
      const auto d = load_for_model(rb_data, rb_split, model.cfg);
      manifest.seed = std::to_string(c.seed);
      manifest.resolved = model.cfg.to_string() + "split=" + rb_split + "\nkind=" + corruption_name(c.kind) +
                          "\nmodality=" + rb_modality + "\n";
      manifest.emit(rb_out);
      const auto predict = model_predictor(model);
      const auto clean = evaluate(predict, d.samples, d.meta.num_classes);
      const auto hurt = robustness_eval(predict, d.samples, d.meta.num_classes, c, std::cerr);
      std::ostringstream csv;
      csv << "condition,oa,mf1,miou\n"
          << metrics_row("none", clean.metrics) << "\n"
          << metrics_row(corruption_name(c.kind), hurt.metrics) << "\n";
      std::cout << csv.str();
      if (!rb_out.empty()) std::ofstream(rb_out / "robustness.csv") << csv.str();

    } else if (cmd == hm) {
      guard_output(hm_out, {hm_ckpt, hm_input});
      auto model = load_checkpoint<float>(hm_ckpt);
      if (model.cfg.fusion != FusionKind::gated) throw UsageError("heatmap needs a checkpoint with gated fusion");
      if (hm_gate + 1 >= model.cfg.modalities.size()) {
        throw UsageError("--gate must be below " + std::to_string(model.cfg.modalities.size() - 1));
      }
      const auto xs = load_sample_inputs(hm_input, model.cfg);
      manifest.resolved = model.cfg.to_string() + "gate=" + std::to_string(hm_gate) + "\n";
      Tensor<float> gate;
      {
        NoGradGuard guard;
        gate = model.forward(xs, Mode::eval).gates.at(hm_gate);
      }
      // Channel mean at gate resolution, then bilinear back to the input grid.
      const auto q = gate.dim(1), gh = gate.dim(2), gw = gate.dim(3);
      std::vector<float> mean_map(gh * gw, 0.0f);
      for (std::size_t ch = 0; ch < q; ++ch) {
        for (std::size_t i = 0; i < gh * gw; ++i) mean_map[i] += gate.data()[ch * gh * gw + i] / static_cast<float>(q);
      }
      Tensor<float> small(Shape{1, 1, gh, gw}, std::move(mean_map));
      const auto full = bilinear_resize(small, xs[0].dim(2), xs[0].dim(3));
      manifest.emit(hm_out);
      const auto out_path = hm_out / ("gate-" + std::to_string(hm_gate) + ".pgm");
      write_pnm(out_path, to_image8(Tensor<float>(Shape{1, full.dim(2), full.dim(3)}, full.values())));
      std::cout << "wrote " << out_path.string() << " (" << full.dim(3) << "x" << full.dim(2) << ")\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << cmd->help();
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n(see `mmnet " << cmd->get_name() << " --help` and README)\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
