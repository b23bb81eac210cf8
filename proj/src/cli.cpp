#include "mnvton/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "mnvton/analysis.hpp"
#include "mnvton/checkpoint.hpp"
#include "mnvton/config.hpp"
#include "mnvton/errors.hpp"
#include "mnvton/toytask.hpp"

namespace mnvton {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSubcommands[] = {"gen-data", "train", "sample", "eval", "ablate", "gradcheck", "cost", "pca"};

constexpr const char* kUsage =
    "usage: mnvton <subcommand> [--config PATH] [--seed N] [--out DIR] [options]\n"
    "subcommands:\n"
    "  gen-data   export toy samples as PPM + JSON sidecars   [--count N]\n"
    "  train      train a model; writes checkpoint.bin and metrics.jsonl\n"
    "  sample     DDIM-sample evaluation instances             [--count N] [--swap-label]\n"
    "  eval       evaluate the checkpoint; writes reports/eval.json\n"
    "  ablate     train and evaluate the variant x seed grid\n"
    "  gradcheck  finite-difference gradient check             [--all-variants]\n"
    "  cost       parameter / attention FLOP / activation report\n"
    "  pca        PCA of garment features per block             [--k N] [--sample-seed N] [--t N]\n";

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config_path, "RunConfig JSON file");
  app->add_option("--seed", o.seed, "override the config seed");
  app->add_option("--out", o.out, "run directory (overrides the config)");
}

// Explicit --config wins; otherwise a config.json already in the run
// directory; otherwise defaults.
RunConfig resolve_config(const CommonOptions& o, bool prefer_existing) {
  RunConfig c;
  if (!o.config_path.empty()) {
    c = load_run_config(o.config_path);
  } else if (prefer_existing) {
    const fs::path dir = o.out ? fs::path(*o.out) : fs::path(RunConfig{}.out);
    if (fs::exists(dir / "config.json")) c = load_run_config((dir / "config.json").string());
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  c.validate();
  return c;
}

fs::path ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, canonical_dump(j, 2) + "\n"); }

fs::path run_dir(const RunConfig& c) { return ensure_dir(c.out); }

void write_config(const RunConfig& c) { write_json(run_dir(c) / "config.json", to_json(c)); }

Model load_matching_checkpoint(const RunConfig& c) {
  const fs::path path = fs::path(c.out) / "checkpoint.bin";
  LoadedCheckpoint ck = load_checkpoint(path);
  const std::string expected = config_hash(c);
  if (ck.config_hash != expected) {
    throw ConfigError("checkpoint " + path.string() + " has config hash " + ck.config_hash + " but the config hashes to " +
                      expected);
  }
  return std::move(ck.model);
}

// ---- subcommands -------------------------------------------------------------------

int cmd_gen_data(const RunConfig& c, std::size_t count, std::ostream& out) {
  write_config(c);
  const fs::path images = ensure_dir(run_dir(c) / "images");
  const std::string hash = config_hash(c);
  for (std::size_t i = 0; i < count; ++i) export_sample(images, gen_sample(c.eval.seed_base + i, c.task), hash);
  out << "wrote " << count << " samples to " << images.string() << '\n';
  return 0;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  write_config(c);
  const fs::path dir = run_dir(c);
  const std::string hash = config_hash(c);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  const MetricSink sink = [&](const MetricRecord& r) {
    metrics << json{{"config_hash", hash}, {"loss", r.loss}, {"step", r.step}, {"wallclock_ms", r.wallclock_ms}}.dump()
            << '\n';
    metrics.flush();
  };
  TrainedRun run = train_run(c, sink);
  if (!metrics) throw IoError("failed writing metrics");
  save_checkpoint(dir / "checkpoint.bin", run.model, hash);
  out << json{{"config_hash", hash},
              {"final_loss", run.losses.back()},
              {"params", count_params(run.model)},
              {"steps", run.losses.size()},
              {"variant", std::string(to_string(c.variant))}}
             .dump()
      << '\n';
  return 0;
}

int cmd_sample(const RunConfig& c, std::size_t count, bool swap_label, std::ostream& out) {
  const Model model = load_matching_checkpoint(c);
  const fs::path images = ensure_dir(run_dir(c) / "images");
  const std::string hash = config_hash(c);
  const DiffusionSchedule schedule = c.make_schedule();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = c.eval.seed_base + i;
    std::optional<GarmentLabel> label;
    if (swap_label) label = swapped(gen_sample(seed, c.task).label);
    const ToySample s = gen_sample(seed, c.task, label);
    const Tensor pred = ddim_sample(model, s.example(), schedule, c.schedule.ddim_steps, sampling_seed(seed));
    export_sample(images, s, hash);
    for (std::size_t f = 0; f < c.task.frames; ++f) {
      write_ppm(images / ("sample_" + std::to_string(seed) + "_pred_f" + std::to_string(f) + ".ppm"), pred, f);
    }
    out << json{{"seed", seed},
                {"label", std::string(to_string(s.label))},
                {"ssim", ssim(pred, s.target)},
                {"masked_l2", masked_l2(pred, s.target, s.mask)}}
               .dump()
        << '\n';
  }
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const Model model = load_matching_checkpoint(c);
  const EvalReport report = eval_run(model, c, eval_threads_from_env());
  write_json(ensure_dir(run_dir(c) / "reports") / "eval.json", to_json(report));
  out << json{{"config_hash", report.config_hash},
              {"mean_masked_l2", report.mean_masked_l2},
              {"mean_ssim", report.mean_ssim},
              {"samples", report.samples.size()},
              {"variant", report.variant}}
             .dump()
      << '\n';
  return 0;
}

int cmd_ablate(const RunConfig& c, std::ostream& out) {
  write_config(c);
  const fs::path dir = run_dir(c);
  const TrainedHook hook = [&](const RunConfig& run, const Model& model) {
    const fs::path sub = ensure_dir(dir / "runs" / (std::string(to_string(run.variant)) + "-seed" + std::to_string(run.seed)));
    save_checkpoint(sub / "checkpoint.bin", model, config_hash(run));
    out << "trained " << to_string(run.variant) << " seed " << run.seed << '\n' << std::flush;
  };
  const AblationTable table = variant_ablation(ablation_runs(c), eval_threads_from_env(), hook);
  const fs::path reports = ensure_dir(dir / "reports");
  write_json(reports / "ablation.json", to_json(table));
  const std::string text = render_table(table);
  write_text(reports / "ablation.txt", text);
  out << text;
  return 0;
}

int cmd_gradcheck(const RunConfig& c, bool all_variants, std::ostream& out) {
  write_config(c);
  std::vector<BlockVariant> variants = {c.variant};
  if (all_variants) {
    variants = {BlockVariant::DualNet, BlockVariant::NaiveSplit, BlockVariant::MN_V1, BlockVariant::MN_V2,
                BlockVariant::MN_V3};
  }
  json report = json::object();
  double worst = 0.0;
  for (BlockVariant v : variants) {
    ModelConfig mc = c.model_config();
    mc.variant = v;
    const double err = model_grad_check(mc, c.seed);
    report[std::string(to_string(v))] = err;
    worst = std::isnan(err) ? err : std::max(worst, err);
  }
  const bool ok = worst < 1e-4;
  report = {{"config_hash", config_hash(c)}, {"max_rel_err", worst}, {"per_variant", report}, {"threshold", 1e-4},
            {"pass", ok}};
  write_json(ensure_dir(run_dir(c) / "reports") / "gradcheck.json", report);
  out << "max_rel_err=" << json(worst).dump() << (ok ? " pass" : " fail") << '\n';
  if (!ok) throw NumericalError("gradient check failed: max relative error " + json(worst).dump() + " >= 1e-4");
  return 0;
}

int cmd_cost(const RunConfig& c, std::ostream& out) {
  write_config(c);
  json report = to_json(cost_report(c.model_config()));
  report["config_hash"] = config_hash(c);
  write_json(ensure_dir(run_dir(c) / "reports") / "cost.json", report);
  out << canonical_dump(report, 2) << '\n';
  return 0;
}

int cmd_pca(const RunConfig& c, std::size_t k, std::uint64_t sample_seed, std::size_t t, std::ostream& out) {
  const Model model = load_matching_checkpoint(c);
  if (t >= c.schedule.T) throw ConfigError("--t must be below T");
  const ToySample sample = gen_sample(sample_seed, c.task);
  const auto blocks = pca_project(model, sample, c.make_schedule(), t, k, sampling_seed(sample_seed));
  const fs::path images = ensure_dir(run_dir(c) / "images");
  json list = json::array();
  for (const auto& b : blocks) {
    json entry = {{"block", b.block}, {"has_garment", b.has_garment}};
    if (b.has_garment) {
      entry["explained"] = b.pca.explained;
      entry["texture_score"] = b.texture_score;
      entry["scores"] = b.pca.scores.to_vector();
      for (std::size_t comp = 0; comp < k; ++comp) {
        const Tensor heat = component_heatmap(b, comp);
        for (std::size_t f = 0; f < b.token_grid.frames; ++f) {
          write_ppm(images / ("pca_b" + std::to_string(b.block) + "_c" + std::to_string(comp) + "_f" +
                              std::to_string(f) + ".ppm"),
                    heat, f);
        }
      }
    }
    list.push_back(entry);
  }
  const json report = {{"config_hash", config_hash(c)}, {"k", k}, {"sample_seed", sample_seed}, {"t", t},
                       {"blocks", list}};
  write_json(ensure_dir(run_dir(c) / "reports") / "pca.json", report);
  for (const auto& b : blocks) {
    out << "block " << b.block;
    if (b.has_garment) {
      out << " explained[0]=" << b.pca.explained[0] << " texture_score=" << b.texture_score;
    } else {
      out << " no garment tokens";
    }
    out << '\n';
  }
  return 0;
}

void report_error(std::ostream& err, const char* kind, const std::string& message) {
  err << "error kind=" << kind << " message=" << json(message).dump() << '\n';
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    report_error(err, "usage", "missing subcommand");
    err << kUsage;
    return 2;
  }
  const bool help = args[0] == "-h" || args[0] == "--help";
  if (help) {
    out << kUsage;
    return 0;
  }
  if (std::find(std::begin(kSubcommands), std::end(kSubcommands), args[0]) == std::end(kSubcommands)) {
    report_error(err, "usage", "unknown subcommand '" + args[0] + "'");
    err << kUsage;
    return 2;
  }

  CLI::App app{"mnvton"};
  app.require_subcommand(1);
  CommonOptions common;
  std::size_t count = 0;
  bool swap_label = false, all_variants = false;
  std::size_t k = 3, t = 50;
  std::uint64_t sample_seed = 1000000;

  std::map<std::string, CLI::App*> sub;
  for (const char* name : kSubcommands) {
    sub[name] = app.add_subcommand(name);
    add_common(sub[name], common);
  }
  sub["gen-data"]->add_option("--count", count, "number of samples (default: eval.samples)");
  sub["sample"]->add_option("--count", count, "number of samples (default: eval.samples)");
  sub["sample"]->add_flag("--swap-label", swap_label, "sample with the opposite garment label");
  sub["gradcheck"]->add_flag("--all-variants", all_variants, "check every block variant");
  sub["pca"]->add_option("--k", k, "components per block");
  sub["pca"]->add_option("--sample-seed", sample_seed, "toy sample to project");
  sub["pca"]->add_option("--t", t, "diffusion timestep of the forward pass");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return 2;
  }

  try {
    const std::string name = args[0];
    const bool uses_checkpoint = name == "sample" || name == "eval" || name == "pca";
    const RunConfig c = resolve_config(common, uses_checkpoint);
    if (count == 0) count = c.eval.samples;
    if (name == "gen-data") return cmd_gen_data(c, count, out);
    if (name == "train") return cmd_train(c, out);
    if (name == "sample") return cmd_sample(c, count, swap_label, out);
    if (name == "eval") return cmd_eval(c, out);
    if (name == "ablate") return cmd_ablate(c, out);
    if (name == "gradcheck") return cmd_gradcheck(c, all_variants, out);
    if (name == "cost") return cmd_cost(c, out);
    return cmd_pca(c, k, sample_seed, t, out);
  } catch (const ConfigError& e) {
    report_error(err, e.kind(), e.what());
    return 2;
  } catch (const VocabularyError& e) {
    report_error(err, e.kind(), e.what());
    return 2;
  } catch (const NumericalError& e) {
    report_error(err, e.kind(), e.what());
    return 3;
  } catch (const IoError& e) {
    report_error(err, e.kind(), e.what());
    return 4;
  } catch (const Error& e) {
    report_error(err, e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
}

}  // namespace mnvton
