// gaitdis command-line front end. Command logic lives in gaitdis/pipeline.hpp.

#include <CLI11.hpp>
#include <iostream>

#include "gaitdis/pipeline.hpp"

namespace {

using nlohmann::json;
using namespace gaitdis;

struct Overrides {
  std::string config, report_dir, protocol;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<long> iters;
  std::optional<int> threads;
  bool deterministic = false, large_model = false;
};

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? run_config_from_json(json::object()) : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.alpha) c.alpha = *o.alpha;
  if (!o.protocol.empty()) c.protocol = o.protocol;
  if (o.iters) c.train.max_iterations = *o.iters;
  if (o.threads) c.threads = *o.threads;
  if (o.deterministic) c.deterministic = true;
  if (o.large_model) c.train.large_model = true;
  c.train.seed = c.seed;
  if (auto v = violations(c); !v.empty()) throw ConfigViolations(v);
  return c;
}

int execute(const std::string& cmd, const std::function<std::pair<RunConfig, json>()>& prepare,
             const std::optional<std::string>& report_flag, const std::vector<std::string>& argv) {
  std::filesystem::path dir = resolve_report_dir(report_flag, RunConfig{});
  try {
    auto [cfg, args] = prepare();
    dir = resolve_report_dir(report_flag, cfg);
    const Report report(dir);
    std::filesystem::remove(report.path("error.json"));
    report.json("run.json", run_record(cmd, args, cfg, argv));
    const json summary = run_command(cmd, cfg, args, report);
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    const json err = error_record(cmd, e);
    std::cerr << err.dump() << '\n';
    try {
      Report(dir).json("error.json", err);
    } catch (const std::exception&) {
      // the error is already on stderr
    }
    return dynamic_cast<const ConfigError*>(&e) ? 2 : 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gait recognition with disentangled appearance, canonical and pose features"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  std::string report_flag;
  app.add_option("--config", o.config, "run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "generation and training seed");
  app.add_option("--alpha", o.alpha, "fusion weight of the dynamic channel")->check(CLI::Range(0.0, 1.0));
  app.add_option("--protocol", o.protocol, "protocol JSON");
  app.add_option("--iters", o.iters, "training iterations");
  app.add_option("--threads", o.threads, "worker threads for ingest and extraction");
  app.add_option("--report-dir", report_flag, "report directory (overrides " + std::string(kReportDirEnv) + ")");
  app.add_flag("--deterministic", o.deterministic, "single worker thread");
  app.add_flag("--large-model", o.large_model, "wider encoder and decoder");

  json args = json::object();
  std::string cmd, manifest, out, signatures, sweep_kind, clip_a, clip_b, replay_path;
  std::vector<double> alphas, fractions;
  int steps = 10, frames = 8;

  app.add_subcommand("synth", "generate a synthetic dataset and its archive");
  app.add_subcommand("ingest", "preprocess a manifest into the clip archive")
      ->add_option("--manifest", manifest, "manifest JSON (default: <dataset>/manifest.json)");
  app.add_subcommand("train", "train on the protocol's training subjects");
  app.add_subcommand("extract", "write signatures for the test subjects")
      ->add_option("--out", out, "signature file");
  app.add_subcommand("eval", "score gallery against probe")->add_option("--signatures", signatures);
  auto* sweep = app.add_subcommand("sweep", "alpha or duration sweep");
  sweep->add_option("kind", sweep_kind)->required()->check(CLI::IsMember({"alpha", "duration"}));
  sweep->add_option("--steps", steps, "alpha grid steps");
  sweep->add_option("--alphas", alphas, "explicit alpha values");
  sweep->add_option("--fractions", fractions, "probe duration fractions");
  sweep->add_option("--signatures", signatures);
  auto* viz = app.add_subcommand("decode-viz", "decoder image grids for two clips");
  viz->add_option("--clip-a", clip_a)->required();
  viz->add_option("--clip-b", clip_b)->required();
  viz->add_option("--frames", frames, "frames per clip");
  viz->add_option("--out", out, "output directory");
  auto* replay = app.add_subcommand("replay", "re-run the command recorded in a run.json");
  replay->add_option("run_json", replay_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      const json err = {{"kind", "usage"}, {"message", e.what()}};
      std::cerr << err.dump() << '\n';
    }
    return app.exit(e);
  }

  const std::vector<std::string> arg_list(argv, argv + argc);
  std::optional<std::string> flag;
  if (!report_flag.empty()) flag = report_flag;

  auto* sub = app.get_subcommands().front();
  cmd = sub->get_name();
  if (cmd == "replay") {
    json rec;
    try {
      rec = json::parse(read_file_bytes(replay_path));
      cmd = rec.at("command").get<std::string>();
    } catch (const std::exception& e) {
      std::cerr << json{{"kind", "config"}, {"message", e.what()}}.dump() << '\n';
      return 2;
    }
    return execute(cmd, [&] { return std::pair{run_config_from_json(rec.at("config")), rec.value("args", json::object())}; },
                   flag, arg_list);
  }

  if (cmd == "sweep") cmd = "sweep-" + sweep_kind;
  if (!manifest.empty()) args["manifest"] = manifest;
  if (!out.empty()) args["out"] = out;
  if (!signatures.empty()) args["signatures"] = signatures;
  if (cmd == "sweep-alpha") {
    if (alphas.empty()) args["steps"] = steps;
    else args["alphas"] = alphas;
  }
  if (cmd == "sweep-duration" && !fractions.empty()) args["fractions"] = fractions;
  if (cmd == "decode-viz") {
    args["clip_a"] = clip_a;
    args["clip_b"] = clip_b;
    args["frames"] = frames;
  }
  return execute(cmd, [&] { return std::pair{resolve(o), args}; }, flag, arg_list);
}
