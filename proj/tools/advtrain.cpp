#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advtrain/errors.hpp"
#include "advtrain/harness.hpp"
#include "advtrain/trainer.hpp"

using namespace advtrain;

namespace {

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg = ExperimentConfig::from_file(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

std::string resolve_checkpoint(const ExperimentConfig& cfg, const std::string& which) {
  if (which == "last" || which == "best") return cfg.output_dir + "/" + which + ".ckpt";
  return which;  // explicit path
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training experiment harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint = "last";
  std::string out;
  std::string metrics_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("-s,--set", overrides, "dotted-path override, e.g. train.epochs=3");
  };

  CLI::App* train = app.add_subcommand("train", "run the training loop");
  add_common(train);

  CLI::App* evaluate = app.add_subcommand("evaluate", "clean + robust test accuracy");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "last | best | explicit path");

  CLI::App* diagnose = app.add_subcommand("diagnose", "training-set attack diagnostics");
  add_common(diagnose);
  diagnose->add_option("--checkpoint", checkpoint, "last | best | explicit path");
  diagnose->add_option("-o,--out", out, "write the JSON report here instead of stdout");

  CLI::App* plot = app.add_subcommand("plot", "emit CSV + SVG from a metrics log");
  plot->add_option("--metrics", metrics_path, "metrics.jsonl path (default: <output_dir>/metrics.jsonl)");
  plot->add_option("-c,--config", config_path, "experiment config (JSON)");
  plot->add_option("-s,--set", overrides, "dotted-path override");
  plot->add_option("-o,--out", out, "output prefix (default: <output_dir>/curves)");

  CLI::App* export_cmd = app.add_subcommand("export", "flat weight export for external suites");
  add_common(export_cmd);
  export_cmd->add_option("--checkpoint", checkpoint, "last | best | explicit path");
  export_cmd->add_option("-o,--out", out, "output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      TrainResult r = run_training(cfg);
      std::cout << "completed_epochs=" << r.completed_epochs
                << " best_epoch=" << r.by_robust.best_epoch
                << " best_robust=" << r.by_robust.best_robust
                << " last_robust=" << r.by_robust.last_robust
                << " best_clean_at_best_robust=" << r.by_robust.best_clean
                << " last_clean=" << r.by_robust.last_clean << "\n";
      return r.completed_epochs == cfg.epochs ? 0 : 1;
    }
    if (evaluate->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      EvalResult r = evaluate_checkpoint(cfg, resolve_checkpoint(cfg, checkpoint));
      std::cout << "clean_acc=" << r.clean_acc << " robust_acc=" << r.robust_acc << "\n";
      return 0;
    }
    if (diagnose->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      DiagnoseReport rep = diagnose_checkpoint(cfg, resolve_checkpoint(cfg, checkpoint));
      if (out.empty()) {
        std::cout << rep.to_json_text() << "\n";
      } else {
        std::ofstream os(out, std::ios::trunc);
        os << rep.to_json_text() << "\n";
      }
      return 0;
    }
    if (plot->parsed()) {
      if (metrics_path.empty() || out.empty()) {
        if (config_path.empty())
          throw UsageError("plot needs --metrics and --out, or --config to derive them");
        ExperimentConfig cfg = load_config(config_path, overrides);
        if (metrics_path.empty()) metrics_path = cfg.output_dir + "/metrics.jsonl";
        if (out.empty()) out = cfg.output_dir + "/curves";
      }
      plot_metrics(read_metrics_log(metrics_path), out);
      std::cout << "wrote " << out << ".csv and " << out << ".svg\n";
      return 0;
    }
    if (export_cmd->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      export_weights(resolve_checkpoint(cfg, checkpoint), out);
      std::cout << "wrote " << out << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
  return 1;
}
