// SPDX-License-Identifier: Apache-2.0

#include "dqa/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "dqa/error.hpp"
#include "dqa/persistence.hpp"
#include "dqa/plot.hpp"

namespace dqa {

namespace fs = std::filesystem;

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Keeps the header and every row whose leading epoch field is below `epochs`.
void truncate_epochs(const fs::path& path, int epochs) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + '\n';
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const int e = std::stoi(line.substr(0, line.find(',')));
    if (e < epochs) kept += line + '\n';
  }
  in.close();
  write_text_atomic(path, kept);
}

std::string quantizer_list(const ExperimentConfig& c) {
  switch (c.train.method) {
    case Method::FullPrecision: return "-";
    case Method::Fixed: return c.quantizers.list.front().label();
    default: break;
  }
  std::string s;
  for (const auto& q : c.quantizers.list) s += (s.empty() ? "" : "+") + q.label();
  return s;
}

Checkpoint read_checkpoint(const fs::path& path) {
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw LoadError(e.what());
  }
}

void write_run_summary(const RunFiles& files, const RunSummary& s, const Network& net,
                       const std::string& status) {
  std::vector<std::pair<std::string, std::string>> e{
      {"name", s.config.name},
      {"method", to_string(s.config.train.method)},
      {"seed", std::to_string(s.config.seed)},
      {"status", status},
      {"epochs", std::to_string(s.config.train.epochs)},
      {"epochs_done", std::to_string(s.epochs_done)},
      {"final_train_acc", exact(s.final_train_acc)},
      {"final_val_acc", exact(s.final_val_acc)},
      {"final_loss", exact(s.final_loss)},
      {"temperature", exact(s.temperature)},
  };
  if (s.omega) e.emplace_back("omega", exact(*s.omega));
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const auto key = "layer." + std::to_string(i);
    e.emplace_back(key + ".mode", mode_name(l.mode));
    e.emplace_back(key + ".bits", i < s.bits.size() && s.bits[i] ? std::to_string(s.bits[i]) : "fp");
    if (const auto* d = std::get_if<DqaMixture>(&l.mode)) {
      const auto a = d->frozen_attention.empty()
                         ? attention_weights(normalize_alpha(d->attention.alpha.data()), net.temperature)
                         : d->frozen_attention;
      std::string joined;
      for (double v : a) joined += (joined.empty() ? "" : " ") + exact(v);
      e.emplace_back(key + ".attention", joined);
    }
  }
  write_summary(files.summary(), e);
}

std::optional<double> network_omega(const Network& net) {
  for (const auto& l : net.layers)
    if (const auto* br = std::get_if<BinaryRelax>(&l.mode)) return br->omega;
  return std::nullopt;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error:\n";
    for (const auto& p : e.problems()) err << "  " << p << '\n';
    return kExitConfig;
  } catch (const NanLossError& e) {
    const auto& r = e.last();
    err << "aborted: " << e.what() << "\n  last record: epoch " << r.epoch << ", batch " << r.batch
        << ", task loss " << r.task_loss << ", reg " << r.reg << '\n';
    return kExitNan;
  } catch (const LoadError& e) {
    err << "load error: " << e.what() << '\n';
    return kExitLoad;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& dir, const RunOptions& options) {
  validate_config(config);
  const RunFiles files{dir};
  fs::create_directories(dir);
  const auto data = load_dataset(config);
  const std::string text = serialize_config(config);

  Network net;
  TrainProgress progress;
  bool resumed = false;
  if (options.resume && fs::exists(files.checkpoint())) {
    auto ck = read_checkpoint(files.checkpoint());
    if (ck.config_text != text)
      throw ConfigError({"checkpoint " + files.checkpoint().string() +
                         " was written for a different configuration"});
    net = std::move(ck.network);
    progress = std::move(ck.progress);
    resumed = true;
    truncate_epochs(files.metrics(), progress.epochs_done);
    truncate_epochs(files.calibration(), progress.epochs_done);
  } else {
    net = build_network(config, data.train.sample_shape(), data.train.classes);
    fs::remove(files.metrics());
    fs::remove(files.calibration());
  }
  write_text_atomic(files.config(), text);
  if (!options.invocation.empty()) write_text_atomic(files.invocation(), options.invocation + "\n");

  std::size_t flushed_metrics = 0, flushed_cal = 0;
  TrainOptions topt;
  topt.stop_after_epoch = options.stop_after_epoch;
  topt.on_epoch_end = [&](const Network& n, const TrainResult& r) {
    write_metrics_csv(files.metrics(), std::span(r.metrics).subspan(flushed_metrics), true);
    write_calibration_csv(files.calibration(), std::span(r.calibrations).subspan(flushed_cal), true);
    flushed_metrics = r.metrics.size();
    flushed_cal = r.calibrations.size();
    save_checkpoint(Checkpoint{text, n, r.progress, config.seed}, files.checkpoint());
    if (options.log && !r.metrics.empty()) {
      const auto& m = r.metrics.back();
      *options.log << "epoch " << m.epoch << "  loss " << m.loss << "  train_acc " << m.train_acc
                   << "  val_acc " << m.val_acc << "  T " << m.temperature << '\n';
    }
  };

  RunSummary s;
  s.config = config;
  TrainResult result;
  try {
    result = train(net, data, config.train, resumed ? &progress : nullptr, topt);
  } catch (const NanLossError& e) {
    s.epochs_done = progress.epochs_done;
    s.final_loss = e.last().loss;
    s.temperature = e.last().temperature;
    write_run_summary(files, s, net, "nan_abort");
    throw;
  }
  if (!resumed && result.progress.epochs_done == 0)
    save_checkpoint(Checkpoint{text, net, result.progress, config.seed}, files.checkpoint());

  s.epochs_done = result.progress.epochs_done;
  s.finished = s.epochs_done == config.train.epochs;
  s.final_train_acc = evaluate(net, data.train).accuracy;
  s.final_val_acc = data.val.size() ? evaluate(net, data.val).accuracy : 0.0;
  s.temperature = net.temperature;
  s.omega = network_omega(net);
  s.bits = export_hard(net).bitwidths();
  if (!result.metrics.empty()) {
    s.final_loss = result.metrics.back().loss;
  } else if (fs::exists(files.metrics())) {
    const auto table = read_metrics_csv(files.metrics());
    if (!table.rows.empty()) s.final_loss = table.rows.back().loss;
  }
  write_run_summary(files, s, net, s.finished ? "finished" : "interrupted");
  return s;
}

std::vector<CompareRow> run_compare(const std::vector<ExperimentConfig>& configs, const fs::path& out,
                                    int seeds, std::uint64_t seed_base, std::ostream* log) {
  if (configs.size() < 2) throw ValidationError("compare needs at least two configs");
  if (seeds < 1) throw ValidationError("compare needs at least one seed");
  for (std::size_t i = 1; i < configs.size(); ++i)
    if (!same_topology(configs.front(), configs[i]))
      throw ValidationError("config '" + configs[i].name + "' differs from '" + configs.front().name +
                            "' in dataset or model topology");

  std::vector<CompareRow> rows;
  std::set<std::string> taken;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& base = configs[i];
    CompareRow row;
    row.name = base.name;
    if (taken.count(row.name)) row.name += "_" + std::to_string(i);
    taken.insert(row.name);
    row.method = to_string(base.train.method);
    row.quantizers = quantizer_list(base);
    for (int k = 0; k < seeds; ++k) {
      auto cfg = base;
      cfg.seed = cfg.train.seed = seed_base + static_cast<std::uint64_t>(k);
      const auto dir = out / row.name / ("seed_" + std::to_string(cfg.seed));
      const auto s = run_experiment(cfg, dir);
      row.val_acc.push_back(s.final_val_acc);
      if (log) *log << row.name << " seed " << cfg.seed << ": val_acc " << fixed4(s.final_val_acc) << '\n';
    }
    double sum = 0.0;
    for (double v : row.val_acc) sum += v;
    row.mean = sum / static_cast<double>(row.val_acc.size());
    double var = 0.0;
    for (double v : row.val_acc) var += (v - row.mean) * (v - row.mean);
    row.sd = std::sqrt(var / static_cast<double>(row.val_acc.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string s = "name,method,quantizers,seeds,mean_val_acc,sd_val_acc,val_acc_per_seed\n";
  for (const auto& r : rows) {
    std::string per;
    for (double v : r.val_acc) per += (per.empty() ? "" : ";") + exact(v);
    s += r.name + ',' + r.method + ',' + r.quantizers + ',' + std::to_string(r.val_acc.size()) + ',' +
         exact(r.mean) + ',' + exact(r.sd) + ',' + per + '\n';
  }
  return s;
}

std::string compare_text(const std::vector<CompareRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"name", "method", "quantizers", "seeds", "val_acc"}};
  for (const auto& r : rows)
    cells.push_back({r.name, r.method, r.quantizers, std::to_string(r.val_acc.size()),
                     fixed4(r.mean) + " +/- " + fixed4(r.sd)});
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string s;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      s += cells[r][c];
      if (c + 1 < cells[r].size()) s += std::string(width[c] - cells[r][c].size() + 2, ' ');
    }
    s += '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      s += std::string(total - 2, '-') + '\n';
    }
  }
  return s;
}

int cmd_train(const fs::path& config_path, const std::optional<fs::path>& out,
              std::optional<std::uint64_t> seed, std::optional<std::string> method, bool resume,
              const std::string& invocation, std::ostream& out_stream, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = parse_config(config_path);
    if (seed) cfg.seed = cfg.train.seed = *seed;
    if (method) {
      try {
        cfg.train.method = parse_method(*method);
      } catch (const ValidationError& e) {
        throw ConfigError({std::string("--method: ") + e.what()});
      }
    }
    validate_config(cfg);
    const fs::path dir = out ? *out : fs::path(cfg.output_dir);
    RunOptions opt;
    opt.resume = resume;
    opt.invocation = invocation;
    opt.log = &out_stream;
    const auto s = run_experiment(cfg, dir, opt);
    out_stream << "final_train_acc = " << exact(s.final_train_acc) << '\n'
               << "final_val_acc = " << exact(s.final_val_acc) << '\n';
    for (std::size_t i = 0; i < s.bits.size(); ++i)
      out_stream << "layer." << i << ".bits = " << (s.bits[i] ? std::to_string(s.bits[i]) : "fp") << '\n';
    out_stream << "wrote " << dir.string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_eval(const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& model,
             const std::optional<fs::path>& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (checkpoint.has_value() == model.has_value())
      throw ValidationError("eval needs exactly one of --checkpoint or --model");
    Network net;
    ExperimentConfig cfg;
    if (checkpoint) {
      auto ck = read_checkpoint(*checkpoint);
      cfg = config ? parse_config(*config) : parse_config_text(ck.config_text);
      net = std::move(ck.network);
    } else {
      HardModel m;
      try {
        m = load_model(*model);
      } catch (const FormatError& e) {
        throw LoadError(e.what());
      }
      const fs::path sibling = model->parent_path() / "effective.cfg";
      if (config) {
        cfg = parse_config(*config);
      } else if (fs::exists(sibling)) {
        cfg = parse_config(sibling);
      } else {
        throw ConfigError({"--model needs --config (no effective.cfg next to the artifact)"});
      }
      net = m.to_network();
    }
    const auto data = load_dataset(cfg);
    if (data.train.sample_shape() != net.input_shape)
      throw ValidationError("network input shape does not match the configured dataset");
    const auto tr = evaluate(net, data.train);
    out << "train_acc = " << exact(tr.accuracy) << '\n';
    if (data.val.size()) {
      const auto va = evaluate(net, data.val);
      out << "val_acc = " << exact(va.accuracy) << '\n' << "val_loss = " << exact(va.loss) << '\n';
    }
    return static_cast<int>(kExitOk);
  });
}

int cmd_export(const fs::path& checkpoint, const fs::path& out, std::ostream& out_stream, std::ostream& err) {
  return guarded(err, [&] {
    const auto ck = read_checkpoint(checkpoint);
    const auto model = export_hard(ck.network);
    for (const auto& w : model.warnings) err << "warning: " << w << '\n';
    const auto bits = model.bitwidths();
    if (std::all_of(bits.begin(), bits.end(), [](int b) { return b == 0; }))
      err << "warning: no quantized layers; the artifact only repackages full-precision weights\n";
    save_model(model, out);
    for (std::size_t i = 0; i < bits.size(); ++i) {
      out_stream << "layer." << i << ".bits = " << (bits[i] ? std::to_string(bits[i]) : "fp");
      if (bits[i]) out_stream << " (" << model.layers[i].spec.label() << ')';
      out_stream << '\n';
    }
    out_stream << "wrote " << out.string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_plot(const fs::path& metrics, const fs::path& out, int layer,
             const std::optional<fs::path>& calibration, const std::vector<int>& epochs,
             std::ostream& out_stream, std::ostream& err) {
  return guarded(err, [&] {
    if (layer < 0) throw ValidationError("--layer must be non-negative");
    const auto table = read_metrics_csv(metrics);
    if (table.k == 0) throw ValidationError("metrics have no attention columns (not a DQA run)");
    const fs::path cal_path = calibration ? *calibration : metrics.parent_path() / "quantizers.csv";
    if (!fs::exists(cal_path))
      throw ValidationError("calibration file " + cal_path.string() + " not found (use --calibration)");
    const auto cal = read_calibration_csv(cal_path);
    const auto plot = build_plot(table, cal, static_cast<std::size_t>(layer), epochs);
    fs::path csv = out;
    csv.replace_extension(".csv");
    write_text_atomic(out, render_svg(plot));
    write_text_atomic(csv, render_points_csv(plot));
    out_stream << "final attention:";
    for (const auto& c : plot.curves) out_stream << ' ' << exact(c.value.back());
    out_stream << '\n';
    for (const auto& s : plot.staircases)
      out_stream << "epoch " << s.epoch << ": " << count_levels(s.q) << " distinct levels\n";
    out_stream << "wrote " << out.string() << " and " << csv.string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_compare(const std::vector<fs::path>& configs, const fs::path& out, int seeds,
                std::uint64_t seed_base, std::ostream& out_stream, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<ExperimentConfig> parsed;
    for (const auto& p : configs) parsed.push_back(parse_config(p));
    const auto rows = run_compare(parsed, out, seeds, seed_base, &out_stream);
    const auto text = compare_text(rows);
    write_text_atomic(out / "compare.csv", compare_csv(rows));
    write_text_atomic(out / "compare.txt", text);
    out_stream << text;
    return static_cast<int>(kExitOk);
  });
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight quantization with attention over several quantizers"};
  app.require_subcommand(1, 1);

  std::string invocation;
  for (int i = 0; i < argc; ++i) invocation += (i ? " " : "") + std::string(argv[i]);

  auto* train = app.add_subcommand("train", "Train one experiment");
  std::string config;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  bool resume = false;
  train->add_option("--config", config, "Experiment config")->required();
  train->add_option("--out", out_dir, "Output directory (default: output.dir)");
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--method", method, "Override the method: fp, fixed, dqa or br");
  train->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or hard model");
  std::optional<std::string> eval_ck, eval_model, eval_cfg;
  eval->add_option("--checkpoint", eval_ck, "Training checkpoint");
  eval->add_option("--model", eval_model, "Exported hard model");
  eval->add_option("--config", eval_cfg, "Config selecting the dataset");

  auto* exp = app.add_subcommand("export", "Export a checkpoint as a hard-quantized model");
  std::string exp_ck, exp_out;
  exp->add_option("--checkpoint", exp_ck, "Training checkpoint")->required();
  exp->add_option("--out", exp_out, "Model artifact path")->required();

  auto* plot = app.add_subcommand("plot", "Plot attention and effective quantization");
  std::string plot_metrics, plot_out;
  int plot_layer = 0;
  std::optional<std::string> plot_cal;
  std::vector<int> plot_epochs;
  plot->add_option("--metrics", plot_metrics, "metrics.csv of a DQA run")->required();
  plot->add_option("--out", plot_out, "SVG path; a .csv with the points is written next to it")->required();
  plot->add_option("--layer", plot_layer, "Layer index (0-based)");
  plot->add_option("--calibration", plot_cal, "quantizers.csv (default: next to the metrics)");
  plot->add_option("--epochs", plot_epochs, "Epochs to draw staircases for");

  auto* cmp = app.add_subcommand("compare", "Compare configs over several seeds");
  std::vector<std::string> cmp_cfgs;
  std::string cmp_out;
  int cmp_seeds = 5;
  std::uint64_t cmp_base = 1;
  cmp->add_option("--configs", cmp_cfgs, "Two or more configs")->required();
  cmp->add_option("--out", cmp_out, "Output directory")->required();
  cmp->add_option("--seeds", cmp_seeds, "Seeds per config");
  cmp->add_option("--seed-base", cmp_base, "First seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto opt_path = [](const std::optional<std::string>& s) -> std::optional<fs::path> {
    if (s) return fs::path(*s);
    return std::nullopt;
  };
  if (train->parsed())
    return cmd_train(config, opt_path(out_dir), seed, method, resume, invocation, out, err);
  if (eval->parsed()) return cmd_eval(opt_path(eval_ck), opt_path(eval_model), opt_path(eval_cfg), out, err);
  if (exp->parsed()) return cmd_export(exp_ck, exp_out, out, err);
  if (plot->parsed()) return cmd_plot(plot_metrics, plot_out, plot_layer, opt_path(plot_cal), plot_epochs, out, err);
  std::vector<fs::path> paths(cmp_cfgs.begin(), cmp_cfgs.end());
  return cmd_compare(paths, cmp_out, cmp_seeds, cmp_base, out, err);
}

}  // namespace dqa
