#include "comvit/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "comvit/config.hpp"
#include "comvit/data.hpp"
#include "comvit/errors.hpp"
#include "comvit/explain.hpp"
#include "comvit/gradcheck_suite.hpp"
#include "comvit/model.hpp"
#include "comvit/train.hpp"

namespace comvit {

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string preset;
  std::string file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd, const std::string& default_preset) {
    preset = default_preset;
    cmd->add_option("--preset", preset, "Base configuration: paper or desk")->capture_default_str();
    cmd->add_option("--config", file, "Flat key = value config file");
    cmd->add_option("--set", overrides, "Override, e.g. --set model.layers=4 (repeatable)");
    cmd->add_option("--seed", seed, "Shortcut for --set train.seed=N");
  }

  RunConfig resolve() const {
    RunConfig c = comvit::preset(preset);
    if (!file.empty()) apply_config_file(c, file);
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
      apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) c.train.seed = *seed;
    c.model.validate();
    c.train.validate();
    return c;
  }
};

std::string sci(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

void check_dataset_fits(const Dataset& ds, const ModelConfig& m, const std::string& what) {
  if (ds.height != m.image_size || ds.width != m.image_size || ds.channels != m.in_channels) {
    throw ConfigError(what + " images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                      std::to_string(ds.channels) + ", model expects " + std::to_string(m.image_size) + "x" +
                      std::to_string(m.image_size) + "x" + std::to_string(m.in_channels));
  }
  if (ds.num_classes > m.num_classes) {
    throw ConfigError(what + " has " + std::to_string(ds.num_classes) + " classes, model has " +
                      std::to_string(m.num_classes));
  }
}

int cmd_info(const ConfigArgs& args, bool json_out, std::ostream& out) {
  const RunConfig c = args.resolve();
  const MacBreakdown macs = mac_breakdown(c.model);
  const auto shapes = param_shapes(c.model);
  if (json_out) {
    nlohmann::json j;
    j["params"] = count_params(c.model);
    j["macs"] = macs.total();
    j["macs_breakdown"] = {{"conv1", macs.conv1},
                           {"conv2", macs.conv2},
                           {"encoder", macs.encoder},
                           {"pooling", macs.pooling},
                           {"classifier", macs.classifier}};
    j["sequence_length"] = c.model.sequence_length();
    j["token_grid"] = c.model.token_grid();
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, shape] : shapes) table.push_back({{"name", name}, {"shape", shape}});
    j["shapes"] = table;
    out << j.dump(2) << '\n';
    return kExitOk;
  }
  out << render_config(c);
  out << "params: " << count_params(c.model) << '\n';
  out << "macs: " << macs.total() << " (~" << sci(static_cast<double>(macs.total())) << ")\n";
  out << "  conv1 " << macs.conv1 << "\n  conv2 " << macs.conv2 << "\n  encoder " << macs.encoder << "\n  pooling "
      << macs.pooling << "\n  classifier " << macs.classifier << '\n';
  out << "tokens: " << c.model.sequence_length() << " (" << c.model.token_grid() << "x" << c.model.token_grid()
      << ")\n";
  for (const auto& [name, shape] : shapes) out << "  " << name << ' ' << shape_str(shape) << '\n';
  return kExitOk;
}

int cmd_synth(std::size_t count, std::size_t image_size, std::uint64_t seed, const std::string& out_path,
              std::string boxes_path, std::ostream& out, std::ostream& err) {
  SynthShapes s = synth_shapes(count, image_size, seed);
  if (s.warning) err << "warning: " << *s.warning << '\n';
  if (boxes_path.empty()) boxes_path = out_path + ".boxes.csv";
  save_dataset(out_path, s.dataset);
  std::ofstream boxes(boxes_path, std::ios::trunc);
  if (!boxes) throw IoError("cannot write " + boxes_path);
  boxes << boxes_csv(s.boxes);
  out << "wrote " << s.dataset.count << " samples (" << image_size << "x" << image_size << ") to " << out_path
      << ", boxes to " << boxes_path << '\n';
  return kExitOk;
}

int cmd_train(const ConfigArgs& args, const std::string& train_path, const std::string& eval_path,
              const std::string& out_dir, const std::string& resume, std::size_t until, std::ostream& out) {
  RunConfig c = args.resolve();
  const Dataset train = load_dataset(train_path);
  std::optional<Dataset> eval;
  if (!eval_path.empty()) eval = load_dataset(eval_path);

  TrainState state;
  if (!resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(read_file(resume));
    check_compatible(ckpt, c.model);
    c.model = ckpt.config;
    state = TrainState::from_checkpoint(ckpt);
  }
  check_dataset_fits(train, c.model, "training set");
  if (eval) check_dataset_fits(*eval, c.model, "eval set");
  if (resume.empty()) state = TrainState::fresh(c.model, c.train.seed);

  out << render_config(c) << std::flush;
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(fs::path(out_dir) / "config.txt", std::ios::trunc);
    cfg << render_config(c);
  }
  const fs::path metrics_path = fs::path(out_dir) / "metrics.csv";
  std::ofstream metrics(metrics_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  if (resume.empty()) write_metrics_header(metrics);

  const fs::path ckpt_path = fs::path(out_dir) / "checkpoint.cmvw";
  FitCallbacks callbacks;
  callbacks.on_epoch_end = [&](const EpochRecord& r, const TrainState& s) {
    write_file(ckpt_path, save_checkpoint(s.to_checkpoint(c.model)));
    out << "epoch " << r.epoch << " loss " << r.train_loss << " eval_top1 " << r.eval_top1 << " lr " << r.lr
        << '\n'
        << std::flush;
  };
  const auto history = fit(state, c.model, train, eval ? &*eval : nullptr, c.train, callbacks, &metrics, until);
  if (!history.empty()) out << "final eval_top1: " << history.back().eval_top1 << '\n';
  out << "checkpoint: " << ckpt_path.string() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(read_file(ckpt_path));
  const TrainState state = TrainState::from_checkpoint(ckpt);
  const Dataset ds = load_dataset(data_path);
  check_dataset_fits(ds, ckpt.config, "eval set");
  out << "top1: " << evaluate(state.params, ckpt.config, ds) << '\n';
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t cases, bool skip_model, std::ostream& out) {
  bool ok = true;
  auto line = [&](const GradCheckReport& r) {
    out << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(18) << r.name << " cases " << r.cases
        << " max_rel_err " << std::scientific << std::setprecision(3) << r.max_error << " (< " << r.threshold << ")"
        << std::defaultfloat << '\n';
    ok = ok && r.passed();
  };
  for (const auto& r : primitive_gradchecks(seed, cases)) line(r);
  if (!skip_model) line(model_gradcheck(seed));
  return ok ? kExitOk : kExitNumerical;
}

int cmd_gradcam(const std::string& ckpt_path, const std::string& data_path, const std::vector<std::size_t>& indices,
                const std::string& out_dir, std::optional<std::size_t> target, std::size_t scale_to,
                const std::string& boxes_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(read_file(ckpt_path));
  const TrainState state = TrainState::from_checkpoint(ckpt);
  const Dataset ds = load_dataset(data_path);
  check_dataset_fits(ds, ckpt.config, "data set");
  std::vector<BoundingBox> boxes;
  if (!boxes_path.empty()) {
    std::ifstream in(boxes_path);
    if (!in) throw IoError("cannot open " + boxes_path);
    std::stringstream buf;
    buf << in.rdbuf();
    boxes = parse_boxes_csv(buf.str());
  }
  fs::create_directories(out_dir);
  if (scale_to == 0) scale_to = ckpt.config.image_size;
  for (std::size_t index : indices) {
    const std::size_t idx[] = {index};
    const Tensor<float> image = image_batch(ds, idx);
    std::size_t cls = 0;
    if (target) {
      cls = *target;
    } else {
      const Tensor<float> logits = forward(image, state.params, ckpt.config, false);
      const auto z = logits.data();
      cls = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    }
    const Heatmap map = grad_cam(state.params, ckpt.config, image, cls);
    const fs::path path = fs::path(out_dir) / ("gradcam_" + std::to_string(index) + ".pgm");
    write_file(path, write_pgm(map, scale_to));
    out << "index " << index << " class " << cls << " -> " << path.string();
    if (index < boxes.size()) {
      const Localization loc = localization(map, ckpt.config.image_size, boxes[index]);
      out << " in_box " << loc.inside << " out_box " << loc.outside;
    }
    out << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compact convolutional-tokenizer vision transformer: train, evaluate, inspect", "comvit"};
  app.require_subcommand(1);

  ConfigArgs info_args, train_args;
  bool info_json = false;
  auto* info = app.add_subcommand("info", "Parameter count, MAC count and shape map");
  info_args.attach(info, "paper");
  info->add_flag("--json", info_json, "Machine-readable output");

  auto* synth = app.add_subcommand("synth", "Write a synthetic circles-vs-squares CMVD file and bbox sidecar");
  std::size_t synth_count = 2000, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out, synth_boxes;
  synth->add_option("--count", synth_count, "Number of samples (even)")->capture_default_str();
  synth->add_option("--image-size", synth_size, "Image side in pixels")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output CMVD path")->required();
  synth->add_option("--boxes", synth_boxes, "Bounding-box CSV path (default <out>.boxes.csv)");

  auto* train = app.add_subcommand("train", "Train from scratch or resume; writes metrics.csv and checkpoint.cmvw");
  train_args.attach(train, "desk");
  std::string train_data, eval_data, out_dir, resume;
  std::size_t until = 0;
  train->add_option("--train", train_data, "Training CMVD file")->required();
  train->add_option("--eval", eval_data, "Evaluation CMVD file");
  train->add_option("--out-dir", out_dir, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--until-epoch", until, "Stop after this epoch count (default: train.epochs)");

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a CMVD file");
  std::string eval_ckpt, eval_set;
  eval->add_option("--checkpoint", eval_ckpt, "CMVW checkpoint")->required();
  eval->add_option("--data", eval_set, "CMVD file")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite (exit 3 on failure)");
  std::uint64_t gc_seed = 0;
  std::size_t gc_cases = 10;
  bool gc_skip_model = false;
  gradcheck->add_option("--seed", gc_seed)->capture_default_str();
  gradcheck->add_option("--cases", gc_cases, "Random cases per primitive")->capture_default_str();
  gradcheck->add_flag("--skip-model", gc_skip_model, "Primitives only");

  auto* gradcam = app.add_subcommand("gradcam", "Grad-CAM heatmaps as PGM, one per index");
  std::string cam_ckpt, cam_data, cam_out, cam_boxes;
  std::vector<std::size_t> cam_indices;
  std::optional<std::size_t> cam_class;
  std::size_t cam_scale = 0;
  gradcam->add_option("--checkpoint", cam_ckpt)->required();
  gradcam->add_option("--data", cam_data)->required();
  gradcam->add_option("--index", cam_indices, "Sample index (repeatable)")->required();
  gradcam->add_option("--out-dir", cam_out)->required();
  gradcam->add_option("--class", cam_class, "Target class (default: predicted)");
  gradcam->add_option("--scale", cam_scale, "Output side in pixels (default: image size)");
  gradcam->add_option("--boxes", cam_boxes, "Bounding-box CSV; prints in/out-of-box mean heat");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (info->parsed()) return cmd_info(info_args, info_json, out);
    if (synth->parsed()) return cmd_synth(synth_count, synth_size, synth_seed, synth_out, synth_boxes, out, err);
    if (train->parsed()) return cmd_train(train_args, train_data, eval_data, out_dir, resume, until, out);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_set, out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_cases, gc_skip_model, out);
    if (gradcam->parsed()) return cmd_gradcam(cam_ckpt, cam_data, cam_indices, cam_out, cam_class, cam_scale, cam_boxes, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  }
  return kExitUsage;
}

}  // namespace comvit
