// askpaint: train / eval / rollout / synth / serve.
//
// Every command resolves one JSON configuration (built-in defaults, then the
// --config file, then flags) and writes it to <out>/config.json. Passing that
// snapshot back as --config reruns the command.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "askpaint/checkpoint.hpp"
#include "askpaint/dataset.hpp"
#include "askpaint/evaluator.hpp"
#include "askpaint/service_http.hpp"
#include "askpaint/synthetic.hpp"
#include "askpaint/trainer.hpp"
#include "askpaint/visualize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace askpaint;

namespace {

struct UsageError : ValidationError {
  using ValidationError::ValidationError;
};

json defaults() {
  return {{"command", ""},
          {"out", "."},
          {"checkpoint", ""},
          {"dataset", ""},
          {"image", ""},
          {"answers", 3},
          {"count", 500},
          {"model", ModelConfig{}},
          {"train", TrainConfig{}},
          {"scene", SyntheticSceneSpec::reference()},
          {"eval", {{"max_steps", 3}, {"max_answers", 4}, {"seed", 999}, {"dump", 0}}},
          {"service", service::ServiceConfig{}}};
}

json load_config(const std::string& path) {
  json cfg = defaults();
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open " + path);
  json user;
  try {
    user = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config: " + path + " is not valid JSON (" + e.what() + ")");
  }
  if (!user.is_object()) throw UsageError("config: top level must be an object");
  for (const auto& [k, v] : user.items())
    if (!cfg.contains(k)) throw UsageError("config: unknown key '" + k + "'");
  cfg.merge_patch(user);
  return cfg;
}

// Parses one section, naming it in any error.
template <typename V>
V section(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<V>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config key '") + key + "': " + e.what());
  } catch (const ValidationError& e) {
    throw UsageError(std::string("config key '") + key + "': " + e.what());
  } catch (const ConfigError& e) {
    throw UsageError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename V>
V scalar(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<V>();
  } catch (const json::exception&) {
    throw UsageError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::string required_path(const json& cfg, const char* key) {
  auto s = scalar<std::string>(cfg, key);
  if (s.empty()) throw UsageError(std::string("--") + key + " is required");
  return s;
}

fs::path prepare_out(const json& cfg) {
  const fs::path out = scalar<std::string>(cfg, "out");
  fs::create_directories(out);
  std::ofstream(out / "config.json") << cfg.dump(2) << "\n";
  return out;
}

ColorSpaceSpec space_of(const ModelConfig& mc) { return ColorSpaceSpec{mc.color_space}; }

int cmd_train(const json& cfg) {
  const auto mc = section<ModelConfig>(cfg, "model");
  const auto tc = section<TrainConfig>(cfg, "train");
  try {
    validate(mc);
    validate(tc);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const fs::path out = prepare_out(cfg);
  BatchSource<float> data;
  if (const auto ds = scalar<std::string>(cfg, "dataset"); !ds.empty()) {
    data = dataset_batches(load_dataset<float>(ds, mc.height, mc.width, space_of(mc)), tc.seed);
  } else {
    auto scene = section<SyntheticSceneSpec>(cfg, "scene");
    if (scene.height != mc.height || scene.width != mc.width)
      throw UsageError("config key 'scene': size differs from the model's");
    validate(scene);
    data = synthetic_batches<float>(scene, space_of(mc));
  }
  std::ofstream log(out / "loss_log.csv");
  log << "step,reg_loss,seg_loss,lambda_seg,total,mean_n_hint\n";
  TrainCallbacks<float> cb;
  cb.on_log = [&](const StepReport& r) {
    char line[256];
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g,%.6g", static_cast<long long>(r.step), r.loss.reg_loss,
                  r.loss.seg_loss, r.loss.lambda_seg, r.loss.total, r.mean_n_hint);
    log << line << "\n";
    if (r.step % 500 == 0) std::cerr << "step " << r.step << " total " << r.loss.total << "\n";
  };
  cb.on_checkpoint = [&](const Checkpoint<float>& c) {
    save_checkpoint(c, out / ("step_" + std::to_string(c.step_count) + ".ckpt"));
  };
  const auto final_ckpt = train_loop<float>(mc, tc, data, cb);
  save_checkpoint(final_ckpt, out / "checkpoint.ckpt");
  std::cout << (out / "checkpoint.ckpt").string() << "\n";
  return 0;
}

std::vector<EvalSample<float>> eval_data(const json& cfg, const ModelConfig& mc) {
  if (const auto ds = scalar<std::string>(cfg, "dataset"); !ds.empty())
    return load_dataset<float>(ds, mc.height, mc.width, space_of(mc));
  auto scene = section<SyntheticSceneSpec>(cfg, "scene");
  scene.height = mc.height;
  scene.width = mc.width;
  std::mt19937_64 rng(cfg.at("eval").value("seed", 999));
  std::vector<EvalSample<float>> out;
  int n = 0;
  for (auto& s : generate_synthetic_batch<float>(scene, space_of(mc), scalar<int>(cfg, "count"), rng))
    out.push_back({std::move(s.input), std::move(s.target), std::move(s.segmentation), "synthetic_" + std::to_string(n++)});
  return out;
}

int cmd_eval(const json& cfg) {
  const auto ckpt = load_checkpoint<float>(required_path(cfg, "checkpoint"));
  const auto& mc = ckpt.model.config();
  const auto& e = cfg.at("eval");
  EvalOptions opt;
  opt.max_steps = e.value("max_steps", opt.max_steps);
  opt.max_answers = e.value("max_answers", opt.max_answers);
  opt.space = space_of(mc);
  if (opt.max_steps < 0 || opt.max_steps > opt.max_answers)
    throw UsageError("config key 'eval.max_steps' must lie in [0, eval.max_answers]");
  const fs::path out = prepare_out(cfg);
  const auto data = eval_data(cfg, mc);
  const auto report = evaluate(ckpt.model, data, opt);
  std::ofstream(out / "eval_report.json") << to_json(report).dump(2) << "\n";
  const int dump = std::min<int>(e.value("dump", 0), static_cast<int>(data.size()));
  if (dump > 0) fs::create_directories(out / "images");
  for (int k = 0; k < dump; ++k) {
    const auto st = eval_rollout(ckpt.model, data[k], opt);
    write_png(out / "images" / (data[k].name + "_montage.png"), episode_montage(st, opt.space));
  }
  std::cout << (out / "eval_report.json").string() << "\n";
  return 0;
}

int cmd_rollout(const json& cfg) {
  const auto ckpt = load_checkpoint<float>(required_path(cfg, "checkpoint"));
  const auto& mc = ckpt.model.config();
  const auto space = space_of(mc);
  Raster8 img = read_png(required_path(cfg, "image"));
  if (img.width != mc.width || img.height != mc.height) img = center_crop_resize(img, mc.width, mc.height);
  const int answers = scalar<int>(cfg, "answers");
  const int max_answers = std::max(answers, cfg.at("eval").value("max_answers", 4));
  if (answers < 0) throw UsageError("config key 'answers' must be >= 0");
  const fs::path out = prepare_out(cfg);
  auto ms = to_model_space<float>(img, space);
  const auto r = rollout<float>(ms.input, &ms.target, answers, max_answers, ckpt.model);
  write_png(out / "montage.png", episode_montage(r.state, space));
  write_png(out / "prediction.png", from_model_space(r.final_prediction, ms.input, space));
  std::cout << (out / "montage.png").string() << "\n";
  return 0;
}

int cmd_synth(const json& cfg) {
  auto scene = section<SyntheticSceneSpec>(cfg, "scene");
  try {
    validate(scene);
  } catch (const ValidationError& e) {
    throw UsageError(std::string("config key 'scene': ") + e.what());
  }
  const int count = scalar<int>(cfg, "count");
  if (count < 1) throw UsageError("config key 'count' must be >= 1");
  const fs::path out = prepare_out(cfg);
  write_synthetic_dataset(out, scene, count);
  std::cout << out.string() << "\n";
  return 0;
}

volatile std::sig_atomic_t g_stop = 0;
httplib::Server* g_server = nullptr;

int cmd_serve(json cfg) {
  auto sc = section<service::ServiceConfig>(cfg, "service");
  service::apply_environment(sc);
  if (const auto c = scalar<std::string>(cfg, "checkpoint"); !c.empty()) sc.checkpoint_dir = c;
  cfg["service"] = sc;
  if (sc.port < 0 || sc.port > 65535) throw UsageError("config key 'service.port' out of range");
  prepare_out(cfg);
  service::SessionManager mgr(sc);
  httplib::Server server;
  service::install_routes(server, mgr);
  service::Reaper reaper(mgr, sc.reap_interval_seconds);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  int port = sc.port;
  if (port == 0) {
    port = server.bind_to_any_port(sc.host);
  } else if (!server.bind_to_port(sc.host, port)) {
    throw std::runtime_error("cannot bind " + sc.host + ":" + std::to_string(port));
  }
  std::cout << "listening on " << sc.host << ":" << port << std::endl;
  server.listen_after_bind();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"askpaint: colorization by asking questions"};
  app.require_subcommand(1);
  std::string config_path, out, checkpoint, dataset, image;
  std::optional<std::uint64_t> seed;
  std::optional<int> answers, max_steps, steps, port, count;
  std::optional<double> lambda_seg, noise_sigma;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "JSON configuration file");
    c->add_option("--seed", seed, "seed for model init, training and data");
    c->add_option("--out", out, "output directory");
  };
  auto* train = app.add_subcommand("train", "train a checkpoint");
  add_common(train);
  train->add_option("--dataset", dataset, "dataset directory (default: synthetic scenes)");
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--lambda-seg", lambda_seg, "smoothness loss weight");
  train->add_option("--noise-sigma", noise_sigma, "answer noise std (0 disables)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--dataset", dataset, "dataset directory (default: synthetic scenes)");
  eval->add_option("--max-steps", max_steps, "largest number of answers evaluated");
  eval->add_option("--count", count, "synthetic scenes when no dataset is given");

  auto* roll = app.add_subcommand("rollout", "montage of one oracle-answered episode");
  add_common(roll);
  roll->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  roll->add_option("--image", image, "color PNG (also the oracle's ground truth)")->required();
  roll->add_option("--answers", answers, "answered questions");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
  add_common(synth);
  synth->add_option("--count", count, "number of scenes");

  auto* serve = app.add_subcommand("serve", "run the steering service");
  add_common(serve);
  serve->add_option("--port", port, "listen port (0: any free port)");
  serve->add_option("--checkpoint", checkpoint, "checkpoint directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    json cfg = load_config(config_path);
    const auto* sub = app.get_subcommands().front();
    cfg["command"] = sub->get_name();
    if (!out.empty()) cfg["out"] = out;
    if (!checkpoint.empty()) cfg["checkpoint"] = checkpoint;
    if (!dataset.empty()) cfg["dataset"] = dataset;
    if (!image.empty()) cfg["image"] = image;
    if (answers) cfg["answers"] = *answers;
    if (count) cfg["count"] = *count;
    if (max_steps) cfg["eval"]["max_steps"] = *max_steps;
    if (steps) cfg["train"]["steps"] = *steps;
    if (lambda_seg) cfg["train"]["lambda_seg"] = *lambda_seg;
    if (noise_sigma) {
      cfg["train"]["noise_sigma"] = *noise_sigma;
      cfg["train"]["noise_enabled"] = *noise_sigma > 0;
    }
    if (port) cfg["service"]["port"] = *port;
    if (seed) {
      cfg["model"]["seed"] = *seed;
      cfg["train"]["seed"] = *seed;
      cfg["scene"]["seed"] = *seed;
    }
    const auto& name = sub->get_name();
    if (name == "train") return cmd_train(cfg);
    if (name == "eval") return cmd_eval(cfg);
    if (name == "rollout") return cmd_rollout(cfg);
    if (name == "synth") return cmd_synth(cfg);
    return cmd_serve(cfg);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
