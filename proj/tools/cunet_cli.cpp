// Command-line front end: dataset synthesis, training, inference, evaluation,
// component decomposition, and the solver/gradient self-check.
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cunet/autodiff.hpp"
#include "cunet/csc.hpp"
#include "cunet/io.hpp"
#include "cunet/model.hpp"
#include "cunet/rng.hpp"

namespace fs = std::filesystem;
using namespace cunet;
using nlohmann::json;

namespace {

// Machine-parseable failure line + exit code.
enum ExitCode {
  kOk = 0,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kTaskMismatch = 5,
  kDiverged = 6,
  kCheckFailed = 7,
  kContract = 8,
};

[[noreturn]] void fail(ExitCode code, const std::string& name, const std::string& msg) {
  std::cerr << "error " << name << " " << msg << "\n";
  std::exit(code);
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string precision;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)");
  cmd->add_option("--set", args.overrides, "config override KEY=VALUE (repeatable)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--precision", args.precision, "sample precision")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--seed", args.seed, "overrides train.seed and data.seed")
      ->trigger_on_parse()
      ->each([&args](const std::string&) { args.seed_set = true; });
}

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg;
  try {
    if (!args.config_path.empty()) cfg = load_config_file(args.config_path);
    for (const std::string& kv : args.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail(kUsage, "E_USAGE", "--set expects KEY=VALUE: " + kv);
      apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
  } catch (const io_error& e) {
    fail(kConfig, "E_CONFIG", e.what());
  }
  if (args.seed_set) {
    cfg.train.seed = args.seed;
    cfg.data.seed = args.seed;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

void set_precision_from(const CommonArgs& args, Precision fallback) {
  if (args.precision == "f32")
    set_precision(Precision::f32);
  else if (args.precision == "f64")
    set_precision(Precision::f64);
  else
    set_precision(fallback);
}

std::vector<SamplePair> resolve_dataset(const ExperimentConfig& cfg,
                                        const std::string& data_dir) {
  try {
    if (!data_dir.empty()) return read_dataset(data_dir);
    return synth_guided_dataset(cfg.data.kind, cfg.data.count, cfg.data.seed,
                                cfg.data.options);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  } catch (const contract_error& e) {
    fail(kConfig, "E_CONFIG", e.what());
  }
}

std::vector<SamplePair> to_patches(const std::vector<SamplePair>& samples, int patch) {
  std::vector<SamplePair> out;
  for (const SamplePair& s : samples) {
    if (s.x.height() == patch && s.x.width() == patch) {
      out.push_back(s);
    } else {
      auto ps = extract_patches(s, patch, patch);
      out.insert(out.end(), ps.begin(), ps.end());
    }
  }
  return out;
}

Tensor load_input_image(const std::string& path, int want_channels) {
  Tensor t = load_image(path);
  if (t.channels() == 3 && want_channels == 1) t = luminance(t);
  if (t.channels() != want_channels)
    fail(kContract, "E_CONTRACT",
         path + ": expected " + std::to_string(want_channels) + " channels, found " +
             std::to_string(t.channels()));
  return t;
}

CUNetParams load_model(const std::string& path, const ExperimentConfig* cfg) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  }
  if (cfg && cfg->model.task != ck.model.task)
    fail(kTaskMismatch, "E_TASK_MISMATCH",
         "checkpoint task " + task_name(ck.model.task) + " does not match config task " +
             task_name(cfg->model.task));
  return params_from_checkpoint(ck);
}

json metrics_json(const Tensor& pred, const Tensor& target) {
  return {{"rmse", rmse(pred, target)}, {"psnr", psnr(pred, target)},
          {"ssim", ssim(pred, target)}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(kIo, "E_IO", "cannot write " + path);
  out << text;
}

int cmd_synth_data(const CommonArgs& args) {
  ExperimentConfig cfg = resolve_config(args);
  set_precision_from(args, Precision::f64);
  auto samples = resolve_dataset(cfg, "");
  DatasetSpec spec = cfg.data;
  try {
    write_dataset(cfg.out_dir, samples, spec);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  }
  std::cout << "wrote " << samples.size() << " triples to " << cfg.out_dir << "\n";
  return kOk;
}

int cmd_train(const CommonArgs& args, const std::string& data_dir) {
  ExperimentConfig cfg = resolve_config(args);
  set_precision_from(args, Precision::f32);
  auto samples = to_patches(resolve_dataset(cfg, data_dir), cfg.train.patch);
  if (samples.empty()) fail(kConfig, "E_CONFIG", "dataset is empty");

  fs::create_directories(cfg.out_dir);
  CUNetParams params = init_params(cfg.model, cfg.train.seed);
  AdamState state = make_adam_state(params);

  TrainResult res;
  try {
    res = train(cfg.train, samples, std::move(params), &state);
  } catch (const error& e) {
    fail(kDiverged, "E_DIVERGED", e.what());
  }

  std::string csv = "epoch,lr,train_loss,val_psnr\n";
  char row[128];
  CheckpointMeta meta;
  meta.seed = cfg.train.seed;
  for (const EpochLog& l : res.log) {
    std::snprintf(row, sizeof(row), "%d,%.10g,%.10g,%.6f\n", l.epoch, l.lr, l.train_loss,
                  l.val_psnr);
    csv += row;
    meta.loss_history.push_back(l.train_loss);
    std::printf("epoch %3d  lr %.3e  loss %.6e  val_psnr %.3f\n", l.epoch, l.lr, l.train_loss,
                l.val_psnr);
  }
  write_text(cfg.out_dir + "/train_log.csv", csv);
  meta.epoch = res.log.empty() ? 0 : res.log.back().epoch + 1;
  try {
    save_checkpoint(make_checkpoint(res.params, &state, meta), cfg.out_dir + "/model.ckpt");
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  }
  if (res.diverged)
    fail(kDiverged, "E_DIVERGED", "training diverged; last good checkpoint retained");
  std::cout << "checkpoint written to " << cfg.out_dir << "/model.ckpt\n";
  return kOk;
}

int cmd_infer(const CommonArgs& args, const std::string& ckpt, const std::string& input,
              const std::string& guidance, const std::string& out_file) {
  set_precision_from(args, Precision::f32);
  ExperimentConfig cfg;
  bool have_cfg = !args.config_path.empty() || !args.overrides.empty();
  if (have_cfg) cfg = resolve_config(args);
  CUNetParams params = load_model(ckpt, have_cfg ? &cfg : nullptr);

  try {
    Tensor x = load_input_image(input, params.cfg.m);
    Tensor y = load_input_image(guidance, params.cfg.m);
    ForwardResult fr = cunet_forward(x, y, params);
    save_image(fr.z, out_file, 65535);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  } catch (const error& e) {
    fail(kContract, "E_CONTRACT", e.what());
  }
  std::cout << "wrote " << out_file << "\n";
  return kOk;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt, const std::string& data_dir,
             const std::string& pred_dir) {
  ExperimentConfig cfg = resolve_config(args);
  set_precision_from(args, Precision::f64);
  auto samples = resolve_dataset(cfg, data_dir);
  if (samples.empty()) fail(kConfig, "E_CONFIG", "dataset is empty");

  CUNetParams params;
  if (pred_dir.empty()) params = load_model(ckpt, &cfg);

  json per_sample = json::array();
  double sum_rmse = 0, sum_psnr = 0, sum_ssim = 0;
  try {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      Tensor pred;
      if (!pred_dir.empty()) {
        char name[64];
        std::snprintf(name, sizeof(name), "pred_%05zu.%s", i,
                      samples[i].z.channels() == 3 ? "ppm" : "pgm");
        pred = load_image(pred_dir + "/" + std::string(name));
      } else {
        pred = cunet_forward(samples[i].x, samples[i].y, params).z;
      }
      json m = metrics_json(pred, samples[i].z);
      sum_rmse += m["rmse"].get<double>();
      sum_psnr += m["psnr"].get<double>();
      sum_ssim += m["ssim"].get<double>();
      per_sample.push_back(std::move(m));
    }
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  } catch (const error& e) {
    fail(kContract, "E_CONTRACT", e.what());
  }

  const double n = static_cast<double>(samples.size());
  json out = {{"aggregate",
               {{"rmse", sum_rmse / n}, {"psnr", sum_psnr / n}, {"ssim", sum_ssim / n}}},
              {"samples", std::move(per_sample)}};
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/metrics.json", out.dump(2) + "\n");
  std::cout << out["aggregate"].dump() << "\n";
  return kOk;
}

int cmd_decompose(const CommonArgs& args, const std::string& ckpt, const std::string& input,
                  const std::string& guidance) {
  ExperimentConfig cfg = resolve_config(args);
  set_precision_from(args, Precision::f64);
  bool have_cfg = !args.config_path.empty() || !args.overrides.empty();
  CUNetParams params = load_model(ckpt, have_cfg ? &cfg : nullptr);

  try {
    Tensor x = load_input_image(input, params.cfg.m);
    Tensor y = load_input_image(guidance, params.cfg.m);
    ForwardResult fr = cunet_forward(x, y, params);
    Decomposition d = decompose(fr.trace);
    fs::create_directories(cfg.out_dir);
    const char* ext = params.cfg.m == 3 ? "ppm" : "pgm";
    save_image(d.common, cfg.out_dir + "/common." + ext, 65535);
    save_image(d.unique_x, cfg.out_dir + "/unique_x." + ext, 65535);
    if (d.unique_y) save_image(*d.unique_y, cfg.out_dir + "/unique_y." + ext, 65535);
    save_image(d.final, cfg.out_dir + "/final." + ext, 65535);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  } catch (const error& e) {
    fail(kContract, "E_CONTRACT", e.what());
  }
  std::cout << "wrote decomposition to " << cfg.out_dir << "\n";
  return kOk;
}

// Unfolded-network vs ISTA equivalence plus a finite-difference gradient
// check; nonzero exit when any residual exceeds its bound.
int cmd_oracle_check(const CommonArgs& args) {
  set_precision(Precision::f64);
  const std::uint64_t seed = args.seed_set ? args.seed : 0;
  bool ok = true;

  double worst_adj = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    SeededRng rng(derive_seed(seed, trial));
    const int K = 1 + rng.uniform_int(4), s = 1 + rng.uniform_int(5);
    FilterBank b(K, s, 1);
    for (double& v : b.data()) v = rng.uniform(-1, 1);
    Tensor u(8, 8, 1), r(8, 8, K);
    for (double& v : u.data()) v = rng.uniform(-1, 1);
    for (double& v : r.data()) v = rng.uniform(-1, 1);
    worst_adj = std::max(worst_adj, std::abs(dot(conv_same(b, u), r) -
                                             dot(u, adjoint_conv(b, r))));
  }
  std::printf("adjoint identity max mismatch: %.3e (bound 1e-10)\n", worst_adj);
  ok &= worst_adj <= 1e-10;

  double worst_tie = 0.0;
  for (int J : {1, 3, 6}) {
    SeededRng rng(derive_seed(seed + 1, J));
    FilterBank bank(2, 3, 1);
    for (double& v : bank.data()) v = rng.uniform(-0.7, 0.7);
    Tensor x(9, 9, 1);
    for (double& v : x.data()) v = rng.uniform(-1, 1);
    const double L = lipschitz_upper_bound(bank, 9, 9, 80, seed);
    SolverConfig scfg;
    scfg.inner_iters = J;
    scfg.step_size = 1.0 / L;
    scfg.tolerance = 0.0;
    IstaResult ref = ista_csc(CSCProblem{x, bank, 0.05}, scfg);
    Tensor out = ufem_forward(x, tie_to_ista(bank, L, 0.05, J));
    for (std::size_t i = 0; i < out.size(); ++i)
      worst_tie = std::max(worst_tie, std::abs(out.data()[i] - ref.codes.data()[i]));
  }
  std::printf("unfolded/ista equivalence max residual: %.3e (bound 1e-10)\n", worst_tie);
  ok &= worst_tie <= 1e-10;

  double worst_grad = 0.0;
  for (Task task : {Task::MIR, Task::MIF}) {
    ModelConfig mcfg;
    mcfg.task = task;
    mcfg.K = 2;
    mcfg.s = 3;
    mcfg.J = 2;
    for (std::uint64_t inst = seed; inst < seed + 200; ++inst) {
      CUNetParams params = init_params(mcfg, inst);
      SeededRng rng(inst ^ 0x5eed);
      Tensor x(8, 8, 1), y(8, 8, 1), target(8, 8, 1);
      for (double& v : x.data()) v = rng.uniform(-1, 1);
      for (double& v : y.data()) v = rng.uniform(-1, 1);
      for (double& v : target.data()) v = rng.uniform(-1, 1);

      ForwardResult fr = cunet_forward(x, y, params);
      double margin = 1e300;
      auto scan = [&](const ChainTrace& ct, const std::vector<LCSCBlockParams>& blocks) {
        for (std::size_t j = 0; j < ct.blocks.size(); ++j) {
          const Tensor& pre = ct.blocks[j].pre_activation;
          for (std::size_t i = 0; i < pre.size(); ++i)
            margin = std::min(margin, std::abs(std::abs(pre.data()[i]) -
                                               blocks[j].theta[i % pre.channels()]));
        }
      };
      for (const PassTrace& pt : fr.trace.passes) {
        scan(pt.u, params.ufem_u);
        scan(pt.v, params.ufem_v);
        scan(pt.c, params.cfpm);
      }
      if (margin < 1e-3) continue;  // resample away from the prox kinks

      LossValue lv = mse_loss(fr.z, target);
      Gradients g = cunet_backward(fr.trace, params, lv.grad);
      std::vector<ParamRef> prefs, grefs;
      visit_params(params, [&](const ParamRef& r) { prefs.push_back(r); });
      visit_params(g, [&](const ParamRef& r) { grefs.push_back(r); });
      const double eps = 1e-6;
      for (std::size_t i = 0; i < prefs.size(); ++i) {
        std::vector<double> dir(prefs[i].values->size());
        double norm = 0;
        for (double& d : dir) {
          d = rng.uniform(-1, 1);
          norm += d * d;
        }
        norm = std::sqrt(norm);
        double analytic = 0;
        for (std::size_t e = 0; e < dir.size(); ++e) {
          dir[e] /= norm;
          analytic += (*grefs[i].values)[e] * dir[e];
        }
        auto loss_at = [&](double shift) {
          for (std::size_t e = 0; e < dir.size(); ++e) (*prefs[i].values)[e] += shift * dir[e];
          double l = mse_loss(cunet_forward(x, y, params).z, target).loss;
          for (std::size_t e = 0; e < dir.size(); ++e) (*prefs[i].values)[e] -= shift * dir[e];
          return l;
        };
        const double fd = (loss_at(eps) - loss_at(-eps)) / (2 * eps);
        worst_grad = std::max(worst_grad,
                              std::abs(analytic - fd) / std::max(std::abs(fd), 1e-8));
      }
      break;
    }
  }
  std::printf("gradient check max relative error: %.3e (bound 1e-4)\n", worst_grad);
  ok &= worst_grad < 1e-4;

  std::printf("oracle-check: %s\n", ok ? "PASS" : "FAIL");
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unrolled multi-modal convolutional sparse coding for image "
               "restoration and fusion"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string data_dir, pred_dir, ckpt, input, guidance, out_file;

  CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic dataset");
  add_common(synth, args);

  CLI::App* trainc = app.add_subcommand("train", "train a model");
  add_common(trainc, args);
  trainc->add_option("--data-dir", data_dir, "load dataset from a directory");

  CLI::App* infer = app.add_subcommand("infer", "run the model on one image pair");
  add_common(infer, args);
  infer->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  infer->add_option("--input", input, "input image")->required();
  infer->add_option("--guidance", guidance, "guidance / second source image")->required();
  infer->add_option("--output", out_file, "output image path")->required();

  CLI::App* evalc = app.add_subcommand("eval", "compute metrics over a dataset");
  add_common(evalc, args);
  evalc->add_option("--checkpoint", ckpt, "model checkpoint");
  evalc->add_option("--data-dir", data_dir, "load dataset from a directory");
  evalc->add_option("--pred-dir", pred_dir, "score stored predictions instead of a model");

  CLI::App* deco = app.add_subcommand("decompose", "export the component reconstructions");
  add_common(deco, args);
  deco->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  deco->add_option("--input", input, "input image")->required();
  deco->add_option("--guidance", guidance, "guidance / second source image")->required();

  CLI::App* oracle = app.add_subcommand("oracle-check", "solver and gradient self-check");
  add_common(oracle, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error E_USAGE " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(args);
    if (trainc->parsed()) return cmd_train(args, data_dir);
    if (infer->parsed()) return cmd_infer(args, ckpt, input, guidance, out_file);
    if (evalc->parsed()) {
      if (ckpt.empty() && pred_dir.empty())
        fail(kUsage, "E_USAGE", "eval needs --checkpoint or --pred-dir");
      return cmd_eval(args, ckpt, data_dir, pred_dir);
    }
    if (deco->parsed()) return cmd_decompose(args, ckpt, input, guidance);
    if (oracle->parsed()) return cmd_oracle_check(args);
  } catch (const io_error& e) {
    fail(kIo, "E_IO", e.what());
  } catch (const divergence_error& e) {
    fail(kDiverged, "E_DIVERGED", e.what());
  } catch (const contract_error& e) {
    fail(kContract, "E_CONTRACT", e.what());
  } catch (const std::exception& e) {
    fail(kContract, "E_CONTRACT", e.what());
  }
  return kUsage;
}
