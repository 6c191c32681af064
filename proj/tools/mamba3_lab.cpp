// mamba3-lab: verification suites, discretization convergence studies,
// synthetic-task training, and FLOP/intensity sweeps from one entry point.
// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numerical
// fault.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mamba3/block.hpp"
#include "mamba3/discretize.hpp"
#include "mamba3/mimo.hpp"
#include "mamba3/ssd.hpp"
#include "mamba3/tasks.hpp"
#include "mamba3/verify.hpp"

namespace {

using nlohmann::json;

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw mamba3::parameter_error("cannot open output path: " + path);
  f << text;
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  if (out.empty()) throw mamba3::parameter_error("empty list: " + csv);
  return out;
}

struct VerifyOptions {
  std::string suite = "all";
  double tol = 1e-10;
  double grad_tol = 1e-4;
  std::uint64_t seed = 42;
  std::size_t trials = 50;
  std::string out;
  double corrupt_mask = 0.0;
};

int run_verify(const VerifyOptions& opt) {
  const double t0 = now_seconds();
  mamba3::mask_corruption() = opt.corrupt_mask;
  const std::vector<mamba3::SuiteReport> reports =
      mamba3::run_verification(opt.suite, opt.seed, opt.trials, opt.tol, opt.grad_tol);

  json checks = json::array();
  bool all_pass = true;
  for (const mamba3::SuiteReport& rep : reports)
    for (const mamba3::CheckResult& c : rep.checks) {
      checks.push_back(
          {{"name", rep.suite + "/" + c.name}, {"max_err", c.max_err}, {"pass", c.pass}});
      all_pass = all_pass && c.pass;
    }
  json report = {{"config",
                  {{"subcommand", "verify"},
                   {"suite", opt.suite},
                   {"tol", opt.tol},
                   {"grad_tol", opt.grad_tol},
                   {"seed", opt.seed},
                   {"trials", opt.trials}}},
                 {"checks", checks},
                 {"wall_time_s", now_seconds() - t0}};
  emit(opt.out, report.dump(2) + "\n");
  for (const mamba3::SuiteReport& rep : reports)
    for (const mamba3::CheckResult& c : rep.checks)
      if (!c.pass)
        std::cerr << "FAIL suite " << rep.suite << " check " << c.name
                  << " max_err=" << c.max_err << "\n";
  return all_pass ? 0 : 1;
}

struct ConvergeOptions {
  std::string rule = "exp-trapezoidal";
  double lambda = 0.5;
  double delta0 = 0.2;
  std::size_t points = 6;
  std::string out;
};

int run_converge(const ConvergeOptions& opt) {
  const mamba3::DiscretizationRule rule = mamba3::rule_by_name(opt.rule);
  const mamba3::ScalarTestSystem sys = mamba3::standard_smooth_system();
  const std::vector<double> deltas = mamba3::halving_deltas(opt.delta0, opt.points);
  const mamba3::ConvergenceStudy study =
      mamba3::convergence_order(rule, sys, deltas, opt.lambda);
  std::ostringstream csv;
  csv << "rule,delta,error,fitted_slope\n";
  for (const mamba3::ConvergencePoint& p : study.points)
    csv << opt.rule << ',' << p.delta << ',' << p.error << ',' << study.fitted_slope << '\n';
  emit(opt.out, csv.str());
  std::cerr << "fitted slope " << study.fitted_slope << "\n";
  return 0;
}

struct TrainOptions {
  std::string task = "parity";
  std::size_t layers = 1;
  std::size_t d_model = 32;
  std::size_t state = 64;
  std::size_t heads = 1;
  std::size_t rank = 1;
  std::size_t expand = 2;
  bool no_rope = false;
  bool mamba2_style = false;
  std::string stage_list = "40,80,160";
  std::size_t min_len = 3;
  std::size_t eval_len = 256;
  std::size_t steps_per_stage = 2000;
  std::size_t batch = 64;
  std::size_t eval_every = 250;
  std::size_t eval_instances = 256;
  double lr = 1e-3;
  double early_stop_target = -1.0;
  std::uint64_t seed = 0;
  std::string history_out;
  std::string report_out;
};

int run_train(const TrainOptions& opt) {
  const double t0 = now_seconds();
  const mamba3::Task task = mamba3::task_by_name(opt.task);

  mamba3::ModelConfig mc;
  mc.n_layers = opt.layers;
  mc.block.d_model = opt.d_model;
  mc.block.state = opt.state;
  mc.block.n_heads = opt.heads;
  mc.block.rank = opt.rank;
  mc.block.expand = opt.expand;
  mc.block.head_dim = opt.expand * opt.d_model / opt.heads;
  mc.block.use_rope = !opt.no_rope;
  if (opt.mamba2_style) {
    mc.block.use_rope = false;
    mc.block.use_trapezoidal = false;
    mc.block.use_bc_bias = false;
    mc.block.use_pre_gate_norm = true;
  }
  mc.block.validate();

  mamba3::Curriculum cur;
  cur.min_len = opt.min_len;
  cur.max_len_schedule = parse_size_list(opt.stage_list);
  cur.eval_len = opt.eval_len;
  cur.steps_per_stage = opt.steps_per_stage;
  cur.batch_size = opt.batch;
  cur.eval_every = opt.eval_every;
  cur.eval_instances = opt.eval_instances;
  cur.lr = opt.lr;
  cur.early_stop_target = opt.early_stop_target;

  const mamba3::CurriculumResult res = mamba3::run_curriculum(mc, task, cur, opt.seed);
  if (!opt.history_out.empty()) mamba3::write_history_csv(opt.history_out, res.history);

  json report = {{"config",
                  {{"subcommand", "train"},
                   {"task", opt.task},
                   {"layers", opt.layers},
                   {"d_model", opt.d_model},
                   {"state", opt.state},
                   {"rank", opt.rank},
                   {"use_rope", mc.block.use_rope},
                   {"mamba2_style", opt.mamba2_style},
                   {"stages", opt.stage_list},
                   {"steps_per_stage", opt.steps_per_stage},
                   {"batch", opt.batch},
                   {"lr", opt.lr},
                   {"seed", opt.seed}}},
                 {"checks",
                  json::array({{{"name", "train/" + opt.task + "-final-scaled-acc"},
                                {"max_err", 1.0 - res.final_scaled_acc},
                                {"pass", !res.diverged}}})},
                 {"final_scaled_acc", res.final_scaled_acc},
                 {"diverged", res.diverged},
                 {"steps_run", res.steps_run},
                 {"wall_time_s", now_seconds() - t0}};
  emit(opt.report_out, report.dump(2) + "\n");
  std::cerr << "final scaled accuracy " << res.final_scaled_acc << (res.diverged ? " (diverged)" : "")
            << "\n";
  return res.diverged ? 1 : 0;
}

struct SweepOptions {
  std::string kind = "intensity";
  std::string t_list = "1024";
  std::string n_list = "128";
  std::size_t p = 64;
  std::size_t r_max = 8;
  int dtype_bytes = 2;
  std::string out;
};

int run_sweep(const SweepOptions& opt) {
  std::ostringstream csv;
  if (opt.kind == "intensity") {
    csv << "N,P,R,dtype_bytes,flops,bytes,intensity,rank_asymptote\n";
    for (std::size_t N : parse_size_list(opt.n_list))
      for (std::size_t R = 1; R <= opt.r_max; ++R) {
        const mamba3::IntensityReport rep =
            R == 1 ? mamba3::arithmetic_intensity_siso(N, opt.p, opt.dtype_bytes)
                   : mamba3::arithmetic_intensity_mimo(N, opt.p, R, opt.dtype_bytes);
        const double asym = (4.0 * static_cast<double>(R) + 1.0) / 5.0;
        csv << N << ',' << opt.p << ',' << R << ',' << opt.dtype_bytes << ',' << rep.flops
            << ',' << rep.bytes << ',' << rep.intensity << ',' << asym << '\n';
      }
  } else if (opt.kind == "flops") {
    // matched regime: C = P = N per row (chunk length equal to state size)
    csv << "T,C,N,P,R,intra,inter,total,leading\n";
    for (std::size_t T : parse_size_list(opt.t_list))
      for (std::size_t N : parse_size_list(opt.n_list))
        for (std::size_t R = 1; R <= opt.r_max; R *= 2) {
          if (N % R != 0) continue;
          const mamba3::FlopReport rep =
              R == 1 ? mamba3::flop_count_siso(T, N, N, N)
                     : mamba3::flop_count_mimo(T, mamba3::mimo_chunk_size(N, R), N, N, R);
          csv << T << ',' << mamba3::mimo_chunk_size(N, R) << ',' << N << ',' << N << ',' << R
              << ','
              << rep.intra << ',' << rep.inter << ',' << rep.total() << ','
              << rep.leading_total() << '\n';
        }
  } else {
    throw mamba3::parameter_error("unknown sweep kind: " + opt.kind);
  }
  emit(opt.out, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale state-space layer laboratory"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file mirroring flag names");

  VerifyOptions vo;
  CLI::App* verify = app.add_subcommand("verify", "run oracle verification suites");
  verify->add_option("--suite", vo.suite, "equivalence|rope|mimo|mask|grad|all");
  verify->add_option("--tol", vo.tol, "max-error tolerance for analytic suites");
  verify->add_option("--grad-tol", vo.grad_tol, "relative tolerance for the grad suite");
  verify->add_option("--seed", vo.seed, "root seed (suites use named substreams)");
  verify->add_option("--trials", vo.trials, "random instances per suite");
  verify->add_option("--out", vo.out, "JSON report path (default stdout)");
  verify->add_option("--corrupt-mask", vo.corrupt_mask,
                     "test hook: offset added to one dense mask entry");

  ConvergeOptions co;
  CLI::App* converge = app.add_subcommand("converge", "discretization convergence study");
  converge->add_option("--rule", co.rule,
                       "forward-euler|backward-euler|trapezoidal|zoh|exp-euler|exp-trapezoidal");
  converge->add_option("--lambda", co.lambda, "three-term interpolation weight");
  converge->add_option("--delta0", co.delta0, "coarsest step size");
  converge->add_option("--points", co.points, "number of halvings");
  converge->add_option("--out", co.out, "CSV path (default stdout)");

  TrainOptions to;
  CLI::App* train = app.add_subcommand("train", "curriculum training on a formal-language task");
  train->add_option("--task", to.task, "parity|mod-arith|mod-arith-brackets");
  train->add_option("--layers", to.layers);
  train->add_option("--d-model", to.d_model);
  train->add_option("--state", to.state);
  train->add_option("--heads", to.heads);
  train->add_option("--rank", to.rank);
  train->add_option("--expand", to.expand);
  train->add_flag("--no-rope", to.no_rope, "disable input/readout rotations");
  train->add_flag("--mamba2-style", to.mamba2_style,
                  "two-term rule, no rotations, no B/C biases, post-gate norm");
  train->add_option("--stages", to.stage_list, "comma list of per-stage max lengths");
  train->add_option("--min-len", to.min_len);
  train->add_option("--eval-len", to.eval_len);
  train->add_option("--steps-per-stage", to.steps_per_stage);
  train->add_option("--batch", to.batch);
  train->add_option("--eval-every", to.eval_every);
  train->add_option("--eval-instances", to.eval_instances);
  train->add_option("--lr", to.lr);
  train->add_option("--early-stop-target", to.early_stop_target,
                    "stop once eval scaled accuracy reaches this (-1 = never)");
  train->add_option("--seed", to.seed);
  train->add_option("--history-out", to.history_out, "history CSV path");
  train->add_option("--report-out", to.report_out, "JSON report path (default stdout)");

  SweepOptions so;
  CLI::App* sweep = app.add_subcommand("sweep", "analytic FLOP / intensity tables");
  sweep->add_option("--kind", so.kind, "flops|intensity");
  sweep->add_option("--t-list", so.t_list, "comma list of sequence lengths (flops)");
  sweep->add_option("--n-list", so.n_list, "comma list of state sizes");
  sweep->add_option("--p", so.p, "head dim (intensity)");
  sweep->add_option("--r-max", so.r_max, "max rank");
  sweep->add_option("--dtype-bytes", so.dtype_bytes, "element size in bytes (2 or 4)");
  sweep->add_option("--out", so.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*verify) return run_verify(vo);
    if (*converge) return run_converge(co);
    if (*train) return run_train(to);
    if (*sweep) return run_sweep(so);
  } catch (const mamba3::numerical_error& e) {
    std::cerr << "numerical fault: " << e.what() << "\n";
    return 3;
  } catch (const mamba3::parameter_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const mamba3::dimension_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
