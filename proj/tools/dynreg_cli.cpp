// dynreg: command-line front end for video denoising with learned dynamic regularisers.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dynreg/dynreg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dynreg;

namespace {

enum Exit { ok = 0, usage = 1, io = 2, solver = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError(IoErrorKind::open_failed, path.string());
  out << text;
  if (!out) throw IoError(IoErrorKind::write_failed, path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorKind::open_failed, path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(IoErrorKind::bad_header, path.string(), e.what());
  }
}

json params_json(const ParamVector& p) {
  json j{{"alpha1", p.alpha1}, {"alpha2", p.alpha2}};
  if (p.kappa) j["kappa"] = *p.kappa;
  return j;
}

ParamVector params_from_json(const json& j) {
  ParamVector p{j.at("alpha1").get<double>(), j.at("alpha2").get<double>(), std::nullopt};
  if (j.contains("kappa")) p.kappa = j.at("kappa").get<double>();
  return p;
}

// ---- make-noisy -------------------------------------------------------------

struct NoisyArgs {
  std::string input, output;
  double variance = 0.02;
  std::uint64_t seed = 0;
};

int run_make_noisy(const NoisyArgs& a) {
  const VideoVolume clean = read_vvol(a.input);
  write_vvol(a.output, add_noise(clean, NoiseSpec{a.variance, a.seed}));
  return ok;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string kind, output;
  std::size_t w = 32, h = 32, t = 16;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  write_vvol(a.output, synth_sequence(parse_synth_kind(a.kind), Dims{a.w, a.h, a.t}, a.seed));
  return ok;
}

// ---- denoise ----------------------------------------------------------------

struct DenoiseArgs {
  std::string input, out_dir = "denoised", model;
  double a1 = 0.1, a2 = 0.1;
  std::optional<double> kappa;
  std::optional<std::size_t> iters;
  std::optional<bool> accelerated;
  bool previews = true;
};

int run_denoise(const DenoiseArgs& a) {
  const ModelSpec model{parse_model(a.model)};
  if (!is_ic(model.kind) && a.kappa) throw UsageError("--kappa is not accepted by rigid models");
  if (is_ic(model.kind) && !a.kappa) throw UsageError("IC models require --kappa");
  const ParamVector params{a.a1, a.a2, a.kappa};
  try {
    validate(model.kind, params);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const VideoVolume f = read_vvol(a.input);
  SolverConfig cfg = default_solver_config(model.kind);
  if (a.iters) cfg.iterations = *a.iters;
  if (a.accelerated) cfg.accelerated = *a.accelerated;
  const SaddleState s = pdhgm_solve(model, f, params, cfg);

  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  std::vector<std::pair<std::string, const VideoVolume*>> outputs{{"u", &s.u}};
  std::optional<Components> parts;
  if (is_ic(model.kind)) {
    parts = split_components(s.u, s.w, *normalize_kappa(model.kind, params).params.kappa);
    outputs.push_back({"w", &s.w});
    outputs.push_back({"temporal", &parts->temporal});
    outputs.push_back({"spatial", &parts->spatial});
  }
  json files = json::array();
  for (const auto& [name, vol] : outputs) {
    write_vvol(dir / (name + ".vvol"), *vol);
    files.push_back(name + ".vvol");
    if (a.previews) export_pgm_sequence(*vol, dir / "preview" / name);
  }

  json resolved{{"command", "denoise"},
                {"input", a.input},
                {"model", cli_name(model.kind)},
                {"params", params_json(params)},
                {"iterations", cfg.iterations},
                {"accelerated", cfg.accelerated},
                {"sigma", cfg.sigma},
                {"tau", cfg.tau},
                {"outputs", files},
                {"energy", energy_unsmoothed(model, s.u, s.w, params, f)},
                {"gap", primal_dual_gap(model, s, f, params)}};
  write_text(dir / "config.json", resolved.dump(2) + "\n");
  return ok;
}

// ---- learn ------------------------------------------------------------------

const char* preconditioner_name(Preconditioner p) {
  switch (p) {
    case Preconditioner::none: return "none";
    case Preconditioner::jacobi: return "jacobi";
    case Preconditioner::incomplete_cholesky: return "incomplete_cholesky";
  }
  return "?";
}

Preconditioner parse_preconditioner(const std::string& s) {
  for (auto p : {Preconditioner::none, Preconditioner::jacobi, Preconditioner::incomplete_cholesky})
    if (s == preconditioner_name(p)) return p;
  throw UsageError("unknown preconditioner '" + s + "'");
}

json krylov_json(const KrylovOptions& k) {
  return {{"tolerance", k.tolerance},
          {"max_iterations", k.max_iterations},
          {"preconditioner", preconditioner_name(k.preconditioner)}};
}

void krylov_from_json(const json& j, KrylovOptions& k) {
  k.tolerance = j.value("tolerance", k.tolerance);
  k.max_iterations = j.value("max_iterations", k.max_iterations);
  if (j.contains("preconditioner")) k.preconditioner = parse_preconditioner(j.at("preconditioner").get<std::string>());
}

struct LearnSetup {
  ModelSpec model;
  OuterConfig outer;
  NoiseSpec noise;  // echoed only
};

json config_json(const LearnSetup& s) {
  const OuterConfig& c = s.outer;
  const auto means = c.start_means.value_or(default_start_means(s.model.kind));
  const SolverConfig inner = inner_config(s.model.kind, c);
  return {{"model", cli_name(s.model.kind)},
          {"gamma", s.model.gamma},
          {"epsilon", s.model.epsilon},
          {"seed", c.seed},
          {"starts", c.starts},
          {"start_means", {means[0], means[1]}},
          {"kappa_init", {c.kappa_init_min, c.kappa_init_max}},
          {"armijo_c", c.armijo_c},
          {"rho", c.rho},
          {"max_iterations", c.max_iterations},
          {"alpha_box", {c.alpha_min, c.alpha_max}},
          {"kappa_box", {c.kappa_min, c.kappa_max}},
          {"inner_solve", c.inner_solve == InnerSolve::smoothed ? "smoothed" : "pdhgm"},
          {"inner_iterations", inner.iterations},
          {"inner_accelerated", inner.accelerated},
          {"newton", {{"tolerance", c.newton.tolerance},
                      {"max_iterations", c.newton.max_iterations},
                      {"krylov", krylov_json(c.newton.krylov)}}},
          {"gradient_mode", c.gradient.mode == GradientMode::adjoint ? "adjoint" : "forward"},
          {"krylov", krylov_json(c.gradient.krylov)},
          {"fd_step", c.fd_step},
          {"threads", c.threads}};
}

void apply_config(const json& j, LearnSetup& s) {
  OuterConfig& c = s.outer;
  if (j.contains("model")) s.model.kind = parse_model(j.at("model").get<std::string>());
  s.model.gamma = j.value("gamma", s.model.gamma);
  s.model.epsilon = j.value("epsilon", s.model.epsilon);
  c.seed = j.value("seed", c.seed);
  c.starts = j.value("starts", c.starts);
  if (j.contains("start_means")) c.start_means = j.at("start_means").get<std::array<double, 2>>();
  if (j.contains("kappa_init")) {
    const auto k = j.at("kappa_init").get<std::array<double, 2>>();
    c.kappa_init_min = k[0];
    c.kappa_init_max = k[1];
  }
  c.armijo_c = j.value("armijo_c", c.armijo_c);
  c.rho = j.value("rho", c.rho);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  if (j.contains("alpha_box")) {
    const auto b = j.at("alpha_box").get<std::array<double, 2>>();
    c.alpha_min = b[0];
    c.alpha_max = b[1];
  }
  if (j.contains("kappa_box")) {
    const auto b = j.at("kappa_box").get<std::array<double, 2>>();
    c.kappa_min = b[0];
    c.kappa_max = b[1];
  }
  if (j.contains("inner_solve")) {
    const auto m = j.at("inner_solve").get<std::string>();
    if (m != "smoothed" && m != "pdhgm") throw UsageError("inner_solve must be 'smoothed' or 'pdhgm'");
    c.inner_solve = m == "smoothed" ? InnerSolve::smoothed : InnerSolve::pdhgm;
  }
  if (j.contains("inner_iterations")) c.inner_iterations = j.at("inner_iterations").get<std::size_t>();
  if (j.contains("inner_accelerated")) c.inner_accelerated = j.at("inner_accelerated").get<bool>();
  if (j.contains("newton")) {
    const json& n = j.at("newton");
    c.newton.tolerance = n.value("tolerance", c.newton.tolerance);
    c.newton.max_iterations = n.value("max_iterations", c.newton.max_iterations);
    if (n.contains("krylov")) krylov_from_json(n.at("krylov"), c.newton.krylov);
  }
  if (j.contains("gradient_mode")) {
    const auto m = j.at("gradient_mode").get<std::string>();
    if (m != "adjoint" && m != "forward") throw UsageError("gradient_mode must be 'adjoint' or 'forward'");
    c.gradient.mode = m == "adjoint" ? GradientMode::adjoint : GradientMode::forward;
  }
  if (j.contains("krylov")) krylov_from_json(j.at("krylov"), c.gradient.krylov);
  c.fd_step = j.value("fd_step", c.fd_step);
  c.threads = j.value("threads", c.threads);
}

struct LearnArgs {
  std::string noisy, truth, out_dir = "learned";
  std::optional<std::string> model, config;
  std::optional<std::size_t> starts, max_iterations;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

int run_learn(const LearnArgs& a) {
  LearnSetup setup;
  try {
    if (a.config) apply_config(read_json(*a.config), setup);
    if (a.model) setup.model.kind = parse_model(*a.model);
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.starts) setup.outer.starts = *a.starts;
  if (a.seed) setup.outer.seed = *a.seed;
  if (a.threads) setup.outer.threads = *a.threads;
  if (a.max_iterations) setup.outer.max_iterations = *a.max_iterations;

  const VideoVolume f = read_vvol(a.noisy);
  const VideoVolume g = read_vvol(a.truth);
  if (!(f.dims() == g.dims()))
    throw UsageError("noisy and truth volumes differ in size: " + to_string(f.dims()) + " vs " + to_string(g.dims()));

  const json resolved = config_json(setup);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", resolved.dump(2) + "\n");

  LearnResult r;
  try {
    r = learn(setup.model, f, g, setup.outer);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const ModelKind kind = setup.model.kind;
  json starts = json::array();
  std::ostringstream trace;
  trace << "start,iteration,alpha1,alpha2,kappa,value,step,accepted\n";
  trace.precision(17);
  for (std::size_t k = 0; k < r.starts.size(); ++k) {
    const StartResult& s = r.starts[k];
    json e{{"index", k}, {"status", s.status}, {"ok", s.ok}, {"initial", params_json(s.initial)}};
    if (s.ok) {
      e["final"] = params_json(s.final_params);
      e["opt_value"] = s.value;
      e["psnr"] = s.psnr;
      e["ssim"] = s.ssim;
      e["iterations"] = s.iterations;
    }
    starts.push_back(e);
    for (const TraceEntry& t : s.trace) {
      trace << k << ',' << t.iteration << ',' << t.params[0] << ',' << t.params[1] << ',';
      if (t.params.size() > 2) trace << t.params[2];
      trace << ',' << t.value << ',' << t.step << ',' << (t.accepted ? 1 : 0) << '\n';
    }
  }

  json files = json::array({"u.vvol"});
  write_vvol(dir / "u.vvol", r.u);
  if (is_ic(kind)) {
    write_vvol(dir / "w.vvol", r.w);
    files.push_back("w.vvol");
  }
  write_text(dir / "trace.csv", trace.str());

  json result{{"model", cli_name(kind)},
              {"seed", setup.outer.seed},
              {"params", params_json(r.params)},
              {"reported", params_json(r.normalized.params)},
              {"converted", r.normalized.converted},
              {"opt_value", r.opt_value},
              {"psnr", r.psnr},
              {"ssim", r.ssim},
              {"noisy_psnr", psnr(f, g)},
              {"noisy_ssim", ssim(f, g)},
              {"best_start", r.best_start},
              {"dims", {f.dims().w, f.dims().h, f.dims().t}},
              {"noisy", a.noisy},
              {"truth", a.truth},
              {"outputs", files},
              {"trace", "trace.csv"},
              {"config", resolved},
              {"starts", starts}};
  write_text(dir / "result.json", result.dump(2) + "\n");
  std::cout << display_name(kind) << ": psnr " << fmt("%.4g", r.psnr) << " dB (noisy " << fmt("%.4g", psnr(f, g))
            << " dB), results in " << dir.string() << "\n";
  return ok;
}

// ---- report -----------------------------------------------------------------

struct ReportRow {
  std::string file, model, params, opt_value, psnr, ssim;
};

ReportRow report_row(const std::string& file) {
  const json j = read_json(file);
  try {
    const ModelKind kind = parse_model(j.at("model").get<std::string>());
    const NormalizedParams n = normalize_kappa(kind, params_from_json(j.at("params")));
    const ParamVector& p = n.params;
    std::string t = "(" + fmt("%.3g", p.alpha1) + ", " + fmt("%.3g", p.alpha2);
    if (p.kappa) t += ", " + fmt("%.3g", *p.kappa);
    t += ")";
    if (n.converted) t += "*";
    const auto num = [&](const char* key) {
      const json& v = j.at(key);
      return v.is_null() ? std::string("inf") : fmt("%.4g", v.get<double>());
    };
    return {file, std::string(display_name(kind)), t, num("opt_value"), num("psnr"), num("ssim")};
  } catch (const std::exception& e) {
    throw IoError(IoErrorKind::bad_header, file, std::string("malformed result: ") + e.what());
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

struct ReportArgs {
  std::vector<std::string> files;
  std::optional<std::string> csv;
};

int run_report(const ReportArgs& a) {
  if (a.files.empty()) throw UsageError("report needs at least one result.json");
  std::vector<ReportRow> rows;
  int status = ok;
  for (const auto& f : a.files) {
    try {
      rows.push_back(report_row(f));
    } catch (const IoError& e) {
      std::cerr << "dynreg report: " << e.what() << "\n";
      status = io;
    }
  }

  const std::vector<std::string> head{"Model", "(alpha1, alpha2, kappa)", "Opt. value", "PSNR", "SSIM", "File"};
  std::vector<std::vector<std::string>> table{head};
  for (const auto& r : rows) table.push_back({r.model, r.params, r.opt_value, r.psnr, r.ssim, r.file});
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : table)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (const auto& row : table) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      // Text columns left-aligned, numbers right-aligned.
      const bool left = i == 0 || i == 1 || i + 1 == row.size();
      const std::string pad(width[i] - row[i].size(), ' ');
      line += left ? row[i] + pad : pad + row[i];
      if (i + 1 < row.size()) line += "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    std::cout << line << "\n";
  }

  if (a.csv) {
    std::ostringstream out;
    out << "model,params,opt_value,psnr,ssim,file\n";
    for (const auto& r : rows)
      out << csv_field(r.model) << ',' << csv_field(r.params) << ',' << r.opt_value << ',' << r.psnr << ',' << r.ssim
          << ',' << csv_field(r.file) << '\n';
    write_text(*a.csv, out.str());
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video denoising with learned infimal-convolution and rigid spatio-temporal regularisers"};
  app.require_subcommand(1);

  NoisyArgs noisy;
  auto* cmd_noisy = app.add_subcommand("make-noisy", "Add seeded Gaussian noise to a volume");
  cmd_noisy->add_option("--var", noisy.variance, "Noise variance")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd_noisy->add_option("--seed", noisy.seed, "Noise seed")->capture_default_str();
  cmd_noisy->add_option("input", noisy.input, "Clean .vvol")->required();
  cmd_noisy->add_option("output", noisy.output, "Noisy .vvol")->required();

  SynthArgs synth;
  auto* cmd_synth = app.add_subcommand("synth", "Write a synthetic test sequence");
  cmd_synth->set_help_flag("--help", "Print this help message and exit");
  cmd_synth->add_option("--kind", synth.kind, "moving-square | panning-gradient | switching-scene")->required();
  cmd_synth->add_option("--w", synth.w, "Width")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_synth->add_option("--h", synth.h, "Height")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_synth->add_option("--t", synth.t, "Frames")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_synth->add_option("--seed", synth.seed, "Texture seed")->capture_default_str();
  cmd_synth->add_option("output", synth.output, "Output .vvol")->required();

  const std::vector<std::string> models{"ictvtv", "icl2tv", "rigidtvtv", "rigidl2tv"};

  DenoiseArgs den;
  auto* cmd_den = app.add_subcommand("denoise", "Solve the denoising problem for fixed parameters");
  cmd_den->add_option("--model", den.model, "Regulariser")->required()->check(CLI::IsMember(models));
  cmd_den->add_option("--a1", den.a1, "alpha1")->capture_default_str();
  cmd_den->add_option("--a2", den.a2, "alpha2")->capture_default_str();
  cmd_den->add_option("--kappa", den.kappa, "kappa (IC models only)");
  cmd_den->add_option("--iters", den.iters, "PDHGM iterations (default 200 for IC, 50 for rigid)");
  cmd_den->add_option("--accelerated", den.accelerated, "Accelerated step schedule (default on for rigid)");
  cmd_den->add_flag("!--no-previews", den.previews, "Skip the PGM previews");
  cmd_den->add_option("--out", den.out_dir, "Output directory")->capture_default_str();
  cmd_den->add_option("input", den.input, "Noisy .vvol")->required();

  LearnArgs lrn;
  auto* cmd_learn = app.add_subcommand("learn", "Learn regularisation parameters against a ground truth");
  cmd_learn->add_option("--model", lrn.model, "Regulariser (default ictvtv)")->check(CLI::IsMember(models));
  cmd_learn->add_option("--starts", lrn.starts, "Number of multistart samples (default 100)");
  cmd_learn->add_option("--seed", lrn.seed, "Multistart seed (default 0)");
  cmd_learn->add_option("--config", lrn.config, "JSON config; flags override it");
  cmd_learn->add_option("--max-iterations", lrn.max_iterations, "Outer iteration cap per start (default 100)");
  cmd_learn->add_option("--threads", lrn.threads, "Worker threads for the starts (default 1)");
  cmd_learn->add_option("--out", lrn.out_dir, "Output directory")->capture_default_str();
  cmd_learn->add_option("noisy", lrn.noisy, "Noisy .vvol")->required();
  cmd_learn->add_option("truth", lrn.truth, "Ground-truth .vvol")->required();

  ReportArgs rep;
  auto* cmd_rep = app.add_subcommand("report", "Tabulate result.json files");
  cmd_rep->add_option("results", rep.files, "result.json files");
  cmd_rep->add_option("--csv", rep.csv, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*cmd_noisy) return run_make_noisy(noisy);
    if (*cmd_synth) return run_synth(synth);
    if (*cmd_den) return run_denoise(den);
    if (*cmd_learn) return run_learn(lrn);
    if (*cmd_rep) return run_report(rep);
  } catch (const UsageError& e) {
    std::cerr << "dynreg: " << e.what() << "\n";
    return usage;
  } catch (const IoError& e) {
    std::cerr << "dynreg: " << e.what() << "\n";
    return io;
  } catch (const SolverError& e) {
    std::cerr << "dynreg: solver failure: " << e.what() << "\n";
    return solver;
  } catch (const std::invalid_argument& e) {
    std::cerr << "dynreg: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "dynreg: " << e.what() << "\n";
    return io;
  }
  return usage;
}
