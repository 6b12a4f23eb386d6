// Command-line harness: cost sweeps, optimal expert-count solving,
// measurement audits, gradient checks, routing statistics, and a
// three-architecture comparison. All output is deterministic for a given
// config and seed; reals are rendered with 17 significant digits so CSV
// round-trips 64-bit values exactly.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sectmoe/audit.hpp"
#include "sectmoe/blocks.hpp"
#include "sectmoe/config.hpp"
#include "sectmoe/cost_model.hpp"
#include "sectmoe/sectional.hpp"
#include "sectmoe/traditional.hpp"

namespace {

using namespace sectmoe;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct CliArgs {
  std::string command;
  std::string config_path;
  std::string out;
  long long e_min = 0;  // 0 = not given
  long long e_max = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool corrupt_adjoint = false;
};

int usage(std::ostream& os) {
  os << "usage: sectmoe <cost|opt|audit|gradcheck|compare|route-stats>\n"
        "               [--config <path>] [--emin <n>] [--emax <n>]\n"
        "               [--out <path>] [--seed <n>]\n";
  return 2;
}

CliArgs parse_args(int argc, char** argv) {
  CliArgs args;
  if (argc < 2) throw ConfigError("missing command");
  args.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    const std::string flag = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) throw ConfigError("flag " + flag + " needs a value");
      return argv[++i];
    };
    if (flag == "--config") {
      args.config_path = next();
    } else if (flag == "--emin") {
      args.e_min = std::stoll(next());
    } else if (flag == "--emax") {
      args.e_max = std::stoll(next());
    } else if (flag == "--out") {
      args.out = next();
    } else if (flag == "--seed") {
      args.seed = std::stoull(next());
      args.seed_given = true;
    } else if (flag == "--corrupt-adjoint") {
      args.corrupt_adjoint = true;
    } else {
      throw ConfigError("unknown flag '" + flag + "'");
    }
  }
  return args;
}

RunConfig load_config(const CliArgs& args) {
  RunConfig cfg =
      args.config_path.empty() ? RunConfig{} : RunConfig::load(args.config_path);
  if (args.seed_given) cfg.seed = args.seed;
  if (!args.out.empty()) cfg.out = args.out;
  if (args.e_min > 0) cfg.e_min = static_cast<std::size_t>(args.e_min);
  if (args.e_max > 0) cfg.e_max = static_cast<std::size_t>(args.e_max);
  return cfg;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

// ---- cost -----------------------------------------------------------------

int cmd_cost(const RunConfig& cfg) {
  const long long e_min = static_cast<long long>(cfg.range_min());
  const long long e_max = static_cast<long long>(cfg.range_max());
  if (e_min < 1 || e_min > e_max) {
    throw ConfigError("cost: invalid expert range [" + std::to_string(e_min) +
                      ", " + std::to_string(e_max) + "]");
  }
  if (cfg.out.empty()) throw ConfigError("cost: no output path (use --out)");

  const ModelDims dims = cfg.dims();
  std::string csv =
      "E,a_pre,a_experts,a_total,r_pre,r_experts,r_total,overhead,s_total,"
      "rf_qkv_derived,rf_qkv_paper,rf_attn_derived,rf_attn_paper\n";
  for (long long e = e_min; e <= e_max; ++e) {
    const ModelDims at = dims.with_experts(static_cast<double>(e));
    const CostBreakdown b = total_cost(at);
    const ReductionFactors f = reduction_factors(at);
    csv += std::to_string(e) + "," + fmt17(b.a_pre) + "," +
           fmt17(b.a_experts) + "," + fmt17(b.a_total) + "," + fmt17(b.r_pre) +
           "," + fmt17(b.r_experts) + "," + fmt17(b.r_total) + "," +
           fmt17(b.overhead) + "," + fmt17(b.s_total) + "," +
           fmt17(f.qkv_derived) + "," + fmt17(f.qkv_literal) + "," +
           fmt17(f.attn_derived) + "," + fmt17(f.attn_literal) + "\n";
  }
  write_file(cfg.out, csv);
  std::cout << "convention: " << convention_name(dims.convention) << "\n"
            << "wrote " << cfg.out << " (" << (e_max - e_min + 1)
            << " rows)\n";
  return 0;
}

// ---- opt ------------------------------------------------------------------

int cmd_opt(const RunConfig& cfg) {
  const long long e_min = static_cast<long long>(cfg.range_min());
  const long long e_max = static_cast<long long>(cfg.range_max());
  const ModelDims dims = cfg.dims();
  const OptResult res = optimize_experts(dims, e_min, e_max);

  std::cout << "convention: " << convention_name(dims.convention) << "\n"
            << "range: [" << e_min << ", " << e_max << "]\n"
            << "e_opt_int: " << res.e_opt_int << "\n"
            << "s_at_opt: " << fmt17(res.s_at_opt) << "\n"
            << "e_opt_cont: " << fmt17(res.e_opt_cont) << "\n"
            << "s_at_e_opt_cont: " << fmt17(res.s_at_cont) << "\n"
            << "ds_de_at_e_opt_cont: " << fmt17(res.derivative_at_opt) << "\n"
            << "bracket: [" << fmt17(res.bracket_lo) << ", "
            << fmt17(res.bracket_hi) << "]\n";
  if (res.interior) {
    const double scale = ds_de_scale(dims, res.e_opt_cont);
    const bool ok = std::abs(res.derivative_at_opt) < 1e-6 * scale;
    std::cout << "derivative_check: " << (ok ? "pass" : "FAIL")
              << " (|ds_de| vs 1e-6 * " << fmt17(scale) << ")\n";
    return ok ? 0 : 1;
  }
  std::cout << "derivative_check: skipped (minimum at range boundary)\n";
  return 0;
}

// ---- audit ----------------------------------------------------------------

int cmd_audit(const RunConfig& cfg) {
  const SectionalConfig scfg = cfg.sectional();
  const ModelDims dims = cfg.dims();
  const AuditReport report =
      merge(audit_sectional(scfg, dims),
            audit_traditional(dims, cfg.d_ff_mult_expert, cfg.seed));
  std::cout << "convention: " << convention_name(dims.convention) << "\n"
            << render_text(report);
  if (!cfg.out.empty()) write_file(cfg.out, render_csv(report));
  return report.overall_pass ? 0 : 1;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(const RunConfig& cfg, bool corrupt) {
  const double tol = 1e-4;
  const auto results = run_gradcheck_suite(cfg.sectional(), 1e-5, tol,
                                           corrupt ? 1e-2 : 0.0);
  bool all_ok = true;
  char line[160];
  std::snprintf(line, sizeof(line), "%-18s %14s %8s %8s\n", "block",
                "max_rel_error", "checked", "status");
  std::cout << line;
  for (const BlockGradCheck& r : results) {
    const bool ok = r.report.max_rel_error < tol;
    all_ok = all_ok && ok;
    std::snprintf(line, sizeof(line), "%-18s %14s %8zu %8s\n", r.name.c_str(),
                  fmt17(r.report.max_rel_error).c_str(),
                  r.report.coords_checked, ok ? "ok" : "FAIL");
    std::cout << line;
  }
  std::cout << (all_ok ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
  return all_ok ? 0 : 1;
}

// ---- compare --------------------------------------------------------------

void print_tally_row(const char* name, const OpCounter& c) {
  char line[256];
  std::snprintf(line, sizeof(line),
                "%-12s %12llu %12llu %12llu %8llu %8llu %12llu %12llu %14llu\n",
                name,
                static_cast<unsigned long long>(c.count(Category::Qkv)),
                static_cast<unsigned long long>(c.count(Category::AttnScores)),
                static_cast<unsigned long long>(c.count(Category::Ffn)),
                static_cast<unsigned long long>(c.count(Category::Router)),
                static_cast<unsigned long long>(c.count(Category::Pooling)),
                static_cast<unsigned long long>(c.count(Category::Aggregation)),
                static_cast<unsigned long long>(c.count(Category::Other)),
                static_cast<unsigned long long>(c.total()));
  std::cout << line;
}

int cmd_compare(const RunConfig& cfg) {
  const SectionalConfig scfg = cfg.sectional();
  const std::size_t el = scfg.total_tokens();
  const std::size_t d = scfg.d0;

  Prng data_rng(cfg.seed ^ 0xc03b42ull);
  const Tensor x = random_normal({el, d}, data_rng);

  // dense single layer at full width
  OpCounter dense_counter;
  LayerParams dense_layer = init_layer_params(
      d, scfg.heads_pre, cfg.d_ff_mult_pre * d, cfg.seed ^ 0xd15eull);
  const Tensor dense_out = transformer_layer(dense_counter, x, dense_layer,
                                             LayerOptions{.causal = scfg.causal});

  // traditional token-routed MoE (FFN experts)
  OpCounter trad_counter;
  Prng gate_rng(cfg.seed ^ 0x6a7eull);
  const Tensor w_gate = random_matrix(d, scfg.experts, d, gate_rng);
  const std::vector<FfnParams> experts = init_expert_ffns(
      scfg.experts, d, cfg.d_ff_mult_expert * d, cfg.seed ^ 0xe78ull);
  const auto [trad_out, stats] = traditional_forward(
      trad_counter, x, w_gate, experts, cfg.top_k, cfg.capacity_factor);

  // sectional MoE
  OpCounter sect_counter;
  const SectionalParams sect_params = init_sectional_params(scfg);
  const Tensor sect_out = sectional_forward(sect_counter, x, sect_params, scfg);

  const std::uint64_t dense_params =
      layer_param_count(d, cfg.d_ff_mult_pre * d).total();
  std::uint64_t trad_params = static_cast<std::uint64_t>(d) * scfg.experts;
  for (const FfnParams& p : experts) {
    trad_params += static_cast<std::uint64_t>(p.w1.size()) + p.b1.size() +
                   p.w2.size() + p.b2.size();
  }
  const std::uint64_t sect_params_total = param_count(scfg).total();

  std::cout << "compare (convention: " << convention_name(cfg.convention)
            << ", seed " << cfg.seed << ")\n\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %12s %s\n", "architecture",
                "params", "output_shape");
  std::cout << line;
  std::snprintf(line, sizeof(line), "%-12s %12llu %s\n", "dense",
                static_cast<unsigned long long>(dense_params),
                dense_out.shape_str().c_str());
  std::cout << line;
  std::snprintf(line, sizeof(line), "%-12s %12llu %s\n", "traditional",
                static_cast<unsigned long long>(trad_params),
                trad_out.shape_str().c_str());
  std::cout << line;
  std::snprintf(line, sizeof(line), "%-12s %12llu %s\n", "sectional",
                static_cast<unsigned long long>(sect_params_total),
                sect_out.shape_str().c_str());
  std::cout << line;

  std::cout << "\nmeasured MACs by category\n";
  std::snprintf(line, sizeof(line),
                "%-12s %12s %12s %12s %8s %8s %12s %12s %14s\n", "architecture",
                "qkv", "attn_scores", "ffn", "router", "pooling",
                "aggregation", "other", "total");
  std::cout << line;
  print_tally_row("dense", dense_counter);
  print_tally_row("traditional", trad_counter);
  print_tally_row("sectional", sect_counter);

  std::cout << "\ntraditional routing: tokens_per_expert=[";
  for (std::size_t e = 0; e < stats.tokens_per_expert.size(); ++e) {
    if (e) std::cout << ", ";
    std::cout << stats.tokens_per_expert[e];
  }
  std::cout << "] cv=" << fmt17(stats.coefficient_of_variation)
            << " entropy=" << fmt17(stats.entropy)
            << " overflow=" << stats.overflow_count << "\n";
  return 0;
}

// ---- route-stats ----------------------------------------------------------

int cmd_route_stats(const RunConfig& cfg) {
  const SectionalConfig scfg = cfg.sectional();
  const std::size_t el = scfg.total_tokens();
  const std::size_t d = scfg.d0;

  Prng data_rng(cfg.seed ^ 0xc03b42ull);
  const Tensor x = random_normal({el, d}, data_rng);
  Prng gate_rng(cfg.seed ^ 0x6a7eull);
  const Tensor w_gate = random_matrix(d, scfg.experts, d, gate_rng);
  const std::vector<FfnParams> experts = init_expert_ffns(
      scfg.experts, d, cfg.d_ff_mult_expert * d, cfg.seed ^ 0xe78ull);

  OpCounter counter;
  const auto [out, stats] = traditional_forward(counter, x, w_gate, experts,
                                                cfg.top_k, cfg.capacity_factor);
  (void)out;
  std::cout << "tokens: " << el << " experts: " << scfg.experts
            << " k: " << cfg.top_k
            << " capacity_factor: " << fmt17(cfg.capacity_factor) << "\n";
  std::cout << "tokens_per_expert: [";
  for (std::size_t e = 0; e < stats.tokens_per_expert.size(); ++e) {
    if (e) std::cout << ", ";
    std::cout << stats.tokens_per_expert[e];
  }
  std::cout << "]\n"
            << "cv: " << fmt17(stats.coefficient_of_variation) << "\n"
            << "entropy_nats: " << fmt17(stats.entropy) << "\n"
            << "overflow: " << stats.overflow_count << "\n"
            << "router_macs: " << counter.count(Category::Router) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    const CliArgs args = parse_args(argc, argv);
    const RunConfig cfg = load_config(args);
    if (args.command == "cost") return cmd_cost(cfg);
    if (args.command == "opt") return cmd_opt(cfg);
    if (args.command == "audit") return cmd_audit(cfg);
    if (args.command == "gradcheck")
      return cmd_gradcheck(cfg, args.corrupt_adjoint);
    if (args.command == "compare") return cmd_compare(cfg);
    if (args.command == "route-stats") return cmd_route_stats(cfg);
    std::cerr << "unknown command '" << args.command << "'\n";
    return usage(std::cerr);
  } catch (const sectmoe::EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}
