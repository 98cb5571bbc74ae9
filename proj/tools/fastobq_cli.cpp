// fastobq command line: quantize, compare, bench, inspect.
//
// Exit codes: 0 success, 1 a quantization run failed, 2 bad config or I/O.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fastobq/harness.hpp"

namespace fs = std::filesystem;
using namespace fastobq;

namespace {

constexpr int kOk = 0;
constexpr int kRunError = 1;
constexpr int kConfigError = 2;

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::bad_config:
    case ErrorCode::bad_manifest:
    case ErrorCode::missing_file:
    case ErrorCode::io_failure:
    case ErrorCode::bad_magic:
    case ErrorCode::truncated_payload:
    case ErrorCode::unsupported_dtype:
    case ErrorCode::invalid_tensor:
    case ErrorCode::shape_mismatch:
    case ErrorCode::invalid_argument:
      return kConfigError;
    default:
      return kRunError;
  }
}

struct QuantizeArgs {
  std::string manifest;
  std::string quantizer = "fastobq";
  std::string strategy = "sensi_des";
  int bits = 4;
  std::string scheme = "sym";
  double damping = 0.1;
  bool relative_damping = false;
  std::string out;
  unsigned threads = 0;
  bool trace = false;
  bool greedy = false;
};

int run_quantize(const QuantizeArgs& a) {
  Quantizer q;
  OrderingStrategy strategy;
  GridScheme scheme;
  try {
    q = parse_quantizer(a.quantizer);
    strategy = parse_strategy(a.strategy);
    scheme = parse_scheme(a.scheme);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  const auto layers = load_bundle(a.manifest);
  const fs::path out = a.out;
  fs::create_directories(out);
  const auto mode = a.relative_damping ? DampingMode::relative : DampingMode::absolute;

  std::vector<LayerReport> reports;
  bool failed = false;
  for (const auto& b : layers) {
    LayerReport r;
    r.layer = b.name;
    r.quantizer = a.quantizer;
    r.strategy = to_string(strategy);
    r.bits = a.bits;
    r.scheme = std::string(to_string(scheme));
    r.d_row = b.d_row();
    r.d_col = b.d_col();
    try {
      const auto run = quantize_bundle(b, q, strategy, a.bits, scheme, a.damping, mode, a.threads,
                                       a.greedy, a.trace);
      write_tensor(from_matrix(run.result.quantized, DType::f64), out / (b.name + ".ftns"));
      std::ofstream(out / (b.name + "_grid.json")) << grid_to_json(run.grid).dump(2) << '\n';
      if (a.trace) {
        std::ofstream tf(out / (b.name + "_trace.csv"));
        run.result.trace.write_csv(tf);
      }
      r.error_total = run.error.total;
      r.error_normalized = run.error.normalized;
      r.error_rtn_baseline = run.baseline.total;
      r.wall_time_ms = run.result.wall_time_ms;
      r.hinv_matrices_allocated = run.result.hinv_matrices_allocated;
      r.hinv_bytes_peak = run.result.hinv_bytes_peak;
      r.guarded_pivots = run.result.guarded_pivots;
      std::cout << b.name << ": error " << r.error_total << " (rtn " << r.error_rtn_baseline
                << "), " << r.wall_time_ms << " ms\n";
    } catch (const Error& e) {
      if (exit_code_for(e.code()) == kConfigError) throw;
      r.ok = false;
      r.error = e.what();
      failed = true;
      std::cerr << b.name << ": " << e.what() << '\n';
    }
    reports.push_back(std::move(r));
  }
  write_reports(reports, out);
  return failed ? kRunError : kOk;
}

int run_compare(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw Error(ErrorCode::missing_file, config_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::bad_config, e.what());
  }
  const auto cfg = parse_config(j, fs::path(config_path).parent_path());
  const auto outcome = run_experiment(cfg);
  for (const auto& r : outcome.reports) {
    std::cout << r.layer << ' ' << r.quantizer << ' ' << r.strategy << " seed " << r.seed << ": ";
    if (r.ok) {
      std::cout << "error " << r.error_total << " (rtn " << r.error_rtn_baseline << ")\n";
    } else {
      std::cout << r.error << '\n';
    }
  }
  return outcome.any_error ? kRunError : kOk;
}

int run_bench(const std::vector<Eigen::Index>& rows, Eigen::Index cols, int bits, int repeats,
              std::uint64_t seed, unsigned threads, const std::string& out) {
  const auto table = bench_speedup(rows, cols, bits, repeats, seed, threads);
  write_bench_csv(table, std::cout);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw Error(ErrorCode::io_failure, "cannot write " + out);
    write_bench_csv(table, f);
  }
  return kOk;
}

int run_inspect(const std::string& manifest, int bits, const std::string& scheme, double damping) {
  GridScheme s;
  try {
    s = parse_scheme(scheme);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  for (const auto& b : load_bundle(manifest)) std::cout << format_inspection(inspect_layer(b, bits, s, damping));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian-based post-training weight quantization"};
  app.require_subcommand(1);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "quantize every layer of a manifest");
  quantize->add_option("--manifest", qa.manifest, "layer manifest (JSON)")->required();
  quantize->add_option("--quantizer", qa.quantizer, "rtn | obq | fastobq")->capture_default_str();
  quantize->add_option("--strategy", qa.strategy, "<sensi|err|w|none>_<des|asc>")->capture_default_str();
  quantize->add_option("--bits", qa.bits)->check(CLI::Range(2, 8))->capture_default_str();
  quantize->add_option("--scheme", qa.scheme, "sym | asym")->capture_default_str();
  quantize->add_option("--damping", qa.damping)->check(CLI::NonNegativeNumber)->capture_default_str();
  quantize->add_flag("--relative-damping", qa.relative_damping, "scale damping by mean diag(H)");
  quantize->add_option("--out", qa.out, "output directory")->required();
  quantize->add_option("--threads", qa.threads, "0: FASTOBQ_THREADS or all cores");
  quantize->add_flag("--trace", qa.trace, "write <layer>_trace.csv");
  quantize->add_flag("--greedy", qa.greedy, "obq re-ranks after every step");

  std::string config;
  auto* compare = app.add_subcommand("compare", "run a quantizer x strategy x seed sweep");
  compare->add_option("--config", config, "experiment config (JSON)")->required();

  std::vector<Eigen::Index> rows{64, 128, 256};
  Eigen::Index cols = 256;
  int bench_bits = 4, repeats = 5;
  std::uint64_t seed = 0;
  unsigned bench_threads = 0;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "time obq against fastobq");
  bench->add_option("--rows", rows)->delimiter(',')->capture_default_str();
  bench->add_option("--cols", cols)->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--bits", bench_bits)->check(CLI::Range(2, 8))->capture_default_str();
  bench->add_option("--repeats", repeats)->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--seed", seed)->capture_default_str();
  bench->add_option("--threads", bench_threads);
  bench->add_option("--out", bench_out, "also write the table as CSV");

  std::string inspect_manifest, inspect_scheme = "sym";
  int inspect_bits = 4;
  double inspect_damping = 0.1;
  auto* inspect = app.add_subcommand("inspect", "summarize layers before a long run");
  inspect->add_option("--manifest", inspect_manifest)->required();
  inspect->add_option("--bits", inspect_bits)->check(CLI::Range(2, 8))->capture_default_str();
  inspect->add_option("--scheme", inspect_scheme)->capture_default_str();
  inspect->add_option("--damping", inspect_damping)->check(CLI::NonNegativeNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*quantize) return run_quantize(qa);
    if (*compare) return run_compare(config);
    if (*bench) return run_bench(rows, cols, bench_bits, repeats, seed, bench_threads, bench_out);
    if (*inspect) return run_inspect(inspect_manifest, inspect_bits, inspect_scheme, inspect_damping);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunError;
  }
  return kOk;
}
