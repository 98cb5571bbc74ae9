#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "fastobq/error.hpp"
#include "fastobq/fastobq_core.hpp"
#include "fastobq/grid.hpp"
#include "fastobq/linalg.hpp"
#include "fastobq/obq_ref.hpp"
#include "fastobq/ordering.hpp"
#include "fastobq/result.hpp"
#include "fastobq/tensor_io.hpp"

namespace fastobq {

// ---------------------------------------------------------------------------
// Synthetic layers.

enum class WeightDist { gaussian, long_tail };

inline std::string_view to_string(WeightDist d) {
  return d == WeightDist::gaussian ? "gaussian" : "long_tail";
}

inline WeightDist parse_weight_dist(std::string_view s) {
  if (s == "gaussian") return WeightDist::gaussian;
  if (s == "long_tail") return WeightDist::long_tail;
  throw Error(ErrorCode::bad_config, "weight_dist must be gaussian or long_tail");
}

struct SyntheticLayerSpec {
  Eigen::Index d_row = 64;
  Eigen::Index d_col = 64;
  Eigen::Index n_samples = 0;  // 0: 8 * d_col
  WeightDist weight_dist = WeightDist::gaussian;
  std::uint64_t seed = 0;
};

inline constexpr double kLongTailFraction = 0.01;
inline constexpr double kLongTailScale = 8.0;

/// W and X standard normal. long_tail additionally scales a seed-chosen 1% of
/// the weights by 8.
inline LayerBundle generate_synthetic_layer(const SyntheticLayerSpec& spec) {
  if (spec.d_row < 1 || spec.d_col < 1 || spec.n_samples < 0) {
    throw Error(ErrorCode::invalid_argument, "synthetic layer dims must be >= 1");
  }
  const Eigen::Index n = spec.n_samples > 0 ? spec.n_samples : 8 * spec.d_col;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  LayerBundle b;
  b.name = std::string(to_string(spec.weight_dist)) + "_" + std::to_string(spec.d_row) + "x" +
           std::to_string(spec.d_col);
  b.weight.resize(spec.d_row, spec.d_col);
  for (Eigen::Index i = 0; i < b.weight.size(); ++i) b.weight.data()[i] = normal(rng);
  if (spec.weight_dist == WeightDist::long_tail) {
    const auto total = static_cast<std::size_t>(b.weight.size());
    const auto count = static_cast<std::size_t>(std::llround(kLongTailFraction * static_cast<double>(total)));
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first `count` slots are a uniform sample.
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, total - 1);
      std::swap(idx[i], idx[pick(rng)]);
      b.weight.data()[idx[i]] *= kLongTailScale;
    }
  }
  b.calib.resize(spec.d_col, n);
  for (Eigen::Index i = 0; i < b.calib.size(); ++i) b.calib.data()[i] = normal(rng);
  b.metadata["weight_dist"] = std::string(to_string(spec.weight_dist));
  b.metadata["seed"] = std::to_string(spec.seed);
  return b;
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class Quantizer { rtn, obq, fastobq };

inline std::string_view to_string(Quantizer q) {
  switch (q) {
    case Quantizer::rtn: return "rtn";
    case Quantizer::obq: return "obq";
    case Quantizer::fastobq: return "fastobq";
  }
  return "?";
}

inline Quantizer parse_quantizer(std::string_view s) {
  if (s == "rtn") return Quantizer::rtn;
  if (s == "obq") return Quantizer::obq;
  if (s == "fastobq") return Quantizer::fastobq;
  throw Error(ErrorCode::bad_config, "unknown quantizer '" + std::string(s) + "'");
}

struct ExperimentConfig {
  // Exactly one source: a manifest, or synthetic specs whose seed is taken
  // from `seeds` for each cell.
  std::optional<std::filesystem::path> manifest;
  std::vector<SyntheticLayerSpec> synthetic;
  std::vector<Quantizer> quantizers;
  std::vector<OrderingStrategy> strategies{{OrderKey::sensitivity, OrderDirection::descending}};
  int bits = 4;
  GridScheme scheme = GridScheme::symmetric;
  double damping = 0.1;
  DampingMode damping_mode = DampingMode::absolute;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output;  // empty: no files written
  unsigned threads = 0;
  bool obq_greedy = false;
};

inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.quantizers.empty()) throw Error(ErrorCode::bad_config, "no quantizers given");
  if (cfg.seeds.empty()) throw Error(ErrorCode::bad_config, "no seeds given");
  if (cfg.strategies.empty()) throw Error(ErrorCode::bad_config, "no strategies given");
  if (cfg.bits < 2 || cfg.bits > 8) throw Error(ErrorCode::bad_config, "bits must be in 2..8");
  if (cfg.manifest.has_value() == !cfg.synthetic.empty()) {
    throw Error(ErrorCode::bad_config, "give either a manifest or synthetic layers");
  }
  if (!(cfg.damping >= 0.0)) throw Error(ErrorCode::bad_config, "damping must be >= 0");
}

/// Parses {"manifest": path} or {"synthetic": [{d_row, d_col, n_samples,
/// weight_dist}]} plus quantizers, strategies, bits, scheme, damping, seeds,
/// output and threads. Relative paths resolve against `base`.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  ExperimentConfig cfg;
  try {
    if (!j.is_object()) throw Error(ErrorCode::bad_config, "config must be a JSON object");
    if (j.contains("manifest")) cfg.manifest = base / j["manifest"].get<std::string>();
    if (j.contains("synthetic")) {
      for (const auto& s : j["synthetic"]) {
        SyntheticLayerSpec spec;
        spec.d_row = s.value("d_row", Eigen::Index{64});
        spec.d_col = s.value("d_col", Eigen::Index{64});
        spec.n_samples = s.value("n_samples", Eigen::Index{0});
        spec.weight_dist = parse_weight_dist(s.value("weight_dist", std::string("gaussian")));
        if (spec.d_row < 1 || spec.d_col < 1 || spec.n_samples < 0) {
          throw Error(ErrorCode::bad_config, "synthetic dims must be >= 1");
        }
        cfg.synthetic.push_back(spec);
      }
    }
    for (const auto& q : j.value("quantizers", std::vector<std::string>{})) {
      cfg.quantizers.push_back(parse_quantizer(q));
    }
    if (j.contains("strategies")) {
      cfg.strategies.clear();
      for (const auto& s : j["strategies"]) cfg.strategies.push_back(parse_strategy(s.get<std::string>()));
    }
    cfg.bits = j.value("bits", 4);
    cfg.scheme = parse_scheme(j.value("scheme", std::string("sym")));
    cfg.damping = j.value("damping", 0.1);
    if (j.value("damping_mode", std::string("absolute")) == "relative") {
      cfg.damping_mode = DampingMode::relative;
    }
    if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("output")) cfg.output = base / j["output"].get<std::string>();
    cfg.threads = j.value("threads", 0u);
    cfg.obq_greedy = j.value("obq_greedy", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::bad_config, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::bad_config) throw;
    throw Error(ErrorCode::bad_config, e.what());
  }
  validate_config(cfg);
  return cfg;
}

struct LayerReport {
  std::string layer;
  std::string quantizer;
  std::string strategy;
  std::uint64_t seed = 0;
  int bits = 4;
  std::string scheme = "sym";
  Eigen::Index d_row = 0;
  Eigen::Index d_col = 0;
  double error_total = 0.0;
  double error_normalized = 0.0;
  double error_rtn_baseline = 0.0;
  double wall_time_ms = 0.0;
  std::size_t hinv_matrices_allocated = 0;
  std::size_t hinv_bytes_peak = 0;
  std::size_t guarded_pivots = 0;  // warning count
  bool ok = true;
  std::string error;  // "<Code>: message" when !ok
};

inline nlohmann::json report_to_json(const LayerReport& r) {
  nlohmann::json j = {{"layer", r.layer},
                      {"quantizer", r.quantizer},
                      {"strategy", r.strategy},
                      {"seed", r.seed},
                      {"bits", r.bits},
                      {"scheme", r.scheme},
                      {"d_row", r.d_row},
                      {"d_col", r.d_col},
                      {"error_total", r.error_total},
                      {"error_normalized", r.error_normalized},
                      {"error_rtn_baseline", r.error_rtn_baseline},
                      {"wall_time_ms", r.wall_time_ms},
                      {"hinv_matrices_allocated", r.hinv_matrices_allocated},
                      {"hinv_bytes_peak", r.hinv_bytes_peak},
                      {"warnings", {{"guarded_pivots", r.guarded_pivots}}},
                      {"status", r.ok ? "ok" : "error"}};
  if (!r.ok) j["error"] = r.error;
  return j;
}

/// ||(W - rtn(W)) X||_F^2 on grid g. Shared by sweeps and inspect so both
/// report the same number.
inline LayerError rtn_baseline(const Eigen::MatrixXd& w, const Eigen::MatrixXd& x,
                               const QuantGrid& g) {
  return layer_error(w, rtn_quantize_layer(w, g), x);
}

struct QuantizeRun {
  LayerResult result;
  QuantGrid grid;
  LayerError error;
  LayerError baseline;
};

/// Quantizes one layer with one quantizer. The RTN baseline uses the same
/// grid instance as the quantizer.
inline QuantizeRun quantize_bundle(const LayerBundle& b, Quantizer q, const OrderingStrategy& strategy,
                                   int bits, GridScheme scheme, double damping,
                                   DampingMode mode = DampingMode::absolute, unsigned threads = 0,
                                   bool obq_greedy = false, bool record_trace = false) {
  check_bundle_shapes(b);
  QuantizeRun run;
  run.grid = fit_grid(b.weight, bits, scheme);
  QuantizeOptions opts{.threads = threads, .record_trace = record_trace, .calib = &b.calib};
  switch (q) {
    case Quantizer::rtn: {
      const auto start = std::chrono::steady_clock::now();
      run.result.quantized = rtn_quantize_layer(b.weight, run.grid);
      run.result.wall_time_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      break;
    }
    case Quantizer::obq: {
      const auto h = build_hessian(b.calib, damping, mode);
      run.result = obq_quantize_layer(b.weight, h, run.grid, strategy, obq_greedy, opts);
      break;
    }
    case Quantizer::fastobq: {
      const auto h = build_hessian(b.calib, damping, mode);
      run.result = fastobq_quantize_layer(b.weight, h, run.grid, strategy, opts);
      break;
    }
  }
  run.error = layer_error(b.weight, run.result.quantized, b.calib);
  run.result.error_total = run.error.total;
  run.baseline = rtn_baseline(b.weight, b.calib, run.grid);
  return run;
}

struct ExperimentOutcome {
  std::vector<LayerReport> reports;
  bool any_error = false;
};

namespace detail {

inline LayerReport run_cell(const LayerBundle& b, Quantizer q, const OrderingStrategy& s,
                            std::uint64_t seed, const ExperimentConfig& cfg) {
  LayerReport r;
  r.layer = b.name;
  r.quantizer = std::string(to_string(q));
  r.strategy = to_string(s);
  r.seed = seed;
  r.bits = cfg.bits;
  r.scheme = std::string(to_string(cfg.scheme));
  r.d_row = b.d_row();
  r.d_col = b.d_col();
  try {
    const auto run = quantize_bundle(b, q, s, cfg.bits, cfg.scheme, cfg.damping, cfg.damping_mode,
                                     cfg.threads, cfg.obq_greedy);
    r.error_total = run.error.total;
    r.error_normalized = run.error.normalized;
    r.error_rtn_baseline = run.baseline.total;
    r.wall_time_ms = run.result.wall_time_ms;
    r.hinv_matrices_allocated = run.result.hinv_matrices_allocated;
    r.hinv_bytes_peak = run.result.hinv_bytes_peak;
    r.guarded_pivots = run.result.guarded_pivots;
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.what();
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

}  // namespace detail

/// Peak resident set size in KiB from /proc, if available.
inline std::optional<long> os_peak_rss_kb() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("VmHWM:")) {
      std::istringstream ss(line.substr(6));
      long kb = 0;
      if (ss >> kb) return kb;
    }
  }
  return std::nullopt;
}

inline void write_reports(const std::vector<LayerReport>& reports, const std::filesystem::path& dir);
inline void emit_error_curves(const std::vector<LayerReport>& reports, const std::filesystem::path& path);

/// Runs layer x quantizer x strategy x seed. A failing cell is recorded in
/// its report and the sweep continues.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  ExperimentOutcome out;
  std::vector<LayerBundle> loaded;
  if (cfg.manifest) loaded = load_bundle(*cfg.manifest);

  for (std::uint64_t seed : cfg.seeds) {
    std::vector<LayerBundle> synth;
    for (auto spec : cfg.synthetic) {
      spec.seed = seed;
      synth.push_back(generate_synthetic_layer(spec));
    }
    const auto& layers = cfg.manifest ? loaded : synth;
    for (const auto& b : layers) {
      for (auto q : cfg.quantizers) {
        for (const auto& s : cfg.strategies) {
          out.reports.push_back(detail::run_cell(b, q, s, seed, cfg));
          if (!out.reports.back().ok) out.any_error = true;
        }
      }
    }
  }

  if (!cfg.output.empty()) {
    write_reports(out.reports, cfg.output);
    emit_error_curves(out.reports, cfg.output / "curves.csv");
    nlohmann::json info = {{"runs", out.reports.size()}, {"any_error", out.any_error}};
    if (auto rss = os_peak_rss_kb()) info["os_peak_rss_kb"] = *rss;
    std::ofstream(cfg.output / "run_info.json") << info.dump(2) << '\n';
  }
  return out;
}

/// reports.jsonl (one JSON object per run) and summary.csv.
inline void write_reports(const std::vector<LayerReport>& reports, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream jl(dir / "reports.jsonl");
  std::ofstream csv(dir / "summary.csv");
  if (!jl || !csv) throw Error(ErrorCode::io_failure, "cannot write reports to " + dir.string());
  csv.precision(17);
  csv << "layer,quantizer,strategy,seed,bits,scheme,error_total,error_normalized,"
         "error_rtn_baseline,wall_time_ms,hinv_matrices_allocated,hinv_bytes_peak,"
         "guarded_pivots,status\n";
  for (const auto& r : reports) {
    jl << report_to_json(r).dump() << '\n';
    csv << r.layer << ',' << r.quantizer << ',' << r.strategy << ',' << r.seed << ',' << r.bits
        << ',' << r.scheme << ',' << r.error_total << ',' << r.error_normalized << ','
        << r.error_rtn_baseline << ',' << r.wall_time_ms << ',' << r.hinv_matrices_allocated << ','
        << r.hinv_bytes_peak << ',' << r.guarded_pivots << ',' << (r.ok ? "ok" : "error") << '\n';
  }
}

/// Curve label: "rtn", "<strategy>" for obq and "para_<strategy>" for fastobq.
inline std::string curve_label(const LayerReport& r) {
  if (r.quantizer == "rtn") return "rtn";
  if (r.quantizer == "fastobq") return "para_" + r.strategy;
  return r.strategy;
}

/// Long-format CSV: layer,strategy,seed,error_total,error_normalized, sorted
/// by (layer, strategy, seed). Failed runs are skipped.
inline void emit_error_curves(const std::vector<LayerReport>& reports,
                              const std::filesystem::path& path) {
  std::vector<const LayerReport*> rows;
  for (const auto& r : reports) {
    if (!r.ok) continue;
    if (!rows.empty() && (rows.front()->bits != r.bits || rows.front()->scheme != r.scheme)) {
      throw Error(ErrorCode::mixed_grids, "curve file mixes bits/scheme settings");
    }
    rows.push_back(&r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const LayerReport* a, const LayerReport* b) {
    return std::tuple(a->layer, curve_label(*a), a->seed) < std::tuple(b->layer, curve_label(*b), b->seed);
  });
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_failure, "cannot write " + path.string());
  out.precision(17);
  out << "layer,strategy,seed,error_total,error_normalized\n";
  for (const auto* r : rows) {
    out << r->layer << ',' << curve_label(*r) << ',' << r->seed << ',' << r->error_total << ','
        << r->error_normalized << '\n';
  }
}

// ---------------------------------------------------------------------------
// Benchmarks.

struct BenchRow {
  Eigen::Index d_row = 0;
  Eigen::Index d_col = 0;
  double obq_ms = 0.0;   // median
  double fast_ms = 0.0;  // median
  double speedup = 0.0;
  // Counters from every run, warmup included.
  std::vector<std::size_t> obq_hinv_allocated;
  std::vector<std::size_t> fast_hinv_allocated;
  std::size_t obq_hinv_bytes_peak = 0;
  std::size_t fast_hinv_bytes_peak = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Times obq (fixed sensi_des order) and fastobq (sensi_des) on the same
/// gaussian layer for each d_row. One warmup per quantizer, then the median
/// of `repeats` timed runs.
inline std::vector<BenchRow> bench_speedup(const std::vector<Eigen::Index>& rows, Eigen::Index cols,
                                           int bits, int repeats, std::uint64_t seed = 0,
                                           unsigned threads = 0, double damping = 0.1) {
  if (repeats < 1) throw Error(ErrorCode::invalid_argument, "repeats must be >= 1");
  const OrderingStrategy s{OrderKey::sensitivity, OrderDirection::descending};
  std::vector<BenchRow> table;
  for (auto d_row : rows) {
    const auto b = generate_synthetic_layer({d_row, cols, 0, WeightDist::gaussian, seed});
    const auto g = fit_grid(b.weight, bits);
    const auto h = build_hessian(b.calib, damping);
    const QuantizeOptions opts{.threads = threads};
    BenchRow row;
    row.d_row = d_row;
    row.d_col = cols;
    std::vector<double> t_obq, t_fast;
    for (int rep = 0; rep <= repeats; ++rep) {
      const auto ro = obq_quantize_layer(b.weight, h, g, s, false, opts);
      const auto rf = fastobq_quantize_layer(b.weight, h, g, s, opts);
      row.obq_hinv_allocated.push_back(ro.hinv_matrices_allocated);
      row.fast_hinv_allocated.push_back(rf.hinv_matrices_allocated);
      row.obq_hinv_bytes_peak = std::max(row.obq_hinv_bytes_peak, ro.hinv_bytes_peak);
      row.fast_hinv_bytes_peak = std::max(row.fast_hinv_bytes_peak, rf.hinv_bytes_peak);
      if (rep == 0) continue;  // warmup
      t_obq.push_back(ro.wall_time_ms);
      t_fast.push_back(rf.wall_time_ms);
    }
    row.obq_ms = median(t_obq);
    row.fast_ms = median(t_fast);
    row.speedup = row.fast_ms > 0.0 ? row.obq_ms / row.fast_ms : 0.0;
    table.push_back(std::move(row));
  }
  return table;
}

inline void write_bench_csv(const std::vector<BenchRow>& table, std::ostream& out) {
  out << "d_row,d_col,obq_ms,fastobq_ms,speedup,obq_hinv_allocated,fastobq_hinv_allocated,"
         "obq_hinv_bytes_peak,fastobq_hinv_bytes_peak\n";
  for (const auto& r : table) {
    out << r.d_row << ',' << r.d_col << ',' << r.obq_ms << ',' << r.fast_ms << ',' << r.speedup
        << ',' << r.obq_hinv_allocated.back() << ',' << r.fast_hinv_allocated.back() << ','
        << r.obq_hinv_bytes_peak << ',' << r.fast_hinv_bytes_peak << '\n';
  }
}

// ---------------------------------------------------------------------------
// Preflight.

struct LayerInspection {
  std::string name;
  Eigen::Index d_row = 0;
  Eigen::Index d_col = 0;
  Eigen::Index n_samples = 0;
  double scale_min = 0.0;
  double scale_median = 0.0;
  double scale_max = 0.0;
  std::optional<double> condition;  // of the damped Hessian
  std::string hessian_error;        // set when the Hessian is unusable
  LayerError rtn;
};

inline LayerInspection inspect_layer(const LayerBundle& b, int bits, GridScheme scheme,
                                     double damping = 0.1,
                                     DampingMode mode = DampingMode::absolute) {
  check_bundle_shapes(b);
  LayerInspection out;
  out.name = b.name;
  out.d_row = b.d_row();
  out.d_col = b.d_col();
  out.n_samples = b.n_samples();
  const auto g = fit_grid(b.weight, bits, scheme);
  out.scale_min = *std::min_element(g.scales.begin(), g.scales.end());
  out.scale_max = *std::max_element(g.scales.begin(), g.scales.end());
  out.scale_median = median(g.scales);
  out.rtn = rtn_baseline(b.weight, b.calib, g);
  try {
    const auto h = build_hessian(b.calib, damping, mode);
    invert_spd(h);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h.values, Eigen::EigenvaluesOnly);
    const auto& ev = eig.eigenvalues();
    out.condition = ev.maxCoeff() / ev.minCoeff();
  } catch (const Error& e) {
    out.hessian_error = e.what();
  }
  return out;
}

inline std::string format_inspection(const LayerInspection& s) {
  std::ostringstream os;
  os.precision(6);
  os << "layer " << s.name << ": W [" << s.d_row << " x " << s.d_col << "], X [" << s.d_col
     << " x " << s.n_samples << "]\n";
  os << "  scale min/median/max: " << s.scale_min << " / " << s.scale_median << " / "
     << s.scale_max << '\n';
  if (s.condition) {
    os << "  hessian condition: " << *s.condition << '\n';
  } else {
    os << "  hessian: " << s.hessian_error << '\n';
  }
  os << "  rtn error: " << s.rtn.total << " (normalized " << s.rtn.normalized << ")\n";
  return os.str();
}

}  // namespace fastobq
