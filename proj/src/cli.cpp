#include "phyprobit/cli.hpp"

#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "phyprobit/config.hpp"
#include "phyprobit/report.hpp"

#ifndef PHYPROBIT_VERSION
#define PHYPROBIT_VERSION "0.0.0"
#endif

namespace phyprobit::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

constexpr const char* kManifest = "manifest.json";
constexpr const char* kDiagnostics = "diagnostics.json";

// Runs `body`, mapping exception types to exit codes.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kRuntime;
  }
}

struct Prepared {
  RunConfig config;
  LoadedData data;
};

Prepared prepare(const std::string& config_path) {
  Prepared p{load_config(config_path), {}};
  p.data = load_data(p.config);
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void make_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory '" + dir + "'");
}

std::string chain_file_name(std::size_t chain) { return "chain_" + std::to_string(chain + 1) + ".csv"; }

const char* kind_name(TraitKind k) { return k == TraitKind::kBinary ? "binary" : "continuous"; }

Json chain_stats_json(const ChainStats& s) {
  return Json{{"iterations_run", s.iterations_run},
              {"latent_updates", s.latent_updates},
              {"covariance_updates", s.covariance_updates},
              {"bps_gradient_events", s.bps_gradient_events},
              {"bps_boundary_events", s.bps_boundary_events},
              {"hmc_accepted", s.hmc_accepted},
              {"hmc_divergences", s.hmc_divergences},
              {"hmc_step_size", s.hmc_step_size},
              {"baseline_proposals", s.baseline_proposals},
              {"baseline_rejections", s.baseline_rejections},
              {"seconds", s.seconds}};
}

Json manifest(const std::string& config_path, const Prepared& p, const std::vector<ChainResult>& results) {
  const RunConfig& c = p.config;
  const TraitData& traits = p.data.inputs.traits;
  Json j;
  j["program"] = "phyprobit";
  j["version"] = PHYPROBIT_VERSION;
  j["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION);
  j["config_path"] = fs::absolute(config_path).lexically_normal().string();
  j["config_hash"] = c.hash;
  j["seed"] = c.chain.schedule.seed;
  j["chains"] = c.chains;
  j["latent_sampler"] = c.chain.latent_sampler == LatentSampler::kBps ? "bps" : "baseline";
  j["covariance_mode"] = mode_name(p.data.mode);
  j["tree_count"] = p.data.inputs.trees.size();
  j["taxa"] = traits.taxa_count();
  Json names = Json::array(), kinds = Json::array();
  for (std::size_t k = 0; k < traits.trait_count(); ++k) {
    names.push_back(traits.names[k]);
    kinds.push_back(kind_name(traits.kinds[k]));
  }
  j["traits"] = names;
  j["trait_kinds"] = kinds;
  j["parameters"] = parameter_names(traits);
  j["tip_map"] = Json::parse(tip_map_json(*p.data.inputs.trees.front()));
  Json files = Json::array();
  for (const auto& r : results)
    files.push_back(Json{{"chain", r.chain + 1},
                         {"file", chain_file_name(r.chain)},
                         {"rows", r.records.size()},
                         {"stats", chain_stats_json(r.stats)}});
  j["files"] = files;
  return j;
}

std::vector<ChainTable> read_run(const fs::path& dir, Json& manifest_out) {
  const fs::path mpath = dir / kManifest;
  if (!fs::is_regular_file(mpath)) throw InputError("'" + mpath.string() + "' not found; is this a run directory?");
  try {
    manifest_out = Json::parse(read_file(mpath));
  } catch (const Json::exception& e) {
    throw InputError(mpath.string() + ": " + e.what());
  }
  if (!manifest_out.contains("files") || !manifest_out["files"].is_array() || manifest_out["files"].empty())
    throw InputError(mpath.string() + ": no sample files listed");
  std::vector<ChainTable> tables;
  for (const auto& f : manifest_out["files"]) {
    const fs::path path = dir / f.at("file").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read sample file '" + path.string() + "'");
    tables.push_back(read_chain_csv(in, path.string()));
    const auto rows = f.at("rows").get<std::size_t>();
    if (tables.back().rows() != rows)
      throw InputError(path.string() + ": expected " + std::to_string(rows) + " rows, found " +
                       std::to_string(tables.back().rows()) + " (truncated sample file?)");
  }
  return tables;
}

}  // namespace

int cmd_validate(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Prepared p = prepare(config_path);
    // Building a chain checks the data against the model without sampling.
    GibbsChain chain(p.data.inputs, p.config.chain, 0);
    const TraitData& t = p.data.inputs.traits;
    std::size_t missing = 0;
    for (std::size_t i = 0; i < t.taxa_count(); ++i)
      for (std::size_t k = 0; k < t.trait_count(); ++k) missing += t.observed(i, k) ? 0 : 1;
    out << "config " << config_path << " (hash " << p.config.hash << ") is valid\n"
        << "  trees: " << p.data.inputs.trees.size() << ", taxa: " << t.taxa_count()
        << ", covariance mode: " << mode_name(p.data.mode) << "\n"
        << "  traits: " << t.trait_count() << " (" << t.binary_count << " binary), missing cells: " << missing << "\n"
        << "  chains: " << p.config.chains << ", iterations: " << p.config.chain.schedule.iterations
        << ", warmup: " << p.config.chain.schedule.warmup << ", thin: " << p.config.chain.schedule.thin << "\n";
    return kOk;
  });
}

int cmd_run(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Prepared p = prepare(config_path);
    make_output_dir(p.config.output_dir);
    const fs::path dir(p.config.output_dir);
    const std::vector<ChainResult> results =
        run_chains(p.data.inputs, p.config.chain, p.config.chains, p.config.workers);
    for (const auto& r : results) {
      std::ostringstream csv;
      write_chain_csv(csv, r, p.data.inputs.traits);
      write_file(dir / chain_file_name(r.chain), csv.str());
    }
    write_file(dir / kManifest, manifest(config_path, p, results).dump(2) + "\n");

    std::vector<ChainTable> tables;
    for (const auto& r : results) {
      std::ifstream in(dir / chain_file_name(r.chain), std::ios::binary);
      tables.push_back(read_chain_csv(in, chain_file_name(r.chain)));
    }
    if (tables.front().columns.empty() || tables.front().rows() < 10) {
      err << "warning: too few parameters or draws for diagnostics; " << kDiagnostics << " not written\n";
    } else {
      const RunDiagnostics d = diagnose(tables);
      write_file(dir / kDiagnostics, diagnostics_json(d));
      out << "min ESS " << format_number(d.min_ess) << ", median ESS " << format_number(d.median_ess);
      if (std::isfinite(d.max_rhat)) out << ", max Rhat " << format_number(d.max_rhat);
      out << "\n";
      for (const auto& prm : d.parameters)
        if (prm.flagged) err << "warning: " << prm.name << " has Rhat " << format_number(prm.rhat) << " > 1.1\n";
    }
    out << "wrote " << results.size() << " chain file(s) to " << dir.string() << "\n";
    return kOk;
  });
}

int cmd_summarize(const std::string& samples_dir, double mass, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!(mass > 0.0 && mass < 1.0)) throw ConfigError("HPD mass must lie in (0, 1)");
    const fs::path dir(samples_dir);
    Json m;
    const std::vector<ChainTable> tables = read_run(dir, m);
    std::vector<std::string> traits = m.value("traits", std::vector<std::string>{});
    const auto summary = summarize_correlations(tables, mass);
    std::ostringstream csv;
    write_summary_csv(csv, summary);
    write_file(dir / "correlation_summary.csv", csv.str());
    write_file(dir / "correlation_summary.json", summary_json(summary, traits, mass));
    out << csv.str();
    return kOk;
  });
}

int cmd_benchmark(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Prepared p = prepare(config_path);
    if (!p.config.benchmark) throw ConfigError("config has no [benchmark] section");
    const BenchmarkConfig& b = *p.config.benchmark;
    make_output_dir(p.config.output_dir);

    std::vector<BenchmarkEntry> entries;
    auto measure = [&](const std::string& label, LatentSampler sampler, double multiplier) {
      ChainSettings s = p.config.chain;
      s.latent_sampler = sampler;
      s.travel_time_multiplier = multiplier;
      if (sampler == LatentSampler::kBps && label != "bps") s.travel_time.reset();
      err << "benchmark: " << label << " for " << format_number(b.seconds) << " s\n";
      entries.push_back({label, sampler, multiplier,
                         measure_latent_efficiency(p.data.inputs, s, b.seconds, b.target_records)});
    };
    for (LatentSampler s : b.samplers)
      measure(s == LatentSampler::kBps ? "bps" : "baseline", s, p.config.chain.travel_time_multiplier);
    for (double m : b.travel_time_sweep) measure("bps@" + format_number(m), LatentSampler::kBps, m);

    const fs::path dir(p.config.output_dir);
    write_file(dir / "benchmark.json", benchmark_json(entries, b.histogram_bins));
    std::ostringstream csv;
    write_benchmark_csv(csv, entries);
    write_file(dir / "benchmark.csv", csv.str());
    out << csv.str();
    for (const auto& e : entries)
      if (e.efficiency.samples < 100)
        err << "warning: " << e.label << " kept only " << e.efficiency.samples
            << " samples; the report is partial\n";
    return kOk;
  });
}

int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Phylogenetic probit model sampler"};
  app.require_subcommand(1);
  app.set_version_flag("--version", PHYPROBIT_VERSION);

  std::string config_path, samples_dir;
  double mass = 0.9;
  auto* run = app.add_subcommand("run", "Run the configured chains");
  run->add_option("config", config_path, "Config file")->required();
  auto* summarize = app.add_subcommand("summarize", "Correlation means, HPD intervals and significance");
  summarize->add_option("samples_dir", samples_dir, "Output directory of a completed run")->required();
  summarize->add_option("--mass", mass, "HPD mass")->capture_default_str();
  auto* benchmark = app.add_subcommand("benchmark", "Latent ESS per hour of BPS and the baseline sampler");
  benchmark->add_option("config", config_path, "Config file with a [benchmark] section")->required();
  auto* validate = app.add_subcommand("validate", "Check config and data without sampling");
  validate->add_option("config", config_path, "Config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  if (run->parsed()) return cmd_run(config_path, out, err);
  if (summarize->parsed()) return cmd_summarize(samples_dir, mass, out, err);
  if (benchmark->parsed()) return cmd_benchmark(config_path, out, err);
  return cmd_validate(config_path, out, err);
}

}  // namespace phyprobit::cli
