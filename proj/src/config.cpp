#include "phyprobit/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <boost/tokenizer.hpp>

namespace phyprobit {

namespace {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"paths", {"tree", "traits", "output", "dates"}},
      {"traits", {"binary", "continuous", "negative", "positive"}},
      {"model", {"covariance_mode", "root_date", "root_mean", "root_sample_size", "likelihood"}},
      {"priors", {"lkj_eta", "scale_log_mean", "scale_log_sd"}},
      {"schedule",
       {"iterations", "warmup", "thin", "latent_weight", "covariance_weight", "chains", "workers", "seed",
        "latent_sampler", "record_latent"}},
      {"bps", {"travel_time_multiplier", "travel_time"}},
      {"hmc", {"target_accept", "path_length", "initial_step"}},
      {"benchmark", {"samplers", "seconds", "travel_time_sweep", "target_records", "histogram_bins"}},
  };
  return keys;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> get(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto value = sec->get_optional<std::string>(key);
    if (!value) return std::nullopt;
    return boost::algorithm::trim_copy(*value);
  }

  bool has_section(const std::string& section) const { return tree_.get_child_optional(section).has_value(); }

  double real(const std::string& section, const std::string& key, double fallback) const {
    const auto v = get(section, key);
    return v ? parse_real(section, key, *v) : fallback;
  }

  std::size_t count(const std::string& section, const std::string& key, std::size_t fallback) const {
    const auto v = get(section, key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size() || v->empty())
      throw ConfigError(where(section, key) + ": expected a non-negative integer, got '" + *v + "'");
    return static_cast<std::size_t>(out);
  }

  bool flag(const std::string& section, const std::string& key, bool fallback) const {
    const auto v = get(section, key);
    if (!v) return fallback;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw ConfigError(where(section, key) + ": expected true or false, got '" + *v + "'");
  }

  std::vector<std::string> list(const std::string& section, const std::string& key) const {
    const auto v = get(section, key);
    std::vector<std::string> out;
    if (!v || v->empty()) return out;
    boost::split(out, *v, boost::is_any_of(","));
    for (auto& s : out) {
      boost::algorithm::trim(s);
      if (s.empty()) throw ConfigError(where(section, key) + ": empty list entry");
    }
    return out;
  }

  std::vector<double> reals(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(section, key)) out.push_back(parse_real(section, key, s));
    return out;
  }

  static std::string where(const std::string& section, const std::string& key) { return section + "." + key; }

 private:
  static double parse_real(const std::string& section, const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || std::isnan(out))
      throw ConfigError(where(section, key) + ": expected a number, got '" + v + "'");
    return out;
  }

  const pt::ptree& tree_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::string resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty()) return path;
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (fs::path(base_dir) / p).lexically_normal().string();
}

LatentSampler parse_sampler(const std::string& where, const std::string& s) {
  if (s == "bps") return LatentSampler::kBps;
  if (s == "baseline") return LatentSampler::kBaseline;
  throw ConfigError(where + ": unknown latent sampler '" + s + "' (expected bps or baseline)");
}

std::map<std::string, double> read_dates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dates file '" + path + "'");
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::map<std::string, double> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    boost::algorithm::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    try {
      for (const auto& f : Tokenizer(line)) fields.push_back(boost::algorithm::trim_copy(f));
    } catch (const boost::escaped_list_error& e) {
      throw InputError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (fields.size() != 2)
      throw InputError(path + " line " + std::to_string(line_no) + ": expected 'taxon,date'");
    double date = 0.0;
    const auto& d = fields[1];
    const auto [ptr, ec] = std::from_chars(d.data(), d.data() + d.size(), date);
    if (ec != std::errc() || ptr != d.data() + d.size() || d.empty()) {
      if (out.empty() && line_no == 1) continue;  // header
      throw InputError(path + " line " + std::to_string(line_no) + ": date '" + d + "' is not a number");
    }
    if (!out.emplace(fields[0], date).second)
      throw InputError(path + " line " + std::to_string(line_no) + ": duplicate taxon '" + fields[0] + "'");
  }
  return out;
}

}  // namespace

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_config(std::istream& in, const std::string& base_dir) {
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  pt::ptree tree;
  try {
    std::istringstream ss(text);
    pt::read_ini(ss, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  const auto& known = known_keys();
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config key '" + section + "' is outside any section");
    const auto it = known.find(section);
    if (it == known.end()) throw ConfigError("unknown config section [" + section + "]");
    for (const auto& [key, value] : body)
      if (!it->second.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }

  const Reader r(tree);
  RunConfig c;
  c.hash = fnv1a_hex(text);

  c.tree_path = resolve(base_dir, r.get("paths", "tree").value_or(""));
  c.traits_path = resolve(base_dir, r.get("paths", "traits").value_or(""));
  c.output_dir = resolve(base_dir, r.get("paths", "output").value_or("phyprobit_out"));
  c.dates_path = resolve(base_dir, r.get("paths", "dates").value_or(""));
  require(!c.tree_path.empty(), "paths.tree is required");
  require(!c.traits_path.empty(), "paths.traits is required");

  const std::string negative = r.get("traits", "negative").value_or("0");
  const std::string positive = r.get("traits", "positive").value_or("1");
  for (const auto& name : r.list("traits", "binary")) c.columns.push_back({name, TraitKind::kBinary, negative, positive});
  for (const auto& name : r.list("traits", "continuous")) c.columns.push_back({name, TraitKind::kContinuous});
  require(!c.columns.empty(), "traits.binary and traits.continuous list no traits");
  {
    std::set<std::string> names;
    for (const auto& col : c.columns)
      require(names.insert(col.name).second, "trait '" + col.name + "' is listed twice");
  }
  require(negative != positive, "traits.negative and traits.positive must differ");

  const std::string mode = r.get("model", "covariance_mode").value_or("full_tree");
  if (mode == "full_tree") {
    c.mode = CovarianceModeKind::kFullTree;
  } else if (mode == "dated_star") {
    c.mode = CovarianceModeKind::kDatedStar;
    require(!c.dates_path.empty(), "model.covariance_mode = dated_star needs paths.dates");
  } else if (mode == "ultrametric_star") {
    c.mode = CovarianceModeKind::kUltrametricStar;
  } else {
    throw ConfigError("model.covariance_mode: unknown mode '" + mode +
                      "' (expected full_tree, dated_star or ultrametric_star)");
  }
  c.root_date = r.real("model", "root_date", 0.0);
  require(std::isfinite(c.root_date), "model.root_date must be finite");
  if (r.get("model", "root_mean")) c.root_mean = r.reals("model", "root_mean");
  require(!c.root_mean.empty(), "model.root_mean is empty");
  for (double m : c.root_mean) require(std::isfinite(m), "model.root_mean entries must be finite");
  c.root_sample_size = r.real("model", "root_sample_size", 10.0);
  require(c.root_sample_size > 0.0, "model.root_sample_size must be positive");

  ChainSettings& s = c.chain;
  s.likelihood = r.flag("model", "likelihood", true);
  s.lkj_eta = r.real("priors", "lkj_eta", 1.0);
  require(s.lkj_eta > 0.0 && std::isfinite(s.lkj_eta), "priors.lkj_eta must be positive");
  s.scale_prior.log_mean = r.real("priors", "scale_log_mean", 0.0);
  s.scale_prior.log_sd = r.real("priors", "scale_log_sd", 1.0);
  require(std::isfinite(s.scale_prior.log_mean), "priors.scale_log_mean must be finite");
  require(s.scale_prior.log_sd > 0.0 && std::isfinite(s.scale_prior.log_sd), "priors.scale_log_sd must be positive");

  GibbsSchedule& g = s.schedule;
  g.iterations = r.count("schedule", "iterations", g.iterations);
  g.warmup = r.count("schedule", "warmup", g.warmup);
  g.thin = r.count("schedule", "thin", g.thin);
  g.latent_weight = r.real("schedule", "latent_weight", g.latent_weight);
  g.covariance_weight = r.real("schedule", "covariance_weight", 1.0 - g.latent_weight);
  g.seed = r.count("schedule", "seed", g.seed);
  require(g.iterations >= 1, "schedule.iterations must be at least 1");
  try {
    g.validate();
  } catch (const InputError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  require(g.iterations / g.thin >= 1, "schedule.thin exceeds schedule.iterations");
  c.chains = r.count("schedule", "chains", c.chains);
  c.workers = r.count("schedule", "workers", c.workers);
  require(c.chains >= 1, "schedule.chains must be at least 1");
  require(c.workers >= 1, "schedule.workers must be at least 1");
  if (const auto v = r.get("schedule", "latent_sampler")) s.latent_sampler = parse_sampler("schedule.latent_sampler", *v);
  s.record_latent = r.flag("schedule", "record_latent", false);

  s.travel_time_multiplier = r.real("bps", "travel_time_multiplier", s.travel_time_multiplier);
  require(s.travel_time_multiplier > 0.0 && std::isfinite(s.travel_time_multiplier),
          "bps.travel_time_multiplier must be positive");
  if (r.get("bps", "travel_time")) {
    s.travel_time = r.real("bps", "travel_time", 0.0);
    require(*s.travel_time > 0.0 && std::isfinite(*s.travel_time), "bps.travel_time must be positive");
  }

  s.hmc.target_accept = r.real("hmc", "target_accept", s.hmc.target_accept);
  s.hmc.path_length = r.real("hmc", "path_length", s.hmc.path_length);
  s.hmc.initial_step = r.real("hmc", "initial_step", s.hmc.initial_step);
  require(s.hmc.target_accept > 0.0 && s.hmc.target_accept < 1.0, "hmc.target_accept must lie in (0, 1)");
  require(s.hmc.path_length > 0.0 && std::isfinite(s.hmc.path_length), "hmc.path_length must be positive");
  require(s.hmc.initial_step > 0.0 && std::isfinite(s.hmc.initial_step), "hmc.initial_step must be positive");

  if (r.has_section("benchmark")) {
    BenchmarkConfig b;
    if (r.get("benchmark", "samplers")) {
      b.samplers.clear();
      for (const auto& name : r.list("benchmark", "samplers"))
        b.samplers.push_back(parse_sampler("benchmark.samplers", name));
    }
    b.seconds = r.real("benchmark", "seconds", b.seconds);
    b.travel_time_sweep = r.reals("benchmark", "travel_time_sweep");
    b.target_records = r.count("benchmark", "target_records", b.target_records);
    b.histogram_bins = r.count("benchmark", "histogram_bins", b.histogram_bins);
    require(!b.samplers.empty() || !b.travel_time_sweep.empty(), "benchmark: nothing to compare");
    require(b.seconds > 0.0 && std::isfinite(b.seconds), "benchmark.seconds must be positive");
    for (double m : b.travel_time_sweep)
      require(m > 0.0 && std::isfinite(m), "benchmark.travel_time_sweep entries must be positive");
    require(b.target_records >= 10, "benchmark.target_records must be at least 10");
    require(b.histogram_bins >= 1, "benchmark.histogram_bins must be at least 1");
    c.benchmark = b;
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  const fs::path parent = fs::path(path).parent_path();
  RunConfig c = parse_config(in, parent.empty() ? "." : parent.string());
  auto check = [](const std::string& p, const char* what) {
    if (!p.empty() && !fs::is_regular_file(p)) throw ConfigError(std::string(what) + " '" + p + "' does not exist");
  };
  check(c.tree_path, "tree file");
  check(c.traits_path, "trait file");
  check(c.dates_path, "dates file");
  return c;
}

LoadedData load_data(RunConfig& config) {
  LoadedData d;
  try {
    d.trees = read_newick_file(config.tree_path);
  } catch (const InputError& e) {
    throw InputError(config.tree_path + ": " + e.what());
  }
  if (d.trees.empty()) throw InputError(config.tree_path + ": no trees");

  switch (config.mode) {
    case CovarianceModeKind::kFullTree:
      d.mode = FullTree{};
      break;
    case CovarianceModeKind::kDatedStar:
      d.mode = DatedStar{read_dates(config.dates_path), config.root_date};
      break;
    case CovarianceModeKind::kUltrametricStar:
      d.mode = UltrametricStar{};
      break;
  }
  for (const auto& t : d.trees) d.inputs.trees.push_back(std::make_shared<const Tree>(apply_covariance_mode(t, d.mode)));
  for (const auto& t : d.inputs.trees)
    if (t->labels() != d.inputs.trees.front()->labels())
      throw InputError(config.tree_path + ": trees do not share one set of tip labels");

  try {
    d.inputs.traits = load_traits_file(config.traits_path, config.columns, *d.inputs.trees.front());
  } catch (const InputError& e) {
    const std::string msg = e.what();
    throw InputError(msg.rfind(config.traits_path, 0) == 0 ? msg : config.traits_path + ": " + msg);
  }

  const auto p = static_cast<Eigen::Index>(d.inputs.traits.trait_count());
  Eigen::VectorXd mean;
  if (config.root_mean.size() == 1) {
    mean = Eigen::VectorXd::Constant(p, config.root_mean.front());
  } else if (static_cast<Eigen::Index>(config.root_mean.size()) == p) {
    mean = Eigen::Map<const Eigen::VectorXd>(config.root_mean.data(), p);
  } else {
    throw ConfigError("model.root_mean has " + std::to_string(config.root_mean.size()) + " entries for " +
                      std::to_string(p) + " traits");
  }
  config.chain.root_prior = RootPrior(std::move(mean), config.root_sample_size);
  return d;
}

}  // namespace phyprobit
