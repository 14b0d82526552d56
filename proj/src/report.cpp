#include "phyprobit/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include <boost/tokenizer.hpp>

#include "json.hpp"
#include "phyprobit/diagnostics.hpp"
#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

using Json = nlohmann::ordered_json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_fields(const std::string& line) {
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::vector<std::string> out;
  try {
    for (const auto& f : Tokenizer(line)) out.push_back(f);
  } catch (const boost::escaped_list_error& e) {
    throw InputError(std::string("malformed CSV line: ") + e.what());
  }
  return out;
}

// Quotes a CSV field when it holds a separator or quote.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\\") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

Json number_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

// "R[i,j]" with 1-based i < j, or false.
bool parse_correlation_name(const std::string& name, std::size_t& i, std::size_t& j) {
  if (name.size() < 6 || name.compare(0, 2, "R[") != 0 || name.back() != ']') return false;
  const std::size_t comma = name.find(',');
  if (comma == std::string::npos) return false;
  const char* a = name.data() + 2;
  const char* b = name.data() + comma;
  if (std::from_chars(a, b, i).ptr != b) return false;
  const char* c = name.data() + comma + 1;
  const char* d = name.data() + name.size() - 1;
  if (std::from_chars(c, d, j).ptr != d) return false;
  return i >= 1 && i < j;
}

}  // namespace

std::string format_number(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

void write_chain_csv(std::ostream& out, const ChainResult& chain, const TraitData& traits) {
  out << "iteration";
  for (const auto& n : parameter_names(traits)) out << ',' << csv_field(n);
  out << '\n';
  for (const auto& rec : chain.records) {
    out << rec.iteration;
    for (double v : parameter_values(rec, traits)) out << ',' << format_number(v);
    out << '\n';
  }
}

ChainTable read_chain_csv(std::istream& in, const std::string& source) {
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw InputError(source + ": empty sample file");
  if (text.back() != '\n') throw InputError(source + ": truncated sample file (last row is incomplete)");
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  const auto header = split_fields(line);
  if (header.empty() || header.front() != "iteration")
    throw InputError(source + ": sample file header must start with 'iteration'");
  ChainTable t;
  t.columns.assign(header.begin() + 1, header.end());
  t.draws.resize(t.columns.size());
  std::size_t line_no = 1;
  while (std::getline(lines, line)) {
    ++line_no;
    const std::string where = source + " line " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw InputError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()) + " (truncated sample file?)");
    std::size_t it = 0;
    const auto& f0 = fields[0];
    if (f0.empty() || std::from_chars(f0.data(), f0.data() + f0.size(), it).ptr != f0.data() + f0.size())
      throw InputError(where + ": bad iteration '" + f0 + "'");
    t.iterations.push_back(it);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      const auto& f = fields[c];
      double v = 0.0;
      if (f.empty() || std::from_chars(f.data(), f.data() + f.size(), v).ptr != f.data() + f.size() ||
          !std::isfinite(v))
        throw InputError(where + ": bad value '" + f + "' in column " + header[c]);
      t.draws[c - 1].push_back(v);
    }
  }
  return t;
}

RunDiagnostics diagnose(const std::vector<ChainTable>& chains, double rhat_threshold) {
  if (chains.empty()) throw InputError("no chains to diagnose");
  for (const auto& c : chains)
    if (c.columns != chains.front().columns) throw InputError("chains have different columns");
  RunDiagnostics d;
  d.chains = chains.size();
  std::size_t n = chains.front().rows();
  for (const auto& c : chains) n = std::min(n, c.rows());
  d.draws_per_chain = n;
  if (n < 10) throw InputError("diagnostics need at least 10 draws per chain");

  std::vector<double> ess_values, rhats;
  for (std::size_t k = 0; k < chains.front().columns.size(); ++k) {
    ParameterDiagnostics p;
    p.name = chains.front().columns[k];
    std::vector<std::vector<double>> series;
    bool all_degenerate = true;
    for (const auto& c : chains) {
      series.emplace_back(c.draws[k].begin(), c.draws[k].begin() + static_cast<std::ptrdiff_t>(n));
      const EssResult e = ess(series.back());
      p.ess += e.value;
      all_degenerate = all_degenerate && e.degenerate;
    }
    p.degenerate = all_degenerate;
    p.rhat = kNaN;
    if (series.size() >= 2) {
      try {
        p.rhat = rhat(series);
      } catch (const NumericalError&) {
      }
    }
    p.flagged = std::isfinite(p.rhat) && p.rhat > rhat_threshold;
    ess_values.push_back(p.ess);
    if (std::isfinite(p.rhat)) rhats.push_back(p.rhat);
    d.parameters.push_back(std::move(p));
  }
  d.min_ess = ess_values.empty() ? kNaN : *std::min_element(ess_values.begin(), ess_values.end());
  d.median_ess = median(ess_values);
  d.max_rhat = rhats.empty() ? kNaN : *std::max_element(rhats.begin(), rhats.end());
  return d;
}

std::string diagnostics_json(const RunDiagnostics& d, double rhat_threshold) {
  Json j;
  j["chains"] = d.chains;
  j["draws_per_chain"] = d.draws_per_chain;
  j["rhat_threshold"] = rhat_threshold;
  j["min_ess"] = number_or_null(d.min_ess);
  j["median_ess"] = number_or_null(d.median_ess);
  j["max_rhat"] = number_or_null(d.max_rhat);
  Json flagged = Json::array();
  Json params = Json::array();
  for (const auto& p : d.parameters) {
    params.push_back(Json{{"name", p.name},
                          {"ess", p.ess},
                          {"degenerate", p.degenerate},
                          {"rhat", number_or_null(p.rhat)},
                          {"flagged", p.flagged}});
    if (p.flagged) flagged.push_back(p.name);
  }
  j["flagged"] = flagged;
  j["parameters"] = params;
  return j.dump(2) + "\n";
}

bool hpd_excludes_zero(double lower, double upper) { return lower > 0.0 || upper < 0.0; }

std::vector<CorrelationSummary> summarize_correlations(const std::vector<ChainTable>& chains, double mass) {
  if (chains.empty()) throw InputError("no chains to summarize");
  std::vector<CorrelationSummary> out;
  const auto& columns = chains.front().columns;
  for (const auto& c : chains)
    if (c.columns != columns) throw InputError("chains have different columns");
  for (std::size_t k = 0; k < columns.size(); ++k) {
    std::size_t i = 0, j = 0;
    if (!parse_correlation_name(columns[k], i, j)) continue;
    std::vector<double> pooled;
    for (const auto& c : chains) pooled.insert(pooled.end(), c.draws[k].begin(), c.draws[k].end());
    CorrelationSummary s;
    s.name = columns[k];
    s.row = i - 1;
    s.col = j - 1;
    double sum = 0.0;
    for (double v : pooled) sum += v;
    s.mean = pooled.empty() ? kNaN : sum / static_cast<double>(pooled.size());
    std::tie(s.lower, s.upper) = hpd_interval(pooled, mass);
    s.significant = hpd_excludes_zero(s.lower, s.upper);
    out.push_back(s);
  }
  return out;
}

void write_summary_csv(std::ostream& out, const std::vector<CorrelationSummary>& summary) {
  out << "parameter,row,col,mean,hpd_lower,hpd_upper,significant\n";
  for (const auto& s : summary)
    out << csv_field(s.name) << ',' << s.row + 1 << ',' << s.col + 1 << ',' << format_number(s.mean) << ','
        << format_number(s.lower) << ',' << format_number(s.upper) << ',' << (s.significant ? "true" : "false")
        << '\n';
}

std::string summary_json(const std::vector<CorrelationSummary>& summary, const std::vector<std::string>& trait_names,
                         double mass) {
  const std::size_t p = trait_names.size();
  for (const auto& s : summary)
    if (s.col >= p) throw InputError("correlation " + s.name + " is outside the trait list");
  auto matrix = [&](auto cell, const Json& diagonal) {
    Json m = Json::array();
    for (std::size_t r = 0; r < p; ++r) m.push_back(Json::array());
    for (std::size_t r = 0; r < p; ++r)
      for (std::size_t c = 0; c < p; ++c) m[r].push_back(r == c ? diagonal : Json(nullptr));
    for (const auto& s : summary) m[s.row][s.col] = m[s.col][s.row] = cell(s);
    return m;
  };
  Json j;
  j["mass"] = mass;
  j["traits"] = trait_names;
  j["mean"] = matrix([](const CorrelationSummary& s) { return Json(s.mean); }, Json(1.0));
  j["hpd_lower"] = matrix([](const CorrelationSummary& s) { return Json(s.lower); }, Json(1.0));
  j["hpd_upper"] = matrix([](const CorrelationSummary& s) { return Json(s.upper); }, Json(1.0));
  j["significant"] = matrix([](const CorrelationSummary& s) { return Json(s.significant); }, Json(false));
  return j.dump(2) + "\n";
}

std::string benchmark_json(const std::vector<BenchmarkEntry>& entries, std::size_t bins, std::size_t min_samples) {
  if (bins == 0) throw InputError("histogram needs at least one bin");
  // Shared bin edges over log10 ESS/hr of every non-degenerate dimension.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& e : entries)
    for (double v : e.efficiency.ess)
      if (v > 0.0 && e.efficiency.seconds > 0.0) {
        const double x = std::log10(v * 3600.0 / e.efficiency.seconds);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
  if (!(lo <= hi)) lo = hi = 0.0;
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  Json edges = Json::array();
  for (std::size_t b = 0; b <= bins; ++b) edges.push_back(lo + width * static_cast<double>(b));

  Json j;
  Json list = Json::array();
  bool partial = false;
  const LatentEfficiency* ref = entries.empty() ? nullptr : &entries.front().efficiency;
  for (const auto& e : entries) {
    const auto& f = e.efficiency;
    std::vector<std::size_t> counts(bins, 0);
    std::size_t zero = 0;
    for (double v : f.ess) {
      if (!(v > 0.0) || !(f.seconds > 0.0)) {
        ++zero;
        continue;
      }
      const double x = std::log10(v * 3600.0 / f.seconds);
      const auto b = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, (x - lo) / width)));
      ++counts[b];
    }
    const bool enough = f.samples >= min_samples;
    partial = partial || !enough;
    auto ratio = [](double a, double b) { return b > 0.0 ? Json(a / b) : (a > 0.0 ? Json("inf") : Json(nullptr)); };
    Json item{{"label", e.label},
              {"sampler", e.sampler == LatentSampler::kBps ? "bps" : "baseline"},
              {"travel_time_multiplier", e.sampler == LatentSampler::kBps ? Json(e.multiplier) : Json(nullptr)},
              {"samples", f.samples},
              {"iterations", f.iterations},
              {"seconds", f.seconds},
              {"dimensions", f.ess.size()},
              {"degenerate_dimensions", f.degenerate},
              {"min_ess", f.min_ess},
              {"median_ess", f.median_ess},
              {"min_ess_per_hour", f.min_per_hour},
              {"median_ess_per_hour", f.median_per_hour},
              {"min_ratio_to_first", ratio(f.min_per_hour, ref->min_per_hour)},
              {"median_ratio_to_first", ratio(f.median_per_hour, ref->median_per_hour)},
              {"enough_samples", enough},
              {"histogram_counts", counts},
              {"zero_ess_dimensions", zero}};
    list.push_back(std::move(item));
  }
  j["partial"] = partial;
  j["min_samples"] = min_samples;
  j["histogram_log10_ess_per_hour_edges"] = edges;
  j["entries"] = list;
  return j.dump(2) + "\n";
}

void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkEntry>& entries) {
  out << "label,sampler,travel_time_multiplier,samples,seconds,min_ess,median_ess,min_ess_per_hour,median_ess_per_hour\n";
  for (const auto& e : entries) {
    const auto& f = e.efficiency;
    out << e.label << ',' << (e.sampler == LatentSampler::kBps ? "bps" : "baseline") << ','
        << (e.sampler == LatentSampler::kBps ? format_number(e.multiplier) : std::string()) << ',' << f.samples << ','
        << format_number(f.seconds) << ',' << format_number(f.min_ess) << ',' << format_number(f.median_ess) << ','
        << format_number(f.min_per_hour) << ',' << format_number(f.median_per_hour) << '\n';
  }
}

}  // namespace phyprobit
