#include "mtr/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace mtr {

std::uint64_t GroundTruthMechanism::hash() const {
  std::ostringstream os;
  for (double v : w_x) os << format_double(v) << ',';
  for (double v : w_z) os << format_double(v) << ',';
  os << format_double(seasonal_amplitude) << ',' << format_double(seasonal_period_s) << ','
     << format_double(trend_slope_per_s) << ';';
  for (const Bump& b : bumps) {
    os << format_double(b.rel_lat) << ',' << format_double(b.rel_lon) << ','
       << format_double(b.amplitude) << ',' << format_double(b.sigma_m) << ';';
  }
  return fnv1a64(os.str());
}

double mechanism_price(const GroundTruthMechanism& mech, MechanismKind kind,
                       std::span<const double> x, std::span<const double> z, std::int64_t t,
                       double lat, double lon, const CityConfig& cfg) {
  if (x.size() != mech.w_x.size() || z.size() != mech.w_z.size()) {
    throw ContractError("mechanism_price: attribute dimensions do not match the mechanism");
  }
  const double sign_x = kind == MechanismKind::kAdversarial ? -1.0 : 1.0;
  double p = cfg.base_price;
  for (std::size_t i = 0; i < x.size(); ++i) p += sign_x * mech.w_x[i] * x[i];
  for (std::size_t i = 0; i < z.size(); ++i) p += mech.w_z[i] * z[i];
  if (mech.seasonal_amplitude != 0.0) {
    p += mech.seasonal_amplitude *
         std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / mech.seasonal_period_s);
  }
  p += mech.trend_slope_per_s * static_cast<double>(t);
  for (const auto& b : mech.bumps) {
    const double blat = cfg.lat_min + b.rel_lat * (cfg.lat_max - cfg.lat_min);
    const double blon = cfg.lon_min + b.rel_lon * (cfg.lon_max - cfg.lon_min);
    const double d = haversine_m(lat, lon, blat, blon);
    p += b.amplitude * std::exp(-d * d / (2.0 * b.sigma_m * b.sigma_m));
  }
  return p;
}

GroundTruthMechanism default_mechanism(std::uint64_t seed, std::size_t x_dim,
                                       std::size_t z_dim) {
  std::mt19937_64 rng(derive_seed(seed, 0xabcdef));
  std::uniform_real_distribution<double> uw(-0.6, 0.6);
  GroundTruthMechanism m;
  m.w_x.resize(x_dim);
  for (double& w : m.w_x) w = uw(rng);
  m.w_z.resize(z_dim);
  for (double& w : m.w_z) w = uw(rng);
  m.seasonal_amplitude = 0.5;
  m.seasonal_period_s = 31'536'000.0;  // one year
  m.trend_slope_per_s = 0.8 / 63'072'000.0;
  std::uniform_real_distribution<double> upos(0.1, 0.9);
  std::uniform_real_distribution<double> uamp(0.6, 1.2);
  for (int b = 0; b < 3; ++b) {
    GroundTruthMechanism::Bump bump;
    bump.rel_lat = upos(rng);
    bump.rel_lon = upos(rng);
    bump.amplitude = (b % 2 == 0 ? 1.0 : -1.0) * uamp(rng);
    bump.sigma_m = 2500.0;
    m.bumps.push_back(bump);
  }
  return m;
}

CityDataset generate_city(const CityConfig& cfg, const GroundTruthMechanism& mech) {
  if (cfg.n_communities < 1) throw ContractError("generate_city: n_communities must be >= 1");
  if (cfg.noise_sigma < 0) throw ContractError("generate_city: noise_sigma must be >= 0");
  if (cfg.t_end <= cfg.t_start) throw ContractError("generate_city: empty time window");

  CityDataset ds;
  ds.config = cfg;
  ds.has_ground_truth = true;
  ds.ground_truth = mech;

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> ulat(cfg.lat_min, cfg.lat_max);
  std::uniform_real_distribution<double> ulon(cfg.lon_min, cfg.lon_max);
  std::normal_distribution<double> stdnorm(0.0, 1.0);

  ds.communities.reserve(cfg.n_communities);
  for (std::size_t i = 0; i < cfg.n_communities; ++i) {
    Community c;
    c.id = static_cast<int>(i);
    c.lat = ulat(rng);
    c.lon = ulon(rng);
    c.attrs.resize(mech.w_z.size());
    for (double& a : c.attrs) a = stdnorm(rng);
    ds.communities.push_back(std::move(c));
  }

  std::uniform_int_distribution<std::size_t> ucomm(0, cfg.n_communities - 1);
  std::uniform_int_distribution<std::int64_t> utime(cfg.t_start, cfg.t_end - 1);
  ds.events.reserve(cfg.n_transactions);
  for (std::size_t n = 0; n < cfg.n_transactions; ++n) {
    TransactionEvent e;
    e.community_id = static_cast<int>(ucomm(rng));
    e.time = utime(rng);
    e.estate_attrs.resize(mech.w_x.size());
    for (double& a : e.estate_attrs) a = stdnorm(rng);
    const Community& c = ds.communities[static_cast<std::size_t>(e.community_id)];
    double p = mechanism_price(mech, cfg.mechanism, e.estate_attrs, c.attrs, e.time, c.lat,
                               c.lon, cfg);
    if (cfg.noise_sigma > 0) p += cfg.noise_sigma * stdnorm(rng);
    e.unit_price = std::max(p, 0.1);
    ds.events.push_back(std::move(e));
  }
  std::stable_sort(ds.events.begin(), ds.events.end(),
                   [](const TransactionEvent& a, const TransactionEvent& b) {
                     return a.time < b.time;
                   });
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s, std::size_t row, const std::string& column) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') {
    throw LoadError("csv: row " + std::to_string(row) + ", column '" + column +
                    "': cannot parse number from '" + s + "'");
  }
  return v;
}

long parse_int(const std::string& s, std::size_t row, const std::string& column) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const long v = std::strtol(begin, &end, 10);
  if (end == begin || *end != '\0') {
    throw LoadError("csv: row " + std::to_string(row) + ", column '" + column +
                    "': cannot parse integer from '" + s + "'");
  }
  return v;
}

void expect_header(const std::vector<std::string>& got, const std::vector<std::string>& fixed,
                   const std::string& attr_prefix, std::size_t& attr_dim,
                   const std::string& path) {
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (i >= got.size() || got[i] != fixed[i]) {
      throw LoadError("csv: " + path + ": missing column '" + fixed[i] + "'");
    }
  }
  attr_dim = got.size() - fixed.size();
  for (std::size_t k = 0; k < attr_dim; ++k) {
    const std::string want = attr_prefix + std::to_string(k);
    if (got[fixed.size() + k] != want) {
      throw LoadError("csv: " + path + ": missing column '" + want + "'");
    }
  }
}

}  // namespace

void write_csv(const CityDataset& ds, const std::string& transactions_path,
               const std::string& communities_path) {
  {
    std::ofstream out(communities_path);
    if (!out) throw LoadError("csv: cannot open '" + communities_path + "' for writing");
    out << "city_id,community_id,lat,lon";
    const std::size_t zdim = ds.communities.empty() ? 0 : ds.communities[0].attrs.size();
    for (std::size_t k = 0; k < zdim; ++k) out << ",z_" << k;
    out << '\n';
    for (const Community& c : ds.communities) {
      out << ds.config.city_id << ',' << c.id << ',' << format_double(c.lat) << ','
          << format_double(c.lon);
      for (double a : c.attrs) out << ',' << format_double(a);
      out << '\n';
    }
  }
  {
    std::ofstream out(transactions_path);
    if (!out) throw LoadError("csv: cannot open '" + transactions_path + "' for writing");
    out << "city_id,community_id,timestamp_iso8601,unit_price";
    const std::size_t xdim = ds.events.empty() ? 0 : ds.events[0].estate_attrs.size();
    for (std::size_t k = 0; k < xdim; ++k) out << ",x_" << k;
    out << '\n';
    for (const TransactionEvent& e : ds.events) {
      out << ds.config.city_id << ',' << e.community_id << ',' << format_iso8601(e.time) << ','
          << format_double(e.unit_price);
      for (double a : e.estate_attrs) out << ',' << format_double(a);
      out << '\n';
    }
  }
}

CityDataset load_csv(const std::string& transactions_path,
                     const std::string& communities_path) {
  CityDataset ds;
  ds.has_ground_truth = false;
  bool city_id_seen = false;

  {
    std::ifstream in(communities_path);
    if (!in) throw LoadError("csv: cannot open '" + communities_path + "'");
    std::string line;
    if (!std::getline(in, line)) throw LoadError("csv: " + communities_path + " is empty");
    std::size_t zdim = 0;
    expect_header(split_line(line), {"city_id", "community_id", "lat", "lon"}, "z_", zdim,
                  communities_path);
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty()) continue;
      auto cells = split_line(line);
      if (cells.size() != 4 + zdim) {
        throw LoadError("csv: " + communities_path + ": row " + std::to_string(row) +
                        " has " + std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(4 + zdim));
      }
      const int city = static_cast<int>(parse_int(cells[0], row, "city_id"));
      if (!city_id_seen) {
        ds.config.city_id = city;
        city_id_seen = true;
      } else if (city != ds.config.city_id) {
        throw LoadError("csv: " + communities_path + ": row " + std::to_string(row) +
                        ": multiple city ids in one file (" + std::to_string(ds.config.city_id) +
                        " and " + std::to_string(city) + ")");
      }
      Community c;
      c.id = static_cast<int>(parse_int(cells[1], row, "community_id"));
      c.lat = parse_number(cells[2], row, "lat");
      c.lon = parse_number(cells[3], row, "lon");
      c.attrs.resize(zdim);
      for (std::size_t k = 0; k < zdim; ++k) {
        c.attrs[k] = parse_number(cells[4 + k], row, "z_" + std::to_string(k));
      }
      ds.communities.push_back(std::move(c));
    }
  }

  {
    std::ifstream in(transactions_path);
    if (!in) throw LoadError("csv: cannot open '" + transactions_path + "'");
    std::string line;
    if (!std::getline(in, line)) throw LoadError("csv: " + transactions_path + " is empty");
    std::size_t xdim = 0;
    expect_header(split_line(line), {"city_id", "community_id", "timestamp_iso8601", "unit_price"},
                  "x_", xdim, transactions_path);
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty()) continue;
      auto cells = split_line(line);
      if (cells.size() != 4 + xdim) {
        throw LoadError("csv: " + transactions_path + ": row " + std::to_string(row) +
                        " has " + std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(4 + xdim));
      }
      const int city = static_cast<int>(parse_int(cells[0], row, "city_id"));
      if (!city_id_seen) {
        ds.config.city_id = city;
        city_id_seen = true;
      } else if (city != ds.config.city_id) {
        throw LoadError("csv: " + transactions_path + ": row " + std::to_string(row) +
                        ": city id " + std::to_string(city) + " does not match " +
                        std::to_string(ds.config.city_id));
      }
      TransactionEvent e;
      e.community_id = static_cast<int>(parse_int(cells[1], row, "community_id"));
      e.time = parse_iso8601(cells[2]);
      e.unit_price = parse_number(cells[3], row, "unit_price");
      if (!(e.unit_price > 0.0)) {
        throw LoadError("csv: " + transactions_path + ": row " + std::to_string(row) +
                        ": non-positive unit_price " + cells[3]);
      }
      bool known = false;
      for (const Community& c : ds.communities) {
        if (c.id == e.community_id) known = true;
      }
      if (!known) {
        throw LoadError("csv: " + transactions_path + ": row " + std::to_string(row) +
                        ": community_id " + std::to_string(e.community_id) +
                        " not present in " + communities_path);
      }
      e.estate_attrs.resize(xdim);
      for (std::size_t k = 0; k < xdim; ++k) {
        e.estate_attrs[k] = parse_number(cells[4 + k], row, "x_" + std::to_string(k));
      }
      ds.events.push_back(std::move(e));
    }
  }

  std::stable_sort(ds.events.begin(), ds.events.end(),
                   [](const TransactionEvent& a, const TransactionEvent& b) {
                     return a.time < b.time;
                   });
  if (!ds.events.empty()) {
    ds.config.t_start = ds.events.front().time;
    ds.config.t_end = ds.events.back().time + 1;
  }
  return ds;
}

std::pair<std::vector<TransactionEvent>, std::vector<TransactionEvent>> chronological_split(
    const CityDataset& ds, std::size_t n_train) {
  if (n_train > ds.events.size()) {
    throw ContractError("chronological_split: n_train " + std::to_string(n_train) +
                        " exceeds event count " + std::to_string(ds.events.size()));
  }
  std::vector<TransactionEvent> train(ds.events.begin(),
                                      ds.events.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<TransactionEvent> test(ds.events.begin() + static_cast<std::ptrdiff_t>(n_train),
                                     ds.events.end());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Benchmarks

Benchmark make_benchmark(const BenchmarkConfig& cfg) {
  if (cfg.n_sources < 1) throw ContractError("make_benchmark: need at least one source city");
  Benchmark b;
  b.config = cfg;
  b.mechanism = default_mechanism(cfg.seed);

  const std::int64_t horizon = 63'072'000;  // two years
  for (std::size_t s = 0; s < cfg.n_sources; ++s) {
    CityConfig cc;
    cc.city_id = static_cast<int>(s);
    cc.n_communities = cfg.source_communities;
    cc.n_transactions = cfg.source_transactions;
    // Distinct geography per city: shifted bounding boxes of the same size.
    cc.lat_min = 30.0;
    cc.lat_max = 30.1;
    cc.lon_min = 110.0 + static_cast<double>(s);
    cc.lon_max = cc.lon_min + 0.1;
    cc.mechanism = (cfg.kind == BenchmarkKind::kAdversarial && s + 1 == cfg.n_sources)
                       ? MechanismKind::kAdversarial
                       : MechanismKind::kAligned;
    // Cities share the attribute mechanism but sit at different price
    // levels around the target's; per-instance transfer value varies with
    // the level mismatch while the sources stay helpful in aggregate.
    cc.base_price = cfg.base_price * (0.9 + 0.1 * static_cast<double>(s));
    cc.noise_sigma = cfg.noise_sigma;
    cc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
    cc.t_start = 0;
    cc.t_end = horizon;
    b.sources.push_back(generate_city(cc, b.mechanism));
    b.sources.back().n_train = b.sources.back().events.size();
  }

  CityConfig tc;
  tc.city_id = static_cast<int>(cfg.n_sources);
  tc.n_communities = cfg.target_communities;
  tc.n_transactions = cfg.target_transactions;
  tc.lat_min = 29.5;
  tc.lat_max = 29.75;  // larger, sparser box than the sources
  tc.lon_min = 105.0;
  tc.lon_max = 105.25;
  tc.mechanism = MechanismKind::kAligned;
  tc.base_price = cfg.base_price;
  tc.noise_sigma = cfg.noise_sigma;
  tc.seed = derive_seed(cfg.seed, 1000 + cfg.n_sources);
  tc.t_start = horizon * 2 / 5;  // the target city's history starts late
  tc.t_end = horizon;
  b.target = generate_city(tc, b.mechanism);
  b.target.n_train = std::min(cfg.target_train_size, b.target.events.size());

  // Source instances later than the target's last training instance are not
  // available for transfer.
  if (b.target.n_train > 0) {
    const std::int64_t cutoff = b.target.events[b.target.n_train - 1].time;
    for (CityDataset& src : b.sources) {
      std::erase_if(src.events, [&](const TransactionEvent& e) { return e.time > cutoff; });
      src.n_train = src.events.size();
    }
  }
  return b;
}

bool is_adversarial(const CityDataset& ds) {
  return ds.config.mechanism == MechanismKind::kAdversarial;
}

// ---------------------------------------------------------------------------
// Standardization

void Standardizer::apply(std::vector<double>& v) const {
  if (v.size() != mean.size()) {
    throw ContractError("standardizer: dimension mismatch " + std::to_string(v.size()) +
                        " vs " + std::to_string(mean.size()));
  }
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i]) / std_dev[i];
}

namespace {

Standardizer fit_standardizer(const std::vector<const std::vector<double>*>& rows,
                              std::size_t dim) {
  Standardizer s;
  s.mean.assign(dim, 0.0);
  s.std_dev.assign(dim, 1.0);
  if (rows.empty()) return s;
  for (const auto* r : rows) {
    for (std::size_t i = 0; i < dim; ++i) s.mean[i] += (*r)[i];
  }
  for (double& m : s.mean) m /= static_cast<double>(rows.size());
  if (rows.size() > 1) {
    std::vector<double> var(dim, 0.0);
    for (const auto* r : rows) {
      for (std::size_t i = 0; i < dim; ++i) {
        const double d = (*r)[i] - s.mean[i];
        var[i] += d * d;
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      const double v = var[i] / static_cast<double>(rows.size() - 1);
      s.std_dev[i] = v > 1e-12 ? std::sqrt(v) : 1.0;
    }
  }
  return s;
}

}  // namespace

PreparedCity prepare_city(const CityDataset& ds, std::size_t n_train_for_scaling,
                          double epsilon_m) {
  PreparedCity pc;
  pc.city_id = ds.config.city_id;
  pc.n_train = std::min(n_train_for_scaling, ds.events.size());
  pc.x_dim = ds.events.empty() ? 0 : ds.events[0].estate_attrs.size();
  pc.z_dim = ds.communities.empty() ? 0 : ds.communities[0].attrs.size();

  std::vector<const std::vector<double>*> xrows;
  for (std::size_t n = 0; n < pc.n_train; ++n) xrows.push_back(&ds.events[n].estate_attrs);
  pc.x_scaler = fit_standardizer(xrows, pc.x_dim);

  std::vector<const std::vector<double>*> zrows;
  for (const Community& c : ds.communities) zrows.push_back(&c.attrs);
  pc.z_scaler = fit_standardizer(zrows, pc.z_dim);

  std::vector<Community> comms = ds.communities;
  for (Community& c : comms) pc.z_scaler.apply(c.attrs);
  std::vector<TransactionEvent> events = ds.events;
  for (TransactionEvent& e : events) pc.x_scaler.apply(e.estate_attrs);

  pc.graph = TemporalEventGraph::build(std::move(comms), std::move(events), epsilon_m);
  return pc;
}

std::vector<std::size_t> PreparedCity::train_ids() const {
  std::vector<std::size_t> ids(n_train);
  for (std::size_t i = 0; i < n_train; ++i) ids[i] = i;
  return ids;
}

std::vector<std::size_t> PreparedCity::test_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = n_train; i < graph.events().size(); ++i) ids.push_back(i);
  return ids;
}

}  // namespace mtr
