#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtr/geo_graph.hpp"

namespace mtr {

enum class MechanismKind { kAligned, kAdversarial };

// Ground-truth price mechanism shared by the cities of one benchmark.
// Aligned cities use w_x as-is; the adversarial city negates the estate
// contribution. Spatial bumps are anchored in city-relative coordinates so
// every city realizes the same pattern inside its own bounding box.
struct GroundTruthMechanism {
  std::vector<double> w_x;
  std::vector<double> w_z;
  double seasonal_amplitude = 0.0;
  double seasonal_period_s = 1.0;
  double trend_slope_per_s = 0.0;
  struct Bump {
    double rel_lat = 0.5;  // [0,1] within the city bbox
    double rel_lon = 0.5;
    double amplitude = 0.0;
    double sigma_m = 1.0;
  };
  std::vector<Bump> bumps;
  std::uint64_t hash() const;
};

struct CityConfig {
  int city_id = 0;
  std::size_t n_communities = 1;
  std::size_t n_transactions = 0;
  double lat_min = 30.0, lat_max = 30.1;
  double lon_min = 110.0, lon_max = 110.1;
  MechanismKind mechanism = MechanismKind::kAligned;
  double base_price = 10.0;   // thousands of currency units per m^2
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  std::int64_t t_start = 0;
  std::int64_t t_end = 63'072'000;  // two years of seconds
};

struct CityDataset {
  CityConfig config;
  std::vector<Community> communities;
  std::vector<TransactionEvent> events;  // chronological
  bool has_ground_truth = false;
  GroundTruthMechanism ground_truth;
  std::size_t n_train = 0;  // chronological train/test marker
};

// Deterministic noiseless price for the given inputs under this mechanism.
double mechanism_price(const GroundTruthMechanism& mech, MechanismKind kind,
                       std::span<const double> x, std::span<const double> z, std::int64_t t,
                       double lat, double lon, const CityConfig& cfg);

GroundTruthMechanism default_mechanism(std::uint64_t seed, std::size_t x_dim = 12,
                                       std::size_t z_dim = 16);

CityDataset generate_city(const CityConfig& cfg, const GroundTruthMechanism& mech);

// CSV schemas (one city per file pair):
//   transactions.csv: city_id, community_id, timestamp_iso8601, unit_price, x_0..x_{k-1}
//   communities.csv:  city_id, community_id, lat, lon, z_0..z_{m-1}
void write_csv(const CityDataset& ds, const std::string& transactions_path,
               const std::string& communities_path);
CityDataset load_csv(const std::string& transactions_path,
                     const std::string& communities_path);

// First n_train events by time go to train, the rest to test.
std::pair<std::vector<TransactionEvent>, std::vector<TransactionEvent>> chronological_split(
    const CityDataset& ds, std::size_t n_train);

// ---------------------------------------------------------------------------
// Benchmarks

enum class BenchmarkKind { kAligned, kAdversarial };

struct BenchmarkConfig {
  BenchmarkKind kind = BenchmarkKind::kAligned;
  std::uint64_t seed = 1;
  std::size_t n_sources = 3;
  std::size_t source_communities = 60;
  std::size_t source_transactions = 2000;
  std::size_t target_communities = 280;
  std::size_t target_transactions = 1200;
  std::size_t target_train_size = 20;
  double epsilon_m = 2000.0;
  double noise_sigma = 0.3;
  double base_price = 10.0;
};

// Sources span the full two-year window; the target city's history starts
// late so that its first training instances already have months of source
// data behind them. Source events later than the target's last training
// instance are excluded.
struct Benchmark {
  BenchmarkConfig config;
  GroundTruthMechanism mechanism;
  std::vector<CityDataset> sources;
  CityDataset target;
};

Benchmark make_benchmark(const BenchmarkConfig& cfg);

// Is this source city the adversarial one?
bool is_adversarial(const CityDataset& ds);

// ---------------------------------------------------------------------------
// Model-ready view: per-city z-scored attributes plus the event graph.

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std_dev;
  void apply(std::vector<double>& v) const;
};

// Fits x-scaling on the first n_train_for_scaling events (the city's training
// portion) and z-scaling across the city's communities, then builds the graph
// over standardized attributes.
struct PreparedCity {
  int city_id = 0;
  TemporalEventGraph graph;
  std::size_t n_train = 0;  // event-index split marker
  std::size_t x_dim = 0;
  std::size_t z_dim = 0;
  Standardizer x_scaler;
  Standardizer z_scaler;

  std::vector<std::size_t> train_ids() const;
  std::vector<std::size_t> test_ids() const;
};

PreparedCity prepare_city(const CityDataset& ds, std::size_t n_train_for_scaling,
                          double epsilon_m);

}  // namespace mtr
