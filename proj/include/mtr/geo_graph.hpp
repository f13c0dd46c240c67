#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtr/common.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

// A residential community: location plus its (time-indexed in principle,
// static in this artifact) attribute vector.
struct Community {
  int id = -1;
  double lat = 0.0;   // degrees, [-90, 90]
  double lon = 0.0;   // degrees, [-180, 180]
  std::vector<double> attrs;
};

// One timestamped sale: apartment attributes, host community, unit price in
// thousands of currency units per square meter.
struct TransactionEvent {
  std::vector<double> estate_attrs;
  int community_id = -1;
  std::int64_t time = 0;  // seconds since dataset epoch
  double unit_price = 0.0;
};

struct NeighborEntry {
  int id = -1;
  double distance_m = 0.0;
};

// Great-circle distance in meters, R = 6,371 km.
double haversine_m(double lat_a, double lon_a, double lat_b, double lon_b);

// Heterogeneous graph of communities (distance-thresholded c-c edges plus
// self-loops) and chronologically ordered transaction events. Immutable once
// built; concurrent readers are fine.
class TemporalEventGraph {
 public:
  static TemporalEventGraph build(std::vector<Community> communities,
                                  std::vector<TransactionEvent> events, double epsilon_m);

  const std::vector<Community>& communities() const { return communities_; }
  const std::vector<TransactionEvent>& events() const { return events_; }
  double epsilon_m() const { return epsilon_m_; }

  const Community& community(int id) const;
  bool has_community(int id) const;

  // Neighbors including the community itself (self-loop, distance 0),
  // ascending by id.
  std::span<const NeighborEntry> neighbors(int community_id) const;

  // Indices (into events()) of this community's events with time <= until,
  // chronological.
  std::vector<std::size_t> events_in_window(int community_id, std::int64_t until) const;

  // Dataset time window; used to normalize query times.
  std::int64_t epoch() const { return epoch_; }
  std::int64_t horizon() const { return horizon_; }
  double time_scaled(std::int64_t t) const;

 private:
  std::vector<Community> communities_;
  std::vector<TransactionEvent> events_;
  double epsilon_m_ = 0.0;
  std::int64_t epoch_ = 0;
  std::int64_t horizon_ = 0;
  std::vector<std::vector<NeighborEntry>> adjacency_;       // by community index
  std::vector<std::vector<std::size_t>> events_by_comm_;    // event indices, chronological
  std::vector<int> id_to_index_;
  int index_of(int id) const;
};

}  // namespace mtr
