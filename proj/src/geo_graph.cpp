#include "mtr/geo_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mtr {

namespace {
constexpr double kEarthRadiusM = 6'371'000.0;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

void check_coords(double lat, double lon) {
  if (!(lat >= -90.0 && lat <= 90.0 && lon >= -180.0 && lon <= 180.0)) {
    throw ContractError("haversine: coordinates out of range (" + std::to_string(lat) + ", " +
                        std::to_string(lon) + ")");
  }
}
}  // namespace

double haversine_m(double lat_a, double lon_a, double lat_b, double lon_b) {
  check_coords(lat_a, lon_a);
  check_coords(lat_b, lon_b);
  const double phi_a = deg2rad(lat_a), phi_b = deg2rad(lat_b);
  const double dphi = deg2rad(lat_b - lat_a);
  const double dlam = deg2rad(lon_b - lon_a);
  const double s = std::sin(dphi / 2), t = std::sin(dlam / 2);
  const double h = s * s + std::cos(phi_a) * std::cos(phi_b) * t * t;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(h)));
}

TemporalEventGraph TemporalEventGraph::build(std::vector<Community> communities,
                                             std::vector<TransactionEvent> events,
                                             double epsilon_m) {
  TemporalEventGraph g;
  g.communities_ = std::move(communities);
  g.epsilon_m_ = epsilon_m;

  int max_id = -1;
  for (const Community& c : g.communities_) {
    if (c.id < 0) throw LoadError("graph: negative community id " + std::to_string(c.id));
    check_coords(c.lat, c.lon);
    max_id = std::max(max_id, c.id);
  }
  g.id_to_index_.assign(static_cast<std::size_t>(max_id) + 1, -1);
  for (std::size_t i = 0; i < g.communities_.size(); ++i) {
    int id = g.communities_[i].id;
    if (g.id_to_index_[static_cast<std::size_t>(id)] != -1) {
      throw LoadError("graph: duplicate community id " + std::to_string(id));
    }
    g.id_to_index_[static_cast<std::size_t>(id)] = static_cast<int>(i);
  }

  for (std::size_t n = 0; n < events.size(); ++n) {
    const TransactionEvent& e = events[n];
    if (e.community_id < 0 || e.community_id > max_id ||
        g.id_to_index_[static_cast<std::size_t>(e.community_id)] < 0) {
      throw LoadError("graph: event " + std::to_string(n) + " references unknown community " +
                      std::to_string(e.community_id));
    }
    if (!(e.unit_price > 0.0)) {
      throw LoadError("graph: event " + std::to_string(n) + " has non-positive unit price");
    }
  }

  // Stable sort keeps (time, input index) order for tied timestamps.
  std::stable_sort(events.begin(), events.end(),
                   [](const TransactionEvent& a, const TransactionEvent& b) {
                     return a.time < b.time;
                   });
  g.events_ = std::move(events);

  g.adjacency_.resize(g.communities_.size());
  for (std::size_t i = 0; i < g.communities_.size(); ++i) {
    g.adjacency_[i].push_back({g.communities_[i].id, 0.0});  // self-loop, p_ii = 0
    for (std::size_t j = i + 1; j < g.communities_.size(); ++j) {
      const double d = haversine_m(g.communities_[i].lat, g.communities_[i].lon,
                                   g.communities_[j].lat, g.communities_[j].lon);
      if (d < epsilon_m) {
        g.adjacency_[i].push_back({g.communities_[j].id, d});
        g.adjacency_[j].push_back({g.communities_[i].id, d});
      }
    }
  }
  for (auto& nbrs : g.adjacency_) {
    std::sort(nbrs.begin(), nbrs.end(),
              [](const NeighborEntry& a, const NeighborEntry& b) { return a.id < b.id; });
  }

  g.events_by_comm_.resize(g.communities_.size());
  for (std::size_t n = 0; n < g.events_.size(); ++n) {
    g.events_by_comm_[static_cast<std::size_t>(g.index_of(g.events_[n].community_id))]
        .push_back(n);
  }

  if (g.events_.empty()) {
    g.epoch_ = 0;
    g.horizon_ = 0;
  } else {
    g.epoch_ = g.events_.front().time;
    g.horizon_ = g.events_.back().time;
  }
  return g;
}

int TemporalEventGraph::index_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_index_.size() ||
      id_to_index_[static_cast<std::size_t>(id)] < 0) {
    throw ContractError("graph: unknown community id " + std::to_string(id));
  }
  return id_to_index_[static_cast<std::size_t>(id)];
}

const Community& TemporalEventGraph::community(int id) const {
  return communities_[static_cast<std::size_t>(index_of(id))];
}

bool TemporalEventGraph::has_community(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < id_to_index_.size() &&
         id_to_index_[static_cast<std::size_t>(id)] >= 0;
}

std::span<const NeighborEntry> TemporalEventGraph::neighbors(int community_id) const {
  return adjacency_[static_cast<std::size_t>(index_of(community_id))];
}

std::vector<std::size_t> TemporalEventGraph::events_in_window(int community_id,
                                                              std::int64_t until) const {
  const auto& idx = events_by_comm_[static_cast<std::size_t>(index_of(community_id))];
  std::vector<std::size_t> out;
  for (std::size_t n : idx) {
    if (events_[n].time <= until) out.push_back(n);  // boundary inclusive
  }
  return out;
}

double TemporalEventGraph::time_scaled(std::int64_t t) const {
  if (horizon_ <= epoch_) return 0.0;
  return static_cast<double>(t - epoch_) / static_cast<double>(horizon_ - epoch_);
}

}  // namespace mtr
