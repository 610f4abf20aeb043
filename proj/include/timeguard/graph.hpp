#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tg {

struct Edge {
    int i = 0;
    int j = 0;
    double weight = 1.0;

    friend bool operator==(const Edge&, const Edge&) = default;
};

/// Weighted device-interaction graph. Undirected graphs store each edge once
/// with i < j.
struct DeviceGraph {
    int n_nodes = 0;
    std::vector<Edge> edges;
    bool symmetric = true;

    /// Neighbor lists (excluding self unless a self-loop edge exists).
    std::vector<std::vector<int>> neighbors() const;

    /// Neighbor lists for attention aggregation: isolated nodes get themselves.
    std::vector<std::vector<int>> attention_neighborhoods() const;

    /// Subgraph on `nodes` (relabeled 0..k-1 in the given order).
    DeviceGraph induced(const std::vector<int>& nodes) const;

    /// Throws ValidationError on out-of-range indices or negative weights.
    void validate() const;

    bool connected() const;

    friend bool operator==(const DeviceGraph&, const DeviceGraph&) = default;
};

enum class Topology { ring, grid, k_nearest, explicit_edges };

std::string to_string(Topology t);
Topology topology_from_string(const std::string& name);

struct GraphSpec {
    Topology topology = Topology::k_nearest;
    int k = 2;
    std::uint64_t seed = 1;
    std::vector<Edge> explicit_edges;
};

/// Connected weighted undirected graph with weights in (0, 1].
DeviceGraph build_graph(int n_devices, const GraphSpec& spec);

}  // namespace tg
