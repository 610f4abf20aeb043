#include "timeguard/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "timeguard/core/error.hpp"
#include "timeguard/core/rng.hpp"

namespace tg {

std::vector<std::vector<int>> DeviceGraph::neighbors() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n_nodes));
    for (const auto& e : edges) {
        out[e.i].push_back(e.j);
        if (symmetric && e.i != e.j) out[e.j].push_back(e.i);
    }
    for (auto& v : out) std::sort(v.begin(), v.end());
    return out;
}

std::vector<std::vector<int>> DeviceGraph::attention_neighborhoods() const {
    auto out = neighbors();
    for (int i = 0; i < n_nodes; ++i)
        if (out[i].empty()) out[i].push_back(i);
    return out;
}

DeviceGraph DeviceGraph::induced(const std::vector<int>& nodes) const {
    std::vector<int> relabel(static_cast<std::size_t>(n_nodes), -1);
    for (std::size_t k = 0; k < nodes.size(); ++k) relabel.at(nodes[k]) = static_cast<int>(k);
    DeviceGraph g;
    g.n_nodes = static_cast<int>(nodes.size());
    g.symmetric = symmetric;
    for (const auto& e : edges) {
        const int a = relabel[e.i];
        const int b = relabel[e.j];
        if (a < 0 || b < 0) continue;
        g.edges.push_back(symmetric && a > b ? Edge{b, a, e.weight} : Edge{a, b, e.weight});
    }
    return g;
}

void DeviceGraph::validate() const {
    if (n_nodes < 0) throw ValidationError("graph: negative node count");
    for (const auto& e : edges) {
        if (e.i < 0 || e.j < 0 || e.i >= n_nodes || e.j >= n_nodes)
            throw ValidationError("graph: edge index out of range");
        if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) throw ValidationError("graph: negative edge weight");
    }
}

bool DeviceGraph::connected() const {
    if (n_nodes <= 1) return true;
    const auto nb = neighbors();
    std::vector<char> seen(static_cast<std::size_t>(n_nodes), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int v : nb[u])
            if (!seen[v]) {
                seen[v] = 1;
                ++count;
                stack.push_back(v);
            }
    }
    return count == n_nodes;
}

std::string to_string(Topology t) {
    switch (t) {
        case Topology::ring: return "ring";
        case Topology::grid: return "grid";
        case Topology::k_nearest: return "k_nearest";
        case Topology::explicit_edges: return "explicit";
    }
    return "?";
}

Topology topology_from_string(const std::string& name) {
    if (name == "ring") return Topology::ring;
    if (name == "grid") return Topology::grid;
    if (name == "k_nearest") return Topology::k_nearest;
    if (name == "explicit") return Topology::explicit_edges;
    throw ValidationError("unknown topology '" + name + "'");
}

namespace {

void add_edge(std::set<std::pair<int, int>>& seen, std::vector<Edge>& edges, int a, int b, double w) {
    if (a == b) return;
    if (a > b) std::swap(a, b);
    if (seen.emplace(a, b).second) edges.push_back({a, b, w});
}

DeviceGraph ring(int n) {
    DeviceGraph g{n, {}, true};
    if (n == 2) g.edges.push_back({0, 1, 1.0});
    if (n > 2)
        for (int i = 0; i < n; ++i) {
            const int j = (i + 1) % n;
            g.edges.push_back(i < j ? Edge{i, j, 1.0} : Edge{j, i, 1.0});
        }
    return g;
}

DeviceGraph grid(int n) {
    DeviceGraph g{n, {}, true};
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    for (int v = 0; v < n; ++v) {
        if ((v % cols) + 1 < cols && v + 1 < n) g.edges.push_back({v, v + 1, 1.0});
        if (v + cols < n) g.edges.push_back({v, v + cols, 1.0});
    }
    return g;
}

// Devices placed uniformly in the unit square; each links to its k nearest
// peers with weight exp(-distance). Components are then bridged through their
// closest pair of nodes so the result is connected.
DeviceGraph k_nearest(int n, int k, std::uint64_t seed) {
    if (k >= n) throw ValidationError("k_nearest: k must be < number of devices");
    if (k < 1) throw ValidationError("k_nearest: k must be >= 1");
    auto rng = make_rng(seed, Stream::graph);
    std::vector<std::pair<double, double>> pos(static_cast<std::size_t>(n));
    for (auto& p : pos) {
        p.first = uniform_draw(rng);
        p.second = uniform_draw(rng);
    }
    auto dist = [&](int a, int b) { return std::hypot(pos[a].first - pos[b].first, pos[a].second - pos[b].second); };

    DeviceGraph g{n, {}, true};
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < n; ++i) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist(i, a) < dist(i, b); });
        int taken = 0;
        for (int j : order) {
            if (j == i) continue;
            add_edge(seen, g.edges, i, j, std::exp(-dist(i, j)));
            if (++taken == k) break;
        }
    }
    // Bridge components.
    while (!g.connected()) {
        const auto nb = g.neighbors();
        std::vector<int> comp(static_cast<std::size_t>(n), -1);
        std::vector<int> stack{0};
        comp[0] = 0;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v : nb[u])
                if (comp[v] < 0) {
                    comp[v] = 0;
                    stack.push_back(v);
                }
        }
        int best_a = -1, best_b = -1;
        double best = 1e300;
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                if (comp[a] == 0 && comp[b] < 0 && dist(a, b) < best) {
                    best = dist(a, b);
                    best_a = a;
                    best_b = b;
                }
        add_edge(seen, g.edges, best_a, best_b, std::exp(-best));
    }
    std::sort(g.edges.begin(), g.edges.end(),
              [](const Edge& x, const Edge& y) { return std::tie(x.i, x.j) < std::tie(y.i, y.j); });
    return g;
}

}  // namespace

DeviceGraph build_graph(int n_devices, const GraphSpec& spec) {
    if (n_devices < 1) throw ValidationError("build_graph: need at least one device");
    if (n_devices == 1) return DeviceGraph{1, {}, true};
    DeviceGraph g;
    switch (spec.topology) {
        case Topology::ring: g = ring(n_devices); break;
        case Topology::grid: g = grid(n_devices); break;
        case Topology::k_nearest: g = k_nearest(n_devices, spec.k, spec.seed); break;
        case Topology::explicit_edges:
            g = DeviceGraph{n_devices, spec.explicit_edges, true};
            for (auto& e : g.edges)
                if (e.i > e.j) std::swap(e.i, e.j);
            break;
    }
    g.validate();
    return g;
}

}  // namespace tg
