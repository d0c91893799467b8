#ifndef CECSIM_TESTS_SUPPORT_HPP_
#define CECSIM_TESTS_SUPPORT_HPP_

// Shared generators and brute-force references for the test suites.

#include <vector>

#include "cecsim/oracle.hpp"
#include "cecsim/rng.hpp"

namespace testsupport {

// Connected random instance with up to 4 nodes and 6 tasks.
inline cecsim::StaticInstance random_static_instance(cecsim::Rng& rng) {
  using namespace cecsim;
  StaticInstance inst;
  const int n = 2 + static_cast<int>(rng.uniform_index(3));
  inst.topology.slot_duration_s = 0.5;
  inst.horizon_slots = 2 + static_cast<int>(rng.uniform_index(6));
  for (int i = 0; i < n; ++i) {
    NodeSpec s;
    s.id = i;
    s.compute_hz = rng.uniform(1e9, 4e9);
    s.memory_bits = rng.uniform(4e7, 2e8);
    s.sw_fail_rate = rng.uniform(0.0, 0.08);
    s.hw_fail_rate = rng.uniform(0.0, 0.04);
    inst.topology.nodes.push_back({s, true});
  }
  // Spanning chain plus random extra edges.
  for (int i = 1; i < n; ++i) {
    const int j = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(i)));
    inst.topology.links.push_back({make_link(i, j, rng.uniform(8e7, 3.2e8), rng.uniform(0.0, 0.3)), true});
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (!inst.topology.find_link(i, j) && rng.bernoulli(0.4))
        inst.topology.links.push_back({make_link(i, j, rng.uniform(8e7, 3.2e8), rng.uniform(0.0, 0.3)), true});
  const int tasks = 1 + static_cast<int>(rng.uniform_index(6));
  for (int k = 0; k < tasks; ++k) {
    const NodeId o = static_cast<NodeId>(rng.uniform_index(static_cast<std::size_t>(n)));
    const int slot = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(inst.horizon_slots)));
    Task t = make_task(o, slot, rng.uniform(1.6e7, 3.2e7), rng.uniform(50.0, 200.0),
                       rng.uniform(0.8, 4.0), rng.uniform(0.8, 0.97));
    t.id = k;
    inst.tasks.push_back(t);
  }
  return inst;
}

// Independent packer: tries every placement of items into bins.
inline bool brute_force_packable(const std::vector<double>& sizes, int bins, double cap) {
  std::vector<double> load(static_cast<std::size_t>(bins), 0.0);
  auto rec = [&](auto&& self, std::size_t i) -> bool {
    if (i == sizes.size()) return true;
    for (int b = 0; b < bins; ++b) {
      load[b] += sizes[i];
      const bool ok = load[b] <= cap && self(self, i + 1);
      load[b] -= sizes[i];
      if (ok) return true;
    }
    return false;
  };
  return rec(rec, 0);
}

}  // namespace testsupport

#endif  // CECSIM_TESTS_SUPPORT_HPP_
