#pragma once

#include <cstddef>
#include <string>

namespace appnet {

struct BenchResult {
  size_t size = 0;
  double local_bps = 0;    // same-node connect through the switch fast path
  double hairpin_bps = 0;  // the same server reached over a loopback TCP stream
  double ratio = 0;        // local / hairpin
};

/// Echo workload: the client writes `msg_size` bytes and reads them back,
/// repeatedly, for `seconds` on each path. Runs a private node on loopback.
BenchResult bench_local_vs_hairpin(size_t msg_size, double seconds);

std::string bench_csv_header();
std::string bench_csv_row(const BenchResult& r);

}  // namespace appnet
