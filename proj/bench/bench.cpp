// Parallel kernels against the serial reference implementation.
// Prints one JSON object per (kernel, size) with both timings.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <vector>

#include "codedvtr/bench.hpp"
#include "codedvtr/parallel.hpp"

int main(int argc, char** argv) {
  CLI::App app{"codedvtr kernel benchmark"};
  std::vector<std::size_t> sizes{10000, 50000, 200000};
  int repeats = 3;
  int threads = 0;
  std::uint64_t seed = 0;
  app.add_option("--voxels", sizes, "grid sizes")->delimiter(',');
  app.add_option("--repeats", repeats, "timed repetitions, best kept");
  app.add_option("--threads", threads, "worker threads for the parallel kernels");
  app.add_option("--seed", seed, "grid seed");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) cvtr::par::set_threads(threads);

  for (std::size_t n : sizes) {
    for (const char* kernel : {"gather", "aggregate"}) {
      const bool gather = kernel[0] == 'g';
      const auto par = gather ? cvtr::bench::gather(n, repeats, seed) : cvtr::bench::aggregate(n, repeats, seed);
      const auto ref =
          gather ? cvtr::bench::gather(n, repeats, seed, true) : cvtr::bench::aggregate(n, repeats, seed, true);
      nlohmann::json row{{"kernel", kernel},
                         {"voxels", n},
                         {"threads", par["threads"]},
                         {"parallel_s", par["seconds"]},
                         {"reference_s", ref["seconds"]},
                         {"speedup", ref["seconds"].get<double>() / par["seconds"].get<double>()}};
      if (gather) {
        row["slot_resolutions_per_s"] = par["slot_resolutions_per_s"];
        row["results_match"] = par["occupied_slots"] == ref["occupied_slots"];
      } else {
        row["results_match"] = par["checksum"] == ref["checksum"];
      }
      std::printf("%s\n", row.dump().c_str());
      std::fflush(stdout);
    }
  }
}
