#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "thoraxdiff/metrics.hpp"

namespace thoraxdiff {

// Runs one command line (without the program name). Errors are reported on
// `err` as a single JSON object and mapped to exit codes:
// 0 ok, 2 usage/config, 3 data/format, 4 numeric health, 5 I/O.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// One volume of a data directory and its layout, if any.
struct DataEntry {
  std::string id;
  std::filesystem::path volume;
  std::optional<std::filesystem::path> layout;
};

// Reads index.json when present; otherwise every f32 sidecar in the
// directory is a volume, and `<id>_layout` its layout. Sorted by id.
std::vector<DataEntry> list_dataset(const std::filesystem::path& dir);

// Feature CSV: header "id,f0,f1,...", one row per volume.
std::string features_csv(const std::vector<std::string>& ids, const std::vector<FeatureVector>& f);
void read_features_csv(const std::filesystem::path& path, std::vector<std::string>& ids,
                       Eigen::MatrixXd& features);

// Features for many volumes, optionally on several threads. Each volume is
// handled independently, so results do not depend on the thread count.
std::vector<FeatureVector> extract_all(const std::vector<DataEntry>& entries, int threads);

}  // namespace thoraxdiff
