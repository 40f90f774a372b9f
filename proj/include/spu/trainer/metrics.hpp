// SPDX-License-Identifier: Apache-2.0
//
// Per-epoch metrics. CSV columns:
//   epoch,split,loss,accuracy,lr,plan_id,extra_bytes,live_bytes
// extra_bytes is the planned footprint, live_bytes the peak the engine
// actually held during the epoch. Wall time is kept in memory only so that
// reruns produce identical files.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

namespace spu {

struct MetricsRow {
  int epoch = 0;
  std::string split;  // "train" or "eval"
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  std::int64_t plan_id = 0;
  std::size_t extra_bytes = 0;
  std::size_t live_bytes = 0;
  double wall_seconds = 0.0;
};

struct Metrics {
  std::vector<MetricsRow> rows;

  void append(MetricsRow r) { rows.push_back(std::move(r)); }

  const MetricsRow* last(const std::string& split) const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
      if (it->split == split) return &*it;
    return nullptr;
  }
  double final_eval_accuracy() const {
    const auto* r = last("eval");
    return r ? r->accuracy : 0.0;
  }

  static constexpr const char* kHeader = "epoch,split,loss,accuracy,lr,plan_id,extra_bytes,live_bytes";

  void write_csv(std::ostream& os) const {
    os << kHeader << '\n';
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%lld,%zu,%zu\n", r.epoch, r.split.c_str(), r.loss,
                    r.accuracy, r.lr, static_cast<long long>(r.plan_id), r.extra_bytes, r.live_bytes);
      os << buf;
    }
  }
  void save_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_csv(os);
  }
};

}  // namespace spu
