#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nrulab/config.hpp"
#include "nrulab/error.hpp"

namespace nrulab {

struct MetricsRecord {
  std::string run_id;
  std::int64_t step = 0;
  std::string split = "train";
  double loss_nats = 0.0;
  double bpc = 0.0;
  double accuracy = 0.0;
  double grad_norm_preclip = 0.0;
  double grad_norm_postclip = 0.0;
  double wall_ms = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline json to_json(const MetricsRecord& r) {
  return json{{"run_id", r.run_id},       {"step", r.step},
              {"split", r.split},         {"loss_nats", r.loss_nats},
              {"bpc", r.bpc},             {"accuracy", r.accuracy},
              {"grad_norm_preclip", r.grad_norm_preclip}, {"grad_norm_postclip", r.grad_norm_postclip},
              {"wall_ms", r.wall_ms}};
}

inline MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.step = j.at("step").get<std::int64_t>();
  r.split = j.at("split").get<std::string>();
  r.loss_nats = j.at("loss_nats").get<double>();
  r.bpc = j.at("bpc").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.grad_norm_preclip = j.at("grad_norm_preclip").get<double>();
  r.grad_norm_postclip = j.at("grad_norm_postclip").get<double>();
  r.wall_ms = j.at("wall_ms").get<double>();
  return r;
}

/// One JSON object per line.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw ConfigError("cannot write metrics file '" + path.string() + "'");
  }
  void write(const MetricsRecord& r) {
    out_ << to_json(r).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open metrics file '" + path.string() + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(metrics_from_json(json::parse(line)));
  }
  return out;
}

/// Trailing mean over the last min(window, i + 1) values, for each i.
inline std::vector<double> smoothed(const std::vector<double>& values, std::size_t window = 100) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t n = std::min(window, i + 1);
    double acc = 0.0;
    for (std::size_t j = i + 1 - n; j <= i; ++j) acc += values[j];
    out[i] = acc / static_cast<double>(n);
  }
  return out;
}

/// Streaming form of smoothed(); agrees with it bitwise.
class SmoothedLoss {
 public:
  explicit SmoothedLoss(std::size_t window = 100) : window_(window) {}
  double push(double v) {
    buf_.push_back(v);
    if (buf_.size() > window_) buf_.erase(buf_.begin());
    double s = 0.0;
    for (double x : buf_) s += x;
    return s / static_cast<double>(buf_.size());
  }

 private:
  std::size_t window_;
  std::vector<double> buf_;
};

}  // namespace nrulab
