#include "itermix/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "itermix/manifest.hpp"

namespace itermix {

namespace {

std::string_view trim_view(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    std::size_t comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(pos));
      break;
    }
    cells.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return cells;
}

}  // namespace

RawSeries load_csv(const std::string& path, bool has_header,
                   const std::optional<std::string>& date_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv file: " + path);
  if (date_column && !has_header)
    throw ConfigError("date_column requires has_header=true (columns are found by name)");

  RawSeries out;
  std::string line;
  int date_idx = -1;
  int expected_cells = -1;

  if (has_header) {
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    auto cells = split_line(line);
    expected_cells = static_cast<int>(cells.size());
    for (int i = 0; i < expected_cells; ++i) {
      std::string name(trim_view(cells[i]));
      if (date_column && name == *date_column) {
        if (date_idx >= 0) throw DataError(path + ": duplicate date column '" + name + "'");
        date_idx = i;
      } else {
        out.feature_names.push_back(std::move(name));
      }
    }
    if (date_column && date_idx < 0)
      throw DataError(path + ": date column '" + *date_column + "' not found in header");
  }

  int data_row = 0;
  while (std::getline(in, line)) {
    std::string_view lv = line;
    if (!lv.empty() && lv.back() == '\r') lv.remove_suffix(1);
    if (lv.empty()) continue;
    ++data_row;
    auto cells = split_line(lv);
    if (expected_cells < 0) {
      expected_cells = static_cast<int>(cells.size());
      for (int i = 0; i < expected_cells; ++i) out.feature_names.push_back("c" + std::to_string(i));
    }
    if (static_cast<int>(cells.size()) != expected_cells)
      throw DataError(path + ": row " + std::to_string(data_row) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(expected_cells));
    for (int i = 0; i < expected_cells; ++i) {
      std::string_view cell = trim_view(cells[i]);
      if (i == date_idx) {
        out.timestamps.emplace_back(cell);
        continue;
      }
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        int feature_col = i - (date_idx >= 0 && i > date_idx ? 1 : 0);
        throw DataError(path + ": could not parse cell '" + std::string(cell) + "' at row " +
                        std::to_string(data_row) + ", column '" + out.feature_names[feature_col] +
                        "'");
      }
      out.values.push_back(v);
    }
  }

  out.cols = static_cast<int>(out.feature_names.size());
  if (out.cols == 0) throw DataError(path + ": no feature columns");
  out.rows = static_cast<int>(out.values.size()) / out.cols;
  if (out.rows < 2) throw DataError(path + ": need at least 2 timesteps, got " +
                                    std::to_string(out.rows));
  return out;
}

SplitRanges chronological_split(const RawSeries& series, const SplitSpec& spec, int min_len) {
  const int n = series.rows;
  int b1 = 0, b2 = 0, b3 = 0;
  if (!spec.boundaries.empty()) {
    if (spec.boundaries.size() != 3)
      throw ConfigError("split boundaries must be {train_end, val_end, test_end}");
    b1 = spec.boundaries[0];
    b2 = spec.boundaries[1];
    b3 = spec.boundaries[2];
    if (!(0 < b1 && b1 < b2 && b2 < b3 && b3 <= n))
      throw ConfigError("split boundaries must be strictly increasing and fit " +
                        std::to_string(n) + " timesteps");
  } else {
    const double tr = spec.train_fraction, va = spec.val_fraction, te = spec.test_fraction;
    if (tr < 0 || va < 0 || te < 0 || std::abs(tr + va + te - 1.0) > 1e-9)
      throw ConfigError("split fractions must be non-negative and sum to 1");
    b1 = static_cast<int>(std::floor(n * tr));
    b2 = static_cast<int>(std::floor(n * (tr + va)));
    b3 = n;
  }
  SplitRanges r{{0, b1}, {b1, b2}, {b2, b3}};
  auto check = [&](const Range& g, const char* which) {
    if (g.len() < min_len)
      throw ConfigError(std::string(which) + " split has " + std::to_string(g.len()) +
                        " timesteps, needs at least " + std::to_string(min_len));
  };
  check(r.train, "train");
  check(r.val, "val");
  check(r.test, "test");
  return r;
}

PreparedSeries standardize(const RawSeries& series, const SplitRanges& ranges) {
  const int c = series.cols;
  NormStats stats;
  stats.mean.assign(c, 0.0);
  stats.std.assign(c, 0.0);
  const Range tr = ranges.train;
  for (int r = tr.begin; r < tr.end; ++r)
    for (int j = 0; j < c; ++j) stats.mean[j] += series.at(r, j);
  for (int j = 0; j < c; ++j) stats.mean[j] /= tr.len();
  for (int r = tr.begin; r < tr.end; ++r)
    for (int j = 0; j < c; ++j) {
      double d = series.at(r, j) - stats.mean[j];
      stats.std[j] += d * d;
    }
  for (int j = 0; j < c; ++j) {
    stats.std[j] = std::sqrt(stats.std[j] / tr.len());
    if (stats.std[j] == 0.0) {
      std::cerr << "warning: feature '" << series.feature_names[j]
                << "' is constant over the train range; std clamped to 1\n";
      stats.std[j] = 1.0;
    }
  }

  auto values = std::make_shared<std::vector<double>>(series.values);
  for (int r = 0; r < series.rows; ++r)
    for (int j = 0; j < c; ++j) {
      auto& v = (*values)[static_cast<std::size_t>(r) * c + j];
      v = (v - stats.mean[j]) / stats.std[j];
    }

  PreparedSeries out;
  out.values = std::move(values);
  out.rows = series.rows;
  out.cols = c;
  out.ranges = ranges;
  out.stats = std::move(stats);
  out.feature_names = series.feature_names;
  return out;
}

WindowedDataset::WindowedDataset(std::shared_ptr<const std::vector<double>> values,
                                 int series_cols, std::vector<int> starts, int lookback,
                                 int horizon, std::vector<int> target_channels, NormStats stats)
    : values_(std::move(values)),
      cols_(series_cols),
      starts_(std::move(starts)),
      lookback_(lookback),
      horizon_(horizon),
      target_channels_(std::move(target_channels)),
      stats_(std::move(stats)) {}

Tensor WindowedDataset::input(std::size_t k) const {
  Tensor t = Tensor::zeros({lookback_, cols_});
  const double* src = values_->data() + static_cast<std::size_t>(starts_[k]) * cols_;
  std::copy(src, src + static_cast<std::size_t>(lookback_) * cols_, t.values().data());
  return t;
}

Tensor WindowedDataset::target(std::size_t k) const {
  const int cout = out_channels();
  Tensor t = Tensor::zeros({horizon_, cout});
  const double* base = values_->data() + static_cast<std::size_t>(starts_[k] + lookback_) * cols_;
  for (int r = 0; r < horizon_; ++r)
    for (int j = 0; j < cout; ++j)
      t.values()[static_cast<std::size_t>(r) * cout + j] =
          base[static_cast<std::size_t>(r) * cols_ + target_channels_[j]];
  return t;
}

std::pair<Tensor, Tensor> WindowedDataset::gather(std::span<const std::size_t> idx) const {
  const int b = static_cast<int>(idx.size());
  if (b == 0) throw ContractError("gather: empty batch");
  const int cout = out_channels();
  Tensor x = Tensor::zeros({b, lookback_, cols_});
  Tensor y = Tensor::zeros({b, horizon_, cout});
  for (int i = 0; i < b; ++i) {
    const int s = starts_[idx[i]];
    const double* src = values_->data() + static_cast<std::size_t>(s) * cols_;
    std::copy(src, src + static_cast<std::size_t>(lookback_) * cols_,
              x.values().data() + static_cast<std::size_t>(i) * lookback_ * cols_);
    const double* tgt = values_->data() + static_cast<std::size_t>(s + lookback_) * cols_;
    double* dst = y.values().data() + static_cast<std::size_t>(i) * horizon_ * cout;
    for (int r = 0; r < horizon_; ++r)
      for (int j = 0; j < cout; ++j)
        dst[static_cast<std::size_t>(r) * cout + j] =
            tgt[static_cast<std::size_t>(r) * cols_ + target_channels_[j]];
  }
  return {std::move(x), std::move(y)};
}

WindowedDataset make_windows(const PreparedSeries& series, Range range, int lookback, int horizon,
                             const std::vector<int>& target_channels, int stride) {
  if (lookback <= 0 || horizon <= 0)
    throw ConfigError("make_windows: lookback and horizon must be positive, got L=" +
                      std::to_string(lookback) + " T=" + std::to_string(horizon));
  if (stride <= 0) throw ConfigError("make_windows: stride must be positive");
  if (range.len() < lookback + horizon)
    throw ConfigError("make_windows: range of " + std::to_string(range.len()) +
                      " timesteps cannot hold a window of " +
                      std::to_string(lookback + horizon));
  std::vector<int> targets = target_channels;
  if (targets.empty()) {
    targets.resize(series.cols);
    for (int j = 0; j < series.cols; ++j) targets[j] = j;
  }
  for (int j : targets)
    if (j < 0 || j >= series.cols)
      throw ConfigError("make_windows: target channel " + std::to_string(j) +
                        " out of range for " + std::to_string(series.cols) + " features");
  std::vector<int> starts;
  for (int s = range.begin; s + lookback + horizon <= range.end; s += stride) starts.push_back(s);
  return WindowedDataset(series.values, series.cols, std::move(starts), lookback, horizon,
                         std::move(targets), series.stats);
}

DataManifest read_data_manifest(const std::string& path) {
  KeyValueFile kv = KeyValueFile::parse_file(path);
  DataManifest m;
  m.path = kv.get("path");
  // relative csv paths resolve against the manifest's directory
  std::filesystem::path p(m.path);
  if (p.is_relative()) m.path = (std::filesystem::path(path).parent_path() / p).string();
  m.has_header = kv.get_bool_or("has_header", true);
  if (kv.has("date_column")) m.date_column = kv.get("date_column");
  m.lookback = static_cast<int>(kv.get_int("lookback"));
  m.horizon = static_cast<int>(kv.get_int("horizon"));
  m.stride = static_cast<int>(kv.get_int_or("stride", 1));
  m.name = kv.get_or("name", std::filesystem::path(m.path).stem().string());

  std::string split = kv.get_or("split", "fractions:0.7,0.1,0.2");
  std::size_t colon = split.find(':');
  std::string mode = split.substr(0, colon);
  std::string args = colon == std::string::npos ? "" : split.substr(colon + 1);
  auto parts = split_list(args);
  if (mode == "fractions") {
    if (parts.size() != 3) throw ConfigError(path + ": split fractions need 3 values");
    m.split = SplitSpec::fractions(std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2]));
  } else if (mode == "boundaries") {
    if (parts.size() != 3) throw ConfigError(path + ": split boundaries need 3 values");
    m.split = SplitSpec::explicit_bounds(std::stoi(parts[0]), std::stoi(parts[1]),
                                         std::stoi(parts[2]));
  } else {
    throw ConfigError(path + ": unknown split mode '" + mode +
                      "' (expected fractions:... or boundaries:...)");
  }

  std::string targets = kv.get_or("target_channels", "all");
  if (targets != "all")
    for (const std::string& s : split_list(targets)) m.target_channels.push_back(std::stoi(s));
  return m;
}

DatasetBundle load_dataset(const DataManifest& manifest) {
  RawSeries raw = load_csv(manifest.path, manifest.has_header, manifest.date_column);
  SplitRanges ranges =
      chronological_split(raw, manifest.split, manifest.lookback + manifest.horizon);
  PreparedSeries prepared = standardize(raw, ranges);
  DatasetBundle b = windows_for(prepared, manifest.lookback, manifest.horizon,
                                manifest.target_channels, manifest.stride, manifest.name);
  return b;
}

DatasetBundle windows_for(const PreparedSeries& series, int lookback, int horizon,
                          const std::vector<int>& target_channels, int stride,
                          const std::string& name) {
  DatasetBundle b;
  b.series = series;
  b.train = make_windows(series, series.ranges.train, lookback, horizon, target_channels, stride);
  b.val = make_windows(series, series.ranges.val, lookback, horizon, target_channels, stride);
  b.test = make_windows(series, series.ranges.test, lookback, horizon, target_channels, stride);
  b.lookback = lookback;
  b.horizon = horizon;
  b.target_channels = b.train.target_channels();
  b.name = name;
  return b;
}

}  // namespace itermix
