#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "itermix/tensor.hpp"

namespace itermix {

// Raw multivariate series as loaded from disk: rows are timesteps, columns
// are features, row-major.
struct RawSeries {
  std::vector<double> values;
  int rows = 0;
  int cols = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> timestamps;  // populated iff a date column was stripped

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

// Loads a UTF-8 comma-separated file. When date_column names a header
// column, that column is stripped into timestamps and does not count as a
// feature. Unparseable or non-finite cells and ragged rows raise DataError
// with their location.
RawSeries load_csv(const std::string& path, bool has_header,
                   const std::optional<std::string>& date_column = {});

struct Range {
  int begin = 0;
  int end = 0;
  int len() const { return end - begin; }
};

// Chronological split, either by fractions of the series length or by
// explicit end indices {train_end, val_end, test_end}.
struct SplitSpec {
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::vector<int> boundaries;  // empty = fractions mode

  static SplitSpec fractions(double tr, double va, double te) {
    SplitSpec s;
    s.train_fraction = tr;
    s.val_fraction = va;
    s.test_fraction = te;
    return s;
  }
  static SplitSpec explicit_bounds(int train_end, int val_end, int test_end) {
    SplitSpec s;
    s.boundaries = {train_end, val_end, test_end};
    return s;
  }
};

struct SplitRanges {
  Range train, val, test;
};

// Contiguous, non-overlapping, order-preserving ranges. Every range must be
// able to hold at least one window of min_len timesteps.
SplitRanges chronological_split(const RawSeries& series, const SplitSpec& spec, int min_len);

// Per-feature z-score statistics, computed over the train range only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Standardized series plus everything needed to cut windows from it.
struct PreparedSeries {
  std::shared_ptr<const std::vector<double>> values;  // rows x cols
  int rows = 0;
  int cols = 0;
  SplitRanges ranges;
  NormStats stats;
  std::vector<std::string> feature_names;

  double at(int r, int c) const { return (*values)[static_cast<std::size_t>(r) * cols + c]; }
};

// Applies (x - train_mean) / train_std to every split using train
// statistics only. A constant train feature clamps its std to 1 (warning
// on stderr) so the transform stays invertible.
PreparedSeries standardize(const RawSeries& series, const SplitRanges& ranges);

inline double destandardize(const NormStats& st, int col, double v) {
  return v * st.std[col] + st.mean[col];
}

// Sliding input/target windows over one split. Windows are index views into
// the shared standardized matrix; tensors are materialized on access.
class WindowedDataset {
 public:
  WindowedDataset() = default;
  WindowedDataset(std::shared_ptr<const std::vector<double>> values, int series_cols,
                  std::vector<int> starts, int lookback, int horizon,
                  std::vector<int> target_channels, NormStats stats);

  std::size_t size() const { return starts_.size(); }
  int lookback() const { return lookback_; }
  int horizon() const { return horizon_; }
  int channels() const { return cols_; }
  int out_channels() const { return static_cast<int>(target_channels_.size()); }
  const std::vector<int>& target_channels() const { return target_channels_; }
  const NormStats& stats() const { return stats_; }
  int start_of(std::size_t k) const { return starts_[k]; }

  Tensor input(std::size_t k) const;   // {L, C}
  Tensor target(std::size_t k) const;  // {T, C_out}

  // Batched gather in the order of idx: ({B,L,C}, {B,T,C_out}).
  std::pair<Tensor, Tensor> gather(std::span<const std::size_t> idx) const;

 private:
  std::shared_ptr<const std::vector<double>> values_;
  int cols_ = 0;
  std::vector<int> starts_;
  int lookback_ = 0;
  int horizon_ = 0;
  std::vector<int> target_channels_;
  NormStats stats_;
};

// Cuts windows at the given stride; the target of a window begins right
// after its input and no window crosses the range boundary.
WindowedDataset make_windows(const PreparedSeries& series, Range range, int lookback, int horizon,
                             const std::vector<int>& target_channels, int stride = 1);

// Dataset manifest: flat key=value file naming the CSV and windowing
// parameters (path, has_header, date_column, split, lookback, horizon,
// target_channels, stride).
struct DataManifest {
  std::string path;
  bool has_header = true;
  std::optional<std::string> date_column;
  SplitSpec split;
  int lookback = 0;
  int horizon = 0;
  std::vector<int> target_channels;  // empty = all channels
  int stride = 1;
  std::string name;  // defaults to the CSV stem
};

DataManifest read_data_manifest(const std::string& path);

struct DatasetBundle {
  PreparedSeries series;
  WindowedDataset train, val, test;
  int lookback = 0;
  int horizon = 0;
  std::vector<int> target_channels;  // resolved to concrete indices
  std::string name;
};

// Full ingest: load, split, standardize, window all three splits.
DatasetBundle load_dataset(const DataManifest& manifest);

// Re-windows an already prepared series (used by lookback search).
DatasetBundle windows_for(const PreparedSeries& series, int lookback, int horizon,
                          const std::vector<int>& target_channels, int stride,
                          const std::string& name);

}  // namespace itermix
