#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hattrib/csv.hpp"
#include "hattrib/error.hpp"
#include "hattrib/market_data.hpp"

namespace hattrib {

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

/// One indicator over one price series. Entries before `valid_from` are NaN.
struct IndicatorSeries {
  std::vector<double> values;
  std::size_t valid_from = 0;
  // Number of entries produced by a zero-denominator rule (CCI, DX).
  std::size_t degenerate = 0;
};

struct IndicatorParams {
  int macd_fast = 12;
  int macd_slow = 26;
  int macd_signal = 9;
  int rsi_period = 14;
  int cci_period = 20;
  int adx_period = 14;
};

namespace detail {

inline std::size_t checked_period(int period) {
  require(period >= 1, ErrorCode::ConfigError, "indicator period must be positive");
  return static_cast<std::size_t>(period);
}

}  // namespace detail

/// Exponential moving average with alpha = 2/(n+1), seeded with the first value.
inline std::vector<double> ema(std::span<const double> x, int n) {
  const double alpha = 2.0 / (static_cast<double>(detail::checked_period(n)) + 1.0);
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  out[0] = x[0];
  for (std::size_t t = 1; t < x.size(); ++t) out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1];
  return out;
}

struct MacdLines {
  IndicatorSeries line;
  IndicatorSeries signal;
  IndicatorSeries histogram;
};

inline MacdLines macd_lines(std::span<const double> close, int fast = 12, int slow = 26, int signal = 9) {
  const std::size_t slow_n = detail::checked_period(slow);
  detail::checked_period(fast);
  require(fast < slow, ErrorCode::ConfigError, "MACD fast period must be shorter than slow period");
  require(close.size() > slow_n, ErrorCode::SeriesTooShort,
          "MACD needs more than " + std::to_string(slow_n) + " points");
  const auto f = ema(close, fast);
  const auto s = ema(close, slow);
  MacdLines out;
  out.line.values.resize(close.size());
  for (std::size_t t = 0; t < close.size(); ++t) out.line.values[t] = f[t] - s[t];
  out.line.valid_from = slow_n - 1;

  // The signal EMA is seeded at the first defined MACD value.
  const std::span<const double> defined(out.line.values.data() + out.line.valid_from,
                                        out.line.values.size() - out.line.valid_from);
  const auto sig = ema(defined, signal);
  out.signal.values.assign(close.size(), kUndefined);
  out.histogram.values.assign(close.size(), kUndefined);
  const std::size_t sig_from = out.line.valid_from + detail::checked_period(signal) - 1;
  for (std::size_t j = 0; j < sig.size(); ++j) {
    const std::size_t t = out.line.valid_from + j;
    if (t < sig_from) continue;
    out.signal.values[t] = sig[j];
    out.histogram.values[t] = out.line.values[t] - sig[j];
  }
  out.signal.valid_from = out.histogram.valid_from = std::min(sig_from, close.size());
  for (std::size_t t = 0; t < out.line.valid_from; ++t) out.line.values[t] = kUndefined;
  return out;
}

/// MACD line: EMA_fast - EMA_slow.
inline IndicatorSeries macd(std::span<const double> close, int fast = 12, int slow = 26, int signal = 9) {
  return macd_lines(close, fast, slow, signal).line;
}

/// Wilder RSI. Zero average loss gives 100.
inline IndicatorSeries rsi(std::span<const double> close, int period = 14) {
  const std::size_t n = detail::checked_period(period);
  require(close.size() > n, ErrorCode::SeriesTooShort, "RSI needs more than " + std::to_string(n) + " points");
  IndicatorSeries out;
  out.values.assign(close.size(), kUndefined);
  out.valid_from = n;
  double gain = 0.0;
  double loss = 0.0;
  for (std::size_t t = 1; t <= n; ++t) {
    const double d = close[t] - close[t - 1];
    gain += std::max(d, 0.0);
    loss += std::max(-d, 0.0);
  }
  gain /= static_cast<double>(n);
  loss /= static_cast<double>(n);
  const auto value = [](double g, double l) { return l == 0.0 ? 100.0 : 100.0 - 100.0 / (1.0 + g / l); };
  out.values[n] = value(gain, loss);
  const double keep = static_cast<double>(n - 1);
  for (std::size_t t = n + 1; t < close.size(); ++t) {
    const double d = close[t] - close[t - 1];
    gain = (gain * keep + std::max(d, 0.0)) / static_cast<double>(n);
    loss = (loss * keep + std::max(-d, 0.0)) / static_cast<double>(n);
    out.values[t] = value(gain, loss);
  }
  return out;
}

/// Commodity Channel Index over typical price (H+L+C)/3. Zero mean
/// deviation gives 0.
inline IndicatorSeries cci(std::span<const double> high, std::span<const double> low,
                           std::span<const double> close, int period = 20) {
  const std::size_t n = detail::checked_period(period);
  require(high.size() == close.size() && low.size() == close.size(), ErrorCode::DimensionMismatch,
          "CCI inputs differ in length");
  require(close.size() >= n, ErrorCode::SeriesTooShort, "CCI needs at least " + std::to_string(n) + " points");
  std::vector<double> tp(close.size());
  for (std::size_t t = 0; t < tp.size(); ++t) tp[t] = (high[t] + low[t] + close[t]) / 3.0;
  IndicatorSeries out;
  out.values.assign(close.size(), kUndefined);
  out.valid_from = n - 1;
  for (std::size_t t = n - 1; t < tp.size(); ++t) {
    double sma = 0.0;
    for (std::size_t j = t + 1 - n; j <= t; ++j) sma += tp[j];
    sma /= static_cast<double>(n);
    double mad = 0.0;
    for (std::size_t j = t + 1 - n; j <= t; ++j) mad += std::abs(tp[j] - sma);
    mad /= static_cast<double>(n);
    if (mad == 0.0) {
      out.values[t] = 0.0;
      ++out.degenerate;
    } else {
      out.values[t] = (tp[t] - sma) / (0.015 * mad);
    }
  }
  return out;
}

/// Average Directional Index with Wilder smoothing of TR, +DM, -DM and DX.
/// A zero DI sum gives DX = 0.
inline IndicatorSeries adx(std::span<const double> high, std::span<const double> low,
                           std::span<const double> close, int period = 14) {
  const std::size_t n = detail::checked_period(period);
  const std::size_t len = close.size();
  require(high.size() == len && low.size() == len, ErrorCode::DimensionMismatch, "ADX inputs differ in length");
  require(len >= 2 * n, ErrorCode::SeriesTooShort, "ADX needs at least " + std::to_string(2 * n) + " points");

  IndicatorSeries out;
  out.values.assign(len, kUndefined);
  out.valid_from = 2 * n - 1;

  double tr_s = 0.0, plus_s = 0.0, minus_s = 0.0;
  std::vector<double> dx(len, kUndefined);
  for (std::size_t t = 1; t < len; ++t) {
    const double up = high[t] - high[t - 1];
    const double down = low[t - 1] - low[t];
    const double plus_dm = (up > down && up > 0.0) ? up : 0.0;
    const double minus_dm = (down > up && down > 0.0) ? down : 0.0;
    const double tr = std::max({high[t] - low[t], std::abs(high[t] - close[t - 1]), std::abs(low[t] - close[t - 1])});
    if (t <= n) {
      tr_s += tr;
      plus_s += plus_dm;
      minus_s += minus_dm;
      if (t < n) continue;
    } else {
      const double nn = static_cast<double>(n);
      tr_s = tr_s - tr_s / nn + tr;
      plus_s = plus_s - plus_s / nn + plus_dm;
      minus_s = minus_s - minus_s / nn + minus_dm;
    }
    const double plus_di = tr_s > 0.0 ? 100.0 * plus_s / tr_s : 0.0;
    const double minus_di = tr_s > 0.0 ? 100.0 * minus_s / tr_s : 0.0;
    const double denom = plus_di + minus_di;
    if (denom > 0.0) {
      dx[t] = 100.0 * std::abs(plus_di - minus_di) / denom;
    } else {
      dx[t] = 0.0;
      ++out.degenerate;
    }
  }
  double a = 0.0;
  for (std::size_t t = n; t < 2 * n; ++t) a += dx[t];
  a /= static_cast<double>(n);
  out.values[2 * n - 1] = a;
  for (std::size_t t = 2 * n; t < len; ++t) {
    a = (a * static_cast<double>(n - 1) + dx[t]) / static_cast<double>(n);
    out.values[t] = a;
  }
  return out;
}

/// K features over N assets and the panel's T+1 slots.
///
/// values[k](i, s) is computed from data up to and including the close of
/// slot s; the state at the beginning of slot t therefore reads column t-1.
/// Entries before valid_from[k] are NaN.
struct FeatureTensor {
  std::vector<std::string> names;
  std::vector<std::string> tickers;
  std::vector<std::string> dates;
  std::vector<Eigen::MatrixXd> values;
  std::vector<std::size_t> valid_from;
  std::vector<std::size_t> degenerate;

  std::size_t num_features() const { return names.size(); }
  std::size_t num_assets() const { return tickers.size(); }
  std::size_t num_slots() const { return dates.size(); }

  // First slot t whose beginning-of-slot feature row is fully defined.
  std::size_t first_state_slot() const {
    std::size_t s = 0;
    for (auto v : valid_from) s = std::max(s, v);
    return s + 1;
  }
};

inline const std::vector<std::string>& default_feature_names() {
  static const std::vector<std::string> names{"macd", "rsi", "cci", "adx"};
  return names;
}

inline FeatureTensor compute_features(const PricePanel& panel, const IndicatorParams& params = {}) {
  FeatureTensor ft;
  ft.names = default_feature_names();
  ft.tickers = panel.tickers;
  ft.dates = panel.dates;
  const auto n = static_cast<Eigen::Index>(panel.num_assets());
  const auto s = static_cast<Eigen::Index>(panel.num_slots());
  ft.values.assign(4, Eigen::MatrixXd::Constant(n, s, kUndefined));
  ft.valid_from.assign(4, 0);
  ft.degenerate.assign(4, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::vector<double> h(panel.high.row(i).begin(), panel.high.row(i).end());
    const std::vector<double> l(panel.low.row(i).begin(), panel.low.row(i).end());
    const std::vector<double> c(panel.close.row(i).begin(), panel.close.row(i).end());
    const IndicatorSeries series[4] = {
        macd(c, params.macd_fast, params.macd_slow, params.macd_signal),
        rsi(c, params.rsi_period),
        cci(h, l, c, params.cci_period),
        adx(h, l, c, params.adx_period),
    };
    for (std::size_t k = 0; k < 4; ++k) {
      for (Eigen::Index t = 0; t < s; ++t) ft.values[k](i, t) = series[k].values[static_cast<std::size_t>(t)];
      ft.valid_from[k] = series[k].valid_from;
      ft.degenerate[k] += series[k].degenerate;
    }
  }
  return ft;
}

/// Feature rows known at the beginning of slot t (column t-1), N x K.
inline Eigen::MatrixXd features_known_at(const FeatureTensor& ft, std::size_t t) {
  require(t >= 1 && t <= ft.num_slots(), ErrorCode::SlotOutOfRange, "feature slot out of range");
  const auto col = static_cast<Eigen::Index>(t - 1);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ft.num_assets()), static_cast<Eigen::Index>(ft.num_features()));
  for (std::size_t k = 0; k < ft.num_features(); ++k) {
    require(t - 1 >= ft.valid_from[k], ErrorCode::FeatureUndefined,
            "feature '" + ft.names[k] + "' undefined at slot " + std::to_string(t));
    out.col(static_cast<Eigen::Index>(k)) = ft.values[k].col(col);
  }
  require(out.allFinite(), ErrorCode::FeatureUndefined, "non-finite feature at slot " + std::to_string(t));
  return out;
}

/// Per-feature divisors (max absolute value over a fitting range). No
/// demeaning, so cross-sectional feature sums stay informative.
struct FeatureScaler {
  std::vector<double> divisors;

  /// Fits on tensor columns [first_col, last_col] inclusive.
  static FeatureScaler fit(const FeatureTensor& ft, std::size_t first_col, std::size_t last_col) {
    require(first_col <= last_col && last_col < ft.num_slots(), ErrorCode::SlotOutOfRange, "bad scaler range");
    FeatureScaler sc;
    for (std::size_t k = 0; k < ft.num_features(); ++k) {
      double m = 0.0;
      for (std::size_t c = std::max(first_col, ft.valid_from[k]); c <= last_col; ++c)
        m = std::max(m, ft.values[k].col(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff());
      sc.divisors.push_back(m > 0.0 ? m : 1.0);
    }
    return sc;
  }

  FeatureTensor apply(const FeatureTensor& ft) const {
    require(divisors.size() == ft.num_features(), ErrorCode::DimensionMismatch, "scaler/feature count mismatch");
    FeatureTensor out = ft;
    for (std::size_t k = 0; k < divisors.size(); ++k) out.values[k] /= divisors[k];
    return out;
  }
};

/// s(t) = [f^1(t) .. f^K(t), Sigma-hat(t)], N x (N+K).
inline Eigen::MatrixXd build_state(const FeatureTensor& scaled, const CovEstimate& cov, std::size_t t) {
  const auto n = static_cast<Eigen::Index>(scaled.num_assets());
  const auto k = static_cast<Eigen::Index>(scaled.num_features());
  require(cov.slot == t, ErrorCode::InsufficientHistory, "covariance estimate is for another slot");
  require(cov.matrix.rows() == n && cov.matrix.cols() == n, ErrorCode::DimensionMismatch,
          "covariance size does not match asset count");
  Eigen::MatrixXd s(n, n + k);
  s.leftCols(k) = features_known_at(scaled, t);
  s.rightCols(n) = cov.matrix;
  return s;
}

inline Eigen::MatrixXd build_state(const PricePanel& panel, const FeatureTensor& scaled, std::size_t t,
                                   std::size_t cov_window) {
  return build_state(scaled, sample_covariance(panel, t, cov_window), t);
}

/// Row-major flattening: entry (i, c) lands at i * (N+K) + c.
inline Eigen::VectorXd flatten_state(const Eigen::MatrixXd& s) {
  Eigen::VectorXd v(s.size());
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    for (Eigen::Index c = 0; c < s.cols(); ++c) v(i * s.cols() + c) = s(i, c);
  return v;
}

inline Eigen::MatrixXd unflatten_state(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  require(v.size() == rows * cols, ErrorCode::DimensionMismatch, "state vector has wrong length");
  Eigen::MatrixXd s(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) s(i, c) = v(i * cols + c);
  return s;
}

/// Audit dump: `date,ticker,<feature names...>`, undefined entries empty.
inline std::string features_to_csv(const FeatureTensor& ft) {
  std::string out = "date,ticker";
  for (const auto& nm : ft.names) out += ',' + nm;
  out += '\n';
  for (std::size_t t = 0; t < ft.num_slots(); ++t) {
    for (std::size_t i = 0; i < ft.num_assets(); ++i) {
      out += ft.dates[t] + ',' + ft.tickers[i];
      for (std::size_t k = 0; k < ft.num_features(); ++k)
        out += ',' + csv::format_double(ft.values[k](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)));
      out += '\n';
    }
  }
  return out;
}

/// Reads a feature CSV in the dump format, aligned to the panel's dates and
/// tickers. Every (date, ticker) of the panel must be present; a feature is
/// valid from the first date after which no entry is empty.
inline FeatureTensor load_features_csv(const std::string& path, const PricePanel& panel) {
  const std::string content = csv::read_file(path);
  const auto rows = csv::lines(content);
  require(!rows.empty(), ErrorCode::MissingColumn, path + ": empty file");
  const auto header = csv::split(rows[0]);
  require(header.size() >= 3 && csv::trim(header[0]) == "date" && csv::trim(header[1]) == "ticker",
          ErrorCode::MissingColumn, path + ": header must start with date,ticker");

  FeatureTensor ft;
  for (std::size_t c = 2; c < header.size(); ++c) ft.names.emplace_back(csv::trim(header[c]));
  ft.tickers = panel.tickers;
  ft.dates = panel.dates;
  const auto n = static_cast<Eigen::Index>(panel.num_assets());
  const auto s = static_cast<Eigen::Index>(panel.num_slots());
  const std::size_t k = ft.names.size();
  ft.values.assign(k, Eigen::MatrixXd::Constant(n, s, kUndefined));
  ft.degenerate.assign(k, 0);

  std::map<std::string, Eigen::Index> date_ix, ticker_ix;
  for (Eigen::Index t = 0; t < s; ++t) date_ix[panel.dates[static_cast<std::size_t>(t)]] = t;
  for (Eigen::Index i = 0; i < n; ++i) ticker_ix[panel.tickers[static_cast<std::size_t>(i)]] = i;
  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, s);

  for (std::size_t line = 1; line < rows.size(); ++line) {
    const auto f = csv::split(rows[line]);
    const std::string where = path + ":" + std::to_string(line + 1);
    require(f.size() == header.size(), ErrorCode::UnparsableRow, where + ": wrong field count");
    const auto d = date_ix.find(std::string(csv::trim(f[0])));
    const auto tk = ticker_ix.find(std::string(csv::trim(f[1])));
    if (d == date_ix.end() || tk == ticker_ix.end()) continue;
    seen(tk->second, d->second) += 1;
    for (std::size_t j = 0; j < k; ++j) {
      const auto cell = csv::trim(f[j + 2]);
      if (cell.empty()) continue;
      const auto v = csv::parse_double(cell);
      require(v.has_value(), ErrorCode::UnparsableRow, where + ": bad number");
      ft.values[j](tk->second, d->second) = *v;
    }
  }
  require((seen.array() == 1).all(), ErrorCode::EmptyIntersection,
          path + ": every panel (date, ticker) needs exactly one feature row");
  for (std::size_t j = 0; j < k; ++j) {
    Eigen::Index first = s;
    for (Eigen::Index t = s - 1; t >= 0; --t) {
      if (!ft.values[j].col(t).allFinite()) break;
      first = t;
    }
    ft.valid_from.push_back(static_cast<std::size_t>(first));
  }
  return ft;
}

}  // namespace hattrib
