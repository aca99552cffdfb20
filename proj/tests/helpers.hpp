#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hattrib/hattrib.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Random-walk OHLCV panel with N assets and `slots` dates.
inline hattrib::PricePanel random_panel(std::size_t n, std::size_t slots, std::uint64_t seed, double vol = 0.02) {
  hattrib::SyntheticConfig c;
  c.num_assets = n;
  c.num_slots = slots;
  c.seed = seed;
  c.idio_vol = vol;
  c.features = {{"z", 0.5, 0.0, false}};
  return hattrib::generate_market(c).panel;
}

// Panel with given close rows (N x S); OHLC all equal to close.
inline hattrib::PricePanel panel_from_close(const Eigen::MatrixXd& close) {
  hattrib::PricePanel p;
  for (Eigen::Index i = 0; i < close.rows(); ++i) p.tickers.push_back("A" + std::to_string(i));
  p.dates = hattrib::business_days("2020-01-01", static_cast<std::size_t>(close.cols()));
  p.open = p.high = p.low = p.close = close;
  p.volume = Eigen::MatrixXd::Constant(close.rows(), close.cols(), 1000.0);
  return p;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Fresh, empty scratch directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hattrib_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline void write_text(const fs::path& p, const std::string& s) { hattrib::csv::write_file(p.string(), s); }

}  // namespace testutil
