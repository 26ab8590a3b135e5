#pragma once
// Verification metrics: latitude weighting, latitude-weighted RMSE, anomaly
// correlation against a climatology, per-hour climatology, and bilinear
// station interpolation with CSV station lists.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "scalemix/config.hpp"
#include "scalemix/grid.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

// alpha(i) = cos(lat_i) / mean_j(cos(lat_j)); averages to one by construction.
inline std::vector<double> latitude_weights(const std::vector<double>& lats) {
  if (lats.empty()) throw ContractError("latitude_weights: no rows");
  std::vector<double> w;
  double mean = 0.0;
  for (double lat : lats) {
    if (!(std::abs(lat) < 90.0))
      throw ContractError("latitude_weights: pole row at latitude " +
                          std::to_string(lat));
    w.push_back(std::cos(lat * std::numbers::pi / 180.0));
    mean += w.back();
  }
  mean /= static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

struct RmseResult {
  std::vector<double> per_var;
  double mean = 0.0;  // headline: unweighted mean of per-variable RMSEs
};

inline RmseResult lat_weighted_rmse(const Tensor& pred, const Tensor& truth,
                                    const std::vector<double>& lats) {
  if (pred.ndim() != 3 || pred.shape() != truth.shape())
    throw ShapeError("rmse: fields must share an [h, w, V] shape, got " +
                     shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  const int64_t h = pred.dim(0), w = pred.dim(1), V = pred.dim(2);
  if (static_cast<int64_t>(lats.size()) != h)
    throw ShapeError("rmse: " + std::to_string(lats.size()) +
                     " latitude rows for a field of height " +
                     std::to_string(h));
  std::vector<double> alpha = latitude_weights(lats);
  RmseResult r;
  for (int64_t k = 0; k < V; ++k) {
    double acc = 0.0;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const double e = pred.at({i, j, k}) - truth.at({i, j, k});
        acc += alpha[static_cast<size_t>(i)] * e * e;
      }
    r.per_var.push_back(std::sqrt(acc / static_cast<double>(h * w)));
    r.mean += r.per_var.back();
  }
  r.mean /= static_cast<double>(V);
  return r;
}

// Plain per-variable mean absolute error over all cells — the quantity the
// training log's validation columns report, shared with the evaluation
// command so both sides agree to the last bit of code.
inline std::vector<double> per_variable_mae(const Tensor& pred,
                                            const Tensor& truth) {
  if (pred.ndim() != 3 || pred.shape() != truth.shape())
    throw ShapeError("mae: fields must share an [h, w, V] shape, got " +
                     shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  const int64_t V = pred.dim(2), cells = pred.numel() / V;
  std::vector<double> out(static_cast<size_t>(V), 0.0);
  for (int64_t i = 0; i < cells; ++i)
    for (int64_t v = 0; v < V; ++v)
      out[static_cast<size_t>(v)] += std::abs(pred[i * V + v] - truth[i * V + v]);
  for (double& x : out) x /= static_cast<double>(cells);
  return out;
}

// Latitude-weighted anomaly correlation per variable. Zero anomaly variance
// in either field makes the score undefined; that variable reports no value.
inline std::vector<std::optional<double>> acc(const Tensor& pred,
                                              const Tensor& truth,
                                              const Tensor& clim,
                                              const std::vector<double>& lats) {
  if (pred.ndim() != 3 || pred.shape() != truth.shape() ||
      pred.shape() != clim.shape())
    throw ShapeError("acc: fields and climatology must share an [h, w, V] "
                     "shape, got " +
                     shape_str(pred.shape()) + ", " + shape_str(truth.shape()) +
                     ", " + shape_str(clim.shape()));
  const int64_t h = pred.dim(0), w = pred.dim(1), V = pred.dim(2);
  if (static_cast<int64_t>(lats.size()) != h)
    throw ShapeError("acc: latitude count mismatch");
  std::vector<double> alpha = latitude_weights(lats);
  std::vector<std::optional<double>> out;
  for (int64_t k = 0; k < V; ++k) {
    double num = 0.0, pp = 0.0, tt = 0.0;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const double a = alpha[static_cast<size_t>(i)];
        const double dp = pred.at({i, j, k}) - clim.at({i, j, k});
        const double dt = truth.at({i, j, k}) - clim.at({i, j, k});
        num += a * dp * dt;
        pp += a * dp * dp;
        tt += a * dt * dt;
      }
    if (pp == 0.0 || tt == 0.0)
      out.push_back(std::nullopt);
    else
      out.push_back(num / std::sqrt(pp * tt));
  }
  return out;
}

// Per-hour-of-day climatology [24, h, w, V] over the given frames; hours with
// no frames fall back to the all-frame mean.
inline Tensor climatology(const std::vector<Tensor>& frames,
                          const std::vector<int64_t>& hours) {
  if (frames.empty() || frames.size() != hours.size())
    throw ContractError("climatology: need one hour-of-day per frame");
  const Shape fs = frames[0].shape();
  if (fs.size() != 3) throw ShapeError("climatology: frames must be [h, w, V]");
  const int64_t n = frames[0].numel();
  std::vector<double> sums(static_cast<size_t>(24 * n), 0.0);
  std::vector<int64_t> counts(24, 0);
  std::vector<double> total(static_cast<size_t>(n), 0.0);
  for (size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].shape() != fs)
      throw ShapeError("climatology: frames disagree on shape");
    const int64_t hod = hours[f];
    if (hod < 0 || hod >= 24)
      throw ContractError("climatology: hour-of-day " + std::to_string(hod));
    ++counts[static_cast<size_t>(hod)];
    for (int64_t i = 0; i < n; ++i) {
      sums[static_cast<size_t>(hod * n + i)] += frames[f][i];
      total[static_cast<size_t>(i)] += frames[f][i];
    }
  }
  std::vector<double> v(static_cast<size_t>(24 * n));
  for (int64_t hod = 0; hod < 24; ++hod)
    for (int64_t i = 0; i < n; ++i)
      v[static_cast<size_t>(hod * n + i)] =
          counts[static_cast<size_t>(hod)] > 0
              ? sums[static_cast<size_t>(hod * n + i)] /
                    static_cast<double>(counts[static_cast<size_t>(hod)])
              : total[static_cast<size_t>(i)] /
                    static_cast<double>(frames.size());
  return Tensor({24, fs[0], fs[1], fs[2]}, std::move(v));
}

inline Tensor climatology_at(const Tensor& clim, int64_t hour_of_day) {
  if (clim.ndim() != 4 || clim.dim(0) != 24)
    throw ShapeError("climatology_at: expected [24, h, w, V]");
  if (hour_of_day < 0 || hour_of_day >= 24)
    throw ContractError("climatology_at: hour " + std::to_string(hour_of_day));
  const int64_t n = clim.numel() / 24;
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = clim[hour_of_day * n + i];
  return Tensor({clim.dim(1), clim.dim(2), clim.dim(3)}, std::move(v));
}

// ----- stations -----------------------------------------------------------------

struct Station {
  std::string id;
  double lat = 0.0, lon = 0.0;
};

struct StationValue {
  std::string id;
  bool ok = false;
  std::string error;
  std::vector<double> values;  // one per variable when ok
};

// Bilinear interpolation in latitude/longitude degrees over a uniformly
// spaced graticule (rows descending in latitude, columns ascending in
// longitude). Out-of-bounds stations yield per-station error records.
inline std::vector<StationValue> station_interpolate(
    const Tensor& field, const std::vector<double>& lats,
    const std::vector<double>& lons, const std::vector<Station>& stations) {
  if (field.ndim() != 3)
    throw ShapeError("station_interpolate: field must be [h, w, V]");
  const int64_t h = field.dim(0), w = field.dim(1), V = field.dim(2);
  if (static_cast<int64_t>(lats.size()) != h ||
      static_cast<int64_t>(lons.size()) != w)
    throw ShapeError("station_interpolate: graticule does not match the field");
  if (h < 2 || w < 2)
    throw ContractError("station_interpolate: grid too small to interpolate");
  const double dlat = lats[0] - lats[1];
  const double dlon = lons[1] - lons[0];
  if (dlat <= 0.0 || dlon <= 0.0)
    throw ContractError("station_interpolate: rows must descend in latitude "
                        "and columns ascend in longitude");

  std::vector<StationValue> out;
  for (const Station& s : stations) {
    StationValue sv;
    sv.id = s.id;
    const double fi = (lats[0] - s.lat) / dlat;
    const double fj = (s.lon - lons[0]) / dlon;
    if (fi < 0.0 || fi > static_cast<double>(h - 1) || fj < 0.0 ||
        fj > static_cast<double>(w - 1)) {
      sv.error = "station " + s.id + " outside grid bounds (lat " +
                 std::to_string(s.lat) + ", lon " + std::to_string(s.lon) + ")";
      out.push_back(std::move(sv));
      continue;
    }
    int64_t i0 = static_cast<int64_t>(std::floor(fi));
    int64_t j0 = static_cast<int64_t>(std::floor(fj));
    i0 = std::min(i0, h - 2);
    j0 = std::min(j0, w - 2);
    const double wy = fi - static_cast<double>(i0);
    const double wx = fj - static_cast<double>(j0);
    sv.ok = true;
    for (int64_t c = 0; c < V; ++c) {
      const double v00 = field.at({i0, j0, c}), v01 = field.at({i0, j0 + 1, c});
      const double v10 = field.at({i0 + 1, j0, c});
      const double v11 = field.at({i0 + 1, j0 + 1, c});
      sv.values.push_back((1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                          wy * ((1.0 - wx) * v10 + wx * v11));
    }
    out.push_back(std::move(sv));
  }
  return out;
}

// CSV with header id,lat,lon (extra columns ignored). Throws ParseError with
// the byte offset of the offending line.
inline std::vector<Station> parse_station_csv(const std::string& text) {
  auto fail = [](const std::string& msg, uint64_t off) {
    throw ParseError("station csv: " + msg, off);
  };
  std::vector<Station> out;
  size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      std::vector<std::string> cols;
      size_t c = 0;
      while (true) {
        size_t comma = line.find(',', c);
        if (comma == std::string::npos) {
          cols.push_back(line.substr(c));
          break;
        }
        cols.push_back(line.substr(c, comma - c));
        c = comma + 1;
      }
      if (header) {
        if (cols.size() < 3 || cols[0] != "id" || cols[1] != "lat" ||
            cols[2] != "lon")
          fail("header must start with id,lat,lon", pos);
        header = false;
      } else {
        if (cols.size() < 3) fail("row needs id,lat,lon", pos);
        Station s;
        s.id = cols[0];
        try {
          size_t used = 0;
          s.lat = std::stod(cols[1], &used);
          if (used != cols[1].size()) fail("bad latitude '" + cols[1] + "'", pos);
          s.lon = std::stod(cols[2], &used);
          if (used != cols[2].size()) fail("bad longitude '" + cols[2] + "'", pos);
        } catch (const std::invalid_argument&) {
          fail("bad coordinate in row for '" + s.id + "'", pos);
        } catch (const std::out_of_range&) {
          fail("coordinate out of range in row for '" + s.id + "'", pos);
        }
        out.push_back(std::move(s));
      }
    }
    pos = eol + 1;
  }
  return out;
}

// Region rows/columns are crops of the fine-grid graticule.
inline std::vector<double> region_latitudes(const ModelConfig& mc) {
  GridGeom fine = GridGeom::fine_from_config(mc);
  std::vector<double> out;
  for (int64_t i = 0; i < mc.region_h; ++i)
    out.push_back(fine.lat(mc.region_off_y + i));
  return out;
}

inline std::vector<double> region_longitudes(const ModelConfig& mc) {
  GridGeom fine = GridGeom::fine_from_config(mc);
  std::vector<double> out;
  for (int64_t j = 0; j < mc.region_w; ++j)
    out.push_back(fine.lon(mc.region_off_x + j));
  return out;
}

inline std::vector<double> global_latitudes(const ModelConfig& mc) {
  GridGeom g = GridGeom::global_from_config(mc);
  std::vector<double> out;
  for (int64_t i = 0; i < mc.H; ++i) out.push_back(g.lat(i));
  return out;
}

}  // namespace scalemix
