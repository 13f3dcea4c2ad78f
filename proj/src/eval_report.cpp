#include "westar/eval_report.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "westar/error.hpp"

namespace westar {

namespace {

constexpr double kClampFloor = 1e-6;

void check_maps(const Tensor& pred, const Tensor& gt, const ValidMask& valid) {
  if (pred.shape() != gt.shape()) {
    throw Error(ErrorKind::Shape, "prediction " + shape_string(pred.shape()) + " and ground truth " +
                                      shape_string(gt.shape()) + " differ");
  }
  if (!valid.empty() && valid.size() != gt.numel()) throw Error(ErrorKind::Shape, "validity mask size mismatch");
}

bool is_valid(const ValidMask& valid, std::size_t p) { return valid.empty() || valid[p]; }

}  // namespace

Alignment align_lsq(const Tensor& pred, const Tensor& gt, const ValidMask& valid, AlignSpace space) {
  check_maps(pred, gt, valid);
  std::vector<double> xs, ys;
  for (std::size_t p = 0; p < gt.numel(); ++p) {
    if (!is_valid(valid, p)) continue;
    if (space == AlignSpace::Disparity) {
      xs.push_back(pred[p]);
      ys.push_back(1.0 / gt[p]);
    } else {
      if (pred[p] <= 0) throw Error(ErrorKind::Numeric, "depth-space alignment needs positive disparities");
      xs.push_back(1.0 / pred[p]);
      ys.push_back(gt[p]);
    }
  }
  if (xs.size() < 2) throw Error(ErrorKind::Numeric, "alignment needs at least two valid pixels");
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  if (*lo == *hi) throw Error(ErrorKind::Numeric, "alignment is degenerate: constant prediction");

  const Eigen::Index n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd a(n, 2);
  a.col(0) = Eigen::Map<const Eigen::VectorXd>(xs.data(), n);
  a.col(1).setOnes();
  const Eigen::Map<const Eigen::VectorXd> b(ys.data(), n);
  const Eigen::Vector2d st = (a.transpose() * a).ldlt().solve(a.transpose() * b);
  if (!st.allFinite()) throw Error(ErrorKind::Numeric, "alignment produced a non-finite solution");
  return {st(0), st(1)};
}

MetricsReport depth_metrics(const Tensor& aligned, const Tensor& gt, const ValidMask& valid) {
  check_maps(aligned, gt, valid);
  MetricsReport r;
  std::size_t good = 0;
  double rel = 0.0;
  for (std::size_t p = 0; p < gt.numel(); ++p) {
    if (!is_valid(valid, p)) continue;
    const double d = aligned[p], g = gt[p];
    if (std::max(d / g, g / d) < 1.25) ++good;
    rel += std::abs(g - d) / g;
    ++r.n_pixels;
  }
  if (r.n_pixels == 0) throw Error(ErrorKind::Data, "no valid pixel to evaluate");
  r.delta1 = 100.0 * static_cast<double>(good) / static_cast<double>(r.n_pixels);
  r.absrel = 100.0 * rel / static_cast<double>(r.n_pixels);
  return r;
}

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, const ValidMask& valid, AlignSpace space) {
  const Alignment al = align_lsq(pred, gt, valid, space);
  std::vector<double> depth(gt.numel());
  std::size_t clamped = 0;
  for (std::size_t p = 0; p < gt.numel(); ++p) {
    if (space == AlignSpace::Disparity) {
      double disp = al.scale * pred[p] + al.shift;
      if (disp < kClampFloor) {
        disp = kClampFloor;
        if (is_valid(valid, p)) ++clamped;
      }
      depth[p] = 1.0 / disp;
    } else {
      double d = al.scale / pred[p] + al.shift;
      if (d < kClampFloor) {
        d = kClampFloor;
        if (is_valid(valid, p)) ++clamped;
      }
      depth[p] = d;
    }
  }
  MetricsReport r = depth_metrics(Tensor(gt.shape(), std::move(depth)), gt, valid);
  r.n_clamped = clamped;
  r.scale = al.scale;
  r.shift = al.shift;
  return r;
}

MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw Error(ErrorKind::Data, "no reports to average");
  MetricsReport m;
  m.scale = m.shift = 0.0;
  for (const auto& r : reports) {
    m.delta1 += r.delta1;
    m.absrel += r.absrel;
    m.scale += r.scale;
    m.shift += r.shift;
    m.n_pixels += r.n_pixels;
    m.n_clamped += r.n_clamped;
  }
  const double n = static_cast<double>(reports.size());
  m.delta1 /= n;
  m.absrel /= n;
  m.scale /= n;
  m.shift /= n;
  return m;
}

void emit_report(const std::map<std::string, MetricsReport>& reports, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [split, r] : reports) {
    j[split] = {{"delta1", r.delta1}, {"absrel", r.absrel}, {"n_pixels", r.n_pixels},
                {"n_clamped", r.n_clamped}, {"scale", r.scale}, {"shift", r.shift}};
  }
  std::ofstream js(path);
  if (!js) throw Error(ErrorKind::Io, "cannot write report " + path.string());
  js << j.dump(2) << '\n';

  auto csv_path = path;
  csv_path.replace_extension(".csv");
  std::ofstream cs(csv_path);
  if (!cs) throw Error(ErrorKind::Io, "cannot write report " + csv_path.string());
  cs << "split,delta1,absrel,n_pixels,n_clamped,scale,shift\n";
  char buf[256];
  for (const auto& [split, r] : reports) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu,%zu,%.17g,%.17g\n", r.delta1, r.absrel, r.n_pixels,
                  r.n_clamped, r.scale, r.shift);
    cs << split << buf;
  }
}

std::map<std::string, MetricsReport> read_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot read report " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Data, "malformed report " + path.string() + ": " + e.what());
  }
  std::map<std::string, MetricsReport> out;
  for (const auto& [split, v] : j.items()) {
    MetricsReport r;
    r.delta1 = v.at("delta1").get<double>();
    r.absrel = v.at("absrel").get<double>();
    r.n_pixels = v.at("n_pixels").get<std::size_t>();
    r.n_clamped = v.value("n_clamped", std::size_t{0});
    r.scale = v.at("scale").get<double>();
    r.shift = v.at("shift").get<double>();
    out[split] = r;
  }
  return out;
}

}  // namespace westar
