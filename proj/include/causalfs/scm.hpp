#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/rng.hpp"

// Discrete structural causal model with graph C -> X, C -> Y, X -> M, M -> Y.
// C confounds the X -> Y relation; M mediates all of X's effect on Y, and no
// arrow links C and M directly, so M satisfies the frontdoor conditions.
// All probability work is done in double.

namespace causalfs::scm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct EstimationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_distribution(const VectorXd& p, const std::string& what, double tol = 1e-9) {
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) < 0.0)
      throw std::invalid_argument(what + ": negative probability at index " + std::to_string(i));
  double s = p.sum();
  if (std::abs(s - 1.0) > tol)
    throw std::invalid_argument(what + ": probabilities sum to " + std::to_string(s));
}

struct DiscreteScm {
  int nc = 0, nx = 0, nm = 0, ny = 0;
  VectorXd p_c;          // nc
  MatrixXd p_x_given_c;  // nc x nx, row c is a distribution over x
  MatrixXd p_m_given_x;  // nx x nm
  MatrixXd p_y_given_mc;  // (nm*nc) x ny, row index m*nc + c

  int mc_index(int m, int c) const { return m * nc + c; }

  void validate() const {
    if (nc < 1 || nx < 1 || nm < 1 || ny < 1)
      throw std::invalid_argument("DiscreteScm: all domain sizes must be >= 1");
    if (p_c.size() != nc || p_x_given_c.rows() != nc || p_x_given_c.cols() != nx ||
        p_m_given_x.rows() != nx || p_m_given_x.cols() != nm ||
        p_y_given_mc.rows() != Eigen::Index(nm) * nc || p_y_given_mc.cols() != ny)
      throw std::invalid_argument("DiscreteScm: table shapes disagree with domain sizes");
    check_distribution(p_c, "p(c)");
    for (int c = 0; c < nc; ++c)
      check_distribution(p_x_given_c.row(c).transpose(), "p(x|c=" + std::to_string(c) + ")");
    for (int x = 0; x < nx; ++x)
      check_distribution(p_m_given_x.row(x).transpose(), "p(m|x=" + std::to_string(x) + ")");
    for (int m = 0; m < nm; ++m)
      for (int c = 0; c < nc; ++c)
        check_distribution(p_y_given_mc.row(mc_index(m, c)).transpose(),
                           "p(y|m=" + std::to_string(m) + ",c=" + std::to_string(c) + ")");
  }
};

// Full observational joint P(c,x,m,y) under the generative factorization
// P(c) P(x|c) P(m|x) P(y|m,c).
struct Joint {
  int nc = 0, nx = 0, nm = 0, ny = 0;
  std::vector<double> p;  // index ((c*nx + x)*nm + m)*ny + y

  double& at(int c, int x, int m, int y) {
    return p[std::size_t(((std::size_t(c) * nx + x) * nm + m) * ny + y)];
  }
  double at(int c, int x, int m, int y) const {
    return p[std::size_t(((std::size_t(c) * nx + x) * nm + m) * ny + y)];
  }
};

inline Joint observational_joint(const DiscreteScm& s) {
  Joint j;
  j.nc = s.nc;
  j.nx = s.nx;
  j.nm = s.nm;
  j.ny = s.ny;
  j.p.assign(std::size_t(s.nc) * s.nx * s.nm * s.ny, 0.0);
  for (int c = 0; c < s.nc; ++c)
    for (int x = 0; x < s.nx; ++x)
      for (int m = 0; m < s.nm; ++m)
        for (int y = 0; y < s.ny; ++y)
          j.at(c, x, m, y) =
              s.p_c(c) * s.p_x_given_c(c, x) * s.p_m_given_x(x, m) * s.p_y_given_mc(s.mc_index(m, c), y);
  return j;
}

// Observable joint P(x,m,y); what an estimator is allowed to touch.
struct ObservedJoint {
  int nx = 0, nm = 0, ny = 0;
  std::vector<double> p;  // index (x*nm + m)*ny + y

  double& at(int x, int m, int y) { return p[std::size_t((std::size_t(x) * nm + m) * ny + y)]; }
  double at(int x, int m, int y) const {
    return p[std::size_t((std::size_t(x) * nm + m) * ny + y)];
  }

  double p_x(int x) const {
    double s = 0.0;
    for (int m = 0; m < nm; ++m)
      for (int y = 0; y < ny; ++y) s += at(x, m, y);
    return s;
  }
  double p_xm(int x, int m) const {
    double s = 0.0;
    for (int y = 0; y < ny; ++y) s += at(x, m, y);
    return s;
  }
};

inline ObservedJoint marginalize_confounder(const Joint& j) {
  ObservedJoint o;
  o.nx = j.nx;
  o.nm = j.nm;
  o.ny = j.ny;
  o.p.assign(std::size_t(j.nx) * j.nm * j.ny, 0.0);
  for (int c = 0; c < j.nc; ++c)
    for (int x = 0; x < j.nx; ++x)
      for (int m = 0; m < j.nm; ++m)
        for (int y = 0; y < j.ny; ++y) o.at(x, m, y) += j.at(c, x, m, y);
  return o;
}

// Ground truth P(y | do(x = x0)) by direct evaluation of the truncated product:
// sum_c sum_m P(c) P(m|x0) P(y|m,c).
inline VectorXd interventional_truth(const DiscreteScm& s, int x0) {
  if (x0 < 0 || x0 >= s.nx) throw std::invalid_argument("interventional_truth: x0 out of range");
  VectorXd out = VectorXd::Zero(s.ny);
  for (int c = 0; c < s.nc; ++c)
    for (int m = 0; m < s.nm; ++m)
      out += s.p_c(c) * s.p_m_given_x(x0, m) * s.p_y_given_mc.row(s.mc_index(m, c)).transpose();
  return out;
}

// Frontdoor adjustment from the observable joint only:
// P(y|do(x0)) = sum_m P(m|x0) sum_x P(y|m,x) P(x).
// Throws EstimationError when a needed conditional is undefined, naming the cell.
inline VectorXd frontdoor_estimate(const ObservedJoint& o, int x0) {
  if (x0 < 0 || x0 >= o.nx) throw std::invalid_argument("frontdoor_estimate: x0 out of range");
  std::vector<double> px(o.nx);
  for (int x = 0; x < o.nx; ++x) {
    px[std::size_t(x)] = o.p_x(x);
    if (px[std::size_t(x)] <= 0.0)
      throw EstimationError("frontdoor_estimate: P(x=" + std::to_string(x) +
                            ") = 0, conditional undefined");
  }
  VectorXd out = VectorXd::Zero(o.ny);
  for (int m = 0; m < o.nm; ++m) {
    double pm_given_x0 = o.p_xm(x0, m) / px[std::size_t(x0)];
    if (pm_given_x0 == 0.0) continue;  // term vanishes; no conditioning on (x, m) needed
    for (int x = 0; x < o.nx; ++x) {
      double pxm = o.p_xm(x, m);
      if (pxm <= 0.0)
        throw EstimationError("frontdoor_estimate: P(x=" + std::to_string(x) +
                              ", m=" + std::to_string(m) + ") = 0, P(y|m,x) undefined");
      for (int y = 0; y < o.ny; ++y)
        out(y) += pm_given_x0 * (o.at(x, m, y) / pxm) * px[std::size_t(x)];
    }
  }
  return out;
}

// Naive conditional P(y | x = x0); biased under confounding.
inline VectorXd naive_conditional(const ObservedJoint& o, int x0) {
  if (x0 < 0 || x0 >= o.nx) throw std::invalid_argument("naive_conditional: x0 out of range");
  double px = o.p_x(x0);
  if (px <= 0.0)
    throw EstimationError("naive_conditional: P(x=" + std::to_string(x0) +
                          ") = 0, conditional undefined");
  VectorXd out(o.ny);
  for (int y = 0; y < o.ny; ++y) {
    double s = 0.0;
    for (int m = 0; m < o.nm; ++m) s += o.at(x0, m, y);
    out(y) = s / px;
  }
  return out;
}

inline double total_variation(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("total_variation: size mismatch");
  return 0.5 * (a - b).cwiseAbs().sum();
}

// Random distribution with every entry >= min_prob / n (keeps conditionals well defined).
inline VectorXd random_distribution(Rng& rng, int n, double min_mass) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = min_mass + rng.real01();
  v /= v.sum();
  return v;
}

struct RandomScmSpec {
  int nc = 3, nx = 3, nm = 3, ny = 3;
  double min_mass = 0.05;  // floor added before normalization; keeps tables strictly positive
};

inline DiscreteScm random_scm(Rng& rng, const RandomScmSpec& spec = {}) {
  DiscreteScm s;
  s.nc = spec.nc;
  s.nx = spec.nx;
  s.nm = spec.nm;
  s.ny = spec.ny;
  s.p_c = random_distribution(rng, s.nc, spec.min_mass);
  s.p_x_given_c.resize(s.nc, s.nx);
  for (int c = 0; c < s.nc; ++c)
    s.p_x_given_c.row(c) = random_distribution(rng, s.nx, spec.min_mass).transpose();
  s.p_m_given_x.resize(s.nx, s.nm);
  for (int x = 0; x < s.nx; ++x)
    s.p_m_given_x.row(x) = random_distribution(rng, s.nm, spec.min_mass).transpose();
  s.p_y_given_mc.resize(Eigen::Index(s.nm) * s.nc, s.ny);
  for (int m = 0; m < s.nm; ++m)
    for (int c = 0; c < s.nc; ++c)
      s.p_y_given_mc.row(s.mc_index(m, c)) = random_distribution(rng, s.ny, spec.min_mass).transpose();
  s.validate();
  return s;
}

// Strongly confounded binary model: C pushes X and Y the same way, M transmits X
// weakly, so conditioning inherits C's bias while intervention does not. Used as
// the stock witness that naive conditioning is off by a visible margin.
inline DiscreteScm confounded_witness() {
  DiscreteScm s;
  s.nc = s.nx = s.nm = s.ny = 2;
  s.p_c = VectorXd(2);
  s.p_c << 0.5, 0.5;
  s.p_x_given_c.resize(2, 2);
  s.p_x_given_c << 0.95, 0.05,   // c=0 almost always x=0
                   0.05, 0.95;   // c=1 almost always x=1
  s.p_m_given_x.resize(2, 2);
  s.p_m_given_x << 0.6, 0.4,
                   0.4, 0.6;
  s.p_y_given_mc.resize(4, 2);
  // rows indexed m*nc + c; y follows c strongly, m weakly
  s.p_y_given_mc << 0.9, 0.1,    // m=0,c=0
                    0.2, 0.8,    // m=0,c=1
                    0.8, 0.2,    // m=1,c=0
                    0.1, 0.9;    // m=1,c=1
  s.validate();
  return s;
}

// Factored confounder: a background variable D drives an identity component I
// and an environment component O; only O steers X and only I steers Y directly.
// Collapsing composite states (d, o, i) into one confounder index reproduces the
// monolithic model exactly, so all estimators above apply unchanged.
struct FactoredScm {
  int nd = 0, no = 0, ni = 0, nx = 0, nm = 0, ny = 0;
  VectorXd p_d;           // nd
  MatrixXd p_o_given_d;   // nd x no
  MatrixXd p_i_given_d;   // nd x ni
  MatrixXd p_x_given_o;   // no x nx
  MatrixXd p_m_given_x;   // nx x nm
  MatrixXd p_y_given_mi;  // (nm*ni) x ny, row index m*ni + i

  int mi_index(int m, int i) const { return m * ni + i; }
  int doi_index(int d, int o, int i) const { return (d * no + o) * ni + i; }

  void validate() const {
    if (nd < 1 || no < 1 || ni < 1 || nx < 1 || nm < 1 || ny < 1)
      throw std::invalid_argument("FactoredScm: all domain sizes must be >= 1");
    if (p_d.size() != nd || p_o_given_d.rows() != nd || p_o_given_d.cols() != no ||
        p_i_given_d.rows() != nd || p_i_given_d.cols() != ni ||
        p_x_given_o.rows() != no || p_x_given_o.cols() != nx ||
        p_m_given_x.rows() != nx || p_m_given_x.cols() != nm ||
        p_y_given_mi.rows() != Eigen::Index(nm) * ni || p_y_given_mi.cols() != ny)
      throw std::invalid_argument("FactoredScm: table shapes disagree with domain sizes");
    check_distribution(p_d, "p(d)");
    for (int d = 0; d < nd; ++d) {
      check_distribution(p_o_given_d.row(d).transpose(), "p(o|d=" + std::to_string(d) + ")");
      check_distribution(p_i_given_d.row(d).transpose(), "p(i|d=" + std::to_string(d) + ")");
    }
    for (int o = 0; o < no; ++o)
      check_distribution(p_x_given_o.row(o).transpose(), "p(x|o=" + std::to_string(o) + ")");
    for (int x = 0; x < nx; ++x)
      check_distribution(p_m_given_x.row(x).transpose(), "p(m|x=" + std::to_string(x) + ")");
    for (int m = 0; m < nm; ++m)
      for (int i = 0; i < ni; ++i)
        check_distribution(p_y_given_mi.row(mi_index(m, i)).transpose(),
                           "p(y|m=" + std::to_string(m) + ",i=" + std::to_string(i) + ")");
  }
};

// Collapse (d, o, i) into a single confounder axis: p(c) = p(d) p(o|d) p(i|d),
// p(x|c) depends on c only through o, p(y|m,c) only through i.
inline DiscreteScm expand_confounder(const FactoredScm& f) {
  f.validate();
  DiscreteScm s;
  s.nc = f.nd * f.no * f.ni;
  s.nx = f.nx;
  s.nm = f.nm;
  s.ny = f.ny;
  s.p_c.resize(s.nc);
  s.p_x_given_c.resize(s.nc, s.nx);
  s.p_m_given_x = f.p_m_given_x;
  s.p_y_given_mc.resize(Eigen::Index(s.nm) * s.nc, s.ny);
  for (int d = 0; d < f.nd; ++d)
    for (int o = 0; o < f.no; ++o)
      for (int i = 0; i < f.ni; ++i) {
        const int c = f.doi_index(d, o, i);
        s.p_c(c) = f.p_d(d) * f.p_o_given_d(d, o) * f.p_i_given_d(d, i);
        s.p_x_given_c.row(c) = f.p_x_given_o.row(o);
        for (int m = 0; m < f.nm; ++m)
          s.p_y_given_mc.row(s.mc_index(m, c)) = f.p_y_given_mi.row(f.mi_index(m, i));
      }
  s.validate();
  return s;
}

struct RandomFactoredSpec {
  int nd = 2, no = 2, ni = 2, nx = 3, nm = 3, ny = 3;
  double min_mass = 0.05;
};

inline FactoredScm random_factored_scm(Rng& rng, const RandomFactoredSpec& spec = {}) {
  FactoredScm f;
  f.nd = spec.nd;
  f.no = spec.no;
  f.ni = spec.ni;
  f.nx = spec.nx;
  f.nm = spec.nm;
  f.ny = spec.ny;
  f.p_d = random_distribution(rng, f.nd, spec.min_mass);
  f.p_o_given_d.resize(f.nd, f.no);
  f.p_i_given_d.resize(f.nd, f.ni);
  for (int d = 0; d < f.nd; ++d) {
    f.p_o_given_d.row(d) = random_distribution(rng, f.no, spec.min_mass).transpose();
    f.p_i_given_d.row(d) = random_distribution(rng, f.ni, spec.min_mass).transpose();
  }
  f.p_x_given_o.resize(f.no, f.nx);
  for (int o = 0; o < f.no; ++o)
    f.p_x_given_o.row(o) = random_distribution(rng, f.nx, spec.min_mass).transpose();
  f.p_m_given_x.resize(f.nx, f.nm);
  for (int x = 0; x < f.nx; ++x)
    f.p_m_given_x.row(x) = random_distribution(rng, f.nm, spec.min_mass).transpose();
  f.p_y_given_mi.resize(Eigen::Index(f.nm) * f.ni, f.ny);
  for (int m = 0; m < f.nm; ++m)
    for (int i = 0; i < f.ni; ++i)
      f.p_y_given_mi.row(f.mi_index(m, i)) = random_distribution(rng, f.ny, spec.min_mass).transpose();
  f.validate();
  return f;
}

// --- plain-text serialization ----------------------------------------------
//
//   scm v1
//   sizes <nc> <nx> <nm> <ny>
//   p_c <nc values>
//   p_x_given_c <row for c=0> ... (one line per c)
//   p_m_given_x <row per x>
//   p_y_given_mc <row per (m,c), m-major>

inline void save_scm(const DiscreteScm& s, std::ostream& os) {
  os << "scm v1\n";
  os << "sizes " << s.nc << ' ' << s.nx << ' ' << s.nm << ' ' << s.ny << '\n';
  os << std::setprecision(17);
  os << "p_c";
  for (int c = 0; c < s.nc; ++c) os << ' ' << s.p_c(c);
  os << '\n';
  for (int c = 0; c < s.nc; ++c) {
    os << "p_x_given_c";
    for (int x = 0; x < s.nx; ++x) os << ' ' << s.p_x_given_c(c, x);
    os << '\n';
  }
  for (int x = 0; x < s.nx; ++x) {
    os << "p_m_given_x";
    for (int m = 0; m < s.nm; ++m) os << ' ' << s.p_m_given_x(x, m);
    os << '\n';
  }
  for (int m = 0; m < s.nm; ++m)
    for (int c = 0; c < s.nc; ++c) {
      os << "p_y_given_mc";
      for (int y = 0; y < s.ny; ++y) os << ' ' << s.p_y_given_mc(s.mc_index(m, c), y);
      os << '\n';
    }
}

inline void save_scm(const DiscreteScm& s, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_scm: cannot open " + path);
  save_scm(s, f);
}

inline DiscreteScm load_scm(std::istream& is) {
  std::string header, version;
  is >> header >> version;
  if (header != "scm" || version != "v1")
    throw std::runtime_error("load_scm: bad header, expected 'scm v1'");
  auto expect = [&is](const std::string& tag) {
    std::string got;
    is >> got;
    if (got != tag) throw std::runtime_error("load_scm: expected '" + tag + "', got '" + got + "'");
  };
  DiscreteScm s;
  expect("sizes");
  is >> s.nc >> s.nx >> s.nm >> s.ny;
  if (!is || s.nc < 1 || s.nx < 1 || s.nm < 1 || s.ny < 1)
    throw std::runtime_error("load_scm: bad sizes line");
  s.p_c.resize(s.nc);
  expect("p_c");
  for (int c = 0; c < s.nc; ++c) is >> s.p_c(c);
  s.p_x_given_c.resize(s.nc, s.nx);
  for (int c = 0; c < s.nc; ++c) {
    expect("p_x_given_c");
    for (int x = 0; x < s.nx; ++x) is >> s.p_x_given_c(c, x);
  }
  s.p_m_given_x.resize(s.nx, s.nm);
  for (int x = 0; x < s.nx; ++x) {
    expect("p_m_given_x");
    for (int m = 0; m < s.nm; ++m) is >> s.p_m_given_x(x, m);
  }
  s.p_y_given_mc.resize(Eigen::Index(s.nm) * s.nc, s.ny);
  for (int m = 0; m < s.nm; ++m)
    for (int c = 0; c < s.nc; ++c) {
      expect("p_y_given_mc");
      for (int y = 0; y < s.ny; ++y) is >> s.p_y_given_mc(s.mc_index(m, c), y);
    }
  if (!is) throw std::runtime_error("load_scm: truncated file");
  s.validate();
  return s;
}

inline DiscreteScm load_scm(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_scm: cannot open " + path);
  return load_scm(f);
}

}  // namespace causalfs::scm
