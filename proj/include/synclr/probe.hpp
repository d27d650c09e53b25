#pragma once

// Linear probe: frozen summary-token features, multinomial logistic
// regression with an l2 penalty on the weights, fitted by L-BFGS.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synclr/dataset_store.hpp"
#include "synclr/encoder.hpp"
#include "synclr/parallel.hpp"
#include "synclr/random.hpp"

namespace synclr {

struct FeatureSet {
  Eigen::MatrixXd features;  // N x d
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    require(features.rows() == static_cast<Eigen::Index>(labels.size()), ErrorCode::invalid_argument,
            "feature/label count mismatch");
    require(classes >= 1 && static_cast<int>(labels.size()) >= classes, ErrorCode::invalid_argument,
            "feature set needs at least one sample per class");
    require(features.allFinite(), ErrorCode::numerical, "features contain non-finite values");
    std::vector<bool> seen(static_cast<std::size_t>(classes), false);
    for (int l : labels) {
      require(l >= 0 && l < classes, ErrorCode::invalid_argument, "label out of range");
      seen[static_cast<std::size_t>(l)] = true;
    }
    require(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }), ErrorCode::invalid_argument,
            "every class must be present");
  }

  FeatureSet subset(const std::vector<std::size_t>& rows) const {
    FeatureSet s;
    s.classes = classes;
    s.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
      s.labels.push_back(labels[rows[i]]);
    }
    return s;
  }
};

/// Summary tokens of the final block for each image, without augmentation.
template <typename S>
Eigen::MatrixXd extract_features(const Encoder<S>& enc, const EncoderParams<S>& params,
                                 const std::vector<const Image*>& images, std::size_t workers = 1) {
  const int side = enc.config().image_size;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), enc.config().width);
  parallel_for(images.size(), workers, [&](std::size_t, std::size_t i) {
    require(images[i]->height == side && images[i]->width == side, ErrorCode::data,
            "probe images must match the encoder input size");
    out.row(static_cast<Eigen::Index>(i)) = enc.encode(params, *images[i]).summary.template cast<double>();
  });
  return out;
}

/// Class ids by sorted concept name, one sample per image.
struct LabeledImages {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::vector<std::uint64_t> caption_ids;
  std::vector<std::string> class_names;
};

inline LabeledImages label_store(const DatasetStore& store, const std::map<std::uint64_t, GroupInfo>& index) {
  LabeledImages out;
  std::map<std::string, int> ids;
  for (const auto& g : store.groups()) {
    auto it = index.find(g.caption_id);
    require(it != index.end(), ErrorCode::data, "caption_id " + std::to_string(g.caption_id) + " missing from index");
    ids.emplace(it->second.concept_name, 0);
  }
  int next = 0;
  for (auto& [name, id] : ids) {
    id = next++;
    out.class_names.push_back(name);
  }
  for (const auto& g : store.groups()) {
    const int label = ids.at(index.at(g.caption_id).concept_name);
    for (const auto& img : g.images) {
      out.images.push_back(&img);
      out.labels.push_back(label);
      out.caption_ids.push_back(g.caption_id);
    }
  }
  return out;
}

struct ProbeSplit {
  std::vector<std::size_t> train, val, test;  // sample rows
};

/// Stratified split at caption-group level so no caption's images cross
/// splits. Each class with >= 3 groups gets at least one group per split.
inline ProbeSplit split_by_group(const std::vector<int>& labels, const std::vector<std::uint64_t>& groups,
                                 std::uint64_t seed, double train_fraction = 0.6, double val_fraction = 0.2) {
  require(labels.size() == groups.size(), ErrorCode::invalid_argument, "label/group count mismatch");
  std::map<int, std::vector<std::uint64_t>> by_class;
  std::map<std::uint64_t, int> group_label;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = group_label.emplace(groups[i], labels[i]);
    require(it->second == labels[i], ErrorCode::data, "caption group spans several classes");
    if (fresh) by_class[labels[i]].push_back(groups[i]);
  }
  std::map<std::uint64_t, int> assignment;  // 0 train, 1 val, 2 test
  for (auto& [label, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, 0x53504C54, static_cast<std::uint64_t>(label)));
    rng.shuffle(ids);
    const std::size_t n = ids.size();
    std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
    std::size_t n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
    if (n >= 3) {
      n_val = std::max<std::size_t>(n_val, 1);
      n_train = std::clamp<std::size_t>(n_train, 1, n - n_val - 1);
    }
    for (std::size_t k = 0; k < n; ++k) assignment[ids[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }
  ProbeSplit s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int a = assignment.at(groups[i]);
    (a == 0 ? s.train : a == 1 ? s.val : s.test).push_back(i);
  }
  return s;
}

struct LinearProbe {
  Eigen::MatrixXd weights;  // C x d
  Eigen::VectorXd bias;     // C
};

inline int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  int best = 0;
  for (Eigen::Index j = 1; j < v.size(); ++j)
    if (v(j) > v(best)) best = static_cast<int>(j);
  return best;
}

inline std::vector<int> predict(const LinearProbe& probe, const Eigen::MatrixXd& x) {
  require(x.cols() == probe.weights.cols(), ErrorCode::invalid_argument, "feature width does not match the probe");
  const Eigen::MatrixXd logits = (x * probe.weights.transpose()).rowwise() + probe.bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_lowest(logits.row(i));
  return out;
}

inline double evaluate(const LinearProbe& probe, const FeatureSet& set) {
  if (set.size() == 0) return 0.0;
  const auto pred = predict(probe, set.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Mean cross-entropy plus l2/2 * |W|^2 over packed [W | b] (row-major C x (d+1)).
struct LogisticObjective {
  const FeatureSet& data;
  double l2;

  Eigen::Index dims() const { return data.classes * (data.features.cols() + 1); }

  LinearProbe unpack(const Eigen::VectorXd& theta) const {
    const Eigen::Index C = data.classes, d = data.features.cols();
    LinearProbe p;
    p.weights.resize(C, d);
    p.bias.resize(C);
    for (Eigen::Index c = 0; c < C; ++c) {
      p.weights.row(c) = theta.segment(c * (d + 1), d).transpose();
      p.bias(c) = theta(c * (d + 1) + d);
    }
    return p;
  }

  double operator()(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
    const Eigen::Index C = data.classes, d = data.features.cols(), N = data.features.rows();
    const LinearProbe p = unpack(theta);
    Eigen::MatrixXd logits = (data.features * p.weights.transpose()).rowwise() + p.bias.transpose();
    double loss = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double m = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - m).exp().matrix();
      const double z = logits.row(i).sum();
      const int y = data.labels[static_cast<std::size_t>(i)];
      loss -= std::log(logits(i, y) / z);
      logits.row(i) /= z;
      logits(i, y) -= 1.0;
    }
    const double inv_n = 1.0 / static_cast<double>(N);
    const Eigen::MatrixXd gw = logits.transpose() * data.features * inv_n + l2 * p.weights;
    const Eigen::VectorXd gb = logits.colwise().sum().transpose() * inv_n;
    grad.resize(dims());
    for (Eigen::Index c = 0; c < C; ++c) {
      grad.segment(c * (d + 1), d) = gw.row(c).transpose();
      grad(c * (d + 1) + d) = gb(c);
    }
    return loss * inv_n + 0.5 * l2 * p.weights.squaredNorm();
  }
};

struct LbfgsOptions {
  double gradient_tolerance = 1e-6;
  int max_iterations = 1000;
  int history = 10;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0;
  double gradient_norm = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective per accepted iterate, starting at x0
};

/// L-BFGS with a backtracking Armijo line search; every accepted step
/// decreases the objective.
template <typename F>
LbfgsResult minimize_lbfgs(const F& f, Eigen::VectorXd x, const LbfgsOptions& opt = {}) {
  LbfgsResult r;
  Eigen::VectorXd g;
  double fx = f(x, g);
  r.trace.push_back(fx);
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    if (g.norm() < opt.gradient_tolerance) break;
    // Two-loop recursion.
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha[k] * y_hist[k];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    else gamma = 1.0 / std::max(1.0, g.norm());
    Eigen::VectorXd dir = gamma * q;
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(dir);
      dir += (alpha[k] - beta) * s_hist[k];
    }
    dir = -dir;
    double slope = g.dot(dir);
    if (!(slope < 0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g / std::max(1.0, g.norm());
      slope = g.dot(dir);
    }
    double step = 1.0;
    Eigen::VectorXd x_new, g_new;
    double f_new = fx;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const Eigen::VectorXd s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    x = std::move(x_new);
    g = std::move(g_new);
    fx = f_new;
    r.trace.push_back(fx);
  }
  r.x = std::move(x);
  r.value = fx;
  r.gradient_norm = g.norm();
  r.iterations = it;
  r.converged = r.gradient_norm < opt.gradient_tolerance;
  return r;
}

/// n log-spaced values in [lo, hi], ascending.
inline std::vector<double> log_grid(std::size_t n = 45, double lo = 1e-6, double hi = 1e5) {
  require(n >= 1 && lo > 0 && hi >= lo, ErrorCode::invalid_argument, "invalid grid");
  std::vector<double> g(n);
  const double a = std::log10(lo), b = std::log10(hi);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  g.front() = lo;
  g.back() = n == 1 ? lo : hi;
  return g;
}

struct GridPoint {
  double l2 = 0;
  double train_accuracy = 0, val_accuracy = 0;
  double objective = 0, gradient_norm = 0;
  int iterations = 0;
  bool converged = false;
};

struct ProbeResult {
  LinearProbe probe;
  double l2 = 0;
  double train_accuracy = 0, val_accuracy = 0, test_accuracy = 0;
  std::vector<GridPoint> grid;

  std::size_t unconverged() const {
    return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [](const GridPoint& g) { return !g.converged; }));
  }

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& g : grid)
      pts.push_back({{"l2", g.l2},
                     {"train_accuracy", g.train_accuracy},
                     {"val_accuracy", g.val_accuracy},
                     {"objective", g.objective},
                     {"gradient_norm", g.gradient_norm},
                     {"iterations", g.iterations},
                     {"converged", g.converged}});
    return {{"chosen_l2", l2},
            {"train_accuracy", train_accuracy},
            {"val_accuracy", val_accuracy},
            {"test_accuracy", test_accuracy},
            {"unconverged", unconverged()},
            {"grid", pts}};
  }
};

inline LbfgsResult fit_logistic(const FeatureSet& train, double l2, const Eigen::VectorXd* warm = nullptr,
                                const LbfgsOptions& opt = {}) {
  train.validate();
  const LogisticObjective f{train, l2};
  Eigen::VectorXd x0 = warm ? *warm : Eigen::VectorXd::Zero(f.dims());
  return minimize_lbfgs(f, std::move(x0), opt);
}

/// Fits every grid constant (largest first, warm-started) and keeps the one
/// with the best validation accuracy; ties go to the smaller constant.
inline ProbeResult fit_probe(const FeatureSet& train, const FeatureSet& val, std::vector<double> grid,
                             const LbfgsOptions& opt = {}) {
  require(!grid.empty(), ErrorCode::invalid_argument, "probe grid is empty");
  require(val.size() > 0, ErrorCode::invalid_argument, "probe needs a validation split");
  std::sort(grid.begin(), grid.end());
  ProbeResult best;
  best.grid.resize(grid.size());
  std::vector<LinearProbe> probes(grid.size());
  Eigen::VectorXd warm;
  for (std::size_t k = grid.size(); k-- > 0;) {
    const LbfgsResult r = fit_logistic(train, grid[k], warm.size() ? &warm : nullptr, opt);
    warm = r.x;
    const LogisticObjective f{train, grid[k]};
    probes[k] = f.unpack(r.x);
    GridPoint& g = best.grid[k];
    g.l2 = grid[k];
    g.objective = r.value;
    g.gradient_norm = r.gradient_norm;
    g.iterations = r.iterations;
    g.converged = r.converged;
    g.train_accuracy = evaluate(probes[k], train);
    g.val_accuracy = evaluate(probes[k], val);
  }
  std::size_t pick = 0;
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (best.grid[k].val_accuracy > best.grid[pick].val_accuracy) pick = k;
  best.probe = probes[pick];
  best.l2 = grid[pick];
  best.train_accuracy = best.grid[pick].train_accuracy;
  best.val_accuracy = best.grid[pick].val_accuracy;
  return best;
}

/// Features, split, grid search and test accuracy for a labeled image set.
template <typename S>
ProbeResult run_probe(const Encoder<S>& enc, const EncoderParams<S>& params, const LabeledImages& data,
                      std::uint64_t seed, const std::vector<double>& grid, std::size_t workers = 1,
                      const LbfgsOptions& opt = {}) {
  FeatureSet all;
  all.features = extract_features(enc, params, data.images, workers);
  all.labels = data.labels;
  all.classes = static_cast<int>(data.class_names.size());
  all.validate();
  const ProbeSplit split = split_by_group(data.labels, data.caption_ids, seed);
  const FeatureSet train = all.subset(split.train), val = all.subset(split.val), test = all.subset(split.test);
  ProbeResult r = fit_probe(train, val, grid, opt);
  r.test_accuracy = evaluate(r.probe, test);
  return r;
}

}  // namespace synclr
