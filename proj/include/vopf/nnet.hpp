#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vopf/acpf.hpp"
#include "vopf/common.hpp"
#include "vopf/dataset.hpp"
#include "vopf/netmodel.hpp"

namespace vopf {

// ---------------------------------------------------------------------------
// Multilayer perceptron with ReLU hidden layers and a linear output
// ---------------------------------------------------------------------------

struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int output_dim = 0;

  std::vector<int> layer_dims() const {
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : hidden_dims) dims.push_back(h);
    dims.push_back(output_dim);
    return dims;
  }
};

struct MlpParams {
  MlpSpec spec;
  std::vector<Eigen::MatrixXd> weights;  // out x in per layer
  std::vector<Eigen::VectorXd> biases;
};

inline MlpParams init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.input_dim < 1 || spec.output_dim < 1)
    throw ValidationError("mlp needs input and output dims >= 1");
  for (int h : spec.hidden_dims)
    if (h < 1) throw ValidationError("mlp hidden dims must be >= 1");
  MlpParams p;
  p.spec = spec;
  Rng rng(seed);
  const std::vector<int> dims = spec.layer_dims();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l], fan_out = dims[l + 1];
    const double lim = std::sqrt(6.0 / (fan_in + fan_out));
    Eigen::MatrixXd W(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) W(r, c) = rng.uniform(-lim, lim);
    p.weights.push_back(std::move(W));
    p.biases.push_back(Eigen::VectorXd::Zero(fan_out));
  }
  return p;
}

namespace detail {

struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;   // z per layer, batch x width
  std::vector<Eigen::MatrixXd> post;  // activations, post[0] = input
};

inline Eigen::MatrixXd forward_cached(const MlpParams& p, const Eigen::MatrixXd& X,
                                      ForwardCache* cache) {
  if (X.cols() != p.spec.input_dim)
    throw ValidationError("mlp input width mismatch");
  Eigen::MatrixXd a = X;
  if (cache) {
    cache->pre.clear();
    cache->post.clear();
    cache->post.push_back(a);
  }
  const std::size_t nlayers = p.weights.size();
  for (std::size_t l = 0; l < nlayers; ++l) {
    Eigen::MatrixXd z = (a * p.weights[l].transpose()).rowwise() + p.biases[l].transpose();
    if (l + 1 < nlayers)
      a = z.cwiseMax(0.0);
    else
      a = z;
    if (cache) {
      cache->pre.push_back(std::move(z));
      cache->post.push_back(a);
    }
  }
  return a;
}

}  // namespace detail

inline Eigen::MatrixXd forward(const MlpParams& p, const Eigen::MatrixXd& X) {
  return detail::forward_cached(p, X, nullptr);
}

/// Sum of squared errors over output dims, mean over the batch.
inline double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ValidationError("loss shape mismatch");
  if (pred.rows() == 0) return 0.0;
  return (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

struct MlpGrads {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

inline MlpGrads backward(const MlpParams& p, const Eigen::MatrixXd& X,
                         const Eigen::MatrixXd& target) {
  detail::ForwardCache cache;
  const Eigen::MatrixXd pred = detail::forward_cached(p, X, &cache);
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ValidationError("target shape mismatch");
  const double B = static_cast<double>(std::max<Eigen::Index>(X.rows(), 1));

  const std::size_t nlayers = p.weights.size();
  MlpGrads g;
  g.weights.resize(nlayers);
  g.biases.resize(nlayers);
  Eigen::MatrixXd delta = (2.0 / B) * (pred - target);
  for (std::size_t l = nlayers; l-- > 0;) {
    g.weights[l] = delta.transpose() * cache.post[l];
    g.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      delta = delta * p.weights[l];
      delta = delta.cwiseProduct(
          (cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return g;
}

struct AdamState {
  std::vector<Eigen::MatrixXd> mw, vw;
  std::vector<Eigen::VectorXd> mb, vb;
  long step = 0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int max_epochs = 1000;
  int batch_size = 50;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int bus_groups = 1;
  bool parallel_groups = false;
};

inline AdamState init_adam(const MlpParams& p) {
  AdamState s;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    s.mw.push_back(Eigen::MatrixXd::Zero(p.weights[l].rows(), p.weights[l].cols()));
    s.vw.push_back(Eigen::MatrixXd::Zero(p.weights[l].rows(), p.weights[l].cols()));
    s.mb.push_back(Eigen::VectorXd::Zero(p.biases[l].size()));
    s.vb.push_back(Eigen::VectorXd::Zero(p.biases[l].size()));
  }
  return s;
}

inline void adam_step(MlpParams& p, const MlpGrads& g, AdamState& s, const TrainConfig& cfg) {
  if (g.weights.size() != p.weights.size())
    throw ValidationError("gradient layer count mismatch");
  s.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    s.mw[l] = cfg.beta1 * s.mw[l] + (1.0 - cfg.beta1) * g.weights[l];
    s.vw[l] = cfg.beta2 * s.vw[l] + (1.0 - cfg.beta2) * g.weights[l].cwiseAbs2();
    p.weights[l].array() -= cfg.learning_rate * (s.mw[l].array() / bc1) /
                            ((s.vw[l].array() / bc2).sqrt() + cfg.epsilon);
    s.mb[l] = cfg.beta1 * s.mb[l] + (1.0 - cfg.beta1) * g.biases[l];
    s.vb[l] = cfg.beta2 * s.vb[l] + (1.0 - cfg.beta2) * g.biases[l].cwiseAbs2();
    p.biases[l].array() -= cfg.learning_rate * (s.mb[l].array() / bc1) /
                           ((s.vb[l].array() / bc2).sqrt() + cfg.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Bus grouping and the VMP/VAP predictor pair
// ---------------------------------------------------------------------------

/// Contiguous-by-position partition into k groups whose sizes differ by at
/// most one; the leading n mod k groups take the extra bus.
inline std::vector<std::vector<int>> make_groups(const Network& net, int bus_groups,
                                                 std::uint64_t /*seed*/ = 0) {
  const int n = net.n_bus();
  if (bus_groups < 1 || bus_groups > n)
    throw ValidationError("bus group count must be in [1, n_bus]");
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(bus_groups));
  const int base = n / bus_groups, extra = n % bus_groups;
  int at = 0;
  for (int g = 0; g < bus_groups; ++g) {
    const int size = base + (g < extra ? 1 : 0);
    for (int i = 0; i < size; ++i) groups[static_cast<std::size_t>(g)].push_back(at++);
  }
  return groups;
}

inline std::vector<int> default_hidden_dims(int n_bus) {
  if (n_bus <= 20) return {64, 32, 16};
  if (n_bus <= 50) return {128, 64, 32};
  if (n_bus <= 150) return {512, 256, 128};
  return {768, 768, 768};
}

struct VoltagePredictor {
  std::vector<std::vector<int>> groups;  // bus positions per group
  std::vector<MlpParams> vmp, vap;
  Scaler scaler;
  int ref_pos = 0;
  int n_bus = 0;
  std::string case_fingerprint;
  std::string dataset_fingerprint;
};

struct LossCurve {
  int group = 0;
  std::string net;  // "vmp" or "vap"
  std::vector<double> epoch_loss;
};

struct TrainOutput {
  VoltagePredictor predictor;
  std::vector<LossCurve> curves;
};

namespace detail {

inline void train_one_net(MlpParams& p, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                          const TrainConfig& cfg, std::uint64_t shuffle_seed,
                          LossCurve& curve) {
  AdamState opt = init_adam(p);
  Rng rng(shuffle_seed);
  const int nrows = static_cast<int>(X.rows());
  std::vector<int> order(static_cast<std::size_t>(nrows));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start < nrows; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, nrows - start);
      Eigen::MatrixXd Xb(bsz, X.cols()), Yb(bsz, Y.cols());
      for (int r = 0; r < bsz; ++r) {
        Xb.row(r) = X.row(order[static_cast<std::size_t>(start + r)]);
        Yb.row(r) = Y.row(order[static_cast<std::size_t>(start + r)]);
      }
      const MlpGrads g = backward(p, Xb, Yb);
      adam_step(p, g, opt, cfg);
    }
    const double loss = mse_loss(forward(p, X), Y);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite loss for " << curve.net << " group "
          << curve.group << " at epoch " << epoch;
      throw SolverError(msg.str());
    }
    curve.epoch_loss.push_back(loss);
  }
}

}  // namespace detail

inline TrainOutput train(const Dataset& ds, const Network& net,
                         const std::vector<int>& hidden_dims, const TrainConfig& cfg) {
  if (ds.train_idx.empty()) throw ValidationError("dataset has no training split");
  if (!ds.scaler.fitted) throw ValidationError("dataset scaler is not fitted");
  if (cfg.learning_rate <= 0.0) throw ValidationError("learning rate must be positive");
  if (cfg.batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (cfg.max_epochs < 0) throw ValidationError("max epochs must be nonnegative");
  if (network_fingerprint(net) != ds.case_fingerprint)
    throw ValidationError("dataset was generated from a different case (fingerprint mismatch)");

  const int n = net.n_bus();
  const std::vector<int> hidden = hidden_dims.empty() ? default_hidden_dims(n) : hidden_dims;

  TrainOutput out;
  out.predictor.groups = make_groups(net, cfg.bus_groups);
  out.predictor.scaler = ds.scaler;
  out.predictor.ref_pos = net.ref_pos;
  out.predictor.n_bus = n;
  out.predictor.case_fingerprint = ds.case_fingerprint;
  out.predictor.dataset_fingerprint = dataset_fingerprint(ds);

  const int ntrain = static_cast<int>(ds.train_idx.size());
  Eigen::MatrixXd X(ntrain, 2 * n);
  Eigen::MatrixXd VM(ntrain, n), VA(ntrain, n);
  for (int r = 0; r < ntrain; ++r) {
    const Sample& s = ds.samples[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(r)])];
    X.row(r) = apply_scaler(ds.scaler, input_vector(s)).transpose();
    VM.row(r) = (s.target_state.vm.array() - 1.0).matrix().transpose();
    VA.row(r) = s.target_state.va.transpose();
  }

  const int ngroups = static_cast<int>(out.predictor.groups.size());
  out.predictor.vmp.resize(static_cast<std::size_t>(ngroups));
  out.predictor.vap.resize(static_cast<std::size_t>(ngroups));
  out.curves.resize(static_cast<std::size_t>(2 * ngroups));

  auto train_group = [&](int g) {
    const auto& buses = out.predictor.groups[static_cast<std::size_t>(g)];
    const int gsz = static_cast<int>(buses.size());
    Eigen::MatrixXd Yvm(ntrain, gsz), Yva(ntrain, gsz);
    for (int c = 0; c < gsz; ++c) {
      Yvm.col(c) = VM.col(buses[static_cast<std::size_t>(c)]);
      Yva.col(c) = VA.col(buses[static_cast<std::size_t>(c)]);
    }
    MlpSpec spec;
    spec.input_dim = 2 * n;
    spec.hidden_dims = hidden;
    spec.output_dim = gsz;

    const std::string gtag = std::to_string(g);
    auto& cm = out.curves[static_cast<std::size_t>(2 * g)];
    cm.group = g;
    cm.net = "vmp";
    auto& ca = out.curves[static_cast<std::size_t>(2 * g + 1)];
    ca.group = g;
    ca.net = "vap";

    MlpParams pm = init_mlp(spec, derive_seed(cfg.seed, "vmp:" + gtag));
    detail::train_one_net(pm, X, Yvm, cfg, derive_seed(cfg.seed, "vmp-shuffle:" + gtag), cm);
    out.predictor.vmp[static_cast<std::size_t>(g)] = std::move(pm);

    MlpParams pa = init_mlp(spec, derive_seed(cfg.seed, "vap:" + gtag));
    detail::train_one_net(pa, X, Yva, cfg, derive_seed(cfg.seed, "vap-shuffle:" + gtag), ca);
    out.predictor.vap[static_cast<std::size_t>(g)] = std::move(pa);
  };

  if (cfg.parallel_groups && ngroups > 1) {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(ngroups));
    for (int g = 0; g < ngroups; ++g)
      pool.emplace_back([&, g]() {
        try {
          train_group(g);
        } catch (...) {
          errors[static_cast<std::size_t>(g)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (int g = 0; g < ngroups; ++g) train_group(g);
  }
  return out;
}

inline VoltageState predict_voltages(const VoltagePredictor& pred, const Loads& loads) {
  if (loads.pd.size() != pred.n_bus || loads.qd.size() != pred.n_bus)
    throw ValidationError("load dimension does not match predictor");
  Eigen::VectorXd x(2 * pred.n_bus);
  x << loads.pd, loads.qd;
  const Eigen::VectorXd xs = apply_scaler(pred.scaler, x);
  const Eigen::MatrixXd X = xs.transpose();

  VoltageState st;
  st.vm = Eigen::VectorXd::Zero(pred.n_bus);
  st.va = Eigen::VectorXd::Zero(pred.n_bus);
  for (std::size_t g = 0; g < pred.groups.size(); ++g) {
    const Eigen::MatrixXd vm = forward(pred.vmp[g], X);
    const Eigen::MatrixXd va = forward(pred.vap[g], X);
    const auto& buses = pred.groups[g];
    for (std::size_t c = 0; c < buses.size(); ++c) {
      st.vm(buses[c]) = vm(0, static_cast<Eigen::Index>(c)) + 1.0;
      st.va(buses[c]) = va(0, static_cast<Eigen::Index>(c));
    }
  }
  st.va.array() -= st.va(pred.ref_pos);
  return st;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json mlp_to_json(const MlpParams& p) {
  nlohmann::json j;
  j["input_dim"] = p.spec.input_dim;
  j["hidden_dims"] = p.spec.hidden_dims;
  j["output_dim"] = p.spec.output_dim;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    nlohmann::json layer;
    layer["rows"] = p.weights[l].rows();
    layer["cols"] = p.weights[l].cols();
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(p.weights[l].size()));
    for (Eigen::Index r = 0; r < p.weights[l].rows(); ++r)
      for (Eigen::Index c = 0; c < p.weights[l].cols(); ++c) w.push_back(p.weights[l](r, c));
    layer["weights"] = w;
    layer["biases"] = std::vector<double>(p.biases[l].data(),
                                          p.biases[l].data() + p.biases[l].size());
    layers.push_back(std::move(layer));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  MlpParams p;
  p.spec.input_dim = j.at("input_dim").get<int>();
  p.spec.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  p.spec.output_dim = j.at("output_dim").get<int>();
  for (const auto& layer : j.at("layers")) {
    const Eigen::Index rows = layer.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = layer.at("cols").get<Eigen::Index>();
    const auto w = layer.at("weights").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != rows * cols)
      throw ParseError("model layer weight count does not match its shape");
    Eigen::MatrixXd W(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        W(r, c) = w[static_cast<std::size_t>(r * cols + c)];
    const auto b = layer.at("biases").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(b.size()) != rows)
      throw ParseError("model layer bias count does not match its shape");
    p.weights.push_back(std::move(W));
    p.biases.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(),
                                                         static_cast<Eigen::Index>(b.size())));
  }
  return p;
}

}  // namespace detail

inline void write_model(const VoltagePredictor& pred, const std::string& path) {
  nlohmann::json j;
  j["case_fingerprint"] = pred.case_fingerprint;
  j["dataset_fingerprint"] = pred.dataset_fingerprint;
  j["n_bus"] = pred.n_bus;
  j["ref_pos"] = pred.ref_pos;
  j["groups"] = pred.groups;
  j["scaler"]["fitted"] = pred.scaler.fitted;
  if (pred.scaler.fitted) {
    j["scaler"]["in_min"] = std::vector<double>(
        pred.scaler.in_min.data(), pred.scaler.in_min.data() + pred.scaler.in_min.size());
    j["scaler"]["in_max"] = std::vector<double>(
        pred.scaler.in_max.data(), pred.scaler.in_max.data() + pred.scaler.in_max.size());
  }
  nlohmann::json vmp = nlohmann::json::array(), vap = nlohmann::json::array();
  for (const auto& m : pred.vmp) vmp.push_back(detail::mlp_to_json(m));
  for (const auto& m : pred.vap) vap.push_back(detail::mlp_to_json(m));
  j["vmp"] = std::move(vmp);
  j["vap"] = std::move(vap);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot write model file " + path);
  f << j.dump(2) << '\n';
}

inline VoltagePredictor read_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read model file " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid model file: ") + e.what());
  }
  VoltagePredictor p;
  try {
    p.case_fingerprint = j.at("case_fingerprint").get<std::string>();
    p.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    p.n_bus = j.at("n_bus").get<int>();
    p.ref_pos = j.at("ref_pos").get<int>();
    p.groups = j.at("groups").get<std::vector<std::vector<int>>>();
    const auto& sc = j.at("scaler");
    p.scaler.fitted = sc.at("fitted").get<bool>();
    if (p.scaler.fitted) {
      const auto mn = sc.at("in_min").get<std::vector<double>>();
      const auto mx = sc.at("in_max").get<std::vector<double>>();
      p.scaler.in_min = Eigen::Map<const Eigen::VectorXd>(mn.data(),
                                                          static_cast<Eigen::Index>(mn.size()));
      p.scaler.in_max = Eigen::Map<const Eigen::VectorXd>(mx.data(),
                                                          static_cast<Eigen::Index>(mx.size()));
    }
    for (const auto& m : j.at("vmp")) p.vmp.push_back(detail::mlp_from_json(m));
    for (const auto& m : j.at("vap")) p.vap.push_back(detail::mlp_from_json(m));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model file missing field: ") + e.what());
  }
  if (p.vmp.size() != p.groups.size() || p.vap.size() != p.groups.size())
    throw ParseError("model group count does not match its networks");
  return p;
}

}  // namespace vopf
