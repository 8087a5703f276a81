#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"
#include "fedabc/rng.hpp"

// Autoencoder whose tanh-bounded latent layer also feeds a logistic-regression
// bypath. The encoder output is the summary statistic a site computes; the
// decoder never leaves the site.

namespace fedabc {

enum class Activation { Selu, Tanh, Identity, Sigmoid };

namespace act {

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

inline double selu(double x) { return x > 0.0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x); }
inline double selu_grad(double x) { return x > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// tanh kept strictly inside (-1, 1); plain tanh rounds to +-1 beyond |x| ~ 19.
inline double bounded_tanh(double x) {
  constexpr double kEdge = 1.0 - 0x1.0p-53;
  return std::clamp(std::tanh(x), -kEdge, kEdge);
}

inline void apply(Activation a, Matrix& z) {
  switch (a) {
    case Activation::Selu: z = z.unaryExpr([](double v) { return selu(v); }); break;
    case Activation::Tanh: z = z.unaryExpr([](double v) { return bounded_tanh(v); }); break;
    case Activation::Sigmoid: z = z.unaryExpr([](double v) { return sigmoid(v); }); break;
    case Activation::Identity: break;
  }
}

}  // namespace act

struct LayerSpec {
  std::string_view name;
  int in = 0;
  int out = 0;
  Activation activation = Activation::Identity;

  int parameter_count() const { return out * in + out; }
};

enum Layer : std::size_t { kEncode1, kEncode2, kLatent, kDecode1, kDecode2, kRecon, kLogistic, kLayerCount };

struct MoaeArchitecture {
  int input_dim = 0;
  int latent_dim = 0;
  int hidden1 = 64;
  int hidden2 = 32;

  std::array<LayerSpec, kLayerCount> layers() const {
    return {{{"encode_1", input_dim, hidden1, Activation::Selu},
             {"encode_2", hidden1, hidden2, Activation::Selu},
             {"latent", hidden2, latent_dim, Activation::Tanh},
             {"decode_1", latent_dim, hidden2, Activation::Selu},
             {"decode_2", hidden2, hidden1, Activation::Selu},
             {"recon", hidden1, input_dim, Activation::Identity},
             {"logistic_regression", latent_dim, 1, Activation::Sigmoid}}};
  }

  int parameter_count() const {
    int total = 0;
    for (const auto& l : layers()) total += l.parameter_count();
    return total;
  }

  friend bool operator==(const MoaeArchitecture&, const MoaeArchitecture&) = default;
};

struct DenseLayer {
  Matrix w;  // out x in
  Vector b;  // out
};

using LayerSet = std::array<DenseLayer, kLayerCount>;

struct AdamState {
  LayerSet m;
  LayerSet v;
  std::int64_t step = 0;
};

struct MoaeModel {
  MoaeArchitecture arch;
  LayerSet layers;
  AdamState adam;

  friend bool operator==(const MoaeModel& a, const MoaeModel& b) {
    if (!(a.arch == b.arch) || a.adam.step != b.adam.step) return false;
    for (std::size_t i = 0; i < kLayerCount; ++i) {
      if (a.layers[i].w != b.layers[i].w || a.layers[i].b != b.layers[i].b) return false;
    }
    return true;
  }
};

inline LayerSet zero_layers(const MoaeArchitecture& arch) {
  LayerSet s;
  const auto specs = arch.layers();
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    s[i].w = Matrix::Zero(specs[i].out, specs[i].in);
    s[i].b = Vector::Zero(specs[i].out);
  }
  return s;
}

inline MoaeModel zero_model(const MoaeArchitecture& arch) {
  MoaeModel m{arch, zero_layers(arch), {zero_layers(arch), zero_layers(arch), 0}};
  return m;
}

/// Weights ~ N(0, 1/fan_in), zero biases, zeroed Adam state.
inline MoaeModel init_moae(int input_dim, int latent_dim, RngHandle seed) {
  if (latent_dim < 1) throw InvalidArchitecture("latent dimension must be at least 1");
  if (latent_dim >= input_dim) throw InvalidArchitecture("latent dimension must be smaller than input dimension");
  MoaeModel model = zero_model({input_dim, latent_dim});
  Rng rng(seed);
  const auto specs = model.arch.layers();
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    const double sd = std::sqrt(1.0 / specs[i].in);
    auto& w = model.layers[i].w;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = sd * rng.normal();
    }
  }
  return model;
}

struct ForwardPass {
  Matrix recon;   // n x D
  Matrix latent;  // n x d
  Vector prob;    // n
  // pre-activations and activations per layer, kept for backprop
  std::array<Matrix, kLayerCount> pre;
  std::array<Matrix, kLayerCount> post;
};

namespace detail {

inline Matrix affine(const DenseLayer& l, const Matrix& in) {
  Matrix z = in * l.w.transpose();
  z.rowwise() += l.b.transpose();
  return z;
}

}  // namespace detail

inline ForwardPass forward(const MoaeModel& model, const Matrix& x) {
  if (x.cols() != model.arch.input_dim) throw ShapeError("input width does not match the model");
  if (!x.allFinite()) throw NumericError("non-finite input to the autoencoder");
  ForwardPass f;
  const auto specs = model.arch.layers();
  auto run = [&](std::size_t i, const Matrix& in) {
    f.pre[i] = detail::affine(model.layers[i], in);
    f.post[i] = f.pre[i];
    act::apply(specs[i].activation, f.post[i]);
  };
  run(kEncode1, x);
  run(kEncode2, f.post[kEncode1]);
  run(kLatent, f.post[kEncode2]);
  run(kDecode1, f.post[kLatent]);
  run(kDecode2, f.post[kDecode1]);
  run(kRecon, f.post[kDecode2]);
  run(kLogistic, f.post[kLatent]);
  f.recon = f.post[kRecon];
  f.latent = f.post[kLatent];
  f.prob = f.post[kLogistic].col(0);
  return f;
}

/// Encoder half only.
inline Matrix encode(const MoaeModel& model, const Matrix& x) {
  if (x.cols() != model.arch.input_dim) throw ShapeError("input width does not match the model");
  if (!x.allFinite()) throw NumericError("non-finite input to the encoder");
  const auto specs = model.arch.layers();
  Matrix h = x;
  for (std::size_t i : {kEncode1, kEncode2, kLatent}) {
    h = detail::affine(model.layers[i], h);
    act::apply(specs[i].activation, h);
  }
  return h;
}

/// Decoder half only: latent rows back to input space.
inline Matrix decode(const MoaeModel& model, const Matrix& latent) {
  if (latent.cols() != model.arch.latent_dim) throw ShapeError("latent width does not match the model");
  const auto specs = model.arch.layers();
  Matrix h = latent;
  for (std::size_t i : {kDecode1, kDecode2, kRecon}) {
    h = detail::affine(model.layers[i], h);
    act::apply(specs[i].activation, h);
  }
  return h;
}

struct LossWeights {
  double alpha = 1.0;  // reconstruction
  double beta = 0.5;   // classification
};

inline constexpr double kProbClamp = 1e-12;

/// alpha * sum_i ||x_i - x'_i||^2 + (beta / N) * sum_i BCE(y_i, p_i)
inline double moae_loss(const Matrix& recon, const Matrix& x, const Vector& prob, const std::vector<int>& y,
                        LossWeights w) {
  if (recon.rows() != x.rows() || recon.cols() != x.cols()) throw ShapeError("reconstruction shape mismatch");
  if (prob.size() != x.rows() || static_cast<Eigen::Index>(y.size()) != x.rows()) {
    throw ShapeError("label/probability count mismatch");
  }
  const double n = static_cast<double>(x.rows());
  const double recon_term = (x - recon).squaredNorm();
  double ce = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(prob(i), kProbClamp, 1.0 - kProbClamp);
    ce -= y[static_cast<std::size_t>(i)] == 1 ? std::log(p) : std::log1p(-p);
  }
  return w.alpha * recon_term + (n > 0 ? w.beta / n * ce : 0.0);
}

/// Analytic gradient of moae_loss with respect to every weight and bias.
inline LayerSet moae_gradient(const MoaeModel& model, const ForwardPass& f, const Matrix& x,
                              const std::vector<int>& y, LossWeights w) {
  const auto specs = model.arch.layers();
  const auto n = x.rows();
  LayerSet g = zero_layers(model.arch);

  auto grad_act = [&](std::size_t i, const Matrix& upstream) -> Matrix {
    switch (specs[i].activation) {
      case Activation::Selu:
        return upstream.cwiseProduct(f.pre[i].unaryExpr([](double v) { return act::selu_grad(v); }));
      case Activation::Tanh:
        return upstream.cwiseProduct((1.0 - f.post[i].array().square()).matrix());
      case Activation::Sigmoid:
        return upstream.cwiseProduct((f.post[i].array() * (1.0 - f.post[i].array())).matrix());
      case Activation::Identity:
        return upstream;
    }
    return upstream;
  };
  auto accumulate = [&](std::size_t i, const Matrix& dz, const Matrix& input) {
    g[i].w = dz.transpose() * input;
    g[i].b = dz.colwise().sum().transpose();
  };

  // reconstruction branch
  Matrix dz = 2.0 * w.alpha * (f.recon - x);
  accumulate(kRecon, dz, f.post[kDecode2]);
  Matrix da = dz * model.layers[kRecon].w;
  dz = grad_act(kDecode2, da);
  accumulate(kDecode2, dz, f.post[kDecode1]);
  da = dz * model.layers[kDecode2].w;
  dz = grad_act(kDecode1, da);
  accumulate(kDecode1, dz, f.post[kLatent]);
  Matrix d_latent = dz * model.layers[kDecode1].w;

  // classification bypath; d(BCE)/d(logit) = p - y
  Matrix dlogit(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    dlogit(i, 0) = (n > 0 ? w.beta / static_cast<double>(n) : 0.0) * (f.prob(i) - y[static_cast<std::size_t>(i)]);
  }
  accumulate(kLogistic, dlogit, f.post[kLatent]);
  d_latent += dlogit * model.layers[kLogistic].w;

  // encoder
  dz = grad_act(kLatent, d_latent);
  accumulate(kLatent, dz, f.post[kEncode2]);
  da = dz * model.layers[kLatent].w;
  dz = grad_act(kEncode2, da);
  accumulate(kEncode2, dz, f.post[kEncode1]);
  da = dz * model.layers[kEncode2].w;
  dz = grad_act(kEncode1, da);
  accumulate(kEncode1, dz, x);
  return g;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(MoaeModel& model, const LayerSet& grad, const AdamConfig& cfg) {
  auto& st = model.adam;
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    param.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
  };
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    update(model.layers[i].w, grad[i].w, st.m[i].w, st.v[i].w);
    update(model.layers[i].b, grad[i].b, st.m[i].b, st.v[i].b);
  }
}

struct TrainOptions {
  int epochs = 300;
  int batch_size = 0;  // 0 = full batch
  AdamConfig adam;
  LossWeights weights;
};

struct TrainResult {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // full-data loss after each epoch
};

inline TrainResult train_moae(MoaeModel& model, const Matrix& x, const std::vector<int>& y,
                              const TrainOptions& opt, Rng& rng) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw ShapeError("label count does not match rows");
  for (int v : y) {
    if (v != 0 && v != 1) throw ShapeError("labels must be 0 or 1");
  }
  auto full_loss = [&] {
    const auto f = forward(model, x);
    return moae_loss(f.recon, x, f.prob, y, opt.weights);
  };
  TrainResult result;
  result.initial_loss = full_loss();
  if (opt.epochs <= 0 || x.rows() == 0) return result;

  const auto n = x.rows();
  const Eigen::Index batch = opt.batch_size <= 0 ? n : std::min<Eigen::Index>(opt.batch_size, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    if (batch < n) {
      for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::swap(order[i], order[rng.index(i + 1)]);
      }
    }
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      if (batch == n) {
        const auto f = forward(model, x);
        adam_step(model, moae_gradient(model, f, x, y, opt.weights), opt.adam);
        continue;
      }
      Matrix xb(len, x.cols());
      std::vector<int> yb(static_cast<std::size_t>(len));
      for (Eigen::Index r = 0; r < len; ++r) {
        const auto src = order[static_cast<std::size_t>(start + r)];
        xb.row(r) = x.row(src);
        yb[static_cast<std::size_t>(r)] = y[static_cast<std::size_t>(src)];
      }
      const auto f = forward(model, xb);
      adam_step(model, moae_gradient(model, f, xb, yb, opt.weights), opt.adam);
    }
    const double loss = full_loss();
    if (!std::isfinite(loss)) {
      throw DivergedTraining("autoencoder training diverged at epoch " + std::to_string(epoch + 1), epoch + 1);
    }
    result.epoch_loss.push_back(loss);
  }
  return result;
}

inline constexpr std::string_view kMoaeFormat = "fedabc.moae.v1";

inline nlohmann::json to_json_value(const MoaeModel& m) {
  nlohmann::json j;
  j["format"] = kMoaeFormat;
  j["input_dim"] = m.arch.input_dim;
  j["latent_dim"] = m.arch.latent_dim;
  j["hidden"] = {m.arch.hidden1, m.arch.hidden2};
  const auto specs = m.arch.layers();
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    j["layers"][std::string(specs[i].name)] = {{"W", to_json_value(m.layers[i].w)},
                                               {"b", to_json_value(m.layers[i].b)}};
  }
  return j;
}

/// Adam state is not persisted; a loaded model starts with a fresh optimizer.
inline MoaeModel moae_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kMoaeFormat) throw DecodeError("unsupported autoencoder format tag");
  MoaeArchitecture arch{j.at("input_dim").get<int>(), j.at("latent_dim").get<int>(), j.at("hidden").at(0).get<int>(),
                        j.at("hidden").at(1).get<int>()};
  MoaeModel m = zero_model(arch);
  const auto specs = arch.layers();
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    const auto& l = j.at("layers").at(std::string(specs[i].name));
    m.layers[i].w = matrix_from_json(l.at("W"), specs[i].in);
    m.layers[i].b = vector_from_json(l.at("b"));
    if (m.layers[i].w.rows() != specs[i].out || m.layers[i].w.cols() != specs[i].in ||
        m.layers[i].b.size() != specs[i].out) {
      throw DecodeError("layer " + std::string(specs[i].name) + " has the wrong shape");
    }
  }
  return m;
}

}  // namespace fedabc
