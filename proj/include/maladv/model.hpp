#pragma once

// Byte-level gated convolutional classifier (MalConv layout): embedding,
// gated 1-D convolution, temporal max-pooling over all windows, a fully
// connected head and a sigmoid output. Forward and backward passes are
// accumulated in double precision; parameters are stored as float.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maladv/error.hpp"
#include "maladv/rng.hpp"

namespace maladv {

using Token = std::uint16_t;

inline constexpr Token kPaddingToken = 256;
inline constexpr std::size_t kVocabSize = 257;
inline constexpr double kDecisionThreshold = 0.5;

enum class Label : std::uint8_t { benign = 0, malware = 1 };

inline const char* to_string(Label label) { return label == Label::malware ? "malware" : "benign"; }

struct Hyperparams {
  std::size_t max_len = 4096;
  std::size_t vocab_size = kVocabSize;
  std::size_t embed_dim = 8;
  std::size_t kernel_size = 50;
  std::size_t stride = 50;
  std::size_t num_filters = 32;
  std::size_t hidden_units = 32;
  std::uint64_t seed = 0;

  /// Full-size configuration of the original detector (2 MB input, 500-byte windows).
  static Hyperparams full_scale() {
    Hyperparams h;
    h.max_len = 2'097'152;
    h.kernel_size = 500;
    h.stride = 500;
    h.num_filters = 128;
    return h;
  }

  std::size_t num_windows() const { return (max_len + stride - 1) / stride; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_config, msg); };
    if (max_len == 0) fail("max_len must be positive");
    if (vocab_size != kVocabSize) fail("vocab_size must be 257");
    if (embed_dim == 0) fail("embed_dim must be positive");
    if (kernel_size == 0 || stride == 0) fail("kernel_size and stride must be positive");
    if (stride > kernel_size) fail("stride must not exceed kernel_size");
    if (num_filters == 0) fail("num_filters must be positive");
  }

  /// Two models accept the same inputs iff everything but the seed matches.
  bool same_architecture(const Hyperparams& o) const {
    return max_len == o.max_len && vocab_size == o.vocab_size && embed_dim == o.embed_dim &&
           kernel_size == o.kernel_size && stride == o.stride && num_filters == o.num_filters &&
           hidden_units == o.hidden_units;
  }

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

/// Dense row-major matrix of doubles; the tag keeps embeddings and
/// gradients from being mixed up.
template <class Tag>
class RowMatrix {
 public:
  RowMatrix() = default;
  RowMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  std::span<double> row(std::size_t i) { return {values_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * cols_, cols_}; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  template <class OtherTag>
  bool same_shape(const RowMatrix<OtherTag>& o) const {
    return rows_ == o.rows() && cols_ == o.cols();
  }

  friend bool operator==(const RowMatrix&, const RowMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

struct EmbeddingTag;
struct GradientTag;
using EmbeddingMatrix = RowMatrix<EmbeddingTag>;
using GradientMatrix = RowMatrix<GradientTag>;

inline constexpr std::size_t kParameterArrayCount = 9;

struct MalConvModel {
  Hyperparams hyper;
  std::vector<float> embedding;       // vocab_size x embed_dim
  std::vector<float> conv_main;       // num_filters x kernel_size x embed_dim
  std::vector<float> conv_main_bias;  // num_filters
  std::vector<float> conv_gate;       // num_filters x kernel_size x embed_dim
  std::vector<float> conv_gate_bias;  // num_filters
  std::vector<float> fc_hidden;       // num_filters x hidden_units
  std::vector<float> fc_hidden_bias;  // hidden_units
  std::vector<float> fc_out;          // hidden_units x 1, or num_filters x 1 without a hidden layer
  std::vector<float> fc_out_bias;     // 1

  /// Expected element count of each parameter array, in serialization order.
  static std::array<std::size_t, kParameterArrayCount> parameter_sizes(const Hyperparams& h) {
    const std::size_t conv = h.num_filters * h.kernel_size * h.embed_dim;
    const std::size_t head_in = h.hidden_units == 0 ? h.num_filters : h.hidden_units;
    return {h.vocab_size * h.embed_dim, conv, h.num_filters, conv, h.num_filters,
            h.num_filters * h.hidden_units, h.hidden_units, head_in, 1};
  }

  static MalConvModel zeros(const Hyperparams& h) {
    h.validate();
    MalConvModel m;
    m.hyper = h;
    const auto sizes = parameter_sizes(h);
    auto arrays = m.parameter_arrays();
    for (std::size_t i = 0; i < kParameterArrayCount; ++i) arrays[i]->assign(sizes[i], 0.0f);
    return m;
  }

  /// Unit-variance uniform embedding; every other layer (weights and biases)
  /// is uniform in +-1/sqrt(fan_in). Drawn from hyper.seed.
  static MalConvModel initialize(const Hyperparams& h) {
    MalConvModel m = zeros(h);
    Rng rng = derive_rng(h.seed, {0x696e6974});
    const double conv_in = static_cast<double>(h.kernel_size * h.embed_dim);
    const double fc_in = static_cast<double>(h.num_filters);
    const double out_in = static_cast<double>(h.hidden_units > 0 ? h.hidden_units : h.num_filters);
    const std::array<double, kParameterArrayCount> bounds = {
        std::sqrt(3.0),         1 / std::sqrt(conv_in), 1 / std::sqrt(conv_in),
        1 / std::sqrt(conv_in), 1 / std::sqrt(conv_in), 1 / std::sqrt(fc_in),
        1 / std::sqrt(fc_in),   1 / std::sqrt(out_in),  1 / std::sqrt(out_in)};
    const auto arrays = m.parameter_arrays();
    for (std::size_t a = 0; a < arrays.size(); ++a) {
      std::uniform_real_distribution<float> dist(static_cast<float>(-bounds[a]), static_cast<float>(bounds[a]));
      for (auto& v : *arrays[a]) v = dist(rng);
    }
    return m;
  }

  std::array<std::vector<float>*, kParameterArrayCount> parameter_arrays() {
    return {&embedding, &conv_main, &conv_main_bias, &conv_gate, &conv_gate_bias,
            &fc_hidden, &fc_hidden_bias, &fc_out, &fc_out_bias};
  }
  std::array<const std::vector<float>*, kParameterArrayCount> parameter_arrays() const {
    return {&embedding, &conv_main, &conv_main_bias, &conv_gate, &conv_gate_bias,
            &fc_hidden, &fc_hidden_bias, &fc_out, &fc_out_bias};
  }

  std::span<const float> embedding_row(std::size_t token) const {
    return {embedding.data() + token * hyper.embed_dim, hyper.embed_dim};
  }

  void check_shapes() const {
    hyper.validate();
    const auto sizes = parameter_sizes(hyper);
    const auto arrays = parameter_arrays();
    for (std::size_t i = 0; i < kParameterArrayCount; ++i)
      if (arrays[i]->size() != sizes[i])
        throw Error(ErrorCode::shape, "parameter array " + std::to_string(i) + " has " +
                                          std::to_string(arrays[i]->size()) + " values, expected " +
                                          std::to_string(sizes[i]));
  }

  bool all_finite() const {
    for (const auto* arr : parameter_arrays())
      for (float v : *arr)
        if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const MalConvModel&, const MalConvModel&) = default;
};

/// Gradient of the loss with respect to every parameter array, same layout
/// as MalConvModel::parameter_arrays().
struct ParameterGradient {
  std::array<std::vector<double>, kParameterArrayCount> arrays;

  static ParameterGradient zeros_like(const MalConvModel& m) {
    ParameterGradient g;
    const auto src = m.parameter_arrays();
    for (std::size_t i = 0; i < kParameterArrayCount; ++i) g.arrays[i].assign(src[i]->size(), 0.0);
    return g;
  }

  void add(const ParameterGradient& o) {
    for (std::size_t i = 0; i < kParameterArrayCount; ++i)
      for (std::size_t j = 0; j < arrays[i].size(); ++j) arrays[i][j] += o.arrays[i][j];
  }
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double ex = std::exp(x);
  return ex / (1.0 + ex);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Four independent partial sums; fixed association keeps results reproducible.
inline double dot(const float* w, const double* x, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(w[i]) * x[i];
    s1 += static_cast<double>(w[i + 1]) * x[i + 1];
    s2 += static_cast<double>(w[i + 2]) * x[i + 2];
    s3 += static_cast<double>(w[i + 3]) * x[i + 3];
  }
  for (; i < n; ++i) s0 += static_cast<double>(w[i]) * x[i];
  return (s0 + s1) + (s2 + s3);
}

struct ForwardPass {
  std::vector<double> pooled;        // per filter
  std::vector<std::size_t> argmax;   // per filter, winning window
  std::vector<double> main_at;       // conv_main pre-activation at the winning window
  std::vector<double> gate_at;       // conv_gate pre-activation at the winning window
  std::vector<double> hidden_pre;    // per hidden unit
  double logit = 0.0;
  double score = 0.5;
};

/// Rows at index >= uniform_from are known to be identical (padding), so
/// full windows entirely inside that tail share one computed activation.
inline ForwardPass run_forward(const EmbeddingMatrix& e, const MalConvModel& m,
                               std::size_t uniform_from = std::numeric_limits<std::size_t>::max()) {
  const Hyperparams& h = m.hyper;
  const std::size_t L = h.max_len, D = h.embed_dim, K = h.kernel_size, S = h.stride;
  const std::size_t F = h.num_filters, H = h.hidden_units, W = h.num_windows();
  if (e.rows() != L || e.cols() != D)
    throw Error(ErrorCode::shape, "embedding matrix is " + std::to_string(e.rows()) + "x" +
                                      std::to_string(e.cols()) + ", model expects " + std::to_string(L) +
                                      "x" + std::to_string(D));

  ForwardPass out;
  out.pooled.assign(F, -std::numeric_limits<double>::infinity());
  out.argmax.assign(F, 0);
  out.main_at.assign(F, 0.0);
  out.gate_at.assign(F, 0.0);

  std::vector<double> main(F), gate(F), cached_main, cached_gate;
  bool have_cached = false;
  const double* values = e.values().data();
  const std::size_t filter_stride = K * D;

  for (std::size_t w = 0; w < W; ++w) {
    const std::size_t start = w * S;
    const std::size_t rows = std::min(K, L - start);
    const bool uniform = start >= uniform_from && rows == K;
    if (uniform && have_cached) {
      main = cached_main;
      gate = cached_gate;
    } else {
      const double* x = values + start * D;
      const std::size_t n = rows * D;
      for (std::size_t f = 0; f < F; ++f) {
        main[f] = m.conv_main_bias[f] + dot(m.conv_main.data() + f * filter_stride, x, n);
        gate[f] = m.conv_gate_bias[f] + dot(m.conv_gate.data() + f * filter_stride, x, n);
      }
      if (uniform) {
        cached_main = main;
        cached_gate = gate;
        have_cached = true;
      }
    }
    for (std::size_t f = 0; f < F; ++f) {
      const double act = main[f] * sigmoid(gate[f]);
      // strict comparison: ties keep the lowest window index
      if (act > out.pooled[f]) {
        out.pooled[f] = act;
        out.argmax[f] = w;
        out.main_at[f] = main[f];
        out.gate_at[f] = gate[f];
      }
    }
  }

  double logit = m.fc_out_bias[0];
  if (H > 0) {
    out.hidden_pre.assign(H, 0.0);
    for (std::size_t j = 0; j < H; ++j) {
      double pre = m.fc_hidden_bias[j];
      for (std::size_t f = 0; f < F; ++f) pre += static_cast<double>(m.fc_hidden[f * H + j]) * out.pooled[f];
      out.hidden_pre[j] = pre;
      logit += static_cast<double>(m.fc_out[j]) * std::max(pre, 0.0);
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) logit += static_cast<double>(m.fc_out[f]) * out.pooled[f];
  }
  out.logit = logit;
  out.score = sigmoid(logit);
  return out;
}

/// Backpropagates d(loss)/d(logit) through the network. Either sink may be
/// null. Embedding-table gradients need the tokens the rows came from.
inline void run_backward(const ForwardPass& fp, const EmbeddingMatrix& e, const MalConvModel& m, double dlogit,
                         GradientMatrix* input_grad, ParameterGradient* param_grad,
                         std::span<const Token> tokens = {}) {
  const Hyperparams& h = m.hyper;
  const std::size_t L = h.max_len, D = h.embed_dim, K = h.kernel_size, S = h.stride;
  const std::size_t F = h.num_filters, H = h.hidden_units;
  const std::size_t filter_stride = K * D;

  std::vector<double> dpooled(F, 0.0);
  if (H > 0) {
    for (std::size_t j = 0; j < H; ++j) {
      const double hidden = std::max(fp.hidden_pre[j], 0.0);
      const double dpre = fp.hidden_pre[j] > 0 ? dlogit * m.fc_out[j] : 0.0;
      if (param_grad) {
        param_grad->arrays[7][j] += dlogit * hidden;
        param_grad->arrays[6][j] += dpre;
      }
      if (dpre == 0.0) continue;
      for (std::size_t f = 0; f < F; ++f) {
        dpooled[f] += dpre * m.fc_hidden[f * H + j];
        if (param_grad) param_grad->arrays[5][f * H + j] += dpre * fp.pooled[f];
      }
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      dpooled[f] = dlogit * m.fc_out[f];
      if (param_grad) param_grad->arrays[7][f] += dlogit * fp.pooled[f];
    }
  }
  if (param_grad) param_grad->arrays[8][0] += dlogit;

  for (std::size_t f = 0; f < F; ++f) {
    if (dpooled[f] == 0.0) continue;
    const double sg = sigmoid(fp.gate_at[f]);
    const double dmain = dpooled[f] * sg;
    const double dgate = dpooled[f] * fp.main_at[f] * sg * (1.0 - sg);
    const std::size_t start = fp.argmax[f] * S;
    const std::size_t rows = std::min(K, L - start);
    const float* wm = m.conv_main.data() + f * filter_stride;
    const float* wg = m.conv_gate.data() + f * filter_stride;
    if (param_grad) {
      param_grad->arrays[2][f] += dmain;
      param_grad->arrays[4][f] += dgate;
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t p = start + r;
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t wi = r * D + d;
        const double dx = dmain * wm[wi] + dgate * wg[wi];
        if (input_grad) (*input_grad)(p, d) += dx;
        if (param_grad) {
          param_grad->arrays[1][f * filter_stride + wi] += dmain * e(p, d);
          param_grad->arrays[3][f * filter_stride + wi] += dgate * e(p, d);
          if (!tokens.empty()) param_grad->arrays[0][tokens[p] * D + d] += dx;
        }
      }
    }
  }
}

/// First index of the padding suffix of a token sequence.
inline std::size_t padding_start(std::span<const Token> tokens) {
  std::size_t i = tokens.size();
  while (i > 0 && tokens[i - 1] == kPaddingToken) --i;
  return i;
}

inline double target_value(Label label) { return label == Label::malware ? 1.0 : 0.0; }

}  // namespace detail

/// Fixed-length token view of a byte string: bytes as 0..255, then padding
/// token 256 up to max_len. Longer inputs are truncated.
inline std::vector<Token> tokenize(std::span<const std::uint8_t> bytes, const Hyperparams& hyper) {
  std::vector<Token> tokens(hyper.max_len, kPaddingToken);
  const std::size_t n = std::min(bytes.size(), hyper.max_len);
  for (std::size_t i = 0; i < n; ++i) tokens[i] = bytes[i];
  return tokens;
}

inline EmbeddingMatrix embed(std::span<const Token> tokens, const MalConvModel& model) {
  const std::size_t D = model.hyper.embed_dim;
  EmbeddingMatrix e(tokens.size(), D);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= model.hyper.vocab_size)
      throw Error(ErrorCode::invalid_token,
                  "token " + std::to_string(tokens[i]) + " at position " + std::to_string(i));
    const auto src = model.embedding_row(tokens[i]);
    std::copy(src.begin(), src.end(), e.row(i).begin());
  }
  return e;
}

/// Malware probability; > 0.5 means predicted malware.
inline double forward(const EmbeddingMatrix& e, const MalConvModel& model) {
  return detail::run_forward(e, model).score;
}

/// Binary cross-entropy of the model output against `target`.
inline double loss(const EmbeddingMatrix& e, Label target, const MalConvModel& model) {
  const auto fp = detail::run_forward(e, model);
  return detail::softplus(fp.logit) - detail::target_value(target) * fp.logit;
}

/// d loss / d e for the binary cross-entropy against `target`. Only rows in
/// windows that win the max-pool for some filter are nonzero.
inline GradientMatrix input_gradient(const EmbeddingMatrix& e, Label target, const MalConvModel& model) {
  const auto fp = detail::run_forward(e, model);
  GradientMatrix grad(e.rows(), e.cols());
  detail::run_backward(fp, e, model, fp.score - detail::target_value(target), &grad, nullptr);
  return grad;
}

/// Winning window index per filter (ties resolved to the lowest index).
inline std::vector<std::size_t> maxpool_argmax(const EmbeddingMatrix& e, const MalConvModel& model) {
  return detail::run_forward(e, model).argmax;
}

/// Score of a tokenized input; identical to forward(embed(tokens)) but skips
/// recomputing windows that lie entirely in the padding tail.
inline double score_tokens(std::span<const Token> tokens, const MalConvModel& model) {
  return detail::run_forward(embed(tokens, model), model, detail::padding_start(tokens)).score;
}

inline double score_bytes(std::span<const std::uint8_t> bytes, const MalConvModel& model) {
  return score_tokens(tokenize(bytes, model.hyper), model);
}

inline std::vector<std::size_t> maxpool_argmax_bytes(std::span<const std::uint8_t> bytes, const MalConvModel& model) {
  const auto tokens = tokenize(bytes, model.hyper);
  return detail::run_forward(embed(tokens, model), model, detail::padding_start(tokens)).argmax;
}

struct LossAndGradient {
  double loss = 0.0;
  double score = 0.5;
  ParameterGradient gradient;
};

/// Loss and parameter gradient for one tokenized example.
inline LossAndGradient parameter_gradient(std::span<const Token> tokens, Label label, const MalConvModel& model) {
  const auto e = embed(tokens, model);
  const auto fp = detail::run_forward(e, model, detail::padding_start(tokens));
  LossAndGradient out;
  const double y = detail::target_value(label);
  out.loss = detail::softplus(fp.logit) - y * fp.logit;
  out.score = fp.score;
  out.gradient = ParameterGradient::zeros_like(model);
  detail::run_backward(fp, e, model, fp.score - y, nullptr, &out.gradient, tokens);
  return out;
}

}  // namespace maladv
