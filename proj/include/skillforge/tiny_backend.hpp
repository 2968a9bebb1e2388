#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "skillforge/backend.hpp"
#include "skillforge/common.hpp"
#include "skillforge/text.hpp"

namespace skillforge {

namespace tiny {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

// out = x * w, with x: L x d over a raw parameter block w: d x c.
inline Mat matmul(const Mat& x, const double* w, std::size_t wr, std::size_t wc) {
  Mat out(x.rows, wc);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t k = 0; k < wr; ++k) {
      const double xv = x(i, k);
      if (xv == 0.0) continue;
      const double* wrow = w + k * wc;
      double* orow = out.a.data() + i * wc;
      for (std::size_t j = 0; j < wc; ++j) orow[j] += xv * wrow[j];
    }
  }
  return out;
}

inline void softmax_row(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
}

}  // namespace tiny

struct TinyBackendConfig {
  std::size_t dim = 32;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 576;
  std::uint64_t seed = 1;
  double init_std = 0.05;
  std::string eos_token = "</s>";
  std::string pad_token = "<pad>";
  std::string unk_token = "<unk>";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// A from-scratch word-level encoder-decoder with one self-attention +
// feed-forward block on each side and single-head cross attention, trained
// with Adam. Small enough to gradient-check and to run desk-scale
// experiments in seconds; implements the full backend capability surface.
class TinyBackend final : public Seq2SeqBackend {
 public:
  TinyBackend(std::vector<std::string> vocab, TinyBackendConfig config = {})
      : cfg_(std::move(config)) {
    for (const auto& tok : {cfg_.pad_token, cfg_.unk_token, cfg_.eos_token}) {
      if (std::find(vocab.begin(), vocab.end(), tok) == vocab.end()) vocab.push_back(tok);
    }
    vocab_ = std::move(vocab);
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!id_of_.emplace(vocab_[i], static_cast<int>(i)).second) {
        throw ConfigError("duplicate vocabulary token: '" + vocab_[i] + "'");
      }
    }
    pad_id_ = id_of_.at(cfg_.pad_token);
    unk_id_ = id_of_.at(cfg_.unk_token);
    eos_id_ = id_of_.at(cfg_.eos_token);
    layout_params();
    init_params();
  }

  std::string name() const override { return "tiny"; }
  std::size_t vocab_size() const override { return vocab_.size(); }
  int eos_id() const override { return eos_id_; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }
  const TinyBackendConfig& config() const { return cfg_; }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> ids;
    for (const auto& tok : whitespace_tokens(text)) {
      const auto it = id_of_.find(tok);
      ids.push_back(it == id_of_.end() ? unk_id_ : it->second);
    }
    return ids;
  }

  std::string detokenize(std::span<const int> ids) const override {
    std::vector<std::string> toks;
    for (const int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
        throw DataError("token id out of range: " + std::to_string(id));
      }
      toks.push_back(vocab_[static_cast<std::size_t>(id)]);
    }
    return join_tokens(toks);
  }

  // Word-level vocabulary: every known token already maps to a single id.
  // Registration therefore verifies presence rather than re-segmenting.
  void register_special_tokens(const std::vector<std::string>& tokens) override {
    for (const auto& tok : tokens) {
      if (!id_of_.contains(tok)) {
        throw ConfigError("special token '" + tok + "' missing from backend vocabulary");
      }
    }
  }

  double loss(const std::vector<TokenizedPair>& batch, bool accumulate_gradients = false) override {
    if (batch.empty()) throw TrainError("loss: empty batch");
    std::size_t total_tokens = 0;
    for (const auto& ex : batch) {
      if (ex.decoder_ids.empty()) throw TrainError("loss: empty decoder target");
      total_tokens += ex.decoder_ids.size();
    }
    double nll_sum = 0.0;
    const double weight = 1.0 / static_cast<double>(total_tokens);
    for (const auto& ex : batch) {
      Cache c;
      nll_sum += forward(ex.encoder_ids, decoder_input(ex.decoder_ids), ex.decoder_ids, c);
      if (accumulate_gradients) backward(ex.encoder_ids, ex.decoder_ids, c, weight);
    }
    const double value = nll_sum * weight;
    if (!std::isfinite(value)) throw TrainError("loss: non-finite value");
    return value;
  }

  void apply_gradient_step(double learning_rate) override {
    ++adam_t_;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const double g = grads_[i];
      adam_m_[i] = b1 * adam_m_[i] + (1.0 - b1) * g;
      adam_v_[i] = b2 * adam_v_[i] + (1.0 - b2) * g * g;
      const double mhat = adam_m_[i] / corr1;
      const double vhat = adam_v_[i] / corr2;
      params_[i] -= learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
    std::fill(grads_.begin(), grads_.end(), 0.0);
  }

  void reset_optimizer() override {
    std::fill(adam_m_.begin(), adam_m_.end(), 0.0);
    std::fill(adam_v_.begin(), adam_v_.end(), 0.0);
    std::fill(grads_.begin(), grads_.end(), 0.0);
    adam_t_ = 0;
  }

  std::vector<double> next_token_distribution(std::span<const int> encoder_ids,
                                              std::span<const int> decoder_prefix) override {
    std::vector<int> din = {pad_id_};
    din.insert(din.end(), decoder_prefix.begin(), decoder_prefix.end());
    Cache c;
    forward({encoder_ids.begin(), encoder_ids.end()}, din, {}, c);
    const std::size_t last = din.size() - 1;
    std::vector<double> dist(vocab_.size());
    for (std::size_t v = 0; v < vocab_.size(); ++v) dist[v] = c.probs(last, v);
    return dist;
  }

  std::vector<double> snapshot() const override { return params_; }

  void restore(const std::vector<double>& params) override {
    if (params.size() != params_.size()) throw TrainError("restore: parameter size mismatch");
    params_ = params;
  }

  // Gradient access for verification harnesses.
  const std::vector<double>& parameters() const { return params_; }
  std::vector<double>& mutable_parameters() { return params_; }
  const std::vector<double>& gradients() const { return grads_; }
  void zero_gradients() { std::fill(grads_.begin(), grads_.end(), 0.0); }
  struct ParamGroup {
    std::string name;
    std::size_t offset;
    std::size_t size;
  };
  std::vector<ParamGroup> parameter_groups() const {
    std::vector<ParamGroup> out;
    for (const auto& v : views_) out.push_back({v.name, v.offset, v.rows * v.cols});
    return out;
  }

  void save(const std::filesystem::path& path) const override {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    const auto put_u64 = [&](std::uint64_t v) {
      char buf[8];
      for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
      out.write(buf, 8);
    };
    const auto put_str = [&](const std::string& s) {
      put_u64(s.size());
      out.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    out.write("SFTB", 4);
    put_u64(1); // format version
    put_u64(cfg_.dim);
    put_u64(cfg_.ffn_dim);
    put_u64(cfg_.max_len);
    put_str(cfg_.eos_token);
    put_str(cfg_.pad_token);
    put_str(cfg_.unk_token);
    put_u64(vocab_.size());
    for (const auto& tok : vocab_) put_str(tok);
    put_u64(params_.size());
    for (const double p : params_) {
      std::uint64_t bits;
      std::memcpy(&bits, &p, 8);
      put_u64(bits);
    }
    if (!out) throw DataError("checkpoint write failed: " + path.string());
  }

  static std::unique_ptr<TinyBackend> load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    const auto get_u64 = [&]() {
      char buf[8];
      in.read(buf, 8);
      if (!in) throw DataError("truncated checkpoint: " + path.string());
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
      return v;
    };
    const auto get_str = [&]() {
      const std::uint64_t n = get_u64();
      std::string s(n, '\0');
      in.read(s.data(), static_cast<std::streamsize>(n));
      if (!in) throw DataError("truncated checkpoint: " + path.string());
      return s;
    };
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string_view(magic, 4) != "SFTB") {
      throw DataError("not a tiny-backend checkpoint: " + path.string());
    }
    if (get_u64() != 1) throw DataError("unsupported checkpoint version: " + path.string());
    TinyBackendConfig cfg;
    cfg.dim = get_u64();
    cfg.ffn_dim = get_u64();
    cfg.max_len = get_u64();
    cfg.eos_token = get_str();
    cfg.pad_token = get_str();
    cfg.unk_token = get_str();
    std::vector<std::string> vocab(get_u64());
    for (auto& tok : vocab) tok = get_str();
    auto backend = std::make_unique<TinyBackend>(std::move(vocab), cfg);
    const std::uint64_t n_params = get_u64();
    if (n_params != backend->params_.size()) {
      throw DataError("checkpoint parameter count mismatch: " + path.string());
    }
    for (auto& p : backend->params_) {
      const std::uint64_t bits = get_u64();
      std::memcpy(&p, &bits, 8);
    }
    return backend;
  }

 private:
  struct View {
    std::string name;
    std::size_t offset = 0, rows = 0, cols = 0;
  };

  const double* P(std::size_t idx) const { return params_.data() + views_[idx].offset; }
  double* G(std::size_t idx) { return grads_.data() + views_[idx].offset; }

  enum ViewId : std::size_t {
    kEmbed, kPosEnc, kPosDec,
    kEncWq, kEncWk, kEncWv, kEncW1, kEncB1, kEncW2, kEncB2,
    kDecWq, kDecWk, kDecWv, kXWq, kXWk, kXWv,
    kDecW1, kDecB1, kDecW2, kDecB2,
    kOutW, kOutB, kViewCount
  };

  void layout_params() {
    const std::size_t V = vocab_.size(), d = cfg_.dim, f = cfg_.ffn_dim, L = cfg_.max_len;
    const auto add = [&](std::string name, std::size_t r, std::size_t c) {
      View v{std::move(name), next_offset_, r, c};
      next_offset_ += r * c;
      views_.push_back(std::move(v));
    };
    add("embed", V, d);
    add("pos_enc", L, d);
    add("pos_dec", L, d);
    add("enc_wq", d, d);
    add("enc_wk", d, d);
    add("enc_wv", d, d);
    add("enc_w1", d, f);
    add("enc_b1", 1, f);
    add("enc_w2", f, d);
    add("enc_b2", 1, d);
    add("dec_wq", d, d);
    add("dec_wk", d, d);
    add("dec_wv", d, d);
    add("x_wq", d, d);
    add("x_wk", d, d);
    add("x_wv", d, d);
    add("dec_w1", d, f);
    add("dec_b1", 1, f);
    add("dec_w2", f, d);
    add("dec_b2", 1, d);
    add("out_w", d, V);
    add("out_b", 1, V);
    params_.assign(next_offset_, 0.0);
    grads_.assign(next_offset_, 0.0);
    adam_m_.assign(next_offset_, 0.0);
    adam_v_.assign(next_offset_, 0.0);
  }

  void init_params() {
    rng::Engine eng(cfg_.seed);
    for (const auto& v : views_) {
      const bool bias = v.name.find("_b") != std::string::npos && v.rows == 1;
      if (bias) continue; // biases start at zero
      for (std::size_t i = 0; i < v.rows * v.cols; ++i) {
        params_[v.offset + i] = cfg_.init_std * rng::normal(eng);
      }
    }
  }

  std::vector<int> decoder_input(const std::vector<int>& target) const {
    std::vector<int> din;
    din.reserve(target.size());
    din.push_back(pad_id_);
    din.insert(din.end(), target.begin(), target.end() - 1);
    return din;
  }

  struct Cache {
    std::vector<int> enc_ids, dec_in;
    tiny::Mat x0, eq, ek, ev, ea, x1, eu, eh, x2;
    tiny::Mat y0, dq, dk, dv, da, y1;
    tiny::Mat xq, xk, xv, xa, y2;
    tiny::Mat du, dh, y3;
    tiny::Mat probs;
  };

  // Returns the sum of token NLLs when `target` is non-empty, else 0.
  double forward(const std::vector<int>& enc_ids, const std::vector<int>& dec_in,
                 const std::vector<int>& target, Cache& c) const {
    const std::size_t d = cfg_.dim, f = cfg_.ffn_dim, V = vocab_.size();
    const std::size_t Le = enc_ids.size(), Ld = dec_in.size();
    if (Le == 0) throw TrainError("forward: empty encoder sequence");
    if (Le > cfg_.max_len || Ld > cfg_.max_len) {
      throw TrainError("forward: sequence exceeds backend max length " +
                       std::to_string(cfg_.max_len));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    c.enc_ids = enc_ids;
    c.dec_in = dec_in;

    // Encoder
    c.x0 = tiny::Mat(Le, d);
    for (std::size_t i = 0; i < Le; ++i) {
      const int id = check_id(enc_ids[i]);
      const double* e = P(kEmbed) + static_cast<std::size_t>(id) * d;
      const double* p = P(kPosEnc) + i * d;
      for (std::size_t j = 0; j < d; ++j) c.x0(i, j) = e[j] + p[j];
    }
    c.eq = tiny::matmul(c.x0, P(kEncWq), d, d);
    c.ek = tiny::matmul(c.x0, P(kEncWk), d, d);
    c.ev = tiny::matmul(c.x0, P(kEncWv), d, d);
    c.ea = tiny::Mat(Le, Le);
    for (std::size_t i = 0; i < Le; ++i) {
      for (std::size_t j = 0; j < Le; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += c.eq(i, k) * c.ek(j, k);
        c.ea(i, j) = s * scale;
      }
      tiny::softmax_row(c.ea.a.data() + i * Le, Le);
    }
    c.x1 = tiny::Mat(Le, d);
    for (std::size_t i = 0; i < Le; ++i) {
      for (std::size_t j = 0; j < Le; ++j) {
        const double a = c.ea(i, j);
        if (a == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) c.x1(i, k) += a * c.ev(j, k);
      }
      for (std::size_t k = 0; k < d; ++k) c.x1(i, k) += c.x0(i, k);
    }
    c.eu = tiny::matmul(c.x1, P(kEncW1), d, f);
    c.eh = tiny::Mat(Le, f);
    for (std::size_t i = 0; i < Le; ++i) {
      for (std::size_t j = 0; j < f; ++j) {
        c.eu(i, j) += P(kEncB1)[j];
        c.eh(i, j) = c.eu(i, j) > 0.0 ? c.eu(i, j) : 0.0;
      }
    }
    c.x2 = tiny::matmul(c.eh, P(kEncW2), f, d);
    for (std::size_t i = 0; i < Le; ++i) {
      for (std::size_t j = 0; j < d; ++j) c.x2(i, j) += c.x1(i, j) + P(kEncB2)[j];
    }

    // Decoder
    c.y0 = tiny::Mat(Ld, d);
    for (std::size_t i = 0; i < Ld; ++i) {
      const int id = check_id(dec_in[i]);
      const double* e = P(kEmbed) + static_cast<std::size_t>(id) * d;
      const double* p = P(kPosDec) + i * d;
      for (std::size_t j = 0; j < d; ++j) c.y0(i, j) = e[j] + p[j];
    }
    c.dq = tiny::matmul(c.y0, P(kDecWq), d, d);
    c.dk = tiny::matmul(c.y0, P(kDecWk), d, d);
    c.dv = tiny::matmul(c.y0, P(kDecWv), d, d);
    c.da = tiny::Mat(Ld, Ld);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += c.dq(i, k) * c.dk(j, k);
        c.da(i, j) = s * scale;
      }
      tiny::softmax_row(c.da.a.data() + i * Ld, i + 1); // causal: only j <= i
    }
    c.y1 = tiny::Mat(Ld, d);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        const double a = c.da(i, j);
        if (a == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) c.y1(i, k) += a * c.dv(j, k);
      }
      for (std::size_t k = 0; k < d; ++k) c.y1(i, k) += c.y0(i, k);
    }
    c.xq = tiny::matmul(c.y1, P(kXWq), d, d);
    c.xk = tiny::matmul(c.x2, P(kXWk), d, d);
    c.xv = tiny::matmul(c.x2, P(kXWv), d, d);
    c.xa = tiny::Mat(Ld, Le);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < Le; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += c.xq(i, k) * c.xk(j, k);
        c.xa(i, j) = s * scale;
      }
      tiny::softmax_row(c.xa.a.data() + i * Le, Le);
    }
    c.y2 = tiny::Mat(Ld, d);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < Le; ++j) {
        const double a = c.xa(i, j);
        if (a == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) c.y2(i, k) += a * c.xv(j, k);
      }
      for (std::size_t k = 0; k < d; ++k) c.y2(i, k) += c.y1(i, k);
    }
    c.du = tiny::matmul(c.y2, P(kDecW1), d, f);
    c.dh = tiny::Mat(Ld, f);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < f; ++j) {
        c.du(i, j) += P(kDecB1)[j];
        c.dh(i, j) = c.du(i, j) > 0.0 ? c.du(i, j) : 0.0;
      }
    }
    c.y3 = tiny::matmul(c.dh, P(kDecW2), f, d);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < d; ++j) c.y3(i, j) += c.y2(i, j) + P(kDecB2)[j];
    }
    c.probs = tiny::matmul(c.y3, P(kOutW), d, V);
    double nll = 0.0;
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < V; ++j) c.probs(i, j) += P(kOutB)[j];
      tiny::softmax_row(c.probs.a.data() + i * V, V);
      if (!target.empty()) {
        const double p = c.probs(i, static_cast<std::size_t>(check_id(target[i])));
        nll -= std::log(std::max(p, 1e-300));
      }
    }
    return nll;
  }

  // dOut = dX * W^T accumulated into dX-like matrix; also dW += X^T * dOut.
  void backprop_matmul(const tiny::Mat& x, ViewId w, const tiny::Mat& dout, tiny::Mat& dx) {
    const View& v = views_[w];
    double* gw = G(w);
    const double* pw = params_.data() + v.offset;
    for (std::size_t i = 0; i < x.rows; ++i) {
      for (std::size_t k = 0; k < v.rows; ++k) {
        const double xv = x(i, k);
        double acc = 0.0;
        const double* drow = dout.a.data() + i * v.cols;
        const double* wrow = pw + k * v.cols;
        double* grow = gw + k * v.cols;
        for (std::size_t j = 0; j < v.cols; ++j) {
          grow[j] += xv * drow[j];
          acc += wrow[j] * drow[j];
        }
        dx(i, k) += acc;
      }
    }
  }

  // Softmax jacobian-vector product per row: ds = a .* (da - sum(da .* a)).
  static void softmax_backward_row(const double* a, const double* da, double* ds, std::size_t n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += da[j] * a[j];
    for (std::size_t j = 0; j < n; ++j) ds[j] = a[j] * (da[j] - dot);
  }

  void backward(const std::vector<int>& enc_ids, const std::vector<int>& target, Cache& c,
                double weight) {
    const std::size_t d = cfg_.dim, f = cfg_.ffn_dim, V = vocab_.size();
    const std::size_t Le = enc_ids.size(), Ld = c.dec_in.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    // Output softmax + cross entropy
    tiny::Mat dz(Ld, V);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < V; ++j) dz(i, j) = c.probs(i, j) * weight;
      dz(i, static_cast<std::size_t>(target[i])) -= weight;
    }
    tiny::Mat dy3(Ld, d);
    backprop_matmul(c.y3, kOutW, dz, dy3);
    for (std::size_t i = 0; i < Ld; ++i) {
      for (std::size_t j = 0; j < V; ++j) G(kOutB)[j] += dz(i, j);
    }

    // Decoder FFN
    tiny::Mat dy2 = dy3; // residual
    {
      tiny::Mat ddh(Ld, f);
      backprop_matmul(c.dh, kDecW2, dy3, ddh);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j < d; ++j) G(kDecB2)[j] += dy3(i, j);
      }
      tiny::Mat ddu(Ld, f);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j < f; ++j) ddu(i, j) = c.du(i, j) > 0.0 ? ddh(i, j) : 0.0;
      }
      backprop_matmul(c.y2, kDecW1, ddu, dy2);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j < f; ++j) G(kDecB1)[j] += ddu(i, j);
      }
    }

    // Cross attention
    tiny::Mat dy1 = dy2; // residual
    tiny::Mat dx2(Le, d);
    {
      tiny::Mat dxa(Ld, Le);
      tiny::Mat dxv(Le, d);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j < Le; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += dy2(i, k) * c.xv(j, k);
          dxa(i, j) = s;
          const double a = c.xa(i, j);
          if (a != 0.0) {
            for (std::size_t k = 0; k < d; ++k) dxv(j, k) += a * dy2(i, k);
          }
        }
      }
      tiny::Mat ds(Ld, Le);
      for (std::size_t i = 0; i < Ld; ++i) {
        softmax_backward_row(c.xa.a.data() + i * Le, dxa.a.data() + i * Le,
                             ds.a.data() + i * Le, Le);
      }
      tiny::Mat dxq(Ld, d);
      tiny::Mat dxk(Le, d);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j < Le; ++j) {
          const double g = ds(i, j) * scale;
          if (g == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) {
            dxq(i, k) += g * c.xk(j, k);
            dxk(j, k) += g * c.xq(i, k);
          }
        }
      }
      backprop_matmul(c.y1, kXWq, dxq, dy1);
      backprop_matmul(c.x2, kXWk, dxk, dx2);
      backprop_matmul(c.x2, kXWv, dxv, dx2);
    }

    // Decoder causal self-attention
    tiny::Mat dy0 = dy1; // residual
    {
      tiny::Mat dda(Ld, Ld);
      tiny::Mat ddv(Ld, d);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += dy1(i, k) * c.dv(j, k);
          dda(i, j) = s;
          const double a = c.da(i, j);
          if (a != 0.0) {
            for (std::size_t k = 0; k < d; ++k) ddv(j, k) += a * dy1(i, k);
          }
        }
      }
      tiny::Mat ds(Ld, Ld);
      for (std::size_t i = 0; i < Ld; ++i) {
        softmax_backward_row(c.da.a.data() + i * Ld, dda.a.data() + i * Ld,
                             ds.a.data() + i * Ld, i + 1);
      }
      tiny::Mat ddq(Ld, d);
      tiny::Mat ddk(Ld, d);
      for (std::size_t i = 0; i < Ld; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          const double g = ds(i, j) * scale;
          if (g == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) {
            ddq(i, k) += g * c.dk(j, k);
            ddk(j, k) += g * c.dq(i, k);
          }
        }
      }
      backprop_matmul(c.y0, kDecWq, ddq, dy0);
      backprop_matmul(c.y0, kDecWk, ddk, dy0);
      backprop_matmul(c.y0, kDecWv, ddv, dy0);
    }
    for (std::size_t i = 0; i < Ld; ++i) {
      const std::size_t id = static_cast<std::size_t>(c.dec_in[i]);
      for (std::size_t j = 0; j < d; ++j) {
        G(kEmbed)[id * d + j] += dy0(i, j);
        G(kPosDec)[i * d + j] += dy0(i, j);
      }
    }

    // Encoder FFN
    tiny::Mat dx1 = dx2; // residual
    {
      tiny::Mat deh(Le, f);
      backprop_matmul(c.eh, kEncW2, dx2, deh);
      for (std::size_t i = 0; i < Le; ++i) {
        for (std::size_t j = 0; j < d; ++j) G(kEncB2)[j] += dx2(i, j);
      }
      tiny::Mat deu(Le, f);
      for (std::size_t i = 0; i < Le; ++i) {
        for (std::size_t j = 0; j < f; ++j) deu(i, j) = c.eu(i, j) > 0.0 ? deh(i, j) : 0.0;
      }
      backprop_matmul(c.x1, kEncW1, deu, dx1);
      for (std::size_t i = 0; i < Le; ++i) {
        for (std::size_t j = 0; j < f; ++j) G(kEncB1)[j] += deu(i, j);
      }
    }

    // Encoder self-attention
    tiny::Mat dx0 = dx1; // residual
    {
      tiny::Mat dea(Le, Le);
      tiny::Mat dev(Le, d);
      for (std::size_t i = 0; i < Le; ++i) {
        for (std::size_t j = 0; j < Le; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += dx1(i, k) * c.ev(j, k);
          dea(i, j) = s;
          const double a = c.ea(i, j);
          if (a != 0.0) {
            for (std::size_t k = 0; k < d; ++k) dev(j, k) += a * dx1(i, k);
          }
        }
      }
      tiny::Mat ds(Le, Le);
      for (std::size_t i = 0; i < Le; ++i) {
        softmax_backward_row(c.ea.a.data() + i * Le, dea.a.data() + i * Le,
                             ds.a.data() + i * Le, Le);
      }
      tiny::Mat deq(Le, d);
      tiny::Mat dek(Le, d);
      for (std::size_t i = 0; i < Le; ++i) {
        for (std::size_t j = 0; j < Le; ++j) {
          const double g = ds(i, j) * scale;
          if (g == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) {
            deq(i, k) += g * c.ek(j, k);
            dek(j, k) += g * c.eq(i, k);
          }
        }
      }
      backprop_matmul(c.x0, kEncWq, deq, dx0);
      backprop_matmul(c.x0, kEncWk, dek, dx0);
      backprop_matmul(c.x0, kEncWv, dev, dx0);
    }
    for (std::size_t i = 0; i < Le; ++i) {
      const std::size_t id = static_cast<std::size_t>(c.enc_ids[i]);
      for (std::size_t j = 0; j < d; ++j) {
        G(kEmbed)[id * d + j] += dx0(i, j);
        G(kPosEnc)[i * d + j] += dx0(i, j);
      }
    }
  }

  int check_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      throw TrainError("token id out of range: " + std::to_string(id));
    }
    return id;
  }

  TinyBackendConfig cfg_;
  std::vector<std::string> vocab_;
  std::map<std::string, int> id_of_;
  int pad_id_ = 0, unk_id_ = 0, eos_id_ = 0;

  std::vector<View> views_;
  std::size_t next_offset_ = 0;
  std::vector<double> params_, grads_, adam_m_, adam_v_;
  std::uint64_t adam_t_ = 0;
};

// Convenience factory mirroring the module operation name.
inline std::unique_ptr<TinyBackend> tiny_reference_backend(std::vector<std::string> vocab,
                                                           TinyBackendConfig config = {}) {
  return std::make_unique<TinyBackend>(std::move(vocab), config);
}

}  // namespace skillforge
