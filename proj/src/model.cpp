#include "rvt/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "rvt/random.hpp"

namespace rvt {

using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

using ConstRowMap = Eigen::Map<const RowVector>;
using RowMap = Eigen::Map<RowVector>;

struct NormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};

Matrix layer_norm(const Matrix& x, const ConstRowMap& g, const ConstRowMap& b, NormCache* cache) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  Matrix xhat(n, x.cols());
  Eigen::VectorXd rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const RowVector centered = x.row(i).array() - mu;
    const double var = centered.squaredNorm() / d;
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = centered * rstd(i);
  }
  Matrix y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

// Returns dx; accumulates into dg, db.
Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const ConstRowMap& g, RowMap dg,
                           RowMap db) {
  dg += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * g.array();
  const double d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) = cache.rstd(i) *
                (dxhat.row(i).array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mask;
}

// Log-sum-exp of one row.
double log_sum_exp(const Eigen::Ref<const RowVector>& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0) throw std::invalid_argument("model dimensions must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (vocab_size == 0) throw std::invalid_argument("vocab_size must be positive");
  if (n_segments == 0 || max_positions == 0) throw std::invalid_argument("segments and positions must be positive");
  if (feature_dim == 0 || vc_dim == 0) throw std::invalid_argument("visual dims must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
}

std::string ModelConfig::to_json() const {
  json j{{"n_layers", n_layers},       {"n_heads", n_heads},         {"d_model", d_model},
         {"vocab_size", vocab_size},   {"n_segments", n_segments},   {"max_positions", max_positions},
         {"feature_dim", feature_dim}, {"vc_dim", vc_dim},           {"dropout", dropout},
         {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_segments = j.value("n_segments", c.n_segments);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.vc_dim = j.value("vc_dim", c.vc_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Layout and initialization

struct TransformerLM::Cache {
  struct Layer {
    NormCache ln1;
    Matrix a;
    Matrix qkv;
    std::vector<Matrix> probs;
    Matrix y;
    Matrix attn_drop;
    NormCache ln2;
    Matrix m;
    Matrix fc_pre;
    Matrix fc_act;
    Matrix mlp_drop;
  };
  Matrix embed_drop;
  std::vector<Layer> layers;
  NormCache lnf;
};

TransformerLM::TransformerLM(ModelConfig config) : config_(config) {
  config_.validate();
  const auto d = config_.d_model;
  add_tensor("tok_emb", config_.vocab_size, d, true);
  add_tensor("seg_emb", config_.n_segments, d, true);
  add_tensor("pos_emb", config_.max_positions, d, true);
  add_tensor("head_b", 1, config_.vocab_size, false);
  add_tensor("vis.feat_w", config_.feature_dim, d, true);
  add_tensor("vis.feat_b", 1, d, false);
  add_tensor("vis.coord_w", 5, d, true);
  add_tensor("vis.coord_b", 1, d, false);
  add_tensor("vis.ln_g", 1, d, false);
  add_tensor("vis.ln_b", 1, d, false);
  add_tensor("vis.vc_w", config_.vc_dim, d, true);
  add_tensor("vis.vc_b", 1, d, false);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add_tensor(p + "ln1_g", 1, d, false);
    add_tensor(p + "ln1_b", 1, d, false);
    add_tensor(p + "attn_w", d, 3 * d, true);
    add_tensor(p + "attn_b", 1, 3 * d, false);
    add_tensor(p + "proj_w", d, d, true);
    add_tensor(p + "proj_b", 1, d, false);
    add_tensor(p + "ln2_g", 1, d, false);
    add_tensor(p + "ln2_b", 1, d, false);
    add_tensor(p + "fc_w", d, 4 * d, true);
    add_tensor(p + "fc_b", 1, 4 * d, false);
    add_tensor(p + "out_w", 4 * d, d, true);
    add_tensor(p + "out_b", 1, d, false);
  }
  add_tensor("lnf_g", 1, d, false);
  add_tensor("lnf_b", 1, d, false);
  params_.assign(tensors_.back().offset + tensors_.back().size(), 0.0);
  initialize();
}

void TransformerLM::add_tensor(const std::string& name, std::size_t rows, std::size_t cols, bool decay) {
  const std::size_t offset = tensors_.empty() ? 0 : tensors_.back().offset + tensors_.back().size();
  by_name_.emplace(name, tensors_.size());
  tensors_.push_back({name, rows, cols, offset, decay});
}

void TransformerLM::initialize() {
  Rng rng(config_.seed);
  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (const auto& t : tensors_) {
    auto m = mat(t.name);
    const auto ends_with = [&](std::string_view suffix) {
      return t.name.size() >= suffix.size() &&
             t.name.compare(t.name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with("_g")) {
      m.setOnes();
    } else if (ends_with("_b")) {
      m.setZero();
    } else {
      const double std = ends_with("proj_w") || ends_with("out_w") ? residual_std
                         : t.name == "pos_emb"                      ? 0.01
                                                                    : 0.02;
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std;
    }
  }
  round_to_storage_precision();
}

const TensorInfo& TransformerLM::tensor(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("no parameter tensor " + name);
  return tensors_[it->second];
}

Eigen::Map<Matrix> TransformerLM::mat(const std::string& name) {
  const auto& t = tensor(name);
  return {params_.data() + t.offset, static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)};
}

Eigen::Map<const Matrix> TransformerLM::mat(const std::string& name) const {
  const auto& t = tensor(name);
  return {params_.data() + t.offset, static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)};
}

void TransformerLM::round_to_storage_precision() {
  for (auto& p : params_) p = static_cast<double>(static_cast<float>(p));
}

// ---------------------------------------------------------------------------
// Forward

void TransformerLM::check_sequence(const FusedSequence& seq) const {
  const std::size_t n = seq.token_ids.size();
  if (n == 0) throw std::invalid_argument("empty sequence");
  if (seq.segment_ids.size() != n || seq.position_ids.size() != n)
    throw std::invalid_argument("sequence lists differ in length");
  if (n > config_.max_positions) throw std::invalid_argument("sequence longer than max_positions");
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.token_ids[i] < 0 || static_cast<std::size_t>(seq.token_ids[i]) >= config_.vocab_size)
      throw std::invalid_argument("token id outside vocabulary");
    if (seq.segment_ids[i] < 0 || static_cast<std::size_t>(seq.segment_ids[i]) >= config_.n_segments)
      throw std::invalid_argument("segment id outside range");
    if (seq.position_ids[i] < 0 || static_cast<std::size_t>(seq.position_ids[i]) >= config_.max_positions)
      throw std::invalid_argument("position id outside range");
  }
  for (const auto& s : seq.visual_slots) {
    if (s.index >= n) throw std::invalid_argument("visual slot index outside sequence");
    if (s.kind == SlotKind::VcStart) {
      if (s.embedding_ref >= seq.vc_vectors.size() || seq.vc_vectors[s.embedding_ref].size() != config_.vc_dim)
        throw std::invalid_argument("inference embedding dim does not match config");
    } else if (s.embedding_ref >= seq.regions.size() ||
               seq.regions[s.embedding_ref].feature.size() != config_.feature_dim) {
      throw std::invalid_argument("region feature dim does not match config");
    }
  }
}

Matrix TransformerLM::embed(const FusedSequence& seq) const {
  check_sequence(seq);
  const auto n = static_cast<Eigen::Index>(seq.size());
  Matrix e(n, static_cast<Eigen::Index>(config_.d_model));
  const auto tok = mat("tok_emb");
  const auto seg = mat("seg_emb");
  const auto pos = mat("pos_emb");
  for (Eigen::Index i = 0; i < n; ++i)
    e.row(i) = tok.row(seq.token_ids[i]) + seg.row(seq.segment_ids[i]) + pos.row(seq.position_ids[i]);

  const auto row = [&](const std::string& name) {
    const auto& t = tensor(name);
    return ConstRowMap(params_.data() + t.offset, static_cast<Eigen::Index>(t.size()));
  };
  std::vector<std::optional<RowVector>> region_embedding(seq.regions.size());
  for (const auto& s : seq.visual_slots) {
    if (s.kind == SlotKind::VcStart) {
      const auto& v = seq.vc_vectors[s.embedding_ref];
      const Eigen::Map<const Eigen::VectorXf> vf(v.data(), static_cast<Eigen::Index>(v.size()));
      e.row(static_cast<Eigen::Index>(s.index)) +=
          vf.cast<double>().transpose() * mat("vis.vc_w") + row("vis.vc_b");
      continue;
    }
    auto& emb = region_embedding[s.embedding_ref];
    if (!emb) {
      const auto& r = seq.regions[s.embedding_ref];
      const Eigen::Map<const Eigen::VectorXf> f(r.feature.data(), static_cast<Eigen::Index>(r.feature.size()));
      const Eigen::Map<const Eigen::Matrix<double, 1, 5>> c(r.coords.values.data());
      Matrix z = f.cast<double>().transpose() * mat("vis.feat_w") + c * mat("vis.coord_w");
      z.row(0) += row("vis.feat_b") + row("vis.coord_b");
      emb = RowVector(layer_norm(z, row("vis.ln_g"), row("vis.ln_b"), nullptr).row(0));
    }
    e.row(static_cast<Eigen::Index>(s.index)) += *emb;
  }
  return e;
}

Matrix TransformerLM::hidden_states(const FusedSequence& seq, Cache* cache, Rng* dropout_rng) const {
  Matrix x = embed(seq);
  const double p = dropout_rng ? config_.dropout : 0.0;
  if (p > 0.0) {
    cache->embed_drop = dropout_mask(x.rows(), x.cols(), p, *dropout_rng);
    x.array() *= cache->embed_drop.array();
  }
  return run_blocks(std::move(x), cache, p > 0.0 ? dropout_rng : nullptr);
}

Matrix TransformerLM::run_blocks(Matrix x, Cache* cache, Rng* dropout_rng) const {
  const double p = dropout_rng ? config_.dropout : 0.0;
  const auto row = [&](const std::string& name) {
    const auto& t = tensor(name);
    return ConstRowMap(params_.data() + t.offset, static_cast<Eigen::Index>(t.size()));
  };
  const auto n = x.rows();
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto heads = static_cast<Eigen::Index>(config_.n_heads);
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (cache) cache->layers.resize(config_.n_layers);

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "h" + std::to_string(l) + ".";
    Cache::Layer* lc = cache ? &cache->layers[l] : nullptr;
    Matrix a = layer_norm(x, row(pre + "ln1_g"), row(pre + "ln1_b"), lc ? &lc->ln1 : nullptr);
    Matrix qkv = (a * mat(pre + "attn_w")).rowwise() + row(pre + "attn_b");
    Matrix y(n, d);
    if (lc) lc->probs.resize(static_cast<std::size_t>(heads));
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto q = qkv.middleCols(h * dh, dh);
      const auto k = qkv.middleCols(d + h * dh, dh);
      const auto v = qkv.middleCols(2 * d + h * dh, dh);
      Matrix probs = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        RowVector s = (q.row(i) * k.topRows(i + 1).transpose()) * inv_sqrt;
        const double m = s.maxCoeff();
        s = (s.array() - m).exp();
        probs.row(i).head(i + 1) = s / s.sum();
      }
      y.middleCols(h * dh, dh) = probs * v;
      if (lc) lc->probs[static_cast<std::size_t>(h)] = std::move(probs);
    }
    Matrix attn_out = (y * mat(pre + "proj_w")).rowwise() + row(pre + "proj_b");
    if (p > 0.0) {
      lc->attn_drop = dropout_mask(n, d, p, *dropout_rng);
      attn_out.array() *= lc->attn_drop.array();
    }
    x += attn_out;
    if (lc) {
      lc->a = std::move(a);
      lc->qkv = std::move(qkv);
      lc->y = std::move(y);
    }
    Matrix m = layer_norm(x, row(pre + "ln2_g"), row(pre + "ln2_b"), lc ? &lc->ln2 : nullptr);
    Matrix fc_pre = (m * mat(pre + "fc_w")).rowwise() + row(pre + "fc_b");
    Matrix fc_act = fc_pre.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp_out = (fc_act * mat(pre + "out_w")).rowwise() + row(pre + "out_b");
    if (p > 0.0) {
      lc->mlp_drop = dropout_mask(n, d, p, *dropout_rng);
      mlp_out.array() *= lc->mlp_drop.array();
    }
    x += mlp_out;
    if (lc) {
      lc->m = std::move(m);
      lc->fc_pre = std::move(fc_pre);
      lc->fc_act = std::move(fc_act);
    }
  }
  return layer_norm(x, row("lnf_g"), row("lnf_b"), cache ? &cache->lnf : nullptr);
}

Matrix TransformerLM::forward(const FusedSequence& seq) const {
  const Matrix h = hidden_states(seq, nullptr, nullptr);
  const auto& hb = tensor("head_b");
  const ConstRowMap bias(params_.data() + hb.offset, static_cast<Eigen::Index>(hb.size()));
  return (h * mat("tok_emb").transpose()).rowwise() + bias;
}

Matrix TransformerLM::forward_from_embeddings(const Matrix& embeddings) const {
  if (embeddings.cols() != static_cast<Eigen::Index>(config_.d_model))
    throw std::invalid_argument("embedding width does not match d_model");
  const Matrix h = run_blocks(embeddings, nullptr, nullptr);
  const auto& hb = tensor("head_b");
  const ConstRowMap bias(params_.data() + hb.offset, static_cast<Eigen::Index>(hb.size()));
  return (h * mat("tok_emb").transpose()).rowwise() + bias;
}

double TransformerLM::loss(const FusedSequence& seq) const {
  if (seq.token_ids.empty()) throw std::invalid_argument("loss: empty sequence");
  return loss(seq, std::span<const TokenId>(seq.token_ids).subspan(1));
}

double TransformerLM::loss(const FusedSequence& seq, std::span<const TokenId> targets) const {
  if (seq.rationale_mask.size() != seq.size()) throw std::invalid_argument("rationale mask length mismatch");
  if (targets.size() + 1 != seq.size()) throw std::invalid_argument("loss: need one target per position but the last");
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i)
    if (seq.rationale_mask[i + 1]) rows.push_back(static_cast<Eigen::Index>(i));
  if (rows.empty()) throw std::invalid_argument("loss: rationale mask selects no target");
  const Matrix h = hidden_states(seq, nullptr, nullptr);
  const auto tok = mat("tok_emb");
  const auto& hb = tensor("head_b");
  const ConstRowMap bias(params_.data() + hb.offset, static_cast<Eigen::Index>(hb.size()));
  double total = 0.0;
  for (auto i : rows) {
    const RowVector logits = h.row(i) * tok.transpose() + bias;
    const TokenId target = targets[static_cast<std::size_t>(i)];
    if (target < 0 || static_cast<std::size_t>(target) >= config_.vocab_size)
      throw std::invalid_argument("loss: target id out of range");
    total += log_sum_exp(logits) - logits(target);
  }
  return total / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------
// Backward

TransformerLM::LossSum TransformerLM::accumulate_gradients(const FusedSequence& seq, std::span<double> grad,
                                                           double scale, Rng* dropout_rng) const {
  if (grad.size() != params_.size()) throw std::invalid_argument("gradient buffer has wrong size");
  if (seq.rationale_mask.size() != seq.size()) throw std::invalid_argument("rationale mask length mismatch");
  Cache cache;
  Rng* rng = config_.dropout > 0.0 ? dropout_rng : nullptr;
  const Matrix h = hidden_states(seq, &cache, rng);

  const auto row = [&](const std::string& name) {
    const auto& t = tensor(name);
    return ConstRowMap(params_.data() + t.offset, static_cast<Eigen::Index>(t.size()));
  };
  const auto gmat = [&](const std::string& name) {
    const auto& t = tensor(name);
    return Eigen::Map<Matrix>(grad.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                              static_cast<Eigen::Index>(t.cols));
  };
  const auto grow = [&](const std::string& name) {
    const auto& t = tensor(name);
    return RowMap(grad.data() + t.offset, static_cast<Eigen::Index>(t.size()));
  };

  const auto n = h.rows();
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto tok = mat("tok_emb");
  const auto bias = row("head_b");
  auto g_tok = gmat("tok_emb");
  auto g_bias = grow("head_b");

  LossSum result;
  Matrix dh = Matrix::Zero(n, d);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    if (!seq.rationale_mask[static_cast<std::size_t>(i) + 1]) continue;
    const TokenId target = seq.token_ids[static_cast<std::size_t>(i) + 1];
    RowVector logits = h.row(i) * tok.transpose() + bias;
    const double lse = log_sum_exp(logits);
    result.sum += lse - logits(target);
    ++result.count;
    RowVector dlogits = (logits.array() - lse).exp();
    dlogits(target) -= 1.0;
    dlogits *= scale;
    g_tok.noalias() += dlogits.transpose() * h.row(i);
    g_bias += dlogits;
    dh.row(i) += dlogits * tok;
  }
  if (result.count == 0) return result;

  Matrix dx = layer_norm_backward(dh, cache.lnf, row("lnf_g"), grow("lnf_g"), grow("lnf_b"));

  const auto heads = static_cast<Eigen::Index>(config_.n_heads);
  const auto dhd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dhd));
  for (std::size_t li = config_.n_layers; li-- > 0;) {
    const std::string pre = "h" + std::to_string(li) + ".";
    const auto& lc = cache.layers[li];

    // MLP branch.
    Matrix d_mlp = dx;
    if (lc.mlp_drop.size()) d_mlp.array() *= lc.mlp_drop.array();
    gmat(pre + "out_w").noalias() += lc.fc_act.transpose() * d_mlp;
    grow(pre + "out_b") += d_mlp.colwise().sum();
    Matrix d_act = d_mlp * mat(pre + "out_w").transpose();
    Matrix d_fc = d_act.array() * lc.fc_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    gmat(pre + "fc_w").noalias() += lc.m.transpose() * d_fc;
    grow(pre + "fc_b") += d_fc.colwise().sum();
    Matrix dm = d_fc * mat(pre + "fc_w").transpose();
    dx += layer_norm_backward(dm, lc.ln2, row(pre + "ln2_g"), grow(pre + "ln2_g"), grow(pre + "ln2_b"));

    // Attention branch.
    Matrix d_attn = dx;
    if (lc.attn_drop.size()) d_attn.array() *= lc.attn_drop.array();
    gmat(pre + "proj_w").noalias() += lc.y.transpose() * d_attn;
    grow(pre + "proj_b") += d_attn.colwise().sum();
    Matrix dy = d_attn * mat(pre + "proj_w").transpose();
    Matrix dqkv(n, 3 * d);
    for (Eigen::Index hh = 0; hh < heads; ++hh) {
      const auto& probs = lc.probs[static_cast<std::size_t>(hh)];
      const auto q = lc.qkv.middleCols(hh * dhd, dhd);
      const auto k = lc.qkv.middleCols(d + hh * dhd, dhd);
      const auto v = lc.qkv.middleCols(2 * d + hh * dhd, dhd);
      const auto dyh = dy.middleCols(hh * dhd, dhd);
      Matrix dprobs = dyh * v.transpose();
      dqkv.middleCols(2 * d + hh * dhd, dhd) = probs.transpose() * dyh;
      Matrix ds = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto p = probs.row(i).head(i + 1);
        const auto dp = dprobs.row(i).head(i + 1);
        const double dot = p.dot(dp);
        ds.row(i).head(i + 1) = p.array() * (dp.array() - dot);
      }
      ds *= inv_sqrt;
      dqkv.middleCols(hh * dhd, dhd) = ds * k;
      dqkv.middleCols(d + hh * dhd, dhd) = ds.transpose() * q;
    }
    gmat(pre + "attn_w").noalias() += lc.a.transpose() * dqkv;
    grow(pre + "attn_b") += dqkv.colwise().sum();
    Matrix da = dqkv * mat(pre + "attn_w").transpose();
    dx += layer_norm_backward(da, lc.ln1, row(pre + "ln1_g"), grow(pre + "ln1_g"), grow(pre + "ln1_b"));
  }

  if (cache.embed_drop.size()) dx.array() *= cache.embed_drop.array();

  auto g_seg = gmat("seg_emb");
  auto g_pos = gmat("pos_emb");
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    g_tok.row(seq.token_ids[si]) += dx.row(i);
    g_seg.row(seq.segment_ids[si]) += dx.row(i);
    g_pos.row(seq.position_ids[si]) += dx.row(i);
  }

  // Visual embeddings: gather upstream gradient per region, then backprop
  // through LayerNorm and both projections once per region.
  std::vector<std::optional<RowVector>> region_grad(seq.regions.size());
  for (const auto& s : seq.visual_slots) {
    const auto g = dx.row(static_cast<Eigen::Index>(s.index));
    if (s.kind == SlotKind::VcStart) {
      const auto& v = seq.vc_vectors[s.embedding_ref];
      const Eigen::Map<const Eigen::VectorXf> vf(v.data(), static_cast<Eigen::Index>(v.size()));
      gmat("vis.vc_w").noalias() += vf.cast<double>() * g;
      grow("vis.vc_b") += g;
      continue;
    }
    auto& rg = region_grad[s.embedding_ref];
    if (!rg) rg = RowVector::Zero(d);
    *rg += g;
  }
  for (std::size_t r = 0; r < seq.regions.size(); ++r) {
    if (!region_grad[r]) continue;
    const auto& region = seq.regions[r];
    const Eigen::Map<const Eigen::VectorXf> f(region.feature.data(), static_cast<Eigen::Index>(region.feature.size()));
    const Eigen::Map<const Eigen::Matrix<double, 1, 5>> c(region.coords.values.data());
    Matrix z = f.cast<double>().transpose() * mat("vis.feat_w") + c * mat("vis.coord_w");
    z.row(0) += row("vis.feat_b") + row("vis.coord_b");
    NormCache nc;
    layer_norm(z, row("vis.ln_g"), row("vis.ln_b"), &nc);
    const Matrix dz = layer_norm_backward(Matrix(*region_grad[r]), nc, row("vis.ln_g"), grow("vis.ln_g"),
                                          grow("vis.ln_b"));
    gmat("vis.feat_w").noalias() += f.cast<double>() * dz;
    grow("vis.feat_b") += dz.row(0);
    gmat("vis.coord_w").noalias() += c.transpose() * dz;
    grow("vis.coord_b") += dz.row(0);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Decoding

std::vector<TokenId> TransformerLM::generate_greedy(FusedSequence context, TokenId end_token,
                                                    std::size_t max_new) const {
  std::vector<TokenId> out;
  const auto& hb = tensor("head_b");
  const ConstRowMap bias(params_.data() + hb.offset, static_cast<Eigen::Index>(hb.size()));
  const auto tok = mat("tok_emb");
  while (out.size() < max_new) {
    const Matrix h = hidden_states(context, nullptr, nullptr);
    const RowVector logits = h.row(h.rows() - 1) * tok.transpose() + bias;
    Eigen::Index best = 0;
    for (Eigen::Index v = 1; v < logits.size(); ++v)
      if (logits(v) > logits(best)) best = v;
    const auto next = static_cast<TokenId>(best);
    if (next == end_token) break;
    out.push_back(next);
    if (context.size() + 1 > config_.max_positions) break;
    context.append_rationale_token(next, false);
    if (static_cast<std::size_t>(context.position_ids.back()) >= config_.max_positions) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void TransformerLM::save(const std::filesystem::path& dir, const std::string& vocab_hash,
                         std::uint64_t step) const {
  std::filesystem::create_directories(dir);
  json meta;
  meta["format"] = "rvt-checkpoint";
  meta["version"] = 1;
  meta["config"] = json::parse(config_.to_json());
  meta["vocab_hash"] = vocab_hash;
  meta["step"] = step;
  json index = json::array();
  for (const auto& t : tensors_)
    index.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}, {"length", t.size()}});
  meta["tensors"] = std::move(index);
  {
    std::ofstream out(dir / kCheckpointMeta);
    if (!out) throw std::runtime_error("cannot write checkpoint metadata in " + dir.string());
    out << meta.dump(2) << '\n';
  }
  std::vector<float> blob(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) blob[i] = static_cast<float>(params_[i]);
  std::ofstream out(dir / kCheckpointBlob, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint blob in " + dir.string());
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

TransformerLM::Loaded TransformerLM::load(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / kCheckpointMeta);
  if (!meta_in) throw std::runtime_error("no checkpoint metadata in " + dir.string());
  std::stringstream ss;
  ss << meta_in.rdbuf();
  const json meta = json::parse(ss.str());
  if (meta.value("format", "") != "rvt-checkpoint") throw std::runtime_error("not a model checkpoint");
  TransformerLM model(ModelConfig::from_json(meta.at("config").dump()));

  std::ifstream blob_in(dir / kCheckpointBlob, std::ios::binary | std::ios::ate);
  if (!blob_in) throw std::runtime_error("no checkpoint blob in " + dir.string());
  const auto bytes = static_cast<std::size_t>(blob_in.tellg());
  if (bytes % sizeof(float) != 0) throw std::runtime_error("corrupt checkpoint blob");
  std::vector<float> blob(bytes / sizeof(float));
  blob_in.seekg(0);
  blob_in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));

  for (const auto& entry : meta.at("tensors")) {
    const auto& t = model.tensor(entry.at("name").get<std::string>());
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    if (length != t.size() || entry.at("shape").at(0).get<std::size_t>() != t.rows)
      throw std::runtime_error("checkpoint tensor " + t.name + " has the wrong shape");
    if (offset > blob.size() || length > blob.size() - offset)
      throw std::runtime_error("checkpoint tensor " + t.name + " lies outside the blob");
    for (std::size_t i = 0; i < length; ++i) model.params_[t.offset + i] = static_cast<double>(blob[offset + i]);
  }
  if (meta.at("tensors").size() != model.tensors_.size())
    throw std::runtime_error("checkpoint tensor count does not match config");
  return {std::move(model), meta.value("vocab_hash", ""), meta.value("step", std::uint64_t{0})};
}

}  // namespace rvt
