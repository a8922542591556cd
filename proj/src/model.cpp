#include "dmea/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace dmea {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * M_SQRT1_2)); }

double gelu_grad(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return cdf + z * pdf;
}

Matrix gelu_m(const Matrix& z) { return z.unaryExpr([](double v) { return gelu(v); }); }
Matrix gelu_grad_m(const Matrix& z) { return z.unaryExpr([](double v) { return gelu_grad(v); }); }

struct LnCache {
  Matrix xhat;  // T x m
  Vector rstd;  // T
};

Matrix layernorm_forward(const Matrix& x, const Matrix& g, const Matrix& b, LnCache& cache) {
  const Eigen::Index t_len = x.rows(), m = x.cols();
  cache.xhat.resize(t_len, m);
  cache.rstd.resize(t_len);
  Matrix y(t_len, m);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const double mu = x.row(t).mean();
    const double var = (x.row(t).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd[t] = rstd;
    cache.xhat.row(t) = (x.row(t).array() - mu) * rstd;
    y.row(t) = cache.xhat.row(t).cwiseProduct(g.row(0)) + b.row(0);
  }
  return y;
}

Matrix layernorm_backward(const Matrix& dy, const LnCache& cache, const Matrix& g,
                          Matrix* dg, Matrix* db) {
  const Eigen::Index t_len = dy.rows(), m = dy.cols();
  if (dg) {
    dg->row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
    db->row(0) += dy.colwise().sum();
  }
  Matrix dx(t_len, m);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    Eigen::RowVectorXd dxhat = dy.row(t).cwiseProduct(g.row(0));
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(t)).mean();
    dx.row(t) = (cache.rstd[t] *
                 (dxhat.array() - mean_dxhat - cache.xhat.row(t).array() * mean_dxhat_xhat))
                    .matrix();
  }
  return dx;
}

struct LayerCache {
  Matrix x_in;
  LnCache ln1;
  Matrix a1;  // ln1 output
  Matrix q, k, v;
  std::vector<Matrix> att;  // per head, T x T
  Matrix ctx;
  Matrix x_mid;  // after attention residual
  LnCache ln2;
  Matrix a2;
  Matrix ffn_z, ffn_u;
  Matrix x_res;  // adapter slot input
  std::vector<Matrix> ad_z, ad_u, ad_h;
  Vector weights;  // fusion weights (or [1] for single)
  Matrix x_out;
};

struct Cache {
  Matrix x0;
  std::vector<LayerCache> layers;
  LnCache lnf;
  Matrix xf;
  Matrix logits;
};

const Matrix& bb(const ModelState& st, const std::string& name) {
  auto it = st.backbone.find(name);
  if (it == st.backbone.end()) throw InvalidState("missing backbone tensor " + name);
  return it->second;
}

const AdapterModule& module_of(const ModelState& st, const std::string& id) {
  auto it = st.adapters.find(id);
  if (it == st.adapters.end()) throw RoutingError("unknown module id '" + id + "'");
  return it->second;
}

std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }

void slot_forward(const ModelState& st, int layer, const LayerRouting& slot, LayerCache& lc) {
  const Matrix& x = lc.x_res;
  if (slot.module_ids.empty()) {
    lc.weights = Vector();
    lc.x_out = x;
    return;
  }
  if (!slot.fused && slot.module_ids.size() != 1) {
    throw RoutingError("non-fused slot must reference exactly one module");
  }
  const size_t n = slot.module_ids.size();
  if (slot.fused) {
    if (slot.coefficients.size() != static_cast<Eigen::Index>(n)) {
      throw RoutingError("fusion coefficient count does not match member count");
    }
    lc.weights = softmax_weights(slot.coefficients);
  } else {
    lc.weights = Vector::Ones(1);
  }
  lc.ad_z.resize(n);
  lc.ad_u.resize(n);
  lc.ad_h.resize(n);
  lc.x_out = Matrix::Zero(x.rows(), x.cols());
  for (size_t s = 0; s < n; ++s) {
    const AdapterModule& mod = module_of(st, slot.module_ids[s]);
    if (mod.layer_index != layer) {
      throw RoutingError("module '" + mod.module_id + "' routed at the wrong layer");
    }
    lc.ad_z[s] = (x * mod.down_w).rowwise() + mod.down_b.row(0);
    lc.ad_u[s] = gelu_m(lc.ad_z[s]);
    lc.ad_h[s] = x + ((lc.ad_u[s] * mod.up_w).rowwise() + mod.up_b.row(0)).eval();
    lc.x_out.noalias() += lc.weights[s] * lc.ad_h[s];
  }
}

Cache run_forward(const ModelState& st, const std::vector<int>& tokens, const Routing& routing) {
  const BackboneConfig& cfg = st.config;
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw InvalidInput("forward: empty token sequence");
  if (t_len > cfg.max_sequence_length) throw InvalidInput("forward: sequence exceeds maximum length");
  const int vocab = cfg.resolved_vocab_size();
  for (int tok : tokens) {
    if (tok < 0 || tok >= vocab) throw InvalidInput("forward: token id outside vocabulary");
  }
  if (static_cast<int>(routing.layers.size()) != cfg.num_layers) {
    throw RoutingError("routing does not cover every layer");
  }

  const Matrix& tok_emb = bb(st, "emb.tok");
  const Matrix& pos_emb = bb(st, "emb.pos");
  Cache c;
  c.x0.resize(t_len, cfg.hidden_width);
  for (int t = 0; t < t_len; ++t) {
    c.x0.row(t) = tok_emb.row(tokens[t]) + pos_emb.row(t);
  }

  const int heads = cfg.num_heads;
  const int hd = cfg.hidden_width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix x = c.x0;
  c.layers.resize(cfg.num_layers);
  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerCache& lc = c.layers[l];
    const std::string p = layer_prefix(l);
    lc.x_in = x;
    lc.a1 = layernorm_forward(x, bb(st, p + "ln1.g"), bb(st, p + "ln1.b"), lc.ln1);
    lc.q = (lc.a1 * bb(st, p + "attn.wq")).rowwise() + bb(st, p + "attn.bq").row(0);
    lc.k = (lc.a1 * bb(st, p + "attn.wk")).rowwise() + bb(st, p + "attn.bk").row(0);
    lc.v = (lc.a1 * bb(st, p + "attn.wv")).rowwise() + bb(st, p + "attn.bv").row(0);
    lc.att.assign(heads, Matrix::Zero(t_len, t_len));
    lc.ctx.resize(t_len, cfg.hidden_width);
    for (int h = 0; h < heads; ++h) {
      auto qh = lc.q.middleCols(h * hd, hd);
      auto kh = lc.k.middleCols(h * hd, hd);
      auto vh = lc.v.middleCols(h * hd, hd);
      Matrix s = qh * kh.transpose() * scale;
      Matrix& att = lc.att[h];
      for (int i = 0; i < t_len; ++i) {
        auto row = s.row(i).head(i + 1);
        const double mx = row.maxCoeff();
        Eigen::RowVectorXd e = (row.array() - mx).exp();
        att.row(i).head(i + 1) = e / e.sum();
      }
      lc.ctx.middleCols(h * hd, hd).noalias() = att * vh;
    }
    lc.x_mid = x + ((lc.ctx * bb(st, p + "attn.wo")).rowwise() + bb(st, p + "attn.bo").row(0)).eval();
    lc.a2 = layernorm_forward(lc.x_mid, bb(st, p + "ln2.g"), bb(st, p + "ln2.b"), lc.ln2);
    lc.ffn_z = (lc.a2 * bb(st, p + "ffn.w1")).rowwise() + bb(st, p + "ffn.b1").row(0);
    lc.ffn_u = gelu_m(lc.ffn_z);
    lc.x_res = lc.x_mid + ((lc.ffn_u * bb(st, p + "ffn.w2")).rowwise() + bb(st, p + "ffn.b2").row(0)).eval();
    slot_forward(st, l, routing.layers[l], lc);
    x = lc.x_out;
  }
  c.xf = layernorm_forward(x, bb(st, "lnf.g"), bb(st, "lnf.b"), c.lnf);
  c.logits = (c.xf * bb(st, "out.w")).rowwise() + bb(st, "out.b").row(0);
  if (!c.logits.allFinite()) throw NumericalFailure("forward: non-finite logits");
  return c;
}

Matrix& grad_slot(GradientStore& g, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  auto it = g.params.find(name);
  if (it == g.params.end()) {
    it = g.params.emplace(name, Matrix::Zero(rows, cols)).first;
  }
  return it->second;
}

// Backpropagates dLogits through the cached forward pass, accumulating into
// `grads` only the tensors named in `trainable`.
void run_backward(const ModelState& st, const Routing& routing, const std::vector<int>& tokens,
                  const Cache& c, const Matrix& d_logits, const TrainableSet& trainable,
                  GradientStore& grads) {
  const BackboneConfig& cfg = st.config;
  const int t_len = static_cast<int>(tokens.size());
  const int heads = cfg.num_heads;
  const int hd = cfg.hidden_width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  auto want = [&trainable](const std::string& name) { return trainable.params.count(name) > 0; };
  auto acc = [&](const std::string& name, const auto& value) {
    if (want(name)) grad_slot(grads, name, value.rows(), value.cols()) += value;
  };

  if (grads.coefficients.empty()) grads.coefficients.resize(cfg.num_layers);

  const Matrix& out_w = bb(st, "out.w");
  acc("out.w", (c.xf.transpose() * d_logits).eval());
  acc("out.b", d_logits.colwise().sum().eval());
  Matrix dxf = d_logits * out_w.transpose();

  Matrix dlnf_g = Matrix::Zero(1, cfg.hidden_width), dlnf_b = Matrix::Zero(1, cfg.hidden_width);
  Matrix dx = layernorm_backward(dxf, c.lnf, bb(st, "lnf.g"), &dlnf_g, &dlnf_b);
  acc("lnf.g", dlnf_g);
  acc("lnf.b", dlnf_b);

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const LayerCache& lc = c.layers[l];
    const LayerRouting& slot = routing.layers[l];
    const std::string p = layer_prefix(l);

    // Adapter slot.
    Matrix dx_res;
    if (slot.module_ids.empty()) {
      dx_res = dx;
    } else {
      const size_t n = slot.module_ids.size();
      dx_res = dx;  // sum_s w_s * identity path, weights sum to 1
      Vector dw = Vector::Zero(static_cast<Eigen::Index>(n));
      for (size_t s = 0; s < n; ++s) {
        const AdapterModule& mod = module_of(st, slot.module_ids[s]);
        dw[static_cast<Eigen::Index>(s)] = dx.cwiseProduct(lc.ad_h[s]).sum();
        Matrix dh = lc.weights[static_cast<Eigen::Index>(s)] * dx;
        const std::string ap = "adapter/" + mod.module_id + "/";
        acc(ap + "up_w", (lc.ad_u[s].transpose() * dh).eval());
        acc(ap + "up_b", dh.colwise().sum().eval());
        Matrix du = dh * mod.up_w.transpose();
        Matrix dz = du.cwiseProduct(gelu_grad_m(lc.ad_z[s]));
        acc(ap + "down_w", (lc.x_res.transpose() * dz).eval());
        acc(ap + "down_b", dz.colwise().sum().eval());
        dx_res.noalias() += dz * mod.down_w.transpose();
      }
      if (slot.fused && trainable.coefficients) {
        // softmax backward on the fusion logits
        const Vector& w = lc.weights;
        const double dot = w.dot(dw);
        Vector dcoef = (w.array() * (dw.array() - dot)).matrix();
        if (grads.coefficients[l].size() == 0) {
          grads.coefficients[l] = Vector::Zero(dcoef.size());
        }
        grads.coefficients[l] += dcoef;
      }
    }

    // FFN block.
    const Matrix& w2 = bb(st, p + "ffn.w2");
    const Matrix& w1 = bb(st, p + "ffn.w1");
    acc(p + "ffn.w2", (lc.ffn_u.transpose() * dx_res).eval());
    acc(p + "ffn.b2", dx_res.colwise().sum().eval());
    Matrix du = dx_res * w2.transpose();
    Matrix dz = du.cwiseProduct(gelu_grad_m(lc.ffn_z));
    acc(p + "ffn.w1", (lc.a2.transpose() * dz).eval());
    acc(p + "ffn.b1", dz.colwise().sum().eval());
    Matrix da2 = dz * w1.transpose();
    Matrix dln2_g = Matrix::Zero(1, cfg.hidden_width), dln2_b = Matrix::Zero(1, cfg.hidden_width);
    Matrix dx_mid = dx_res + layernorm_backward(da2, lc.ln2, bb(st, p + "ln2.g"), &dln2_g, &dln2_b);
    acc(p + "ln2.g", dln2_g);
    acc(p + "ln2.b", dln2_b);

    // Attention block.
    const Matrix& wo = bb(st, p + "attn.wo");
    acc(p + "attn.wo", (lc.ctx.transpose() * dx_mid).eval());
    acc(p + "attn.bo", dx_mid.colwise().sum().eval());
    Matrix dctx = dx_mid * wo.transpose();
    Matrix dq = Matrix::Zero(t_len, cfg.hidden_width);
    Matrix dk = Matrix::Zero(t_len, cfg.hidden_width);
    Matrix dv = Matrix::Zero(t_len, cfg.hidden_width);
    for (int h = 0; h < heads; ++h) {
      auto qh = lc.q.middleCols(h * hd, hd);
      auto kh = lc.k.middleCols(h * hd, hd);
      auto vh = lc.v.middleCols(h * hd, hd);
      auto dctx_h = dctx.middleCols(h * hd, hd);
      const Matrix& att = lc.att[h];
      Matrix dp = dctx_h * vh.transpose();
      dv.middleCols(h * hd, hd).noalias() = att.transpose() * dctx_h;
      Matrix ds(t_len, t_len);
      for (int i = 0; i < t_len; ++i) {
        const double dot = att.row(i).cwiseProduct(dp.row(i)).sum();
        ds.row(i) = (att.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      dq.middleCols(h * hd, hd).noalias() = ds * kh * scale;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * qh * scale;
    }
    acc(p + "attn.wq", (lc.a1.transpose() * dq).eval());
    acc(p + "attn.bq", dq.colwise().sum().eval());
    acc(p + "attn.wk", (lc.a1.transpose() * dk).eval());
    acc(p + "attn.bk", dk.colwise().sum().eval());
    acc(p + "attn.wv", (lc.a1.transpose() * dv).eval());
    acc(p + "attn.bv", dv.colwise().sum().eval());
    Matrix da1 = dq * bb(st, p + "attn.wq").transpose() +
                 dk * bb(st, p + "attn.wk").transpose() +
                 dv * bb(st, p + "attn.wv").transpose();
    Matrix dln1_g = Matrix::Zero(1, cfg.hidden_width), dln1_b = Matrix::Zero(1, cfg.hidden_width);
    dx = dx_mid + layernorm_backward(da1, lc.ln1, bb(st, p + "ln1.g"), &dln1_g, &dln1_b);
    acc(p + "ln1.g", dln1_g);
    acc(p + "ln1.b", dln1_b);
  }

  if (want("emb.tok")) {
    Matrix& g = grad_slot(grads, "emb.tok", cfg.resolved_vocab_size(), cfg.hidden_width);
    for (int t = 0; t < t_len; ++t) g.row(tokens[t]) += dx.row(t);
  }
  if (want("emb.pos")) {
    Matrix& g = grad_slot(grads, "emb.pos", cfg.max_sequence_length, cfg.hidden_width);
    for (int t = 0; t < t_len; ++t) g.row(t) += dx.row(t);
  }
}

// Predicted positions [start, end): target tokens[j] scored by logits row j-1.
double sequence_loss(const Matrix& logits, const std::vector<int>& tokens, int start, int end) {
  double loss = 0.0;
  for (int j = start; j < end; ++j) {
    const auto row = logits.row(j - 1);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - row[tokens[j]];
  }
  return loss;
}

void sequence_loss_backward(const Matrix& logits, const std::vector<int>& tokens, int start,
                            int end, double weight, Matrix& d_logits) {
  for (int j = start; j < end; ++j) {
    const auto row = logits.row(j - 1);
    const double mx = row.maxCoeff();
    Eigen::RowVectorXd p = (row.array() - mx).exp();
    p /= p.sum();
    d_logits.row(j - 1) += weight * p;
    d_logits(j - 1, tokens[j]) -= weight;
  }
}

int task_loss_start(const EncodedSample& s) {
  const int n = s.total_length();
  if (s.answer_start < 1 || s.answer_start >= n ||
      s.tokens[s.answer_start] != Vocabulary::kAns) {
    throw InvalidSample("loss_task: answer_start does not point at <ans>");
  }
  if (s.answer_start + 1 >= n) throw InvalidSample("loss_task: empty answer region");
  return s.answer_start + 1;
}

int data_loss_start(const EncodedSample& s) {
  if (s.tokens.empty() || s.tokens[0] < Vocabulary::kGenBase ||
      s.tokens[0] >= Vocabulary::kReservedCount) {
    throw InvalidSample("loss_data: sample does not begin with a generation token");
  }
  if (s.total_length() < 2) throw InvalidSample("loss_data: empty body after generation token");
  return 1;
}

struct AdamOptimizer {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int step = 0;
  std::map<std::string, Matrix> m, v;

  void apply(ModelState& state, const GradientStore& grads) {
    ++step;
    auto params = state.parameter_map();
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    for (const auto& [name, g] : grads.params) {
      Matrix& p = *params.at(name);
      Matrix& mm = m.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
      Matrix& vv = v.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
      mm = beta1 * mm + (1.0 - beta1) * g;
      vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
      p.array() -= lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + eps);
    }
  }
};

}  // namespace

void BackboneConfig::validate() const {
  if (num_layers < 1 || hidden_width < 1 || num_heads < 1 || ffn_width < 1 ||
      adapter_bottleneck < 1 || max_sequence_length < 2) {
    throw InvalidInput("BackboneConfig: dimension out of range");
  }
  if (hidden_width % num_heads != 0) {
    throw InvalidInput("BackboneConfig: hidden_width not divisible by num_heads");
  }
}

int BackboneConfig::resolved_vocab_size() const {
  return vocab_size > 0 ? vocab_size : Vocabulary::shared().size();
}

LayerRouting LayerRouting::single(const std::string& id) {
  LayerRouting r;
  r.module_ids = {id};
  r.fused = false;
  return r;
}

LayerRouting LayerRouting::fusion(std::vector<std::string> ids, Vector logits) {
  LayerRouting r;
  r.module_ids = std::move(ids);
  r.coefficients = std::move(logits);
  r.fused = true;
  return r;
}

Routing Routing::identity(int num_layers) {
  Routing r;
  r.layers.resize(num_layers);
  return r;
}

Routing Routing::single(const std::vector<std::string>& per_layer_ids) {
  Routing r;
  for (const auto& id : per_layer_ids) r.layers.push_back(LayerRouting::single(id));
  return r;
}

std::map<std::string, Matrix*> ModelState::parameter_map() {
  std::map<std::string, Matrix*> out;
  for (auto& [name, m] : backbone) out.emplace(name, &m);
  for (auto& [id, mod] : adapters) {
    out.emplace("adapter/" + id + "/down_w", &mod.down_w);
    out.emplace("adapter/" + id + "/down_b", &mod.down_b);
    out.emplace("adapter/" + id + "/up_w", &mod.up_w);
    out.emplace("adapter/" + id + "/up_b", &mod.up_b);
  }
  return out;
}

std::map<std::string, const Matrix*> ModelState::parameter_map() const {
  std::map<std::string, const Matrix*> out;
  for (const auto& [name, m] : backbone) out.emplace(name, &m);
  for (const auto& [id, mod] : adapters) {
    out.emplace("adapter/" + id + "/down_w", &mod.down_w);
    out.emplace("adapter/" + id + "/down_b", &mod.down_b);
    out.emplace("adapter/" + id + "/up_w", &mod.up_w);
    out.emplace("adapter/" + id + "/up_b", &mod.up_b);
  }
  return out;
}

std::uint64_t ModelState::checksum_of(const std::set<std::string>& names) const {
  auto params = parameter_map();
  std::uint64_t h = 0;
  for (const auto& name : names) {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidState("checksum_of: unknown tensor " + name);
    h = combine_checksum(h, checksum(*it->second));
  }
  return h;
}

std::uint64_t ModelState::backbone_checksum() const {
  std::uint64_t h = 0;
  for (const auto& [name, m] : backbone) {
    h = combine_checksum(h, Rng::hash_string(name));
    h = combine_checksum(h, checksum(m));
  }
  return h;
}

std::vector<std::string> adapter_param_names(const std::string& module_id) {
  const std::string p = "adapter/" + module_id + "/";
  return {p + "down_w", p + "down_b", p + "up_w", p + "up_b"};
}

AdapterModule make_adapter(const std::string& id, int layer, const BackboneConfig& cfg,
                           std::uint64_t seed) {
  Rng rng(seed);
  AdapterModule mod;
  mod.module_id = id;
  mod.layer_index = layer;
  const int m = cfg.hidden_width, b = cfg.adapter_bottleneck;
  mod.down_w = rng.normal_matrix(m, b, 1.0 / std::sqrt(static_cast<double>(m)));
  mod.down_b = Matrix::Zero(1, b);
  mod.up_w = rng.normal_matrix(b, m, 1e-3);
  mod.up_b = Matrix::Zero(1, m);
  return mod;
}

ModelState make_model(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState st;
  st.config = cfg;
  Rng rng(seed);
  const int m = cfg.hidden_width, f = cfg.ffn_width, v = cfg.resolved_vocab_size();
  auto w = [&](int r, int c) { return rng.normal_matrix(r, c, 1.0 / std::sqrt(static_cast<double>(r))); };
  st.backbone["emb.tok"] = rng.normal_matrix(v, m, 0.05);
  st.backbone["emb.pos"] = rng.normal_matrix(cfg.max_sequence_length, m, 0.05);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    st.backbone[p + "ln1.g"] = Matrix::Ones(1, m);
    st.backbone[p + "ln1.b"] = Matrix::Zero(1, m);
    st.backbone[p + "attn.wq"] = w(m, m);
    st.backbone[p + "attn.wk"] = w(m, m);
    st.backbone[p + "attn.wv"] = w(m, m);
    st.backbone[p + "attn.wo"] = w(m, m);
    st.backbone[p + "attn.bq"] = Matrix::Zero(1, m);
    st.backbone[p + "attn.bk"] = Matrix::Zero(1, m);
    st.backbone[p + "attn.bv"] = Matrix::Zero(1, m);
    st.backbone[p + "attn.bo"] = Matrix::Zero(1, m);
    st.backbone[p + "ln2.g"] = Matrix::Ones(1, m);
    st.backbone[p + "ln2.b"] = Matrix::Zero(1, m);
    st.backbone[p + "ffn.w1"] = w(m, f);
    st.backbone[p + "ffn.b1"] = Matrix::Zero(1, f);
    st.backbone[p + "ffn.w2"] = w(f, m);
    st.backbone[p + "ffn.b2"] = Matrix::Zero(1, m);
  }
  st.backbone["lnf.g"] = Matrix::Ones(1, m);
  st.backbone["lnf.b"] = Matrix::Zero(1, m);
  st.backbone["out.w"] = w(m, v);
  st.backbone["out.b"] = Matrix::Zero(1, v);
  return st;
}

ForwardTrace forward(const ModelState& state, const std::vector<int>& tokens,
                     const Routing& routing) {
  Cache c = run_forward(state, tokens, routing);
  ForwardTrace trace;
  trace.logits = std::move(c.logits);
  trace.final_representations = std::move(c.xf);
  trace.module_outputs.reserve(c.layers.size());
  trace.fused_outputs.reserve(c.layers.size());
  for (auto& lc : c.layers) {
    trace.module_outputs.push_back(std::move(lc.ad_h));
    trace.fused_outputs.push_back(std::move(lc.x_out));
  }
  return trace;
}

Vector last_token_representation(const ForwardTrace& trace, const std::vector<int>& tokens) {
  int last = -1;
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    if (tokens[t] != Vocabulary::kPad) last = t;
  }
  if (last < 0) throw InvalidInput("last_token_representation: all-padding input");
  return trace.final_representations.row(last).transpose();
}

TrainingSample make_training_sample(const Sample& s, const TaskSpec& task) {
  return {encode(s, task, false), encode(s, task, true)};
}

TrainingSample make_training_sample_from_triple(const std::vector<int>& x,
                                                const std::vector<int>& q,
                                                const std::vector<int>& y,
                                                int generation_token) {
  return {encode_triple(x, q, y, -1), encode_triple(x, q, y, generation_token)};
}

double loss_task(const ModelState& state, const EncodedSample& sample, const Routing& routing) {
  const int start = task_loss_start(sample);
  Cache c = run_forward(state, sample.tokens, routing);
  return sequence_loss(c.logits, sample.tokens, start, sample.total_length());
}

double loss_data(const ModelState& state, const EncodedSample& with_g, const Routing& routing) {
  const int start = data_loss_start(with_g);
  Cache c = run_forward(state, with_g.tokens, routing);
  return sequence_loss(c.logits, with_g.tokens, start, with_g.total_length());
}

double loss_train(const ModelState& state, const TrainingSample& sample, const Routing& routing,
                  double mu) {
  if (mu < 0.0) throw InvalidInput("loss_train: mu must be non-negative");
  double loss = loss_task(state, sample.task_view, routing);
  if (mu > 0.0) loss += mu * loss_data(state, sample.data_view, routing);
  return loss;
}

double GradientStore::param_norm() const {
  double sq = 0.0;
  for (const auto& [name, g] : params) sq += g.squaredNorm();
  return std::sqrt(sq);
}

GradientStore gradients(const ModelState& state, std::span<const TrainingSample> batch,
                        const Routing& routing, LossSelector selector, double mu,
                        const TrainableSet& trainable) {
  if (batch.empty()) throw InvalidInput("gradients: empty batch");
  if (mu < 0.0) throw InvalidInput("gradients: mu must be non-negative");
  GradientStore grads;
  grads.coefficients.resize(state.config.num_layers);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const TrainingSample& ts : batch) {
    if (selector == LossSelector::task || selector == LossSelector::train) {
      const EncodedSample& s = ts.task_view;
      const int start = task_loss_start(s);
      Cache c = run_forward(state, s.tokens, routing);
      grads.loss += inv * sequence_loss(c.logits, s.tokens, start, s.total_length());
      Matrix dl = Matrix::Zero(c.logits.rows(), c.logits.cols());
      sequence_loss_backward(c.logits, s.tokens, start, s.total_length(), inv, dl);
      run_backward(state, routing, s.tokens, c, dl, trainable, grads);
    }
    if (selector == LossSelector::data || (selector == LossSelector::train && mu > 0.0)) {
      const EncodedSample& s = ts.data_view;
      const int start = data_loss_start(s);
      const double w = selector == LossSelector::data ? inv : mu * inv;
      Cache c = run_forward(state, s.tokens, routing);
      grads.loss += w * sequence_loss(c.logits, s.tokens, start, s.total_length());
      Matrix dl = Matrix::Zero(c.logits.rows(), c.logits.cols());
      sequence_loss_backward(c.logits, s.tokens, start, s.total_length(), w, dl);
      run_backward(state, routing, s.tokens, c, dl, trainable, grads);
    }
  }
  for (const auto& [name, g] : grads.params) {
    if (!g.allFinite()) throw NumericalFailure("gradients: non-finite gradient for " + name);
  }
  for (const auto& g : grads.coefficients) {
    if (g.size() > 0 && !g.allFinite()) throw NumericalFailure("gradients: non-finite coefficient gradient");
  }
  if (!std::isfinite(grads.loss)) throw NumericalFailure("gradients: non-finite loss");
  return grads;
}

void sgd_step(ModelState& state, Routing& routing, const GradientStore& grads,
              const TrainableSet& trainable, double learning_rate) {
  auto params = state.parameter_map();
  for (const auto& [name, g] : grads.params) {
    if (!trainable.params.count(name)) continue;
    *params.at(name) -= learning_rate * g;
  }
  if (trainable.coefficients) {
    for (size_t l = 0; l < grads.coefficients.size(); ++l) {
      if (grads.coefficients[l].size() == 0) continue;
      routing.layers[l].coefficients -= learning_rate * grads.coefficients[l];
    }
  }
}

std::vector<int> generate(const ModelState& state, const std::vector<int>& prefix,
                          const Routing& routing, const DecodeConfig& decode) {
  if (prefix.empty()) throw InvalidInput("generate: empty prefix");
  if (static_cast<int>(prefix.size()) > state.config.max_sequence_length) {
    throw InvalidInput("generate: prefix exceeds maximum length");
  }
  Rng rng(decode.seed);
  std::vector<int> tokens = prefix;
  std::vector<int> out;
  const int cap = std::min(decode.max_new_tokens,
                           state.config.max_sequence_length - static_cast<int>(prefix.size()));
  for (int step = 0; step < cap; ++step) {
    Cache c = run_forward(state, tokens, routing);
    Eigen::RowVectorXd logits = c.logits.row(c.logits.rows() - 1);
    int next;
    if (decode.top_k <= 0) {
      Eigen::Index arg = 0;
      logits.maxCoeff(&arg);
      next = static_cast<int>(arg);
    } else {
      if (decode.temperature <= 0.0) throw InvalidInput("generate: temperature must be positive");
      const int k = std::min<int>(decode.top_k, static_cast<int>(logits.size()));
      std::vector<int> idx(logits.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
      });
      Vector top(k);
      for (int i = 0; i < k; ++i) top[i] = logits[idx[i]] / decode.temperature;
      Vector probs = softmax_weights(top);
      double u = rng.uniform();
      int pick = k - 1;
      double cum = 0.0;
      for (int i = 0; i < k; ++i) {
        cum += probs[i];
        if (u < cum) {
          pick = i;
          break;
        }
      }
      next = idx[pick];
    }
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

ModelState pretrain_backbone(const BackboneConfig& cfg, const PretrainCorpus& corpus,
                             int steps, std::uint64_t seed) {
  if (corpus.train.empty()) throw InvalidInput("pretrain_backbone: empty corpus");
  ModelState st = make_model(cfg, Rng::derive_seed(seed, {Rng::hash_string("init")}));
  if (steps == 0) return st;

  TrainableSet trainable;
  for (const auto& [name, m] : st.backbone) trainable.params.insert(name);
  Routing routing = Routing::identity(cfg.num_layers);

  AdamOptimizer opt{.lr = 3e-3};
  Rng rng(Rng::derive_seed(seed, {Rng::hash_string("batches")}));
  const int batch_size = 16;
  std::vector<int> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t cursor = 0;

  for (int step = 0; step < steps; ++step) {
    GradientStore grads;
    grads.coefficients.resize(cfg.num_layers);
    double loss = 0.0;
    const double inv = 1.0 / batch_size;
    for (int b = 0; b < batch_size; ++b) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const EncodedSample& s = corpus.train[order[cursor++]];
      Cache c = run_forward(st, s.tokens, routing);
      loss += inv * sequence_loss(c.logits, s.tokens, 1, s.total_length());
      Matrix dl = Matrix::Zero(c.logits.rows(), c.logits.cols());
      sequence_loss_backward(c.logits, s.tokens, 1, s.total_length(), inv, dl);
      run_backward(st, routing, s.tokens, c, dl, trainable, grads);
    }
    if (!std::isfinite(loss)) throw TrainingFailure("pretrain_backbone: loss diverged");
    // global-norm clip keeps early Adam steps stable
    const double gnorm = grads.param_norm();
    if (gnorm > 5.0) {
      for (auto& [name, g] : grads.params) g *= 5.0 / gnorm;
    }
    opt.apply(st, grads);
  }
  return st;
}

double answer_token_accuracy(const ModelState& state, const std::vector<EncodedSample>& samples,
                             const Routing& routing) {
  if (samples.empty()) throw InvalidInput("answer_token_accuracy: no samples");
  long correct = 0, total = 0;
  for (const EncodedSample& s : samples) {
    const int start = task_loss_start(s);
    Cache c = run_forward(state, s.tokens, routing);
    for (int j = start; j < s.total_length(); ++j) {
      Eigen::Index arg = 0;
      c.logits.row(j - 1).maxCoeff(&arg);
      correct += (static_cast<int>(arg) == s.tokens[j]);
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

constexpr char kMagic[4] = {'D', 'M', 'E', 'A'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_block(std::ostream& os, const std::string& name, const Matrix& m) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      os.write(reinterpret_cast<const char*>(&v), 8);
    }
  }
}

std::pair<std::string, Matrix> read_block(std::istream& is) {
  const std::uint32_t len = read_u32(is);
  std::string name(len, '\0');
  is.read(name.data(), len);
  const std::uint64_t rows = read_u64(is);
  const std::uint64_t cols = read_u64(is);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i) {
    for (std::uint64_t j = 0; j < cols; ++j) {
      double v = 0;
      is.read(reinterpret_cast<char*>(&v), 8);
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  if (!is) throw IoError("checkpoint: truncated block " + name);
  return {name, std::move(m)};
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  const BackboneConfig& c = state.config;
  for (int v : {c.num_layers, c.hidden_width, c.num_heads, c.ffn_width, c.vocab_size,
                c.max_sequence_length, c.adapter_bottleneck}) {
    write_u32(os, static_cast<std::uint32_t>(v));
  }
  write_u32(os, static_cast<std::uint32_t>(state.backbone.size()));
  for (const auto& [name, m] : state.backbone) write_block(os, name, m);
  write_u32(os, static_cast<std::uint32_t>(state.adapters.size()));
  for (const auto& [id, mod] : state.adapters) {
    write_u32(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    write_u32(os, static_cast<std::uint32_t>(mod.layer_index));
    write_block(os, "down_w", mod.down_w);
    write_block(os, "down_b", mod.down_b);
    write_block(os, "up_w", mod.up_w);
    write_block(os, "up_b", mod.up_b);
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  }
  ModelState st;
  BackboneConfig& c = st.config;
  c.num_layers = static_cast<int>(read_u32(is));
  c.hidden_width = static_cast<int>(read_u32(is));
  c.num_heads = static_cast<int>(read_u32(is));
  c.ffn_width = static_cast<int>(read_u32(is));
  c.vocab_size = static_cast<int>(read_u32(is));
  c.max_sequence_length = static_cast<int>(read_u32(is));
  c.adapter_bottleneck = static_cast<int>(read_u32(is));
  const std::uint32_t n_backbone = read_u32(is);
  for (std::uint32_t i = 0; i < n_backbone; ++i) {
    auto [name, m] = read_block(is);
    st.backbone.emplace(std::move(name), std::move(m));
  }
  const std::uint32_t n_adapters = read_u32(is);
  for (std::uint32_t i = 0; i < n_adapters; ++i) {
    const std::uint32_t len = read_u32(is);
    std::string id(len, '\0');
    is.read(id.data(), len);
    AdapterModule mod;
    mod.module_id = id;
    mod.layer_index = static_cast<int>(read_u32(is));
    mod.down_w = read_block(is).second;
    mod.down_b = read_block(is).second;
    mod.up_w = read_block(is).second;
    mod.up_b = read_block(is).second;
    st.adapters.emplace(id, std::move(mod));
  }
  if (!is) throw IoError("checkpoint: truncated file " + path);
  return st;
}

}  // namespace dmea
