// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "kcircuits/rng.hpp"

namespace kc {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'K', 'C', 'C', 'K', 'P', 'T', '\0', '\n'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), b, b + sizeof(T));
  }
  void put_str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void put_tensor(const NamedTensor& t) {
    put_str(t.name);
    put(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) put(static_cast<std::uint32_t>(d));
    const auto* b = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), b, b + t.values.size() * sizeof(float));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : in_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  NamedTensor get_tensor() {
    NamedTensor t;
    t.name = get_str();
    const auto rank = get<std::uint8_t>();
    for (std::uint8_t i = 0; i < rank; ++i) t.shape.push_back(get<std::uint32_t>());
    const std::size_t n = ad::numel(t.shape);
    need(n * sizeof(float));
    t.values.resize(n);
    std::memcpy(t.values.data(), in_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return t;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint: truncated data");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string phase_name(Phase phase) {
  switch (phase) {
    case Phase::Base:
      return "base";
    case Phase::Continual:
      return "continual";
    case Phase::Forgetting:
      return "forgetting";
  }
  return "?";
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  w.put(kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  for (auto v : {c.n_layers, c.n_heads, c.d_model, c.d_mlp, c.vocab_size, c.max_context}) {
    w.put(static_cast<std::uint32_t>(v));
  }
  w.put(c.layernorm_epsilon);
  w.put(static_cast<std::uint8_t>(c.tie_unembedding));
  w.put(ckpt.epoch);
  w.put(static_cast<std::uint8_t>(ckpt.phase));
  w.put(ckpt.optimizer_step);
  w.put_str(ckpt.rng_state);
  w.put_str(ckpt.metadata);
  w.put(static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& t : ckpt.parameters) w.put_tensor(t);
  w.put(static_cast<std::uint32_t>(ckpt.optimizer_state.size()));
  for (const auto& t : ckpt.optimizer_state) w.put_tensor(t);
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  Reader r(bytes.subspan(sizeof(kMagic)));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.n_layers = r.get<std::uint32_t>();
  c.n_heads = r.get<std::uint32_t>();
  c.d_model = r.get<std::uint32_t>();
  c.d_mlp = r.get<std::uint32_t>();
  c.vocab_size = r.get<std::uint32_t>();
  c.max_context = r.get<std::uint32_t>();
  c.layernorm_epsilon = r.get<float>();
  c.tie_unembedding = r.get<std::uint8_t>() != 0;
  ckpt.epoch = r.get<std::uint32_t>();
  const auto phase = r.get<std::uint8_t>();
  if (phase > 2) throw std::runtime_error("checkpoint: bad phase tag");
  ckpt.phase = static_cast<Phase>(phase);
  ckpt.optimizer_step = r.get<std::uint64_t>();
  ckpt.rng_state = r.get_str();
  ckpt.metadata = r.get_str();
  const auto n_params = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) ckpt.parameters.push_back(r.get_tensor());
  const auto n_opt = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_opt; ++i) ckpt.optimizer_state.push_back(r.get_tensor());
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build_parameters();
  initialize(seed);
}

Model::Model(const Checkpoint& ckpt) : config_(ckpt.config) {
  config_.validate();
  build_parameters();
  load_parameters(ckpt);
}

std::size_t Model::add_param(std::string name, ad::Shape shape, bool decay) {
  params_.push_back({std::move(name), ad::Tensor::zeros(std::move(shape)), decay});
  return params_.size() - 1;
}

void Model::build_parameters() {
  const std::size_t d = config_.d_model, V = config_.vocab_size, m = config_.d_mlp;
  wte_ = add_param("wte", {V, d}, true);
  wpe_ = add_param("wpe", {config_.max_context, d}, true);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "h" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add_param(pre + "ln1.g", {d}, false);
    L.ln1_b = add_param(pre + "ln1.b", {d}, false);
    L.wq = add_param(pre + "attn.wq", {d, d}, true);
    L.bq = add_param(pre + "attn.bq", {d}, false);
    L.wk = add_param(pre + "attn.wk", {d, d}, true);
    L.bk = add_param(pre + "attn.bk", {d}, false);
    L.wv = add_param(pre + "attn.wv", {d, d}, true);
    L.bv = add_param(pre + "attn.bv", {d}, false);
    L.wo = add_param(pre + "attn.wo", {d, d}, true);
    L.ln2_g = add_param(pre + "ln2.g", {d}, false);
    L.ln2_b = add_param(pre + "ln2.b", {d}, false);
    L.w1 = add_param(pre + "mlp.w1", {d, m}, true);
    L.b1 = add_param(pre + "mlp.b1", {m}, false);
    L.w2 = add_param(pre + "mlp.w2", {m, d}, true);
    L.b2 = add_param(pre + "mlp.b2", {d}, false);
    layers_.push_back(L);
  }
  lnf_g_ = add_param("lnf.g", {d}, false);
  lnf_b_ = add_param("lnf.b", {d}, false);
  wu_ = config_.tie_unembedding ? wte_ : add_param("wu", {d, V}, true);
  bu_ = add_param("bu", {V}, false);
}

void Model::initialize(std::uint64_t seed) {
  Rng rng(seed);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  auto fill_normal = [&](std::size_t i, double sd) {
    for (float& v : params_[i].value.data()) v = static_cast<float>(rng.normal() * sd);
  };
  auto fill_const = [&](std::size_t i, float c) {
    for (float& v : params_[i].value.data()) v = c;
  };
  fill_normal(wte_, std_base);
  fill_normal(wpe_, std_base);
  for (const Layer& L : layers_) {
    fill_const(L.ln1_g, 1.0f);
    fill_const(L.ln2_g, 1.0f);
    fill_normal(L.wq, std_base);
    fill_normal(L.wk, std_base);
    fill_normal(L.wv, std_base);
    fill_normal(L.wo, std_resid);
    fill_normal(L.w1, std_base);
    fill_normal(L.w2, std_resid);
  }
  fill_const(lnf_g_, 1.0f);
  if (!config_.tie_unembedding) fill_normal(wu_, std_base);
}

void Model::set_requires_grad(bool value) {
  for (auto& prm : params_) prm.value.set_requires_grad(value);
}

void Model::zero_grad() {
  for (auto& prm : params_) prm.value.zero_grad();
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = config_;
  for (const auto& prm : params_) {
    ckpt.parameters.push_back(
        {prm.name, prm.value.shape(), std::vector<float>(prm.value.data().begin(), prm.value.data().end())});
  }
  return ckpt;
}

void Model::load_parameters(const Checkpoint& ckpt) {
  if (!(ckpt.config == config_)) throw std::runtime_error("checkpoint: model config mismatch");
  if (ckpt.parameters.size() != params_.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(params_.size()) +
                             " parameter tensors, found " + std::to_string(ckpt.parameters.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const NamedTensor& t = ckpt.parameters[i];
    if (t.name != params_[i].name || t.shape != params_[i].value.shape()) {
      throw std::runtime_error("checkpoint: tensor " + t.name + " " + ad::shape_str(t.shape) +
                               " does not match " + params_[i].name + " " +
                               ad::shape_str(params_[i].value.shape()));
    }
    std::copy(t.values.begin(), t.values.end(), params_[i].value.data().begin());
  }
}

void Model::check_tokens(std::span<const int> tokens, std::size_t seq_len) const {
  if (seq_len == 0 || seq_len > config_.max_context) {
    throw ad::ShapeError("model: sequence length " + std::to_string(seq_len) + " outside [1, " +
                         std::to_string(config_.max_context) + "]");
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw ad::ShapeError("model: token id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(config_.vocab_size));
    }
  }
}

ad::Tensor Model::unembed_matmul(const ad::Tensor& normed) const {
  ad::Tensor logits = config_.tie_unembedding ? ad::matmul(normed, p(wte_), /*transpose_b=*/true)
                                              : ad::matmul(normed, p(wu_));
  return ad::add_bias(logits, p(bu_));
}

ad::Tensor Model::embed(std::span<const int> tokens) const {
  check_tokens(tokens, tokens.size());
  std::vector<int> pos(tokens.size());
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = static_cast<int>(t);
  return ad::add(ad::embedding(p(wte_), tokens), ad::embedding(p(wpe_), pos));
}

ad::Tensor Model::forward(std::span<const int> tokens, std::size_t batch, std::size_t seq_len) const {
  if (tokens.size() != batch * seq_len) {
    throw ad::ShapeError("model: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x " + std::to_string(seq_len));
  }
  check_tokens(tokens, seq_len);
  const std::size_t d = config_.d_model, H = config_.n_heads, dh = config_.d_head();
  const float eps = config_.layernorm_epsilon;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % seq_len);
  ad::Tensor x = ad::add(ad::embedding(p(wte_), tokens), ad::embedding(p(wpe_), pos));

  auto split = [&](const ad::Tensor& t) {
    return ad::reshape(ad::swap_axes12(ad::reshape(t, {batch, seq_len, H, dh})), {batch * H, seq_len, dh});
  };
  for (const Layer& L : layers_) {
    ad::Tensor h = ad::layer_norm(x, p(L.ln1_g), p(L.ln1_b), eps);
    ad::Tensor q = split(ad::add_bias(ad::matmul(h, p(L.wq)), p(L.bq)));
    ad::Tensor k = split(ad::add_bias(ad::matmul(h, p(L.wk)), p(L.bk)));
    ad::Tensor v = split(ad::add_bias(ad::matmul(h, p(L.wv)), p(L.bv)));
    ad::Tensor att = ad::softmax(ad::scale(ad::bmm(q, k, true), att_scale), /*causal=*/true);
    ad::Tensor z = ad::bmm(att, v);
    z = ad::reshape(ad::swap_axes12(ad::reshape(z, {batch, H, seq_len, dh})), {batch * seq_len, d});
    x = ad::add(x, ad::matmul(z, p(L.wo)));

    ad::Tensor h2 = ad::layer_norm(x, p(L.ln2_g), p(L.ln2_b), eps);
    ad::Tensor u = ad::gelu(ad::add_bias(ad::matmul(h2, p(L.w1)), p(L.b1)));
    x = ad::add(x, ad::add_bias(ad::matmul(u, p(L.w2)), p(L.b2)));
  }
  return unembed_matmul(ad::layer_norm(x, p(lnf_g_), p(lnf_b_), eps));
}

RunResult Model::run(std::span<const int> tokens, const RunOptions& options) const {
  const std::size_t T = tokens.size();
  check_tokens(tokens, T);
  const std::size_t d = config_.d_model, H = config_.n_heads, dh = config_.d_head();
  const float eps = config_.layernorm_epsilon;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  const PatchSpec* patch = options.patch;
  const CompGraph* graph = patch ? patch->graph : nullptr;
  std::optional<CompGraph> own_graph;
  if (patch) {
    if (graph == nullptr || patch->corrupted == nullptr) {
      throw std::invalid_argument("model: patch needs a graph and a corrupted run");
    }
    if (!graph->same_shape(config_)) throw std::invalid_argument("model: patch graph does not match model config");
    if (patch->in_circuit.size() != graph->edge_count()) {
      throw std::invalid_argument("model: circuit mask has " + std::to_string(patch->in_circuit.size()) +
                                  " flags for " + std::to_string(graph->edge_count()) + " edges");
    }
    if (patch->corrupted->seq_len != T) {
      throw std::invalid_argument("model: corrupted run length " + std::to_string(patch->corrupted->seq_len) +
                                  " differs from " + std::to_string(T));
    }
  } else {
    own_graph.emplace(config_);
    graph = &*own_graph;
  }

  const bool capture = options.capture;
  const bool separate = capture || patch != nullptr || ad::active_tape() != nullptr;
  HookState hooks;
  hooks.seq_len = T;
  hooks.node_outputs.resize(graph->node_count());
  hooks.slot_inputs.resize(graph->slot_count());
  if (capture) {
    hooks.attention.resize(config_.n_layers * H);
    hooks.values.resize(config_.n_layers * H);
  }

  ad::Tensor x0;
  if (options.embedding != nullptr) {
    if (options.embedding->shape() != ad::Shape{T, d}) {
      throw ad::ShapeError("model: embedding override " + ad::shape_str(options.embedding->shape()) +
                           " should be " + ad::shape_str({T, d}));
    }
    x0 = *options.embedding;
  } else {
    x0 = embed(tokens);
  }
  hooks.node_outputs[graph->input_node()] = x0;

  ad::Tensor resid = x0;
  if (capture) hooks.residuals.push_back(resid);

  auto slot_input = [&](std::size_t slot) -> ad::Tensor {
    ad::Tensor in;
    if (patch) {
      in = patch->corrupted->slot_inputs[slot];
      for (std::size_t e : graph->incoming(slot)) {
        if (!patch->in_circuit[e]) continue;
        const std::size_t src = graph->edge_source(e);
        in = ad::add(in, ad::sub(hooks.node_outputs[src], patch->corrupted->node_outputs[src]));
      }
      in = ad::identity(in);
    } else {
      in = separate ? ad::identity(resid) : resid;
    }
    if (separate) hooks.slot_inputs[slot] = in;
    return in;
  };

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const Layer& L = layers_[l];
    std::vector<ad::Tensor> head_out(H);
    for (std::size_t h = 0; h < H; ++h) {
      auto project = [&](Channel c, std::size_t w, std::size_t b) {
        ad::Tensor in = slot_input(graph->head_slot(l, h, c));
        ad::Tensor normed = ad::layer_norm(in, p(L.ln1_g), p(L.ln1_b), eps);
        return ad::add_bias(ad::matmul(normed, ad::slice(p(w), 1, h * dh, dh)), ad::slice(p(b), 0, h * dh, dh));
      };
      ad::Tensor q = project(Channel::Q, L.wq, L.bq);
      ad::Tensor k = project(Channel::K, L.wk, L.bk);
      ad::Tensor v = project(Channel::V, L.wv, L.bv);
      ad::Tensor att = ad::softmax(
          ad::scale(ad::bmm(ad::reshape(q, {1, T, dh}), ad::reshape(k, {1, T, dh}), true), att_scale), true);
      ad::Tensor z = ad::reshape(ad::bmm(att, ad::reshape(v, {1, T, dh})), {T, dh});
      head_out[h] = ad::matmul(z, ad::slice(p(L.wo), 0, h * dh, dh));
      hooks.node_outputs[graph->head_node(l, h)] = head_out[h];
      if (capture) {
        hooks.attention[l * H + h] = ad::reshape(att, {T, T});
        hooks.values[l * H + h] = v;
      }
    }
    for (const auto& o : head_out) resid = ad::add(resid, o);

    ad::Tensor in = slot_input(graph->mlp_slot(l));
    ad::Tensor u = ad::gelu(ad::add_bias(ad::matmul(ad::layer_norm(in, p(L.ln2_g), p(L.ln2_b), eps), p(L.w1)), p(L.b1)));
    ad::Tensor out = ad::add_bias(ad::matmul(u, p(L.w2)), p(L.b2));
    hooks.node_outputs[graph->mlp_node(l)] = out;
    resid = ad::add(resid, out);
    if (capture) hooks.residuals.push_back(resid);
  }

  ad::Tensor in = slot_input(graph->logits_slot());
  RunResult result;
  result.logits = unembed_matmul(ad::layer_norm(in, p(lnf_g_), p(lnf_b_), eps));
  if (capture) result.hooks = std::move(hooks);
  return result;
}

std::vector<float> Model::unembed_residual(std::span<const float> residual, bool apply_final_norm) const {
  const std::size_t d = config_.d_model;
  if (residual.size() != d) {
    throw ad::ShapeError("unembed_residual: expected " + std::to_string(d) + " values, got " +
                         std::to_string(residual.size()));
  }
  ad::Tensor x = ad::Tensor::from_data({1, d}, std::vector<float>(residual.begin(), residual.end()));
  if (apply_final_norm) x = ad::layer_norm(x, p(lnf_g_), p(lnf_b_), config_.layernorm_epsilon);
  ad::Tensor logits = unembed_matmul(x);
  return {logits.data().begin(), logits.data().end()};
}

double Model::direct_logit(std::span<const float> contribution, int token, std::span<const float> final_residual,
                           bool apply_final_norm) const {
  const std::size_t d = config_.d_model;
  if (contribution.size() != d || final_residual.size() != d) {
    throw ad::ShapeError("direct_logit: vectors must have d_model values");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw std::out_of_range("direct_logit: token " + std::to_string(token) + " outside vocabulary");
  }
  const auto t = static_cast<std::size_t>(token);
  auto unembed = [&](std::size_t k) -> double {
    return config_.tie_unembedding ? p(wte_).data()[t * d + k] : p(wu_).data()[k * config_.vocab_size + t];
  };
  double mean_c = 0.0, scale = 1.0;
  if (apply_final_norm) {
    double mu = 0.0, var = 0.0;
    for (float v : final_residual) mu += v;
    mu /= static_cast<double>(d);
    for (float v : final_residual) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    scale = 1.0 / std::sqrt(var + config_.layernorm_epsilon);
    for (float v : contribution) mean_c += v;
    mean_c /= static_cast<double>(d);
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double g = apply_final_norm ? p(lnf_g_).data()[k] : 1.0;
    acc += (contribution[k] - mean_c) * scale * g * unembed(k);
  }
  return acc;
}

std::vector<float> Model::head_source_contributions(const HookState& hooks, std::size_t layer, std::size_t head,
                                                    std::size_t position) const {
  const std::size_t H = config_.n_heads, d = config_.d_model, dh = config_.d_head(), T = hooks.seq_len;
  if (layer >= config_.n_layers || head >= H || position >= T) {
    throw std::out_of_range("head_source_contributions: index out of range");
  }
  if (hooks.attention.size() != config_.n_layers * H) {
    throw std::invalid_argument("head_source_contributions: hooks were not captured");
  }
  const auto att = hooks.attention[layer * H + head].data();
  const auto val = hooks.values[layer * H + head].data();
  const auto wo = p(layers_[layer].wo).data();
  std::vector<float> out(T * d, 0.0f);
  for (std::size_t j = 0; j <= position; ++j) {
    const float a = att[position * T + j];
    for (std::size_t i = 0; i < dh; ++i) {
      const float av = a * val[j * dh + i];
      const float* row = wo.data() + (head * dh + i) * d;
      for (std::size_t k = 0; k < d; ++k) out[j * d + k] += av * row[k];
    }
  }
  return out;
}

}  // namespace kc
