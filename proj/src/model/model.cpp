#include "tvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tvae/error.hpp"
#include "tvae/ops.hpp"

namespace tvae::model {

using diff::Ids;
using diff::Mask;
using diff::Shape;

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "max"; }

std::string to_string(PoolingScope s) {
  return s == PoolingScope::final_layer ? "final_layer" : "all_layers";
}

Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  throw ConfigError("pooling must be 'mean' or 'max', got '" + s + "'");
}

PoolingScope parse_pooling_scope(const std::string& s) {
  if (s == "final_layer") return PoolingScope::final_layer;
  if (s == "all_layers") return PoolingScope::all_layers;
  throw ConfigError("pooling_scope must be 'final_layer' or 'all_layers', got '" + s + "'");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  need(vocab_size > data::kReservedIds, "vocab_size must exceed the 4 reserved ids");
  need(hidden > 0 && heads > 0 && head_dim > 0, "hidden, heads and head_dim must be positive");
  need(hidden == heads * head_dim, "hidden must equal heads * head_dim");
  need(enc_layers > 0 && dec_layers > 0, "layer counts must be positive");
  need(ff_dim > 0, "ff_dim must be positive");
  need(latent_dim >= 1, "latent_dim must be at least 1");
  need(max_seq_len >= 2, "max_seq_len must be at least 2");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t h = hidden, v = vocab_size, m = max_seq_len, f = ff_dim, d = latent_dim;
  const std::size_t embeddings = v * h + m * h;
  const std::size_t enc_layer = 4 * h * h + 2 * h + 2 * h * f;
  const std::size_t dec_layer = 4 * h * h + 2 * h * h + 3 * h + 2 * h * f;
  const std::size_t encoder = embeddings + enc_layers * enc_layer + h;
  const std::size_t bottleneck = 2 * h * d + d * dec_layers * heads * head_dim;
  const std::size_t decoder = embeddings + dec_layers * dec_layer + h + h * v;
  return encoder + bottleneck + decoder;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const std::size_t h = c.hidden;
  std::vector<std::pair<std::string, Shape>> out;
  auto layer_common = [&](const std::string& pre) {
    out.emplace_back(pre + "norm1", Shape{h});
    for (const char* w : {"q", "k", "v", "o"}) out.emplace_back(pre + "self_attn." + w, Shape{h, h});
    out.emplace_back(pre + "norm2", Shape{h});
  };
  out.emplace_back("encoder.embed", Shape{c.vocab_size, h});
  out.emplace_back("encoder.pos", Shape{c.max_seq_len, h});
  for (std::size_t i = 0; i < c.enc_layers; ++i) {
    const std::string pre = "encoder.layers." + std::to_string(i) + ".";
    layer_common(pre);
    out.emplace_back(pre + "ff.w1", Shape{h, c.ff_dim});
    out.emplace_back(pre + "ff.w2", Shape{c.ff_dim, h});
  }
  out.emplace_back("encoder.final_norm", Shape{h});
  out.emplace_back("w_mu", Shape{h, c.latent_dim});
  out.emplace_back("w_sigma", Shape{h, c.latent_dim});
  out.emplace_back("w_proj", Shape{c.latent_dim, c.dec_layers * c.heads * c.head_dim});
  out.emplace_back("decoder.embed", Shape{c.vocab_size, h});
  out.emplace_back("decoder.pos", Shape{c.max_seq_len, h});
  for (std::size_t i = 0; i < c.dec_layers; ++i) {
    const std::string pre = "decoder.layers." + std::to_string(i) + ".";
    layer_common(pre);
    out.emplace_back(pre + "cross_attn.q", Shape{h, h});
    out.emplace_back(pre + "cross_attn.o", Shape{h, h});
    out.emplace_back(pre + "norm3", Shape{h});
    out.emplace_back(pre + "ff.w1", Shape{h, c.ff_dim});
    out.emplace_back(pre + "ff.w2", Shape{c.ff_dim, h});
  }
  out.emplace_back("decoder.final_norm", Shape{h});
  out.emplace_back("decoder.lm_head", Shape{h, c.vocab_size});
  return out;
}

// ---- ParameterMap ------------------------------------------------------------

template <typename T>
void ParameterMap<T>::add(std::string name, diff::Tensor<T> tensor) {
  if (index_.count(name)) throw ValueError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

template <typename T>
diff::Tensor<T>& ParameterMap<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
const diff::Tensor<T>& ParameterMap<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
std::size_t ParameterMap<T>::numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

template <typename T>
void ParameterMap<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

// ---- TransformerVAE ------------------------------------------------------------

namespace {

bool is_norm(const std::string& name) { return name.find("norm") != std::string::npos; }
bool is_embedding(const std::string& name) {
  return name.ends_with(".embed") || name.ends_with(".pos");
}

Mask key_padding_mask(const Mask& mask) {
  const std::size_t b = mask.shape[0], l = mask.shape[1];
  return Mask({b, 1, 1, l}, mask.values);
}

Mask causal_mask(const Mask& tgt_mask) {
  const std::size_t b = tgt_mask.shape[0], t = tgt_mask.shape[1];
  Mask m({b, 1, t, t}, std::uint8_t{0});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        m.values[(bi * t + i) * t + j] = tgt_mask.values[bi * t + j];
      }
    }
  }
  return m;
}

void check_grid(const Ids& ids, const Mask& mask, std::size_t max_len, const char* what) {
  if (ids.shape.size() != 2 || mask.shape != ids.shape) {
    throw DimensionError(std::string(what) + ": ids " + diff::shape_str(ids.shape) + " and mask " +
                         diff::shape_str(mask.shape) + " must be matching batch x len grids");
  }
  if (ids.shape[1] > max_len) {
    throw DimensionError(std::string(what) + ": sequence length " + std::to_string(ids.shape[1]) +
                         " exceeds max_seq_len " + std::to_string(max_len));
  }
}

}  // namespace

template <typename T>
TransformerVAE<T>::TransformerVAE(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  for (auto& [name, shape] : parameter_layout(config_)) {
    const std::size_t n = diff::shape_numel(shape);
    std::vector<T> values(n);
    if (is_norm(name)) {
      std::fill(values.begin(), values.end(), T(1));
    } else {
      const double stddev = is_embedding(name) ? 1.0 : 0.02;
      for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
    }
    params_.add(name, Tensor(shape, std::move(values), true));
  }
}

template <typename T>
TransformerVAE<T>::TransformerVAE(ModelConfig config, ParameterMap<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  check_shapes();
}

template <typename T>
void TransformerVAE<T>::check_shapes() const {
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.size()) {
    throw DimensionError("parameter set has " + std::to_string(params_.size()) +
                         " tensors, config expects " + std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw DimensionError("missing parameter '" + name + "'");
    const auto& got = params_.at(name).shape();
    if (got != shape) {
      throw DimensionError("parameter '" + name + "' has shape " + diff::shape_str(got) +
                           ", config expects " + diff::shape_str(shape));
    }
  }
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::split_heads(const Tensor& x) const {
  const std::size_t b = x.dim(0), l = x.dim(1);
  return diff::permute(diff::reshape(x, {b, l, config_.heads, config_.head_dim}), {0, 2, 1, 3});
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::merge_heads(const Tensor& x) const {
  const std::size_t b = x.dim(0), l = x.dim(2);
  return diff::reshape(diff::permute(x, {0, 2, 1, 3}), {b, l, config_.hidden});
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::embed(const std::string& stack,
                                                            const Ids& ids) const {
  const std::size_t len = ids.shape[1];
  const Tensor tokens = diff::embedding(p(stack + ".embed"), ids);
  return diff::add(tokens, diff::slice(p(stack + ".pos"), 0, 0, len));
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::self_attention(const Tensor& x,
                                                                     const std::string& prefix,
                                                                     const Mask& mask) const {
  const Tensor q = split_heads(diff::matmul(x, p(prefix + ".q")));
  const Tensor k = split_heads(diff::matmul(x, p(prefix + ".k")));
  const Tensor v = split_heads(diff::matmul(x, p(prefix + ".v")));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(config_.head_dim));
  const Tensor scores = diff::scale(diff::matmul(q, diff::permute(k, {0, 1, 3, 2})), inv_sqrt);
  const Tensor ctx = diff::matmul(diff::masked_softmax(scores, mask), v);
  return diff::matmul(merge_heads(ctx), p(prefix + ".o"));
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::cross_attention(const Tensor& x,
                                                                      const std::string& prefix,
                                                                      const Tensor& slot) const {
  // The slot is batch x 1 x heads x head_dim and serves as key and value.
  const Tensor q = split_heads(diff::matmul(x, p(prefix + ".q")));
  const Tensor kv = diff::permute(slot, {0, 2, 1, 3});
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(config_.head_dim));
  const Tensor scores = diff::scale(diff::matmul(q, diff::permute(kv, {0, 1, 3, 2})), inv_sqrt);
  const Tensor ctx = diff::matmul(diff::masked_softmax(scores, Mask({1}, std::uint8_t{1})), kv);
  return diff::matmul(merge_heads(ctx), p(prefix + ".o"));
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::feed_forward(const Tensor& x,
                                                                   const std::string& prefix) const {
  return diff::matmul(diff::gelu(diff::matmul(x, p(prefix + ".w1"))), p(prefix + ".w2"));
}

template <typename T>
std::vector<typename TransformerVAE<T>::Tensor> TransformerVAE<T>::encode(const Ids& tokens,
                                                                          const Mask& mask,
                                                                          Rng* dropout_rng) const {
  check_grid(tokens, mask, config_.max_seq_len, "encode");
  const double rate = dropout_rng ? config_.dropout : 0.0;
  Rng unused;
  Rng& drng = dropout_rng ? *dropout_rng : unused;
  const Mask attn_mask = key_padding_mask(mask);
  std::vector<Tensor> states;
  Tensor x = diff::dropout(embed("encoder", tokens), rate, drng);
  states.push_back(x);
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    const std::string pre = "encoder.layers." + std::to_string(i) + ".";
    Tensor h = diff::layer_norm(x, p(pre + "norm1"));
    x = diff::add(x, diff::dropout(self_attention(h, pre + "self_attn", attn_mask), rate, drng));
    h = diff::layer_norm(x, p(pre + "norm2"));
    x = diff::add(x, diff::dropout(feed_forward(h, pre + "ff"), rate, drng));
    states.push_back(i + 1 == config_.enc_layers ? diff::layer_norm(x, p("encoder.final_norm")) : x);
  }
  return states;
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::pool(const std::vector<Tensor>& states,
                                                           const Mask& mask) const {
  const std::size_t b = mask.shape[0], l = mask.shape[1];
  Tensor x;
  Mask m;
  if (config_.pooling_scope == PoolingScope::final_layer) {
    x = states.back();
    m = Mask({b, l, 1}, mask.values);
  } else {
    x = diff::concat(states, 1);
    const std::size_t layers = states.size();
    m = Mask({b, layers * l, 1}, std::uint8_t{0});
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t s = 0; s < layers; ++s) {
        for (std::size_t j = 0; j < l; ++j) m.values[(bi * layers + s) * l + j] = mask.values[bi * l + j];
      }
    }
  }
  return config_.pooling == Pooling::mean ? diff::masked_mean(x, m, 1) : diff::masked_max(x, m, 1);
}

template <typename T>
std::pair<typename TransformerVAE<T>::Tensor, typename TransformerVAE<T>::Tensor>
TransformerVAE<T>::bottleneck(const Tensor& pooled) const {
  return {diff::matmul(pooled, p("w_mu")), diff::matmul(pooled, p("w_sigma"))};
}

template <typename T>
LatentState<T> TransformerVAE<T>::reparameterize(const Tensor& mu, const Tensor& log_sigma,
                                                 const Tensor& epsilon) {
  if (mu.shape() != log_sigma.shape() || mu.shape() != epsilon.shape()) {
    throw DimensionError("reparameterize: mu " + diff::shape_str(mu.shape()) + ", log_sigma " +
                         diff::shape_str(log_sigma.shape()) + ", epsilon " +
                         diff::shape_str(epsilon.shape()));
  }
  const Tensor eps = epsilon.detach();
  const Tensor z = diff::add(mu, diff::mul(diff::exp(log_sigma), eps));
  return {mu, log_sigma, eps, z};
}

template <typename T>
LatentState<T> TransformerVAE<T>::reparameterize(const Tensor& mu, const Tensor& log_sigma,
                                                 Rng& rng) {
  std::vector<T> eps(mu.numel());
  for (auto& e : eps) e = static_cast<T>(rng.normal());
  return reparameterize(mu, log_sigma, Tensor(mu.shape(), std::move(eps)));
}

template <typename T>
std::vector<typename TransformerVAE<T>::Tensor> TransformerVAE<T>::project_latent(
    const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != config_.latent_dim) {
    throw DimensionError("project_latent: z has shape " + diff::shape_str(z.shape()) +
                         ", expected batch x " + std::to_string(config_.latent_dim));
  }
  const std::size_t b = z.dim(0);
  const Tensor proj = diff::reshape(diff::matmul(z, p("w_proj")),
                                    {b, config_.dec_layers, config_.heads, config_.head_dim});
  std::vector<Tensor> slots;
  for (std::size_t l = 0; l < config_.dec_layers; ++l) slots.push_back(diff::slice(proj, 1, l, 1));
  return slots;
}

template <typename T>
typename TransformerVAE<T>::Tensor TransformerVAE<T>::decode(const std::vector<Tensor>& memory,
                                                             const Ids& tgt_in, const Mask& tgt_mask,
                                                             Rng* dropout_rng,
                                                             DecodeTrace<T>* trace) const {
  check_grid(tgt_in, tgt_mask, config_.max_seq_len, "decode");
  if (memory.size() != config_.dec_layers) {
    throw DimensionError("decode: " + std::to_string(memory.size()) + " memory slots for " +
                         std::to_string(config_.dec_layers) + " decoder layers");
  }
  const double rate = dropout_rng ? config_.dropout : 0.0;
  Rng unused;
  Rng& drng = dropout_rng ? *dropout_rng : unused;
  const Mask attn_mask = causal_mask(tgt_mask);
  Tensor x = diff::dropout(embed("decoder", tgt_in), rate, drng);
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    const std::string pre = "decoder.layers." + std::to_string(i) + ".";
    Tensor h = diff::layer_norm(x, p(pre + "norm1"));
    x = diff::add(x, diff::dropout(self_attention(h, pre + "self_attn", attn_mask), rate, drng));
    h = diff::layer_norm(x, p(pre + "norm2"));
    const Tensor cross = cross_attention(h, pre + "cross_attn", memory[i]);
    if (trace) trace->cross_attention.push_back(cross);
    x = diff::add(x, diff::dropout(cross, rate, drng));
    h = diff::layer_norm(x, p(pre + "norm3"));
    x = diff::add(x, diff::dropout(feed_forward(h, pre + "ff"), rate, drng));
  }
  x = diff::layer_norm(x, p("decoder.final_norm"));
  return diff::matmul(x, p("decoder.lm_head"));
}

template <typename T>
std::pair<typename TransformerVAE<T>::Tensor, typename TransformerVAE<T>::Tensor>
TransformerVAE<T>::posterior(const Ids& src_ids, const Mask& src_mask) const {
  return bottleneck(pool(encode(src_ids, src_mask), src_mask));
}

template <typename T>
ForwardResult<T> TransformerVAE<T>::forward(const data::Batch& batch,
                                            const ForwardOptions<T>& options) const {
  Rng* dropout_rng = nullptr;
  if (options.train && config_.dropout > 0.0) {
    if (!options.rng) throw ValueError("forward: dropout in training mode needs an rng");
    dropout_rng = options.rng;
  }
  const auto states = encode(batch.src_ids, batch.src_mask, dropout_rng);
  const auto [mu, log_sigma] = bottleneck(pool(states, batch.src_mask));
  LatentState<T> latent;
  switch (options.latent) {
    case LatentMode::sampled:
      if (!options.rng) throw ValueError("forward: sampled latent mode needs an rng");
      latent = reparameterize(mu, log_sigma, *options.rng);
      break;
    case LatentMode::mean:
      latent = reparameterize(mu, log_sigma, Tensor::zeros(mu.shape()));
      break;
    case LatentMode::fixed:
      if (!options.epsilon) throw ValueError("forward: fixed latent mode needs epsilon");
      latent = reparameterize(mu, log_sigma, *options.epsilon);
      break;
  }
  Tensor logits = decode(project_latent(latent.z), batch.tgt_in, batch.tgt_mask, dropout_rng);
  return {std::move(logits), std::move(latent)};
}

template <typename T>
std::vector<std::vector<std::int32_t>> TransformerVAE<T>::generate(const Tensor& z,
                                                                   std::size_t max_len,
                                                                   double temperature,
                                                                   Rng* rng) const {
  if (temperature > 0.0 && !rng) throw ValueError("generate: temperature sampling needs an rng");
  diff::NoGradGuard no_grad;
  const std::size_t b = z.dim(0);
  const std::size_t v = config_.vocab_size;
  const std::size_t steps = std::min(max_len, config_.max_seq_len);
  const auto memory = project_latent(z);
  std::vector<std::vector<std::int32_t>> prefix(b, std::vector<std::int32_t>{data::kStartId});
  std::vector<std::vector<std::int32_t>> out(b);
  std::vector<bool> done(b, false);
  std::vector<double> scores(v);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t len = t + 1;
    Ids ids({b, len}, std::int32_t{0});
    for (std::size_t bi = 0; bi < b; ++bi) {
      std::copy(prefix[bi].begin(), prefix[bi].end(), ids.values.begin() + static_cast<std::ptrdiff_t>(bi * len));
    }
    const Tensor logits = decode(memory, ids, Mask({b, len}, std::uint8_t{1}));
    const auto ld = logits.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
      std::int32_t token = data::kPadId;
      if (!done[bi]) {
        const T* row = ld.data() + (bi * len + t) * v;
        for (std::size_t j = 0; j < v; ++j) scores[j] = static_cast<double>(row[j]);
        // Never emit pad or start.
        scores[data::kPadId] = scores[data::kStartId] = -std::numeric_limits<double>::infinity();
        if (temperature <= 0.0) {
          token = static_cast<std::int32_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
        } else {
          const double peak = *std::max_element(scores.begin(), scores.end());
          double total = 0;
          for (auto& s : scores) {
            s = std::exp((s - peak) / temperature);
            total += s;
          }
          double u = rng->uniform() * total;
          token = static_cast<std::int32_t>(v - 1);
          for (std::size_t j = 0; j < v; ++j) {
            if (scores[j] == 0.0) continue;
            u -= scores[j];
            if (u < 0) {
              token = static_cast<std::int32_t>(j);
              break;
            }
          }
          // Guard the rounding tail: fall back to the last positive-mass id.
          if (scores[static_cast<std::size_t>(token)] == 0.0) {
            for (std::size_t j = v; j-- > 0;) {
              if (scores[j] > 0.0) {
                token = static_cast<std::int32_t>(j);
                break;
              }
            }
          }
        }
        if (token == data::kEndId) {
          done[bi] = true;
        } else {
          out[bi].push_back(token);
        }
      }
      prefix[bi].push_back(token);
    }
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
  }
  return out;
}

template <typename T>
std::vector<std::vector<std::int32_t>> TransformerVAE<T>::interpolate(const Tensor& z1,
                                                                      const Tensor& z2,
                                                                      std::size_t steps,
                                                                      std::size_t max_len) const {
  if (steps < 2) throw ValueError("interpolate: steps must be at least 2");
  const std::size_t d = config_.latent_dim;
  if (z1.numel() != d || z2.numel() != d) {
    throw DimensionError("interpolate: endpoints must hold " + std::to_string(d) + " values");
  }
  std::vector<T> path(steps * d);
  for (std::size_t i = 0; i < steps; ++i) {
    const T t = static_cast<T>(i) / static_cast<T>(steps - 1);
    for (std::size_t j = 0; j < d; ++j) path[i * d + j] = (T(1) - t) * z1[j] + t * z2[j];
  }
  return generate(Tensor({steps, d}, std::move(path)), max_len);
}

template class ParameterMap<float>;
template class ParameterMap<double>;
template class TransformerVAE<float>;
template class TransformerVAE<double>;

}  // namespace tvae::model
