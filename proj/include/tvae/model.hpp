#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tvae/batch.hpp"
#include "tvae/rng.hpp"
#include "tvae/tensor.hpp"

namespace tvae::model {

enum class Pooling { mean, max };
enum class PoolingScope { final_layer, all_layers };

std::string to_string(Pooling p);
std::string to_string(PoolingScope s);
Pooling parse_pooling(const std::string& s);
PoolingScope parse_pooling_scope(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;  // = heads * head_dim
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t ff_dim = 128;
  std::size_t latent_dim = 32;
  std::size_t max_seq_len = 32;
  Pooling pooling = Pooling::max;
  PoolingScope pooling_scope = PoolingScope::all_layers;
  double dropout = 0.0;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  /// Parameter count derived from the dimensions alone.
  std::size_t parameter_count() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameters in a fixed creation order.
template <typename T>
class ParameterMap {
 public:
  void add(std::string name, diff::Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  diff::Tensor<T>& at(const std::string& name);
  const diff::Tensor<T>& at(const std::string& name) const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, diff::Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// (mu, log sigma, epsilon, z) for a batch; z = mu + exp(log_sigma) * epsilon.
template <typename T>
struct LatentState {
  diff::Tensor<T> mu;
  diff::Tensor<T> log_sigma;
  diff::Tensor<T> epsilon;
  diff::Tensor<T> z;
};

enum class LatentMode {
  sampled,  // epsilon ~ N(0, I) from the supplied rng
  mean,     // epsilon = 0, z = mu
  fixed,    // epsilon supplied by the caller
};

template <typename T>
struct ForwardOptions {
  LatentMode latent = LatentMode::sampled;
  Rng* rng = nullptr;                        // epsilon draws and dropout
  const diff::Tensor<T>* epsilon = nullptr;  // LatentMode::fixed
  bool train = false;                        // enables dropout
};

template <typename T>
struct ForwardResult {
  diff::Tensor<T> logits;  // batch x tgt_len x vocab
  LatentState<T> latent;
};

/// Per-layer observation points for invariant checks.
template <typename T>
struct DecodeTrace {
  std::vector<diff::Tensor<T>> cross_attention;  // pre-residual sublayer output
};

/// Encoder-decoder Transformer with a Gaussian bottleneck. The encoder's
/// pooled states give (mu, log sigma); z is projected by w_proj into one
/// key/value slot per decoder layer, which is the only thing the decoder's
/// cross-attention can see.
///
/// Parameter names: encoder.* / decoder.* for the two stacks, plus w_mu,
/// w_sigma, w_proj. The decoder has its own embeddings so that freezing
/// "decoder.*" pins the whole p(x|z) path apart from w_proj.
template <typename T>
class TransformerVAE {
 public:
  using Tensor = diff::Tensor<T>;

  TransformerVAE(ModelConfig config, std::uint64_t seed);
  /// Adopts `params`; names and shapes must match the config exactly.
  TransformerVAE(ModelConfig config, ParameterMap<T> params);

  const ModelConfig& config() const { return config_; }
  ParameterMap<T>& parameters() { return params_; }
  const ParameterMap<T>& parameters() const { return params_; }

  /// Hidden states of the embedding output and of every encoder layer
  /// (enc_layers + 1 tensors of batch x len x hidden). The last one carries
  /// the final norm.
  std::vector<Tensor> encode(const diff::Ids& tokens, const diff::Mask& mask,
                             Rng* dropout_rng = nullptr) const;

  /// batch x hidden, mean or max over unmasked positions of the configured
  /// scope.
  Tensor pool(const std::vector<Tensor>& states, const diff::Mask& mask) const;

  std::pair<Tensor, Tensor> bottleneck(const Tensor& pooled) const;

  static LatentState<T> reparameterize(const Tensor& mu, const Tensor& log_sigma, Rng& rng);
  static LatentState<T> reparameterize(const Tensor& mu, const Tensor& log_sigma,
                                       const Tensor& epsilon);

  /// dec_layers slots, each batch x 1 x heads x head_dim. Each slot is used
  /// as both key and value of that layer's cross-attention.
  std::vector<Tensor> project_latent(const Tensor& z) const;

  Tensor decode(const std::vector<Tensor>& memory, const diff::Ids& tgt_in,
                const diff::Mask& tgt_mask, Rng* dropout_rng = nullptr,
                DecodeTrace<T>* trace = nullptr) const;

  ForwardResult<T> forward(const data::Batch& batch, const ForwardOptions<T>& options) const;

  /// Posterior parameters only (no sampling, no decoder).
  std::pair<Tensor, Tensor> posterior(const diff::Ids& src_ids, const diff::Mask& src_mask) const;

  /// Autoregressive decoding from the start token. temperature <= 0 is
  /// greedy; otherwise tokens are drawn from softmax(logits / temperature).
  /// Returned sequences exclude the start and end tokens.
  std::vector<std::vector<std::int32_t>> generate(const Tensor& z, std::size_t max_len,
                                                  double temperature = 0.0,
                                                  Rng* rng = nullptr) const;

  /// Greedy decodes along (1 - t) z1 + t z2 for t = 0, 1/(steps-1), ..., 1.
  /// z1 and z2 are single latent vectors (length latent_dim).
  std::vector<std::vector<std::int32_t>> interpolate(const Tensor& z1, const Tensor& z2,
                                                     std::size_t steps, std::size_t max_len) const;

  template <typename U>
  TransformerVAE<U> cast() const {
    ParameterMap<U> out;
    for (const auto& [name, p] : params_) out.add(name, diff::cast<U>(p, true));
    return TransformerVAE<U>(config_, std::move(out));
  }

 private:
  const Tensor& p(const std::string& name) const { return params_.at(name); }
  Tensor self_attention(const Tensor& x, const std::string& prefix, const diff::Mask& mask) const;
  Tensor cross_attention(const Tensor& x, const std::string& prefix, const Tensor& slot) const;
  Tensor feed_forward(const Tensor& x, const std::string& prefix) const;
  Tensor split_heads(const Tensor& x) const;
  Tensor merge_heads(const Tensor& x) const;
  Tensor embed(const std::string& stack, const diff::Ids& ids) const;
  void check_shapes() const;

  ModelConfig config_;
  ParameterMap<T> params_;
};

extern template class ParameterMap<float>;
extern template class ParameterMap<double>;
extern template class TransformerVAE<float>;
extern template class TransformerVAE<double>;

/// Shapes every parameter must have for `config`, in creation order.
std::vector<std::pair<std::string, diff::Shape>> parameter_layout(const ModelConfig& config);

}  // namespace tvae::model
