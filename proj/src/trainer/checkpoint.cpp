#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "tvae/error.hpp"
#include "tvae/trainer.hpp"

namespace tvae::trainer {

namespace {

using nlohmann::json;

constexpr char kMagic[] = "TVAE1\n";
constexpr std::size_t kMagicLen = 6;
constexpr int kFormatVersion = 1;

json config_to_json(const model::ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden", c.hidden},          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers}, {"heads", c.heads},            {"head_dim", c.head_dim},
          {"ff_dim", c.ff_dim},         {"latent_dim", c.latent_dim},  {"max_seq_len", c.max_seq_len},
          {"pooling", model::to_string(c.pooling)},
          {"pooling_scope", model::to_string(c.pooling_scope)},
          {"dropout", c.dropout}};
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.pooling = model::parse_pooling(j.at("pooling").get<std::string>());
  c.pooling_scope = model::parse_pooling_scope(j.at("pooling_scope").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  return c;
}

// JSON has no inf/nan; those are stored as strings.
json real_to_json(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double real_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  throw CheckpointError("bad number '" + s + "' in checkpoint header");
}

json report_to_json(const eval::MetricsReport& r) {
  return {{"ppl", real_to_json(r.ppl)},
          {"ppl_mode", eval::to_string(r.ppl_mode)},
          {"ppl_elbo", real_to_json(r.ppl_elbo)},
          {"ppl_iw", real_to_json(r.ppl_iw)},
          {"neg_elbo", real_to_json(r.neg_elbo)},
          {"recon_nll", real_to_json(r.recon_nll)},
          {"kl", real_to_json(r.kl)},
          {"mi", real_to_json(r.mi)},
          {"au", r.au},
          {"au_fraction", real_to_json(r.au_fraction)},
          {"latent_dim", r.latent_dim},
          {"token_count", r.token_count},
          {"example_count", r.example_count},
          {"mi_examples", r.mi_examples},
          {"au_delta", real_to_json(r.au_delta)},
          {"iw_samples", r.iw_samples},
          {"seed", r.seed}};
}

eval::MetricsReport report_from_json(const json& j) {
  eval::MetricsReport r;
  r.ppl = real_from_json(j.at("ppl"));
  r.ppl_mode = eval::parse_ppl_mode(j.at("ppl_mode").get<std::string>());
  r.ppl_elbo = real_from_json(j.at("ppl_elbo"));
  r.ppl_iw = real_from_json(j.at("ppl_iw"));
  r.neg_elbo = real_from_json(j.at("neg_elbo"));
  r.recon_nll = real_from_json(j.at("recon_nll"));
  r.kl = real_from_json(j.at("kl"));
  r.mi = real_from_json(j.at("mi"));
  r.au = j.at("au").get<std::size_t>();
  r.au_fraction = real_from_json(j.at("au_fraction"));
  r.latent_dim = j.at("latent_dim").get<std::size_t>();
  r.token_count = j.at("token_count").get<std::size_t>();
  r.example_count = j.at("example_count").get<std::size_t>();
  r.mi_examples = j.at("mi_examples").get<std::size_t>();
  r.au_delta = real_from_json(j.at("au_delta"));
  r.iw_samples = j.at("iw_samples").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::string& buf, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < n) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

json rng_to_json(const Rng::State& s) { return json::array({s[0], s[1], s[2], s[3]}); }

Rng::State rng_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw CheckpointError("bad rng state in checkpoint header");
  return {j[0].get<std::uint64_t>(), j[1].get<std::uint64_t>(), j[2].get<std::uint64_t>(), j[3].get<std::uint64_t>()};
}

}  // namespace

const Checkpoint::Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  json header = {{"format", kFormatVersion},
                 {"model", config_to_json(c.model_config)},
                 {"phase", c.phase},
                 {"epoch", c.epoch},
                 {"batch_in_epoch", c.batch_in_epoch},
                 {"step", c.step},
                 {"seed", c.seed},
                 {"epoch_data_rng", rng_to_json(c.epoch_data_rng)},
                 {"sample_rng", rng_to_json(c.sample_rng)},
                 {"optimizer_t", c.optimizer_t},
                 {"metrics", c.metrics ? report_to_json(*c.metrics) : json(nullptr)},
                 {"checksum", "crc32"}};
  const std::string h = header.dump();

  std::string out(kMagic, kMagicLen);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  put_u32(out, static_cast<std::uint32_t>(c.blobs.size()));
  for (const auto& b : c.blobs) {
    if (diff::shape_numel(b.shape) != b.data.size()) throw ValueError("blob " + b.name + " size does not match its shape");
    put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) put_u64(out, d);
    put_u64(out, b.data.size() * sizeof(float));
    for (float f : b.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  put_u32(out, crc32_of(out, out.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < kMagicLen + 12 || buf.compare(0, 4, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  if (buf.compare(0, kMagicLen, kMagic, kMagicLen) != 0) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version");
  }
  const std::size_t body = buf.size() - 4;
  Reader trailer(buf, buf.size());
  trailer.seek(body);
  if (trailer.u32() != crc32_of(buf, body)) throw CheckpointError(path.string() + ": checksum mismatch");

  Reader r(buf, body);
  r.seek(kMagicLen);
  json header;
  try {
    header = json::parse(r.bytes(r.u32()));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }

  Checkpoint c;
  try {
    if (header.at("format").get<int>() != kFormatVersion) {
      throw CheckpointError(path.string() + ": unsupported checkpoint version " + header.at("format").dump());
    }
    if (header.at("checksum").get<std::string>() != "crc32") throw CheckpointError("unknown checksum kind");
    c.model_config = config_from_json(header.at("model"));
    c.phase = header.at("phase").get<int>();
    c.epoch = header.at("epoch").get<std::size_t>();
    c.batch_in_epoch = header.at("batch_in_epoch").get<std::size_t>();
    c.step = header.at("step").get<std::size_t>();
    c.seed = header.at("seed").get<std::uint64_t>();
    c.epoch_data_rng = rng_from_json(header.at("epoch_data_rng"));
    c.sample_rng = rng_from_json(header.at("sample_rng"));
    c.optimizer_t = header.at("optimizer_t").get<std::size_t>();
    if (!header.at("metrics").is_null()) c.metrics = report_from_json(header.at("metrics"));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Blob b;
    b.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(path.string() + ": bad rank for blob " + b.name);
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::uint64_t bytes = r.u64();
    if (bytes != diff::shape_numel(b.shape) * sizeof(float)) {
      throw CheckpointError(path.string() + ": blob " + b.name + " size does not match its shape");
    }
    if (bytes > body - r.pos()) throw CheckpointError("checkpoint is truncated");
    b.data.resize(bytes / sizeof(float));
    for (auto& x : b.data) x = std::bit_cast<float>(r.u32());
    c.blobs.push_back(std::move(b));
  }
  if (r.pos() != body) throw CheckpointError(path.string() + ": trailing bytes after blobs");
  return c;
}

void load_parameters(const Checkpoint& c, Model& model) {
  std::size_t params = 0;
  for (const auto& b : c.blobs) params += b.name.rfind("param/", 0) == 0;
  if (params != model.parameters().size()) {
    throw DimensionError("checkpoint has " + std::to_string(params) + " parameters, model has " +
                         std::to_string(model.parameters().size()));
  }
  for (auto& [name, p] : model.parameters()) {
    const auto* b = c.find("param/" + name);
    if (!b) throw DimensionError("checkpoint is missing parameter " + name);
    if (b->shape != p.shape()) {
      throw DimensionError("parameter " + name + " has shape " + diff::shape_str(b->shape) + " in the checkpoint but " +
                           diff::shape_str(p.shape()) + " in the model");
    }
  }
  for (auto& [name, p] : model.parameters()) {
    const auto* b = c.find("param/" + name);
    std::copy(b->data.begin(), b->data.end(), p.mutable_data().begin());
  }
}

Model model_from_checkpoint(const Checkpoint& c) {
  c.model_config.validate();
  model::ParameterMap<float> params;
  for (const auto& [name, shape] : model::parameter_layout(c.model_config)) {
    const auto* b = c.find("param/" + name);
    if (!b) throw DimensionError("checkpoint is missing parameter " + name);
    if (b->shape != shape) {
      throw DimensionError("parameter " + name + " has shape " + diff::shape_str(b->shape) + ", config needs " +
                           diff::shape_str(shape));
    }
    params.add(name, diff::Tensor<float>(shape, b->data, true));
  }
  return Model(c.model_config, std::move(params));
}

}  // namespace tvae::trainer
