#include "tvae/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "tvae/error.hpp"

namespace tvae::data {

namespace {

const std::array<std::string, kReservedIds> kReservedNames = {"<pad>", "<s>", "</s>", "<unk>"};

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte: keep it as its own token
}

}  // namespace

std::string to_string(Tokenization t) { return t == Tokenization::word ? "word" : "char"; }

Tokenization parse_tokenization(const std::string& s) {
  if (s == "word") return Tokenization::word;
  if (s == "char") return Tokenization::character;
  throw ConfigError("tokenization must be 'word' or 'char', got '" + s + "'");
}

std::vector<std::string> tokenize(const std::string& line, Tokenization mode) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = line.size();
  while (i < n && is_space(static_cast<unsigned char>(line[i]))) ++i;
  while (i < n) {
    if (mode == Tokenization::word) {
      std::size_t j = i;
      while (j < n && !is_space(static_cast<unsigned char>(line[j]))) ++j;
      out.push_back(line.substr(i, j - i));
      i = j;
    } else {
      const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(line[i])), n - i);
      out.push_back(line.substr(i, len));
      i += len;
    }
    std::size_t j = i;
    while (j < n && is_space(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i && j < n && mode == Tokenization::character) out.emplace_back(Vocab::kSpace);
    i = j;
  }
  return out;
}

Vocab::Vocab() {
  for (const auto& name : kReservedNames) add(name);
}

void Vocab::add(const std::string& token) {
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::string>& lines, std::size_t max_size, std::size_t min_freq,
                   Tokenization mode) {
  if (max_size != 0 && max_size <= kReservedIds) {
    throw ConfigError("vocab max_size must exceed the 4 reserved ids (0 means unlimited)");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& line : lines) {
    for (auto& tok : tokenize(line, mode)) ++counts[tok];
  }
  if (counts.empty()) throw ValueError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, c] : counts) {
    const bool reserved = std::find(kReservedNames.begin(), kReservedNames.end(), tok) != kReservedNames.end();
    if (c >= std::max<std::size_t>(min_freq, 1) && !reserved) ranked.emplace_back(tok, c);
  }
  // counts is ordered, so a stable sort on frequency keeps ties lexicographic.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.mode_ = mode;
  for (const auto& [tok, c] : ranked) {
    if (max_size != 0 && v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::string header;
  std::getline(in, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  Vocab v;
  if (header == kHeader) {
    v.mode_ = Tokenization::word;
  } else if (header == std::string(kHeader) + " char") {
    v.mode_ = Tokenization::character;
  } else {
    throw IoError(path.string() + ": missing '#vocab v1' header");
  }
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw IoError(path.string() + ":" + std::to_string(line_no) + ": empty token");
    if (v.contains(line)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": duplicate token '" + line + "'");
    }
    v.add(line);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  out << kHeader << (mode_ == Tokenization::character ? " char" : "") << '\n';
  for (std::size_t i = kReservedIds; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::int32_t Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValueError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Sequence Vocab::encode(const std::string& line) const {
  Sequence out;
  for (const auto& tok : tokenize(line, mode_)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const Sequence& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string& tok = token(ids[i]);
    if (mode_ == Tokenization::word) {
      if (i) out += ' ';
      out += tok;
    } else {
      out += tok == kSpace ? " " : tok;
    }
  }
  return out;
}

std::vector<std::string> load_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && is_space(static_cast<unsigned char>(line.back()))) line.pop_back();
    const bool blank = std::all_of(line.begin(), line.end(),
                                   [](char c) { return is_space(static_cast<unsigned char>(c)); });
    if (!blank) lines.push_back(line);
  }
  return lines;
}

void save_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Sequence> encode_corpus(const std::vector<std::string>& lines, const Vocab& vocab) {
  std::vector<Sequence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(vocab.encode(l));
  return out;
}

Sequence delete_noise(const Sequence& ids, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ValueError("delete_noise: p must lie in [0, 1)");
  if (p == 0.0 || ids.empty()) return ids;
  Sequence out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (!rng.bernoulli(p)) out.push_back(id);
  }
  if (out.empty()) out.push_back(ids[rng.below(ids.size())]);
  return out;
}

std::size_t batch_count(std::size_t examples, std::size_t batch_size) {
  return batch_size == 0 ? 0 : (examples + batch_size - 1) / batch_size;
}

std::vector<Batch> batchify(const std::vector<Sequence>& sequences, const BatchOptions& options,
                            Rng& rng) {
  if (sequences.empty()) throw ValueError("batchify: no sequences");
  if (options.batch_size == 0) throw ValueError("batchify: batch_size must be positive");
  if (options.max_len < 3) throw ValueError("batchify: max_len must be at least 3");
  const std::size_t keep = options.max_len - 2;
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  if (options.shuffle) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
    const std::size_t b = std::min(options.batch_size, order.size() - start);
    std::vector<Sequence> src(b), clean(b);
    std::size_t src_len = 1, tgt_len = 1;
    for (std::size_t i = 0; i < b; ++i) {
      const Sequence& s = sequences[order[start + i]];
      clean[i].assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(keep, s.size())));
      src[i] = delete_noise(clean[i], options.noise, rng);
      src_len = std::max(src_len, src[i].size() + 1);
      tgt_len = std::max(tgt_len, clean[i].size() + 1);
    }
    Batch batch;
    batch.src_ids = diff::Ids({b, src_len}, kPadId);
    batch.src_mask = diff::Mask({b, src_len}, std::uint8_t{0});
    batch.tgt_in = diff::Ids({b, tgt_len}, kPadId);
    batch.tgt_out = diff::Ids({b, tgt_len}, kPadId);
    batch.tgt_mask = diff::Mask({b, tgt_len}, std::uint8_t{0});
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < src[i].size(); ++j) batch.src_ids.at(i, j) = src[i][j];
      batch.src_ids.at(i, src[i].size()) = kEndId;
      for (std::size_t j = 0; j <= src[i].size(); ++j) batch.src_mask.at(i, j) = 1;
      batch.tgt_in.at(i, 0) = kStartId;
      for (std::size_t j = 0; j < clean[i].size(); ++j) {
        batch.tgt_in.at(i, j + 1) = clean[i][j];
        batch.tgt_out.at(i, j) = clean[i][j];
      }
      batch.tgt_out.at(i, clean[i].size()) = kEndId;
      for (std::size_t j = 0; j <= clean[i].size(); ++j) batch.tgt_mask.at(i, j) = 1;
      batch.example_index.push_back(order[start + i]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---- synthetic corpus ----------------------------------------------------------

namespace {

struct Topic {
  std::array<const char*, 10> nouns;
  std::array<const char*, 6> verbs;
  std::array<const char*, 6> adjectives;
  std::array<const char*, 3> places;
};

const std::array<Topic, 8> kTopics = {{
    {{"dog", "cat", "horse", "rabbit", "fox", "owl", "goat", "mouse", "wolf", "deer"},
     {"chases", "watches", "follows", "sniffs", "greets", "ignores"},
     {"furry", "wild", "sleepy", "hungry", "tame", "spotted"},
     {"barn", "meadow", "forest"}},
    {{"bread", "soup", "cheese", "apple", "pie", "salad", "rice", "cake", "pasta", "stew"},
     {"cooks", "bakes", "tastes", "serves", "slices", "stirs"},
     {"warm", "sweet", "salty", "fresh", "spicy", "crisp"},
     {"kitchen", "bakery", "market"}},
    {{"bus", "tower", "bridge", "street", "train", "taxi", "plaza", "subway", "shop", "crowd"},
     {"crosses", "passes", "blocks", "fills", "circles", "reaches"},
     {"busy", "crowded", "tall", "noisy", "urban", "modern"},
     {"downtown", "station", "avenue"}},
    {{"ball", "team", "coach", "goal", "racket", "player", "match", "bat", "net", "referee"},
     {"kicks", "throws", "wins", "loses", "scores", "trains"},
     {"fast", "strong", "skilled", "rival", "young", "tired"},
     {"stadium", "court", "gym"}},
    {{"song", "guitar", "drum", "band", "piano", "choir", "melody", "violin", "singer", "tune"},
     {"plays", "hums", "tunes", "records", "performs", "practices"},
     {"loud", "soft", "catchy", "sad", "jazzy", "gentle"},
     {"studio", "concert", "theater"}},
    {{"storm", "cloud", "rain", "snow", "wind", "fog", "sun", "frost", "thunder", "breeze"},
     {"covers", "soaks", "freezes", "warms", "sweeps", "clears"},
     {"cold", "grey", "heavy", "bright", "icy", "humid"},
     {"valley", "coast", "hills"}},
    {{"robot", "laptop", "phone", "server", "screen", "camera", "printer", "router", "drone", "sensor"},
     {"scans", "charges", "updates", "crashes", "measures", "connects"},
     {"smart", "broken", "digital", "portable", "wireless", "new"},
     {"office", "lab", "factory"}},
    {{"boat", "whale", "wave", "shark", "sailor", "crab", "anchor", "island", "seal", "reef"},
     {"sails", "dives", "floats", "drifts", "swims", "splashes"},
     {"salty", "deep", "blue", "calm", "rough", "sandy"},
     {"harbor", "ocean", "beach"}},
}};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& words, Rng& rng) {
  return words[rng.below(N)];
}

}  // namespace

std::vector<std::string> synthetic_corpus(std::size_t lines, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(lines);
  for (std::size_t i = 0; i < lines; ++i) {
    const Topic& t = kTopics[rng.below(kTopics.size())];
    std::ostringstream os;
    switch (rng.below(6)) {
      case 0:
        os << "the " << pick(t.adjectives, rng) << ' ' << pick(t.nouns, rng) << ' ' << pick(t.verbs, rng)
           << " the " << pick(t.nouns, rng);
        break;
      case 1:
        os << "a " << pick(t.nouns, rng) << ' ' << pick(t.verbs, rng) << " near the " << pick(t.places, rng);
        break;
      case 2:
        os << "the " << pick(t.nouns, rng) << " and the " << pick(t.nouns, rng) << ' ' << pick(t.verbs, rng)
           << " in the " << pick(t.places, rng);
        break;
      case 3:
        os << "the very " << pick(t.adjectives, rng) << ' ' << pick(t.nouns, rng) << " often "
           << pick(t.verbs, rng);
        break;
      case 4:
        os << "a " << pick(t.adjectives, rng) << ' ' << pick(t.nouns, rng) << ' ' << pick(t.verbs, rng)
           << " with the " << pick(t.adjectives, rng) << ' ' << pick(t.nouns, rng);
        break;
      default:
        os << "in the " << pick(t.places, rng) << " the " << pick(t.nouns, rng) << ' '
           << pick(t.verbs, rng) << " quietly";
        break;
    }
    out.push_back(os.str());
  }
  return out;
}

}  // namespace tvae::data
