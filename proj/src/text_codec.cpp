#include "rvt/text_codec.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "rvt/hashing.hpp"

namespace rvt {

using nlohmann::json;

namespace special {
std::string role_begin(std::string_view role) { return "<|b_" + std::string(role) + "|>"; }
std::string role_end(std::string_view role) { return "<|e_" + std::string(role) + "|>"; }
}  // namespace special

namespace {

constexpr std::size_t kByteSymbols = 256;

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// Printable stand-ins for raw bytes so merges survive a JSON round trip.
// Same table as the byte-level BPE used by GPT-2 tokenizers.
const std::array<std::string, 256>& byte_to_unicode() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    int next = 0;
    for (int b = 0; b < 256; ++b) {
      std::uint32_t cp = direct[b] ? static_cast<std::uint32_t>(b) : 256u + next++;
      std::string s;
      if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
      } else {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
      }
      t[b] = std::move(s);
    }
    return t;
  }();
  return table;
}

std::string bytes_to_printable(std::string_view raw) {
  const auto& table = byte_to_unicode();
  std::string out;
  for (unsigned char c : raw) out += table[c];
  return out;
}

std::string printable_to_bytes(std::string_view printable) {
  static const std::unordered_map<std::string, unsigned char> inverse = [] {
    std::unordered_map<std::string, unsigned char> m;
    const auto& table = byte_to_unicode();
    for (int b = 0; b < 256; ++b) m.emplace(table[b], static_cast<unsigned char>(b));
    return m;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < printable.size()) {
    const auto lead = static_cast<unsigned char>(printable[i]);
    const std::size_t len = lead < 0x80 ? 1 : 2;
    auto it = inverse.find(std::string(printable.substr(i, len)));
    if (it == inverse.end()) throw std::runtime_error("vocabulary: invalid merge symbol encoding");
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

bool valid_role_name(std::string_view role) {
  if (role.empty()) return false;
  return std::all_of(role.begin(), role.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

// Splits text into alternating plain chunks and special tokens. Longest
// special wins when two start at the same offset.
template <typename OnText, typename OnSpecial>
void split_specials(std::string_view text, const std::vector<std::string>& specials,
                    OnText&& on_text, OnSpecial&& on_special) {
  std::size_t start = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == '<' && pos + 1 < text.size() && text[pos + 1] == '|') {
      std::size_t best = specials.size();
      std::size_t best_len = 0;
      for (std::size_t s = 0; s < specials.size(); ++s) {
        const auto& tok = specials[s];
        if (tok.size() > best_len && text.compare(pos, tok.size(), tok) == 0) {
          best = s;
          best_len = tok.size();
        }
      }
      if (best != specials.size()) {
        if (pos > start) on_text(text.substr(start, pos - start));
        on_special(best);
        pos += best_len;
        start = pos;
        continue;
      }
    }
    ++pos;
  }
  if (start < text.size()) on_text(text.substr(start));
}

}  // namespace

SpecialTokenInventory SpecialTokenInventory::with_roles(std::vector<std::string> roles) {
  SpecialTokenInventory inv;
  for (auto t : {special::kPad, special::kUnk, special::kBeginQuestion, special::kEndQuestion,
                 special::kBeginAnswer, special::kEndAnswer, special::kBeginRationale,
                 special::kEndRationale, special::kBeginObjects, special::kEndObjects,
                 special::kBeginSituation, special::kEndSituation, special::kBeginVerb,
                 special::kEndVerb, special::kBeginPlace, special::kEndPlace,
                 special::kBeginBefore, special::kBeginAfter, special::kBeginIntent}) {
    inv.tokens.emplace_back(t);
  }
  for (const auto& role : roles) {
    if (!valid_role_name(role)) throw std::invalid_argument("invalid role name '" + role + "'");
    inv.tokens.push_back(special::role_begin(role));
    inv.tokens.push_back(special::role_end(role));
  }
  inv.roles = std::move(roles);
  inv.validate();
  return inv;
}

void SpecialTokenInventory::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens) {
    if (t.empty()) throw std::invalid_argument("empty special token");
    if (!seen.insert(t).second) throw std::invalid_argument("duplicate special token " + t);
  }
  for (std::string_view required :
       {special::kPad, special::kUnk, special::kBeginRationale, special::kEndRationale}) {
    if (!seen.count(std::string(required)))
      throw std::invalid_argument("special inventory lacks " + std::string(required));
  }
  for (const auto& role : roles) {
    if (!seen.count(special::role_begin(role)) || !seen.count(special::role_end(role)))
      throw std::invalid_argument("special inventory lacks delimiters for role " + role);
  }
}

std::vector<std::string> load_role_inventory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open role inventory " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string content = ss.str();
  const auto first = content.find_first_not_of(" \t\r\n");
  std::vector<std::string> roles;
  if (first != std::string::npos && content[first] == '[') {
    roles = json::parse(content).get<std::vector<std::string>>();
  } else {
    std::istringstream lines(content);
    std::string line;
    while (std::getline(lines, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line.erase(0, line.find_first_not_of(" \t\r"));
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (!line.empty()) roles.push_back(line);
    }
  }
  return roles;
}

Vocabulary::Vocabulary(SpecialTokenInventory specials,
                       std::vector<std::pair<std::string, std::string>> merges)
    : specials_(std::move(specials)), merges_(std::move(merges)) {
  specials_.validate();
  for (const auto& t : specials_.tokens) {
    special_to_id_.emplace(t, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(t);
  }
  for (std::size_t b = 0; b < kByteSymbols; ++b) {
    std::string s(1, static_cast<char>(b));
    token_to_id_.emplace(s, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(s));
  }
  for (std::size_t rank = 0; rank < merges_.size(); ++rank) {
    const auto& [left, right] = merges_[rank];
    auto l = token_to_id_.find(left);
    auto r = token_to_id_.find(right);
    if (l == token_to_id_.end() || r == token_to_id_.end())
      throw std::invalid_argument("merge " + std::to_string(rank) + " references an unknown token");
    const std::string merged = left + right;
    auto [it, fresh] = token_to_id_.emplace(merged, static_cast<TokenId>(id_to_token_.size()));
    if (fresh) id_to_token_.push_back(merged);
    const auto key = pair_key(l->second, r->second);
    if (merge_ranks_.count(key))
      throw std::invalid_argument("duplicate merge at rank " + std::to_string(rank));
    merge_ranks_.emplace(key, std::make_pair(static_cast<std::uint32_t>(rank), it->second));
  }
}

std::vector<TokenId> Vocabulary::encode_chunk(std::string_view chunk) const {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  const auto base = static_cast<TokenId>(specials_.size());
  for (unsigned char c : chunk) ids.push_back(base + c);
  while (ids.size() > 1) {
    std::uint32_t best_rank = UINT32_MAX;
    TokenId best_left = 0, best_right = 0, merged = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = merge_ranks_.find(pair_key(ids[i], ids[i + 1]));
      if (it != merge_ranks_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_left = ids[i];
        best_right = ids[i + 1];
        merged = it->second.second;
      }
    }
    if (best_rank == UINT32_MAX) break;
    std::vector<TokenId> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == best_left && ids[i + 1] == best_right) {
        next.push_back(merged);
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids.swap(next);
  }
  return ids;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  split_specials(
      text, specials_.tokens,
      [&](std::string_view chunk) {
        auto ids = encode_chunk(chunk);
        out.insert(out.end(), ids.begin(), ids.end());
      },
      [&](std::size_t special) { out.push_back(static_cast<TokenId>(special)); });
  return out;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    out += id_to_token_[static_cast<std::size_t>(id)];
  }
  return out;
}

TokenId Vocabulary::special_id(std::string_view token) const {
  auto it = special_to_id_.find(std::string(token));
  if (it == special_to_id_.end())
    throw std::out_of_range("unknown special token " + std::string(token));
  return it->second;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const std::string key(token);
  if (auto it = special_to_id_.find(key); it != special_to_id_.end()) return it->second;
  if (auto it = token_to_id_.find(key); it != token_to_id_.end()) return it->second;
  return std::nullopt;
}

std::pair<TokenId, TokenId> Vocabulary::role_delimiters(std::string_view role) const {
  auto b = special_to_id_.find(special::role_begin(role));
  auto e = special_to_id_.find(special::role_end(role));
  if (b == special_to_id_.end() || e == special_to_id_.end())
    throw std::invalid_argument("role '" + std::string(role) + "' is not in the role inventory");
  return {b->second, e->second};
}

std::string Vocabulary::to_json() const {
  json merges = json::array();
  for (const auto& [l, r] : merges_)
    merges.push_back(json::array({bytes_to_printable(l), bytes_to_printable(r)}));
  json j;
  j["version"] = 1;
  j["merges"] = std::move(merges);
  j["specials"] = specials_.tokens;
  j["role_inventory"] = specials_.roles;
  return j.dump();
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  const json j = json::parse(text);
  if (j.value("version", 0) != 1) throw std::runtime_error("vocabulary: unsupported version");
  SpecialTokenInventory inv;
  inv.tokens = j.at("specials").get<std::vector<std::string>>();
  inv.roles = j.value("role_inventory", std::vector<std::string>{});
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& m : j.at("merges")) {
    if (!m.is_array() || m.size() != 2) throw std::runtime_error("vocabulary: merge must be a pair");
    merges.emplace_back(printable_to_bytes(m[0].get<std::string>()),
                        printable_to_bytes(m[1].get<std::string>()));
  }
  return Vocabulary(std::move(inv), std::move(merges));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string Vocabulary::hash() const { return sha256_hex(to_json()); }

Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_size,
                     SpecialTokenInventory specials) {
  specials.validate();
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
  const std::size_t floor = specials.size() + kByteSymbols;
  if (target_size < floor)
    throw std::invalid_argument("train_bpe: target size " + std::to_string(target_size) +
                                " is below specials + 256 = " + std::to_string(floor));

  // Symbols are tracked by their byte strings during training; ids for
  // tie-breaking follow the final vocabulary layout.
  std::vector<std::string> symbols;
  std::unordered_map<std::string, TokenId> symbol_id;
  for (std::size_t b = 0; b < kByteSymbols; ++b) {
    std::string s(1, static_cast<char>(b));
    symbol_id.emplace(s, static_cast<TokenId>(floor - kByteSymbols + b));
    symbols.push_back(std::move(s));
  }

  std::map<std::string, std::size_t> chunk_counts;
  bool any_text = false;
  for (const auto& doc : corpus) {
    split_specials(
        doc, specials.tokens,
        [&](std::string_view chunk) {
          ++chunk_counts[std::string(chunk)];
          any_text = true;
        },
        [](std::size_t) {});
  }
  if (!any_text && target_size > floor)
    throw std::invalid_argument("train_bpe: corpus contains no text");

  std::vector<std::pair<std::vector<TokenId>, std::size_t>> words;
  for (const auto& [chunk, count] : chunk_counts) {
    std::vector<TokenId> ids;
    for (unsigned char c : chunk) ids.push_back(static_cast<TokenId>(floor - kByteSymbols + c));
    words.emplace_back(std::move(ids), count);
  }
  std::vector<std::string> id_strings(floor);
  for (std::size_t b = 0; b < kByteSymbols; ++b) id_strings[floor - kByteSymbols + b] = symbols[b];

  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t size = floor;
  while (size < target_size) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
    for (const auto& [ids, count] : words)
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) counts[{ids[i], ids[i + 1]}] += count;
    if (counts.empty())
      throw std::invalid_argument("train_bpe: corpus exhausted at " + std::to_string(size) +
                                  " entries before reaching target " +
                                  std::to_string(target_size));
    // std::map iterates in ascending (left, right) order, so the first
    // maximum is the lowest-id pair among ties.
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    const std::string merged = id_strings[left] + id_strings[right];
    TokenId merged_id;
    if (auto it = symbol_id.find(merged); it != symbol_id.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<TokenId>(id_strings.size());
      symbol_id.emplace(merged, merged_id);
      id_strings.push_back(merged);
      ++size;
    }
    merges.emplace_back(id_strings[left], id_strings[right]);
    for (auto& [ids, count] : words) {
      std::vector<TokenId> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(ids[i]);
        }
      }
      ids.swap(next);
    }
  }
  return Vocabulary(std::move(specials), std::move(merges));
}

}  // namespace rvt
