#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace rvt {

using TokenId = std::int32_t;

namespace special {
inline constexpr std::string_view kPad = "<|pad|>";
inline constexpr std::string_view kUnk = "<|unk|>";
inline constexpr std::string_view kBeginQuestion = "<|b_qn|>";
inline constexpr std::string_view kEndQuestion = "<|e_qn|>";
inline constexpr std::string_view kBeginAnswer = "<|b_ans|>";
inline constexpr std::string_view kEndAnswer = "<|e_ans|>";
inline constexpr std::string_view kBeginRationale = "<|b_rtnl|>";
inline constexpr std::string_view kEndRationale = "<|e_rtnl|>";
inline constexpr std::string_view kBeginObjects = "<|b_obj|>";
inline constexpr std::string_view kEndObjects = "<|e_obj|>";
inline constexpr std::string_view kBeginSituation = "<|b_situ|>";
inline constexpr std::string_view kEndSituation = "<|e_situ|>";
inline constexpr std::string_view kBeginVerb = "<|b_verb|>";
inline constexpr std::string_view kEndVerb = "<|e_verb|>";
inline constexpr std::string_view kBeginPlace = "<|b_place|>";
inline constexpr std::string_view kEndPlace = "<|e_place|>";
inline constexpr std::string_view kBeginBefore = "<|b_before|>";
inline constexpr std::string_view kBeginAfter = "<|b_after|>";
inline constexpr std::string_view kBeginIntent = "<|b_intent|>";

std::string role_begin(std::string_view role);
std::string role_end(std::string_view role);
}  // namespace special

/// Ordered list of reserved tokens. Index in `tokens` is the token id.
///
/// The fixed part (element delimiters, inference starts, unk, pad) comes
/// first; role delimiter pairs follow in role-inventory order.
struct SpecialTokenInventory {
  std::vector<std::string> tokens;
  std::vector<std::string> roles;

  /// Standard inventory for a role list. Throws on malformed or duplicate roles.
  static SpecialTokenInventory with_roles(std::vector<std::string> roles);

  /// Throws std::invalid_argument on duplicate token strings or a missing
  /// delimiter for a listed role.
  void validate() const;
  std::size_t size() const { return tokens.size(); }
};

/// Reads a role inventory: either a JSON array of strings or one role per
/// line (blank lines and '#' comments ignored).
std::vector<std::string> load_role_inventory(const std::filesystem::path& path);

/// Byte-level BPE vocabulary with atomic special tokens.
///
/// Id layout: [specials][256 byte symbols][one id per merge, in merge order].
/// Immutable after construction.
class Vocabulary {
 public:
  Vocabulary(SpecialTokenInventory specials,
             std::vector<std::pair<std::string, std::string>> merges);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t num_specials() const { return specials_.size(); }
  const SpecialTokenInventory& specials() const { return specials_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  /// Id of a special token string; throws std::out_of_range if unknown.
  TokenId special_id(std::string_view token) const;
  /// Id of any token's raw byte string (special or not), if present.
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  bool is_special(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < specials_.size();
  }

  /// Begin/end delimiters for a situation role. Unknown roles throw.
  std::pair<TokenId, TokenId> role_delimiters(std::string_view role) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::string to_json() const;
  static Vocabulary from_json(std::string_view json);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;

 private:
  std::vector<TokenId> encode_chunk(std::string_view chunk) const;

  SpecialTokenInventory specials_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::string, TokenId> special_to_id_;
  // (left id, right id) -> (rank, merged id)
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> merge_ranks_;
};

/// Learns merges until the vocabulary has exactly `target_size` entries.
///
/// Pair selection: highest count, ties broken by lowest (left, right) id.
/// Special tokens in the corpus are cut out before counting.
/// Throws if the corpus is empty, specials are duplicated, target_size is
/// below |specials| + 256, or the corpus runs out of pairs first.
Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_size,
                     SpecialTokenInventory specials);

}  // namespace rvt
