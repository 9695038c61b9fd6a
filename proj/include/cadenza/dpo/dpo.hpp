#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cadenza/lm/model.hpp"

namespace cadenza::dpo {

struct PreferencePair {
  lyrics::CondSequence cond;
  rvq::TokenFrameSeq winner;
  rvq::TokenFrameSeq loser;
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

struct DPOConfig {
  double beta = 0.1;
  void validate() const;  // BadConfig unless beta > 0
};

// (logp_pol(w) - logp_ref(w)) - (logp_pol(l) - logp_ref(l)).
double delta_from_logprobs(double policy_win, double ref_win, double policy_lose, double ref_lose);

// Throws ConfigMismatch when the two models disagree on LMConfig.
double delta(const lm::HierLM& policy, const lm::HierLM& ref, const PreferencePair& pair);
// Differentiable in the policy; reference terms enter as constants.
ag::Var delta_var(const lm::HierLM& policy, const lm::HierLM& ref, const PreferencePair& pair);

// mean over pairs of -log sigmoid(beta * delta). Throws EmptyBatch.
ag::Var dpo_loss(const lm::HierLM& policy, const lm::HierLM& ref, std::span<const PreferencePair> pairs,
                 const DPOConfig& cfg);

// beta * (logp_pol(A|C) - logp_ref(A|C)).
double implicit_reward(const lm::HierLM& policy, const lm::HierLM& ref, const lyrics::CondSequence& cond,
                       const rvq::TokenFrameSeq& a, const DPOConfig& cfg);

// ---- pair construction ----

struct CandidateScores {
  double sim = 0.0;  // style similarity, [-1, 1]
  double per = 0.0;  // phoneme error proxy, >= 0
  double songeval = 0.0;
  double audiobox_avg = 0.0;
};

struct Candidate {
  rvq::TokenFrameSeq tokens;
  CandidateScores scores;
};

struct CandidateGroup {
  lyrics::CondSequence cond;
  std::vector<Candidate> candidates;
};

enum class Criterion { Sim, Per, Quality };

std::string criterion_name(Criterion c);
Criterion parse_criterion(std::string_view name);  // BadConfig on unknown names

inline constexpr double kSimMargin = 0.12;
inline constexpr double kSimFloor = 0.3;
inline constexpr double kPerMargin = 0.1;
inline constexpr double kSongEvalMargin = 0.5;
inline constexpr double kAudioBoxMargin = 0.8;

// Keep/reject predicate for a chosen (winner, loser) score pair.
bool margin_ok(Criterion c, const CandidateScores& win, const CandidateScores& lose);

// Picks winner and loser per group and keeps the pair when its margin holds.
// Groups with identical winner and loser tokens are dropped. Throws
// GroupTooSmall on a group with fewer than two candidates.
std::vector<PreferencePair> build_pairs(std::span<const CandidateGroup> groups, Criterion c);

// ---- toy scorers ----

// Deterministic unit style vector for a prompt, derived from its tag tokens.
Mat style_vector(const lyrics::CondSequence& cond, std::size_t dim);
// Cosine between the mean frame embedding of `tokens` and `style`.
double style_similarity(const rvq::TokenFrameSeq& tokens, std::span<const Mat> tables, const Mat& style);

inline constexpr std::uint32_t kPseudoPhonemes = 16;
// Layer-0 token of each frame folded onto the pseudo-phoneme alphabet.
std::vector<std::uint32_t> token_phonemes(const rvq::TokenFrameSeq& tokens);
// Alphabetic bytes of the lyrics segment folded onto the same alphabet.
std::vector<std::uint32_t> lyric_phonemes(const lyrics::CondSequence& cond);
std::size_t edit_distance(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);
// edit distance normalized by the reference length (at least 1).
double phoneme_error(const rvq::TokenFrameSeq& tokens, const lyrics::CondSequence& cond);

// ---- training ----

struct DPOTrainConfig {
  DPOConfig dpo;
  std::size_t steps = 50;
  double lr = 1e-3;
  std::size_t batch = 0;  // 0 uses every pair each step
  std::uint64_t seed = 0;
};

struct DPOStep {
  std::size_t step = 0;
  double loss = 0.0;
  double mean_delta = 0.0;
};

std::string to_json_line(const DPOStep& s);

// Optimizes the policy against the frozen reference; the reference is never
// written. Each record holds the loss before that step's update.
std::vector<DPOStep> train_dpo(lm::HierLM& policy, const lm::HierLM& ref, std::span<const PreferencePair> pairs,
                               const DPOTrainConfig& cfg, const std::function<void(const DPOStep&)>& on_step = {});

// Parameter-wise weighted average; weights are normalized to sum to one.
// Throws ConfigMismatch or BadConfig.
lm::HierLM merge_models(std::span<const lm::HierLM* const> models, std::span<const double> weights);

// ---- dataset files ----

// Writes every cond and token blob under dir/objects/<hash> and one JSON
// record per pair to dir/pairs.jsonl. Returns the index path.
std::filesystem::path write_pair_dataset(const std::filesystem::path& dir, std::span<const PreferencePair> pairs,
                                         Criterion c);
std::vector<PreferencePair> read_pair_dataset(const std::filesystem::path& dir);

}  // namespace cadenza::dpo
