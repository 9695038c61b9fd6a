#include "cadenza/dpo/dpo.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

#include "json.hpp"

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/core/optim.hpp"

namespace cadenza::dpo {

using namespace ag;

void DPOConfig::validate() const {
  if (!(beta > 0.0)) throw Error(ErrorCode::BadConfig, "beta must be positive");
}

double delta_from_logprobs(double policy_win, double ref_win, double policy_lose, double ref_lose) {
  return (policy_win - ref_win) - (policy_lose - ref_lose);
}

namespace {

void check_pair(const lm::HierLM& policy, const lm::HierLM& ref) {
  if (!(policy.config() == ref.config())) throw Error(ErrorCode::ConfigMismatch, "policy and reference configs differ");
}

}  // namespace

double delta(const lm::HierLM& policy, const lm::HierLM& ref, const PreferencePair& pair) {
  check_pair(policy, ref);
  return delta_from_logprobs(policy.joint_logprob(pair.cond, pair.winner), ref.joint_logprob(pair.cond, pair.winner),
                             policy.joint_logprob(pair.cond, pair.loser), ref.joint_logprob(pair.cond, pair.loser));
}

Var delta_var(const lm::HierLM& policy, const lm::HierLM& ref, const PreferencePair& pair) {
  check_pair(policy, ref);
  const double ref_term = ref.joint_logprob(pair.cond, pair.winner) - ref.joint_logprob(pair.cond, pair.loser);
  auto pol = sub(policy.joint_logprob_var(pair.cond, pair.winner), policy.joint_logprob_var(pair.cond, pair.loser));
  return add_scalar(pol, -ref_term);
}

Var dpo_loss(const lm::HierLM& policy, const lm::HierLM& ref, std::span<const PreferencePair> pairs,
             const DPOConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw Error(ErrorCode::EmptyBatch, "DPO batch is empty");
  Var total;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto term = log_sigmoid(scale(delta_var(policy, ref, pairs[i]), cfg.beta));
    total = i == 0 ? term : add(total, term);
  }
  return scale(total, -1.0 / static_cast<double>(pairs.size()));
}

double implicit_reward(const lm::HierLM& policy, const lm::HierLM& ref, const lyrics::CondSequence& cond,
                       const rvq::TokenFrameSeq& a, const DPOConfig& cfg) {
  check_pair(policy, ref);
  return cfg.beta * (policy.joint_logprob(cond, a) - ref.joint_logprob(cond, a));
}

std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::Sim: return "sim";
    case Criterion::Per: return "per";
    case Criterion::Quality: return "quality";
  }
  return "?";
}

Criterion parse_criterion(std::string_view name) {
  if (name == "sim") return Criterion::Sim;
  if (name == "per") return Criterion::Per;
  if (name == "quality") return Criterion::Quality;
  throw Error(ErrorCode::BadConfig, "unknown pair criterion: " + std::string(name));
}

bool margin_ok(Criterion c, const CandidateScores& win, const CandidateScores& lose) {
  switch (c) {
    case Criterion::Sim: return win.sim - lose.sim > kSimMargin && win.sim > kSimFloor;
    case Criterion::Per: return std::abs(win.per - lose.per) > kPerMargin;
    case Criterion::Quality:
      return win.songeval - lose.songeval > kSongEvalMargin && win.audiobox_avg - lose.audiobox_avg > kAudioBoxMargin;
  }
  return false;
}

namespace {

// Lowest index holding the extreme of `key`; `better(a, b)` means a beats b.
template <class Key, class Better>
std::size_t extreme(const std::vector<Candidate>& c, Key key, Better better) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < c.size(); ++i)
    if (better(key(c[i].scores), key(c[best].scores))) best = i;
  return best;
}

// Candidate sitting at the extreme of both quality scores, if any.
std::optional<std::size_t> dominant(const std::vector<Candidate>& c, bool best) {
  double se = best ? -INFINITY : INFINITY, ab = se;
  for (const auto& x : c) {
    se = best ? std::max(se, x.scores.songeval) : std::min(se, x.scores.songeval);
    ab = best ? std::max(ab, x.scores.audiobox_avg) : std::min(ab, x.scores.audiobox_avg);
  }
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i].scores.songeval == se && c[i].scores.audiobox_avg == ab) return i;
  return std::nullopt;
}

}  // namespace

std::vector<PreferencePair> build_pairs(std::span<const CandidateGroup> groups, Criterion c) {
  std::vector<PreferencePair> out;
  const auto gt = [](double a, double b) { return a > b; };
  const auto lt = [](double a, double b) { return a < b; };
  for (const auto& g : groups) {
    const auto& cs = g.candidates;
    if (cs.size() < 2) throw Error(ErrorCode::GroupTooSmall, "pair group needs at least two candidates");
    std::optional<std::size_t> w, l;
    switch (c) {
      case Criterion::Sim:
        w = extreme(cs, [](const CandidateScores& s) { return s.sim; }, gt);
        l = extreme(cs, [](const CandidateScores& s) { return s.sim; }, lt);
        break;
      case Criterion::Per:
        w = extreme(cs, [](const CandidateScores& s) { return s.per; }, lt);
        l = extreme(cs, [](const CandidateScores& s) { return s.per; }, gt);
        break;
      case Criterion::Quality:
        w = dominant(cs, true);
        l = dominant(cs, false);
        break;
    }
    if (!w || !l || *w == *l) continue;
    if (cs[*w].tokens == cs[*l].tokens) continue;
    if (!margin_ok(c, cs[*w].scores, cs[*l].scores)) continue;
    out.push_back({g.cond, cs[*w].tokens, cs[*l].tokens});
  }
  return out;
}

Mat style_vector(const lyrics::CondSequence& cond, std::size_t dim) {
  std::uint64_t h = 1469598103934665603ull;
  if (const auto* tag = cond.find(lyrics::SegmentRole::Tag))
    for (auto t : tag->tokens) h = (h ^ t) * 1099511628211ull;
  Rng rng(h);
  Mat v = rng.normal_mat(1, dim);
  double n = 0.0;
  for (double x : v.data) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v.data) x /= n;
  return v;
}

double style_similarity(const rvq::TokenFrameSeq& tokens, std::span<const Mat> tables, const Mat& style) {
  if (tokens.frames == 0) return 0.0;
  Mat mean(1, style.cols);
  for (std::size_t l = 0; l < tokens.frames; ++l) {
    Mat h = lm::frame_embed(tokens.frame(l), tables);
    if (h.cols != style.cols) throw Error(ErrorCode::DimMismatch, "style vector width");
    for (std::size_t c = 0; c < h.cols; ++c) mean.data[c] += h.data[c];
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t c = 0; c < style.cols; ++c) {
    dot += mean.data[c] * style.data[c];
    na += mean.data[c] * mean.data[c];
    nb += style.data[c] * style.data[c];
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::vector<std::uint32_t> token_phonemes(const rvq::TokenFrameSeq& tokens) {
  std::vector<std::uint32_t> out;
  for (std::size_t l = 0; l < tokens.frames; ++l) out.push_back(tokens.at(l, 0) % kPseudoPhonemes);
  return out;
}

std::vector<std::uint32_t> lyric_phonemes(const lyrics::CondSequence& cond) {
  std::vector<std::uint32_t> out;
  if (const auto* ly = cond.find(lyrics::SegmentRole::Lyrics))
    for (auto t : ly->tokens)
      if (t < 256 && std::isalpha(static_cast<int>(t))) out.push_back(static_cast<std::uint32_t>(std::tolower(static_cast<int>(t))) % kPseudoPhonemes);
  return out;
}

std::size_t edit_distance(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double phoneme_error(const rvq::TokenFrameSeq& tokens, const lyrics::CondSequence& cond) {
  const auto hyp = token_phonemes(tokens);
  const auto ref = lyric_phonemes(cond);
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(std::max<std::size_t>(1, ref.size()));
}

std::string to_json_line(const DPOStep& s) {
  return nlohmann::json{{"step", s.step}, {"loss", s.loss}, {"mean_delta", s.mean_delta}}.dump();
}

std::vector<DPOStep> train_dpo(lm::HierLM& policy, const lm::HierLM& ref, std::span<const PreferencePair> pairs,
                               const DPOTrainConfig& cfg, const std::function<void(const DPOStep&)>& on_step) {
  cfg.dpo.validate();
  if (pairs.empty()) throw Error(ErrorCode::EmptyBatch, "no preference pairs");
  check_pair(policy, ref);
  auto params = policy.params();
  Adam opt(params, AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  std::vector<DPOStep> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<PreferencePair> batch;
    if (cfg.batch == 0 || cfg.batch >= pairs.size()) {
      batch.assign(pairs.begin(), pairs.end());
    } else {
      for (std::size_t i = 0; i < cfg.batch; ++i) batch.push_back(pairs[rng.index(pairs.size())]);
    }
    opt.zero_grad();
    Var total;
    double dsum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto d = delta_var(policy, ref, batch[i]);
      dsum += d.item();
      auto term = log_sigmoid(scale(d, cfg.dpo.beta));
      total = i == 0 ? term : add(total, term);
    }
    auto loss = scale(total, -1.0 / static_cast<double>(batch.size()));
    loss.backward();
    opt.step();
    DPOStep rec{step, loss.item(), dsum / static_cast<double>(batch.size())};
    if (on_step) on_step(rec);
    history.push_back(rec);
  }
  return history;
}

lm::HierLM merge_models(std::span<const lm::HierLM* const> models, std::span<const double> weights) {
  if (models.empty() || models.size() != weights.size()) throw Error(ErrorCode::BadConfig, "merge needs one weight per model");
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw Error(ErrorCode::BadConfig, "merge weights must be non-negative");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw Error(ErrorCode::BadConfig, "merge weights sum to zero");
  for (const auto* m : models)
    if (!(m->config() == models[0]->config())) throw Error(ErrorCode::ConfigMismatch, "merged models differ in config");
  lm::HierLM out = models[0]->clone();
  auto dst = out.params();
  for (auto& p : dst)
    for (auto& x : p.mutable_value().data) x = 0.0;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto src = models[m]->params();
    const double w = weights[m] / wsum;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto& d = dst[i].mutable_value().data;
      const auto& s = src[i].value().data;
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += w * s[j];
    }
  }
  return out;
}

namespace {

std::string store_object(const std::filesystem::path& dir, const std::vector<std::uint8_t>& bytes) {
  auto h = content_hash(bytes);
  auto path = dir / "objects" / h;
  if (!std::filesystem::exists(path)) write_file(path, bytes);
  return h;
}

std::vector<std::uint8_t> load_object(const std::filesystem::path& dir, const std::string& hash) {
  auto bytes = read_file(dir / "objects" / hash);
  if (content_hash(bytes) != hash) throw Error(ErrorCode::BadCheckpoint, "object hash mismatch: " + hash);
  return bytes;
}

}  // namespace

std::filesystem::path write_pair_dataset(const std::filesystem::path& dir, std::span<const PreferencePair> pairs,
                                         Criterion c) {
  std::filesystem::create_directories(dir / "objects");
  std::string text;
  for (const auto& p : pairs) {
    nlohmann::json j{{"criterion", criterion_name(c)},
                     {"cond", store_object(dir, lyrics::encode_cond(p.cond))},
                     {"winner", store_object(dir, rvq::encode_tokens(p.winner))},
                     {"loser", store_object(dir, rvq::encode_tokens(p.loser))}};
    text += j.dump() + "\n";
  }
  auto index = dir / "pairs.jsonl";
  write_text_file(index, text);
  return index;
}

std::vector<PreferencePair> read_pair_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "pairs.jsonl");
  if (!in) throw Error(ErrorCode::Io, "cannot open " + (dir / "pairs.jsonl").string());
  std::vector<PreferencePair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadConfig, std::string("bad pair record: ") + e.what());
    }
    out.push_back({lyrics::decode_cond(load_object(dir, j.at("cond").get<std::string>())),
                   rvq::decode_tokens(load_object(dir, j.at("winner").get<std::string>())),
                   rvq::decode_tokens(load_object(dir, j.at("loser").get<std::string>()))});
  }
  return out;
}

}  // namespace cadenza::dpo
