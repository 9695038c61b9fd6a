#include "cadenza/lm/train.hpp"

#include "json.hpp"

#include "cadenza/core/error.hpp"
#include "cadenza/core/optim.hpp"

namespace cadenza::lm {

using namespace ag;

LossWeights LossWeights::balanced(std::size_t num_books) {
  return {1.0, std::vector<double>(num_books > 0 ? num_books - 1 : 0, 1.0)};
}

LossWeights LossWeights::finetune(std::size_t num_books) {
  LossWeights w{2.0, {}};
  for (std::size_t k = 1; k < num_books; ++k) w.lambdas.push_back(static_cast<double>(num_books - k) / 10.0);
  return w;
}

LossWeights stage_weights(Stage s, std::size_t num_books) {
  return s == Stage::Sft ? LossWeights::finetune(num_books) : LossWeights::balanced(num_books);
}

lyrics::CondSequence stage_condition(const lyrics::CondSequence& cond, Stage s) {
  if (s != Stage::Warmup) return cond;
  lyrics::CondSequence out;
  for (const auto& seg : cond.segments)
    if (seg.role != lyrics::SegmentRole::Tag) out.segments.push_back(seg);
  return out;
}

WeightedLoss weighted_ce_loss(const std::vector<Var>& layer_logits, const rvq::TokenFrameSeq& targets, const LossWeights& w) {
  const std::size_t K = layer_logits.size();
  if (K < 2 || targets.num_books != K || w.lambdas.size() != K - 1)
    throw Error(ErrorCode::ShapeMismatch, "weighted CE layer count");
  WeightedLoss out;
  Var residual;
  for (std::size_t k = 0; k < K; ++k) {
    if (layer_logits[k].rows() != targets.frames) throw Error(ErrorCode::ShapeMismatch, "weighted CE frame count");
    std::vector<std::size_t> tg(targets.frames);
    for (std::size_t l = 0; l < targets.frames; ++l) {
      tg[l] = targets.at(l, k);
      if (tg[l] >= layer_logits[k].cols()) throw Error(ErrorCode::ShapeMismatch, "target outside vocabulary");
    }
    auto ce = scale(mean(logsoftmax_pick(layer_logits[k], tg)), -1.0);
    out.per_layer.push_back(ce.item());
    if (k == 0) {
      out.total = scale(ce, w.lambda0);
    } else {
      auto term = scale(ce, w.lambdas[k - 1]);
      residual = k == 1 ? term : add(residual, term);
    }
  }
  out.total = add(out.total, scale(residual, 1.0 / static_cast<double>(K - 1)));
  return out;
}

std::string to_json_line(const StepRecord& r) {
  nlohmann::json j{{"step", r.step}, {"loss", r.loss}, {"per_layer_ce", r.per_layer}};
  return j.dump();
}

std::vector<StepRecord> train_lm(HierLM& model, std::span<const LMExample> data, const LMTrainConfig& cfg,
                                 const std::function<void(const StepRecord&)>& on_step) {
  if (data.empty()) throw Error(ErrorCode::EmptyCorpus, "no LM training examples");
  if (cfg.batch == 0) throw Error(ErrorCode::BadConfig, "batch must be positive");
  const auto weights = stage_weights(cfg.stage, model.config().num_books);
  auto params = model.params();
  Adam opt(params, AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  std::vector<StepRecord> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    StepRecord rec{step, 0.0, std::vector<double>(model.config().num_books, 0.0)};
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = data[rng.index(data.size())];
      const auto cond = rng.bernoulli(cfg.cond_drop) ? lyrics::CondSequence{} : stage_condition(ex.cond, cfg.stage);
      auto out = model.forward(cond, ex.frames);
      auto loss = weighted_ce_loss(out.layer_logits, ex.frames, weights);
      scale(loss.total, 1.0 / static_cast<double>(cfg.batch)).backward();
      rec.loss += loss.total.item() / static_cast<double>(cfg.batch);
      for (std::size_t k = 0; k < rec.per_layer.size(); ++k) rec.per_layer[k] += loss.per_layer[k] / static_cast<double>(cfg.batch);
    }
    opt.step();
    if (on_step) on_step(rec);
    history.push_back(std::move(rec));
  }
  return history;
}

}  // namespace cadenza::lm
