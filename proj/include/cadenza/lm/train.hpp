#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cadenza/lm/model.hpp"

namespace cadenza::lm {

struct LossWeights {
  double lambda0 = 1.0;
  std::vector<double> lambdas;  // layers 1..K-1

  // Warmup and pretraining: every layer weighted 1.
  static LossWeights balanced(std::size_t num_books);
  // Finetuning: layer 0 weighted 2, layer k weighted (K - k) / 10.
  static LossWeights finetune(std::size_t num_books);
};

enum class Stage { Warmup, Pretrain, Sft };

LossWeights stage_weights(Stage s, std::size_t num_books);
// Warmup trains on [C_muq, C_lyrics]; later stages keep all segments.
lyrics::CondSequence stage_condition(const lyrics::CondSequence& cond, Stage s);

struct WeightedLoss {
  ag::Var total;
  std::vector<double> per_layer;  // mean CE per layer
};

// lambda0 * L_0 + 1/(K-1) * sum_k lambda_k * L_k, each L_k the mean CE over
// frames. Throws ShapeMismatch.
WeightedLoss weighted_ce_loss(const std::vector<ag::Var>& layer_logits, const rvq::TokenFrameSeq& targets,
                              const LossWeights& w);

struct LMExample {
  lyrics::CondSequence cond;
  rvq::TokenFrameSeq frames;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<double> per_layer;
};

std::string to_json_line(const StepRecord& r);

struct LMTrainConfig {
  Stage stage = Stage::Pretrain;
  std::size_t steps = 100;
  std::size_t batch = 4;  // examples accumulated per optimizer step
  double lr = 2e-4;
  double cond_drop = 0.02;  // whole-condition dropout for guidance
  std::uint64_t seed = 0;
};

std::vector<StepRecord> train_lm(HierLM& model, std::span<const LMExample> data, const LMTrainConfig& cfg,
                                 const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace cadenza::lm
