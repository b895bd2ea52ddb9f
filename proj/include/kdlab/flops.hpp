#pragma once

// Closed-form transformer FLOPs model for comparing cached-logit teacher-prefix
// updates with online student-prefix updates. A multiply-add counts as 2 FLOPs.

#include "kdlab/error.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace kdlab {

struct ModelDims {
  double hidden = 0;        // H
  double intermediate = 0;  // I
  double layers = 0;        // N
  double n_heads = 0;
  double kv_heads = 0;
  double head_dim = 0;
  double vocab = 0;  // V

  double kv_width() const { return kv_heads * head_dim; }         // H_kv
  double attention_width() const { return n_heads * head_dim; }  // query width
  void validate() const;
};

// qwen3-0.6b, qwen3-4b, qwen3-8b.
std::optional<ModelDims> model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

struct CostQuery {
  double batch = 0;       // B
  double prompt_len = 0;  // P
  double response_len = 0;  // R

  double total_len() const { return prompt_len + response_len; }  // L
  void validate() const;
};

struct CostReport {
  double f_s = 0;  // student forward
  double f_t = 0;  // teacher forward
  double g_s = 0;  // student generation with KV cache
  double b_s = 0;  // student backward, 2 f_s
  double c_off_cached = 0;  // 3 f_s
  double c_on = 0;          // g_s + f_t + 3 f_s
  double ratio = 0;         // c_on / c_off_cached
};

// N [2H(H + 2H_kv) + 2H^2 + 2*3*H*I]: QKV, output projection (always 2H^2) and
// SwiGLU MLP. Excludes the LM head and the attention score term.
double per_token_dense_flops(const ModelDims& dims);

// 2 H V.
double lm_head_flops(const ModelDims& dims);

// Attention score and value FLOPs for one token attending to `context` keys:
// N * 4 * context * n_heads * head_dim.
double attention_flops(const ModelDims& dims, double context);

// B L (dense + head + attention at the causal average context L/2).
double forward_flops(const ModelDims& dims, const CostQuery& query);

// Prefill over P (causal average context P/2) plus R single-token decodes; the
// decode producing response token r attends to the P + r - 1 cached positions.
double generation_flops(const ModelDims& dims, const CostQuery& query);

CostReport step_costs(const ModelDims& student, const ModelDims& teacher, const CostQuery& query);

// Fills the derived fields from f_s, f_t and g_s.
CostReport assemble_cost_report(double f_s, double f_t, double g_s);

// Aligned text report: per-token terms for both models and the step costs.
std::string format_cost_report(const ModelDims& student, const ModelDims& teacher,
                               const CostQuery& query);

// The same quantities as a flat machine-readable record (raw FLOPs).
nlohmann::json cost_report_json(const ModelDims& student, const ModelDims& teacher,
                                const CostQuery& query);

}  // namespace kdlab
