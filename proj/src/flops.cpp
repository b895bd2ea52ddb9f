#include "kdlab/flops.hpp"

namespace kdlab {

void ModelDims::validate() const {
  if (!(hidden > 0 && intermediate > 0 && layers > 0 && n_heads > 0 && kv_heads > 0 &&
        head_dim > 0 && vocab > 0)) {
    throw Error("model dimensions must all be positive");
  }
}

std::optional<ModelDims> model_preset(const std::string& name) {
  if (name == "qwen3-0.6b") return ModelDims{1024, 3072, 28, 16, 8, 128, 151936};
  if (name == "qwen3-4b") return ModelDims{2560, 9728, 36, 32, 8, 128, 151936};
  if (name == "qwen3-8b") return ModelDims{4096, 12288, 36, 32, 8, 128, 151936};
  return std::nullopt;
}

std::vector<std::string> model_preset_names() { return {"qwen3-0.6b", "qwen3-4b", "qwen3-8b"}; }

void CostQuery::validate() const {
  if (!(batch > 0 && prompt_len > 0 && response_len >= 0)) {
    throw Error("cost query needs batch > 0, prompt_len > 0, response_len >= 0");
  }
}

double per_token_dense_flops(const ModelDims& d) {
  d.validate();
  const double h = d.hidden;
  return d.layers * (2 * h * (h + 2 * d.kv_width()) + 2 * h * h + 2 * 3 * h * d.intermediate);
}

double lm_head_flops(const ModelDims& d) {
  d.validate();
  return 2 * d.hidden * d.vocab;
}

double attention_flops(const ModelDims& d, double context) {
  return d.layers * 4 * context * d.attention_width();
}

double forward_flops(const ModelDims& d, const CostQuery& q) {
  q.validate();
  const double l = q.total_len();
  const double per_token = per_token_dense_flops(d) + lm_head_flops(d) + attention_flops(d, l / 2);
  return q.batch * l * per_token;
}

double generation_flops(const ModelDims& d, const CostQuery& q) {
  q.validate();
  const double linear = per_token_dense_flops(d) + lm_head_flops(d);
  const double p = q.prompt_len;
  const double r = q.response_len;
  const double prefill = p * (linear + attention_flops(d, p / 2));
  // sum_{k=1..R} (P + k - 1) = R P + R (R - 1) / 2.
  const double decode = r * linear + attention_flops(d, r * p + r * (r - 1) / 2);
  return q.batch * (prefill + decode);
}

CostReport assemble_cost_report(double f_s, double f_t, double g_s) {
  CostReport c;
  c.f_s = f_s;
  c.f_t = f_t;
  c.g_s = g_s;
  c.b_s = 2 * f_s;
  c.c_off_cached = 3 * f_s;
  c.c_on = g_s + f_t + 3 * f_s;
  c.ratio = c.c_on / c.c_off_cached;
  return c;
}

CostReport step_costs(const ModelDims& student, const ModelDims& teacher, const CostQuery& q) {
  return assemble_cost_report(forward_flops(student, q), forward_flops(teacher, q),
                              generation_flops(student, q));
}

}  // namespace kdlab

#include <cstdio>

namespace kdlab {

namespace {
std::string row(const char* label, double value, double scale, const char* unit) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-28s %12.4f %s\n", label, value / scale, unit);
  return buf;
}
}  // namespace

std::string format_cost_report(const ModelDims& student, const ModelDims& teacher,
                               const CostQuery& query) {
  const CostReport c = step_costs(student, teacher, query);
  char head[160];
  std::snprintf(head, sizeof head, "query: B=%g P=%g R=%g L=%g\n", query.batch, query.prompt_len,
                query.response_len, query.total_len());
  std::string out = head;
  out += row("student dense per token", per_token_dense_flops(student), 1e9, "GFLOPs");
  out += row("student lm head per token", lm_head_flops(student), 1e9, "GFLOPs");
  out += row("teacher dense per token", per_token_dense_flops(teacher), 1e9, "GFLOPs");
  out += row("teacher lm head per token", lm_head_flops(teacher), 1e9, "GFLOPs");
  out += row("F_s student forward", c.f_s, 1e12, "TFLOPs");
  out += row("B_s student backward", c.b_s, 1e12, "TFLOPs");
  out += row("F_t teacher forward", c.f_t, 1e12, "TFLOPs");
  out += row("G_s student generation", c.g_s, 1e12, "TFLOPs");
  out += row("C_off cached teacher-prefix", c.c_off_cached, 1e12, "TFLOPs/step");
  out += row("C_on student-prefix", c.c_on, 1e12, "TFLOPs/step");
  char ratio[96];
  std::snprintf(ratio, sizeof ratio, "%-28s %12.4f\n", "ratio C_on / C_off", c.ratio);
  out += ratio;
  return out;
}

nlohmann::json cost_report_json(const ModelDims& student, const ModelDims& teacher,
                                const CostQuery& query) {
  const CostReport c = step_costs(student, teacher, query);
  return nlohmann::json{{"batch", query.batch},
                        {"prompt_len", query.prompt_len},
                        {"response_len", query.response_len},
                        {"student_dense_per_token", per_token_dense_flops(student)},
                        {"student_lm_head_per_token", lm_head_flops(student)},
                        {"teacher_dense_per_token", per_token_dense_flops(teacher)},
                        {"teacher_lm_head_per_token", lm_head_flops(teacher)},
                        {"f_s", c.f_s},
                        {"b_s", c.b_s},
                        {"f_t", c.f_t},
                        {"g_s", c.g_s},
                        {"c_off_cached", c.c_off_cached},
                        {"c_on", c.c_on},
                        {"ratio", c.ratio}};
}

}  // namespace kdlab
