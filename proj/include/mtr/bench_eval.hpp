#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtr/meta_trainer.hpp"
#include "mtr/mttgn.hpp"
#include "mtr/synth_data.hpp"

namespace mtr {

struct MetricsReport {
  double mae = 0.0;
  double mape_percent = 0.0;
  double rmse = 0.0;
  std::size_t n_test = 0;
  std::string model;
  std::uint64_t config_fingerprint = 0;
};

// MAE / MAPE / RMSE at the thousands-per-square-meter scale.
MetricsReport metrics(std::span<const double> y_true, std::span<const double> y_pred);

// ---------------------------------------------------------------------------
// Statistical and classic baselines

// Average price of the query community's training transactions strictly
// before the query time; global training mean for cold communities.
double ha_baseline(const PreparedCity& target, std::span<const std::size_t> train_ids,
                   const AppraisalQuery& query);

struct RidgeModel {
  std::vector<double> weights;  // over [x || z]
  double intercept = 0.0;
};

RidgeModel fit_ridge(const PreparedCity& city, std::span<const std::size_t> train_ids,
                     double l2);
double ridge_predict(const RidgeModel& model, const PreparedCity& city,
                     const AppraisalQuery& query);

// Plain feed-forward appraiser on [x || z || t]; no graph, no states.
class MlpModel : public AppraisalModel {
 public:
  MlpModel(std::size_t x_dim, std::size_t z_dim, std::size_t hidden = 64,
           double output_bias_init = 0.0)
      : x_dim_(x_dim), z_dim_(z_dim), hidden_(hidden), output_bias_init_(output_bias_init) {}
  std::string name() const override { return "mlp"; }
  ParamStore init_params(std::uint64_t seed) const override;
  std::vector<Var> replay_predict(Tape& tape, ParamBinding& params, const PreparedCity& city,
                                  std::span<const std::size_t> events,
                                  std::size_t predict_begin,
                                  const ReplayOptions& opts) const override;

 private:
  std::size_t x_dim_, z_dim_, hidden_;
  double output_bias_init_ = 0.0;
};

// ---------------------------------------------------------------------------
// Benchmark orchestration

struct PreparedBenchmark {
  BenchmarkConfig config;
  std::vector<PreparedCity> sources;
  PreparedCity target;

  std::vector<const PreparedCity*> source_ptrs(std::optional<int> drop_city = {}) const;
};

PreparedBenchmark prepare_benchmark(const Benchmark& b);

enum class ModelKind {
  kMetaTransfer,
  kMamlMttgn,
  kFtMttgn,
  kMamlMlp,
  kFtMlp,
  kMlp,         // target-only DNN
  kNoTransfer,  // target-only MTTGN
  kHa,
  kRidge,
};

std::string model_kind_name(ModelKind kind);

struct RunSettings {
  TrainerConfig trainer;
  std::size_t adapt_max_steps = 60;
  double pretrain_rate = 0.01;  // FT-* pretraining (adaptive-moment optimizer)
  double ridge_l2 = 1.0;
  MttgnDims dims;
};

struct RunOutcome {
  MetricsReport report;
  double wall_seconds = 0.0;
  TrainResult train;  // populated for the meta-trained models
};

MetricsReport evaluate_on_target(const AppraisalModel& model, const ParamStore& params,
                                 const PreparedCity& target, const std::string& model_name);

RunOutcome run_model(ModelKind kind, const PreparedBenchmark& bench,
                     const RunSettings& settings);

// ---------------------------------------------------------------------------
// Ablations (variants, feature masks, parameter replacement, source drops)

enum class AblationVariant { kFull, kNoTgn, kNoHmtl, kNoReweight, kNoTransfer };
enum class MaskKind { kNone, kEstate, kCommunity, kPrice };
enum class ReplaceKind { kNone, kTgn, kHyper, kFi };

struct AblationSpec {
  AblationVariant variant = AblationVariant::kFull;
  MaskKind mask = MaskKind::kNone;
  ReplaceKind replace = ReplaceKind::kNone;
  std::optional<int> drop_source;

  void validate() const;  // throws ConfigError on nonsensical combinations
  std::string label() const;
};

std::string variant_name(AblationVariant v);
std::string mask_name(MaskKind m);
std::string replace_name(ReplaceKind r);
AblationVariant variant_from_name(const std::string& s);
MaskKind mask_from_name(const std::string& s);
ReplaceKind replace_from_name(const std::string& s);

RunOutcome run_ablation(const AblationSpec& spec, const PreparedBenchmark& bench,
                        const RunSettings& settings);

// ---------------------------------------------------------------------------
// Serving latency

struct LatencyReport {
  double mean_ms = 0.0;
  double sd_ms = 0.0;
  std::size_t n_queries = 0;
};

LatencyReport latency_probe(const MttgnModel& model, const ParamStore& params,
                            const PreparedCity& target, std::size_t n_queries,
                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// results.csv rows

struct ResultRow {
  std::string model;
  std::string variant = "full";
  std::string mask = "none";
  std::string replace = "none";
  int drop_source = -1;  // -1: none
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  double mae = 0.0;
  double mape = 0.0;
  double rmse = 0.0;
  double wall_seconds = 0.0;
};

std::string result_csv_header();
std::string result_csv_line(const ResultRow& row);

}  // namespace mtr
