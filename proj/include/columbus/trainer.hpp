#ifndef COLUMBUS_TRAINER_HPP
#define COLUMBUS_TRAINER_HPP

#include <map>
#include <sstream>
#include <string>

#include "columbus/alignment.hpp"
#include "columbus/attribution.hpp"
#include "columbus/corruption.hpp"
#include "columbus/dataset.hpp"
#include "columbus/model.hpp"

namespace columbus {

struct TrainConfig {
    double lambda = 1.0;       // alignment weight
    double learning_rate = 1e-3;
    int iterations = 2000;
    int batch_size = 32;
    double p_max_input = 0.35;
    double p_max_intermediate = 0.1;
    double q_max_input = 0.6;
    double q_max_intermediate = 0.3;
    CorruptionParams corruption;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int checkpoint_every = 100;
};

struct ModelArch {
    int num_blocks = 3;
    std::vector<int> channels{8, 16, 32};
};

// Linear ramp over the first half of training, flat at max afterwards.
inline double schedule_value(int t, int total, double max_value) {
    if (total < 2) throw std::invalid_argument("schedule_value: T must be >= 2");
    if (t < 0 || t > total) throw std::invalid_argument("schedule_value: t out of [0, T]");
    return max_value * std::min(1.0, 2.0 * t / total);
}

// One iteration's sampled corruption recipe.
struct CorruptionPlan {
    int iteration = 0;
    int level = 0;
    AttributionMethod attribution = AttributionMethod::Saliency;
    CorruptionMethod corruption = CorruptionMethod::Zero;
    double p = 0.0;
    double q = 0.0;
    std::vector<std::size_t> subset; // batch rows to corrupt
};

// Even iterations target the raw input, odd iterations a uniformly drawn
// intermediate level. Attribution is drawn from {Saliency, GuidedGrad-CAM},
// the corruption method from the level-compatible set, and the corrupted
// batch subset uniformly without replacement.
inline CorruptionPlan sample_iteration_plan(int t, RngStream& rng, int num_blocks,
                                            int batch_size, const TrainConfig& cfg) {
    CorruptionPlan plan;
    plan.iteration = t;
    plan.level = (t % 2 == 0) ? 0 : 1 + static_cast<int>(rng.index(num_blocks));
    const bool input_level = plan.level == 0;
    plan.p = schedule_value(t, cfg.iterations,
                            input_level ? cfg.p_max_input : cfg.p_max_intermediate);
    plan.q = schedule_value(t, cfg.iterations,
                            input_level ? cfg.q_max_input : cfg.q_max_intermediate);
    plan.attribution = rng.index(2) == 0 ? AttributionMethod::Saliency
                                         : AttributionMethod::GuidedGradCam;
    if (input_level) {
        static constexpr CorruptionMethod kInputMethods[4] = {
            CorruptionMethod::RandomValue, CorruptionMethod::Zero,
            CorruptionMethod::Fgsm, CorruptionMethod::GaussianBlur};
        plan.corruption = kInputMethods[rng.index(4)];
    } else {
        plan.corruption = CorruptionMethod::TargetedDropout;
    }
    const std::size_t subset_size =
        static_cast<std::size_t>(std::llround(plan.q * batch_size));
    plan.subset = rng.sample_without_replacement(batch_size, subset_size);
    std::sort(plan.subset.begin(), plan.subset.end());
    return plan;
}

struct AdamState {
    std::vector<double> m, v;
    long step = 0;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void update(std::vector<double>& params, const std::vector<double>& grads,
                const TrainConfig& cfg) {
        ++step;
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grads[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
            params[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_epsilon);
        }
    }
};

struct StepOutcome {
    double loss_cls = 0.0;
    double loss_da = 0.0;
    double loss_total = 0.0;
};

namespace detail {
inline int distinct_domains(const std::vector<int>& ids) {
    std::vector<int> s = ids;
    std::sort(s.begin(), s.end());
    return static_cast<int>(std::unique(s.begin(), s.end()) - s.begin());
}
} // namespace detail

// One Algorithm-1 iteration: identify (fresh attribution on the current
// parameters), corrupt the planned subset, forward on the corrupted data,
// minimize cls + lambda * alignment, Adam-update. With an empty effective
// corruption the step degenerates to a plain forward on the clean batch.
inline StepOutcome train_step(ModelGraph& model, AdamState& opt, const Batch& batch,
                              const CorruptionPlan& plan, const TrainConfig& cfg,
                              RngStream& corruption_rng) {
    const Tensor y = one_hot(batch.labels, model.num_classes);
    const bool corrupting = !plan.subset.empty() && plan.p > 0.0;

    Prediction pred;
    if (corrupting) {
        AttributionEngine engine(model, batch.x, y);
        AttributionMap map = engine.compute(plan.attribution, plan.level);
        FeatureMask mask = top_p_mask(map, plan.p);

        // keep only the planned subset rows
        const std::size_t units = mask.units_per_example();
        std::vector<std::uint8_t> in_subset(batch.labels.size(), 0);
        for (std::size_t r : plan.subset) in_subset[r] = 1;
        for (std::size_t n = 0; n < batch.labels.size(); ++n) {
            if (in_subset[n]) continue;
            std::fill(mask.selected.begin() + n * units,
                      mask.selected.begin() + (n + 1) * units, 0);
            mask.count_per_example[n] = 0;
        }

        if (plan.level == 0) {
            Tensor input_grad;
            const Tensor* grad_ptr = nullptr;
            if (plan.corruption == CorruptionMethod::Fgsm) {
                // reuse the identification gradient rather than a second pass
                if (plan.attribution == AttributionMethod::Saliency) {
                    input_grad = map.values;
                } else {
                    input_grad = engine.level_gradient(0, ReluMode::Guided);
                }
                grad_ptr = &input_grad;
            }
            Tensor corrupted = corrupt_input(batch.x, mask, plan.corruption, cfg.corruption,
                                             grad_ptr, corruption_rng);
            pred = model.forward(corrupted);
        } else {
            model.forward(batch.x);
            Tensor corrupted = corrupt_repr(model.recorded_level(plan.level), mask);
            pred = model.forward_from(plan.level, corrupted);
        }
    } else {
        pred = model.forward(batch.x);
    }

    StepOutcome out;
    out.loss_cls = classification_loss(pred, y);
    Tensor grad_logits = classification_loss_grad(pred, y);

    Tensor extra_grad;
    const Tensor* extra_ptr = nullptr;
    if (cfg.lambda != 0.0 && detail::distinct_domains(batch.domains) >= 2) {
        AlignmentResult ar = alignment_loss_and_grad(model.recorded_embedding(), batch.domains);
        out.loss_da = ar.loss;
        extra_grad = ar.grad;
        for (double& g : extra_grad.data) g *= cfg.lambda;
        extra_ptr = &extra_grad;
    }
    out.loss_total = out.loss_cls + cfg.lambda * out.loss_da;

    if (!std::isfinite(out.loss_total)) {
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << plan.iteration << " (level " << plan.level
            << ", " << attribution_method_name(plan.attribution) << ", "
            << corruption_method_name(plan.corruption) << ", p=" << plan.p << ", q=" << plan.q
            << "): cls=" << out.loss_cls << " da=" << out.loss_da;
        throw std::runtime_error(msg.str());
    }

    Gradients g = model.backward(grad_logits, ReluMode::Standard, extra_ptr);
    std::vector<double> flat = model.flatten_gradients(g);
    std::vector<double> params = model.parameters();
    opt.update(params, flat, cfg);
    model.set_parameters(params);
    return out;
}

// ---- dataset roles and batching ----

// Leave-one-domain-out split: every non-target domain is a source with
// 80/20 train/validation pools; the target domain's 80% share is the test
// set and its 20% share the oracle validation set.
struct DomainSplits {
    int target_domain = -1;
    std::vector<int> source_domains;
    std::map<int, std::vector<std::size_t>> source_train;
    std::map<int, std::vector<std::size_t>> source_val;
    std::vector<std::size_t> target_test;
    std::vector<std::size_t> target_val;

    static DomainSplits make(const Dataset& ds, int target_domain, std::uint64_t split_seed) {
        SplitIndices split = split_80_20(ds, split_seed);
        DomainSplits out;
        out.target_domain = target_domain;
        bool target_seen = false;
        for (std::size_t i : split.train) {
            const int dom = ds.items[i].domain;
            if (dom == target_domain) {
                out.target_test.push_back(i);
            } else {
                out.source_train[dom].push_back(i);
            }
        }
        for (std::size_t i : split.validation) {
            const int dom = ds.items[i].domain;
            if (dom == target_domain) {
                out.target_val.push_back(i);
            } else {
                out.source_val[dom].push_back(i);
            }
        }
        for (const auto& [dom, _] : out.source_train) out.source_domains.push_back(dom);
        target_seen = !out.target_test.empty();
        if (!target_seen)
            throw std::invalid_argument("target domain " + std::to_string(target_domain) +
                                        " not present in dataset");
        if (out.source_domains.size() < 2)
            throw std::invalid_argument("need at least 2 source domains");
        return out;
    }
};

// Balanced per-domain minibatch, sampled without replacement within one draw.
inline std::vector<std::size_t> sample_balanced_batch(
    const std::map<int, std::vector<std::size_t>>& pools, int batch_size, RngStream& rng) {
    const int nd = static_cast<int>(pools.size());
    const int base = batch_size / nd;
    const int rem = batch_size % nd;
    std::vector<std::size_t> out;
    int d = 0;
    for (const auto& [dom, pool] : pools) {
        const std::size_t k = static_cast<std::size_t>(base + (d < rem ? 1 : 0));
        std::vector<std::size_t> picks = rng.sample_without_replacement(pool.size(), k);
        for (std::size_t p : picks) out.push_back(pool[p]);
        ++d;
    }
    return out;
}

inline double accuracy(ModelGraph& model, const Dataset& ds,
                       const std::vector<std::size_t>& indices, int chunk = 64) {
    if (indices.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t off = 0; off < indices.size(); off += chunk) {
        const std::size_t end = std::min(indices.size(), off + chunk);
        Batch b = make_batch(ds, {indices.begin() + off, indices.begin() + end});
        Prediction pred = model.forward(b.x);
        for (int n = 0; n < static_cast<int>(end - off); ++n) {
            int best = 0;
            for (int k = 1; k < model.num_classes; ++k)
                if (pred.logits.at2(n, k) > pred.logits.at2(n, best)) best = k;
            if (best == b.labels[n]) ++correct;
        }
    }
    return static_cast<double>(correct) / indices.size();
}

struct CheckpointRecord {
    int iteration = 0;
    std::vector<double> params;
    double source_val_accuracy = 0.0; // mean over source domains
};

struct LogRow {
    int iteration = 0;
    int level = 0;
    AttributionMethod attribution = AttributionMethod::Saliency;
    CorruptionMethod corruption = CorruptionMethod::Zero;
    double p = 0.0, q = 0.0;
    double loss_cls = 0.0, loss_da = 0.0, loss_total = 0.0;
};

inline void write_log_csv(const std::vector<LogRow>& rows, std::ostream& os) {
    os << "iter,level,attr_method,corrupt_method,p,q,loss_cls,loss_da,loss_total\n";
    char buf[256];
    for (const LogRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%s,%s,%.6f,%.6f,%.9f,%.9f,%.9f\n",
                      r.iteration, r.level, attribution_method_name(r.attribution),
                      corruption_method_name(r.corruption), r.p, r.q, r.loss_cls, r.loss_da,
                      r.loss_total);
        os << buf;
    }
}

struct TrainResult {
    ModelGraph model;
    std::vector<CheckpointRecord> checkpoints;
    std::vector<LogRow> log;
};

inline double mean_source_val_accuracy(ModelGraph& model, const Dataset& ds,
                                       const DomainSplits& splits) {
    double acc = 0.0;
    for (const auto& [dom, idx] : splits.source_val) acc += accuracy(model, ds, idx);
    return acc / static_cast<double>(splits.source_val.size());
}

// Full COLUMBUS training run. ERM is the degenerate configuration
// p_max = q_max = 0, lambda = 0. Evaluation passes never corrupt.
inline TrainResult train(const Dataset& ds, const DomainSplits& splits, const ModelArch& arch,
                         const TrainConfig& cfg) {
    TrainResult result;
    result.model = ModelGraph::build(arch.num_blocks, arch.channels, ds.num_classes,
                                     {ds.channels, ds.height, ds.width},
                                     hash_combine(cfg.seed, 0xC0DEB10C));
    RngStream root(cfg.seed);
    RngStream batch_rng = root.split(1);
    RngStream plan_rng = root.split(2);
    RngStream corruption_rng = root.split(3);
    AdamState opt(result.model.parameters().size());

    auto record_checkpoint = [&](int iteration) {
        CheckpointRecord ck;
        ck.iteration = iteration;
        ck.params = result.model.parameters();
        ck.source_val_accuracy = mean_source_val_accuracy(result.model, ds, splits);
        result.checkpoints.push_back(std::move(ck));
    };

    if (cfg.iterations == 0) {
        record_checkpoint(0);
        return result;
    }

    for (int t = 0; t < cfg.iterations; ++t) {
        std::vector<std::size_t> idx =
            sample_balanced_batch(splits.source_train, cfg.batch_size, batch_rng);
        Batch batch = make_batch(ds, idx);
        CorruptionPlan plan = sample_iteration_plan(t, plan_rng, result.model.num_blocks(),
                                                    static_cast<int>(idx.size()), cfg);
        StepOutcome out = train_step(result.model, opt, batch, plan, cfg, corruption_rng);

        LogRow row;
        row.iteration = t;
        row.level = plan.level;
        row.attribution = plan.attribution;
        row.corruption = plan.corruption;
        row.p = plan.p;
        row.q = plan.q;
        row.loss_cls = out.loss_cls;
        row.loss_da = out.loss_da;
        row.loss_total = out.loss_total;
        result.log.push_back(row);

        if ((t + 1) % cfg.checkpoint_every == 0 || t + 1 == cfg.iterations)
            record_checkpoint(t + 1);
    }
    return result;
}

// ---- model selection and evaluation ----

enum class SelectionMethod { TrainDomainValidation, Oracle };

inline const char* selection_method_name(SelectionMethod s) {
    return s == SelectionMethod::TrainDomainValidation ? "val" : "oracle";
}

struct EvalReport {
    SelectionMethod selection = SelectionMethod::TrainDomainValidation;
    int chosen_iteration = 0;
    double target_accuracy = 0.0;
    double in_domain_accuracy = 0.0; // max mean source-val accuracy across checkpoints
};

inline EvalReport evaluate(const TrainResult& tr, const Dataset& ds, const DomainSplits& splits,
                           SelectionMethod selection) {
    if (tr.checkpoints.empty()) throw std::invalid_argument("evaluate: no checkpoints");
    EvalReport rep;
    rep.selection = selection;
    for (const CheckpointRecord& ck : tr.checkpoints)
        rep.in_domain_accuracy = std::max(rep.in_domain_accuracy, ck.source_val_accuracy);

    std::size_t chosen = 0;
    if (selection == SelectionMethod::TrainDomainValidation) {
        // ties go to the latest checkpoint, so a saturated validation score
        // still favors the most-trained parameters
        for (std::size_t i = 1; i < tr.checkpoints.size(); ++i)
            if (tr.checkpoints[i].source_val_accuracy >=
                tr.checkpoints[chosen].source_val_accuracy)
                chosen = i;
    } else {
        chosen = tr.checkpoints.size() - 1; // final checkpoint only, no early stopping
    }
    rep.chosen_iteration = tr.checkpoints[chosen].iteration;

    ModelGraph model = tr.model;
    model.set_parameters(tr.checkpoints[chosen].params);
    const std::vector<std::size_t>& eval_set =
        selection == SelectionMethod::TrainDomainValidation ? splits.target_test
                                                            : splits.target_val;
    rep.target_accuracy = accuracy(model, ds, eval_set);
    return rep;
}

} // namespace columbus

#endif
