#ifndef COLUMBUS_HARNESS_HPP
#define COLUMBUS_HARNESS_HPP

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>

#include "columbus/dataset.hpp"
#include "columbus/trainer.hpp"

namespace columbus {

// ---- experiment configuration ----

struct ExperimentConfig {
    // data
    int num_classes = 4;
    int images_per_class = 200;
    int num_domains = 4;
    int image_size = 32;
    std::uint64_t data_seed = 1234;
    double shortcut_intensity = 1.0;
    std::vector<int> shortcut_free_domains{3};
    // model
    ModelArch arch;
    // training
    TrainConfig train;
    // search / compare
    int search_trials = 20;
    int num_seeds = 3;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

} // namespace detail

// Config file format: UTF-8 text, one `dotted.key = value` per line,
// `#` starts a comment. Unknown keys are errors.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        if (key == "data.num_classes") cfg.num_classes = std::stoi(value);
        else if (key == "data.images_per_class") cfg.images_per_class = std::stoi(value);
        else if (key == "data.num_domains") cfg.num_domains = std::stoi(value);
        else if (key == "data.image_size") cfg.image_size = std::stoi(value);
        else if (key == "data.seed") cfg.data_seed = std::stoull(value);
        else if (key == "data.shortcut_intensity") cfg.shortcut_intensity = std::stod(value);
        else if (key == "data.shortcut_free_domains")
            cfg.shortcut_free_domains = detail::parse_int_list(value);
        else if (key == "model.num_blocks") cfg.arch.num_blocks = std::stoi(value);
        else if (key == "model.channels") cfg.arch.channels = detail::parse_int_list(value);
        else if (key == "train.iterations") cfg.train.iterations = std::stoi(value);
        else if (key == "train.batch_size") cfg.train.batch_size = std::stoi(value);
        else if (key == "train.learning_rate") cfg.train.learning_rate = std::stod(value);
        else if (key == "train.lambda") cfg.train.lambda = std::stod(value);
        else if (key == "train.p_max_input") cfg.train.p_max_input = std::stod(value);
        else if (key == "train.p_max_intermediate")
            cfg.train.p_max_intermediate = std::stod(value);
        else if (key == "train.q_max_input") cfg.train.q_max_input = std::stod(value);
        else if (key == "train.q_max_intermediate")
            cfg.train.q_max_intermediate = std::stod(value);
        else if (key == "train.fgsm_epsilon") cfg.train.corruption.fgsm_epsilon = std::stod(value);
        else if (key == "train.blur_sigma") cfg.train.corruption.blur_sigma = std::stod(value);
        else if (key == "train.blur_kernel") cfg.train.corruption.blur_kernel = std::stoi(value);
        else if (key == "train.checkpoint_every") cfg.train.checkpoint_every = std::stoi(value);
        else if (key == "train.seed") cfg.train.seed = std::stoull(value);
        else if (key == "search.trials") cfg.search_trials = std::stoi(value);
        else if (key == "search.seeds") cfg.num_seeds = std::stoi(value);
        else
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": unknown key '" + key + "'");
    }
    if (static_cast<int>(cfg.arch.channels.size()) != cfg.arch.num_blocks)
        throw std::invalid_argument("config: model.channels length must equal model.num_blocks");
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

// Built-in style table; styles cycle for extra domains. Domains listed in
// shortcut_free carry no shortcut patch.
inline std::vector<DomainSpec> make_domain_specs(const ExperimentConfig& cfg) {
    struct Style {
        double thickness, noise, rotation, bg_amp;
    };
    static constexpr Style kStyles[4] = {
        {1.2, 0.24, 25.0, 0.20},
        {2.6, 0.24, 45.0, 0.28},
        {1.8, 0.28, 60.0, 0.24},
        {1.6, 0.20, 30.0, 0.18},
    };
    std::vector<DomainSpec> specs;
    for (int d = 0; d < cfg.num_domains; ++d) {
        const Style& st = kStyles[d % 4];
        DomainSpec spec;
        spec.id = d;
        spec.texture_seed = hash_combine(cfg.data_seed, 0x0D0D0000ULL + d);
        spec.stroke_thickness = st.thickness;
        spec.noise_sigma = st.noise;
        spec.rotation_range_deg = st.rotation;
        spec.background_amplitude = st.bg_amp;
        spec.shortcut_present = true;
        spec.shortcut_intensity = cfg.shortcut_intensity;
        for (int f : cfg.shortcut_free_domains)
            if (f == d) spec.shortcut_present = false;
        specs.push_back(spec);
    }
    return specs;
}

inline Dataset generate_dataset(const ExperimentConfig& cfg) {
    return generate(cfg.num_classes, make_domain_specs(cfg), cfg.images_per_class,
                    cfg.data_seed, cfg.image_size, cfg.image_size);
}

// ---- hyperparameter search ----

// Appendix intervals: lambda = 10^U(-1,1), p_max in U(0.2,0.5) / U(0.01,0.333),
// q_max in U(0.2,1.0) / U(0.1,0.5) for input / intermediate levels.
inline TrainConfig sample_hyperparameters(const TrainConfig& base, RngStream& rng) {
    TrainConfig hp = base;
    hp.lambda = std::pow(10.0, rng.uniform(-1.0, 1.0));
    hp.p_max_input = rng.uniform(0.2, 0.5);
    hp.p_max_intermediate = rng.uniform(0.01, 0.333);
    hp.q_max_input = rng.uniform(0.2, 1.0);
    hp.q_max_intermediate = rng.uniform(0.1, 0.5);
    return hp;
}

struct TrialRecord {
    int trial = 0;
    TrainConfig hp;
    std::vector<std::uint64_t> seeds;
    std::vector<double> target_acc_val;    // per seed, training-domain validation selection
    std::vector<double> target_acc_oracle; // per seed, oracle selection
    std::vector<double> in_domain_acc;     // per seed, max mean source-validation accuracy
    double wall_time_s = 0.0;
    bool failed = false;
    std::string error;
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / v.size();
}

// Population standard deviation (the convention used for seed aggregation).
inline double population_std(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / v.size());
}

struct SummaryRow {
    std::string algorithm;
    int target_domain = 0;
    std::string selection;
    double mean_acc = 0.0;
    double std_acc = 0.0;
    int trials = 0;
    int seeds = 0;
};

inline void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& os) {
    os << "algorithm,target_domain,selection,mean_acc,std_acc,trials,seeds\n";
    char buf[256];
    for (const SummaryRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%s,%.6f,%.6f,%d,%d\n", r.algorithm.c_str(),
                      r.target_domain, r.selection.c_str(), r.mean_acc, r.std_acc, r.trials,
                      r.seeds);
        os << buf;
    }
}

inline TrainConfig erm_config(TrainConfig cfg) {
    cfg.lambda = 0.0;
    cfg.p_max_input = 0.0;
    cfg.p_max_intermediate = 0.0;
    cfg.q_max_input = 0.0;
    cfg.q_max_intermediate = 0.0;
    return cfg;
}

// Runs one hyperparameter point over all seeds; failures are recorded, not thrown.
inline TrialRecord run_trial(const Dataset& ds, const DomainSplits& splits,
                             const ModelArch& arch, const TrainConfig& hp, int trial_id,
                             const std::vector<std::uint64_t>& seeds) {
    TrialRecord rec;
    rec.trial = trial_id;
    rec.hp = hp;
    rec.seeds = seeds;
    const auto start = std::chrono::steady_clock::now();
    try {
        for (std::uint64_t seed : seeds) {
            TrainConfig run_cfg = hp;
            run_cfg.seed = seed;
            TrainResult tr = train(ds, splits, arch, run_cfg);
            EvalReport val = evaluate(tr, ds, splits, SelectionMethod::TrainDomainValidation);
            EvalReport oracle = evaluate(tr, ds, splits, SelectionMethod::Oracle);
            rec.target_acc_val.push_back(val.target_accuracy);
            rec.target_acc_oracle.push_back(oracle.target_accuracy);
            rec.in_domain_acc.push_back(val.in_domain_accuracy);
        }
    } catch (const std::exception& e) {
        rec.failed = true;
        rec.error = e.what();
    }
    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

struct SearchResult {
    std::vector<TrialRecord> records;
    std::vector<SummaryRow> summary;
};

// Random search, leave-one-domain-out. Trials run concurrently; aggregation
// merges by trial id so the result is independent of completion order.
inline SearchResult run_search(const ExperimentConfig& cfg, const Dataset& ds,
                               int target_domain, int num_trials, int num_seeds,
                               const std::string& algorithm = "columbus") {
    DomainSplits splits = DomainSplits::make(ds, target_domain, cfg.data_seed);
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < num_seeds; ++s) seeds.push_back(cfg.train.seed + s);

    // hyperparameters for every trial are drawn up front from one stream,
    // so the trial sequence is a pure function of the seed
    RngStream hp_rng(hash_combine(cfg.train.seed, 0x59A4C4));
    std::vector<TrainConfig> hps;
    for (int t = 0; t < num_trials; ++t) {
        TrainConfig hp = sample_hyperparameters(cfg.train, hp_rng);
        if (algorithm == "erm") hp = erm_config(hp);
        hps.push_back(hp);
    }

    SearchResult result;
    result.records.resize(num_trials);
    const unsigned workers =
        std::max(1u, std::min(std::thread::hardware_concurrency(),
                              static_cast<unsigned>(num_trials)));
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int t = next.fetch_add(1); t < num_trials; t = next.fetch_add(1))
                result.records[t] = run_trial(ds, splits, cfg.arch, hps[t], t, seeds);
        });
    for (std::thread& th : pool) th.join();

    // model selection over trials: per selection method, pick the trial with
    // the best selection signal, then report mean +/- std over its seeds
    int best_val = -1, best_oracle = -1;
    for (int t = 0; t < num_trials; ++t) {
        if (result.records[t].failed) continue;
        if (best_val < 0 || mean_of(result.records[t].in_domain_acc) >
                                mean_of(result.records[best_val].in_domain_acc))
            best_val = t;
        if (best_oracle < 0 || mean_of(result.records[t].target_acc_oracle) >
                                   mean_of(result.records[best_oracle].target_acc_oracle))
            best_oracle = t;
    }
    if (best_val >= 0) {
        const TrialRecord& r = result.records[best_val];
        result.summary.push_back({algorithm, target_domain, "val", mean_of(r.target_acc_val),
                                  population_std(r.target_acc_val), num_trials, num_seeds});
    }
    if (best_oracle >= 0) {
        const TrialRecord& r = result.records[best_oracle];
        result.summary.push_back({algorithm, target_domain, "oracle",
                                  mean_of(r.target_acc_oracle),
                                  population_std(r.target_acc_oracle), num_trials, num_seeds});
    }
    return result;
}

// ERM-vs-COLUMBUS comparison at the configured hyperparameters, over
// `num_seeds` seeds each; both algorithms see the same seed list.
inline SearchResult run_compare(const ExperimentConfig& cfg, const Dataset& ds,
                                int target_domain, int num_seeds) {
    DomainSplits splits = DomainSplits::make(ds, target_domain, cfg.data_seed);
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < num_seeds; ++s) seeds.push_back(cfg.train.seed + s);

    SearchResult result;
    result.records.resize(2);
    const TrainConfig erm_hp = erm_config(cfg.train);
    std::thread erm_thread([&] {
        result.records[0] = run_trial(ds, splits, cfg.arch, erm_hp, 0, seeds);
    });
    result.records[1] = run_trial(ds, splits, cfg.arch, cfg.train, 1, seeds);
    erm_thread.join();

    const char* names[2] = {"erm", "columbus"};
    for (int i = 0; i < 2; ++i) {
        const TrialRecord& r = result.records[i];
        if (r.failed) throw std::runtime_error(std::string(names[i]) + " run failed: " + r.error);
        result.summary.push_back({names[i], target_domain, "val", mean_of(r.target_acc_val),
                                  population_std(r.target_acc_val), 1, num_seeds});
        result.summary.push_back({names[i], target_domain, "oracle",
                                  mean_of(r.target_acc_oracle),
                                  population_std(r.target_acc_oracle), 1, num_seeds});
    }
    return result;
}

// ---- heatmap export ----

inline AttributionMethod attribution_method_from_name(const std::string& name) {
    if (name == "saliency") return AttributionMethod::Saliency;
    if (name == "guided_backprop") return AttributionMethod::GuidedBackprop;
    if (name == "gradcam") return AttributionMethod::GradCam;
    if (name == "guidedgradcam") return AttributionMethod::GuidedGradCam;
    throw std::invalid_argument("unknown attribution method '" + name + "'");
}

// One PGM per (image, method), named <imgid>_<method>.pgm. Elementwise maps
// are channel-averaged to a single plane; Grad-CAM is computed at the last
// conv level and upsampled to the input size.
inline std::vector<std::string> export_heatmaps(const ModelGraph& model, const Dataset& ds,
                                                const std::vector<std::size_t>& image_indices,
                                                const std::vector<std::string>& methods,
                                                const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;
    for (std::size_t idx : image_indices) {
        Batch b = make_batch(ds, {idx});
        Tensor y = one_hot(b.labels, ds.num_classes);
        AttributionEngine engine(model, b.x, y);
        for (const std::string& name : methods) {
            const AttributionMethod method = attribution_method_from_name(name);
            Tensor plane({1, ds.height, ds.width});
            if (method == AttributionMethod::GradCam) {
                AttributionMap cam = engine.grad_cam(model.num_blocks());
                plane = upsample_nearest(cam.values, ds.height, ds.width);
            } else {
                AttributionMap map = engine.compute(method, 0);
                const int C = map.values.shape[1];
                for (int i = 0; i < ds.height; ++i)
                    for (int j = 0; j < ds.width; ++j) {
                        double acc = 0.0;
                        for (int c = 0; c < C; ++c) acc += map.values.at4(0, c, i, j);
                        plane.data[static_cast<std::size_t>(i) * ds.width + j] = acc / C;
                    }
            }
            const std::string path =
                out_dir + "/" + std::to_string(idx) + "_" + name + ".pgm";
            write_pgm(path, plane.data.data(), ds.height, ds.width);
            written.push_back(path);
        }
    }
    return written;
}

} // namespace columbus

#endif
