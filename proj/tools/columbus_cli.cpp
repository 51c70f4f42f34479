// Command-line front end: dataset generation, training, hyperparameter
// search, evaluation, attribution heatmaps and the ERM comparison.
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "columbus/harness.hpp"

namespace fs = std::filesystem;
using namespace columbus;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string data_path;
    std::string out_dir = "out";
    int target_domain = -1;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool wants_target = true) {
    cmd->add_option("--config", args.config_path, "experiment config file");
    cmd->add_option("--data", args.data_path, "pre-generated dataset file (CDG1)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "override the training seed");
    if (wants_target)
        cmd->add_option("--target-domain", args.target_domain,
                        "held-out domain id (default: last domain)");
}

ExperimentConfig resolve_config(const CommonArgs& args) {
    ExperimentConfig cfg =
        args.config_path.empty() ? ExperimentConfig{} : load_config(args.config_path);
    if (args.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(args.seed);
    return cfg;
}

Dataset resolve_dataset(const ExperimentConfig& cfg, const CommonArgs& args) {
    if (!args.data_path.empty()) return load_dataset(args.data_path);
    return generate_dataset(cfg);
}

int resolve_target(const CommonArgs& args, const Dataset& ds) {
    return args.target_domain >= 0 ? args.target_domain : ds.num_domains - 1;
}

void write_summary_file(const std::vector<SummaryRow>& rows, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream os(dir + "/summary.csv");
    write_summary_csv(rows, os);
    if (!os) throw std::runtime_error("cannot write " + dir + "/summary.csv");
}

void write_trial_files(const std::vector<TrialRecord>& records, const std::string& dir) {
    for (const TrialRecord& rec : records) {
        const std::string trial_dir = dir + "/trial_" + std::to_string(rec.trial);
        fs::create_directories(trial_dir);
        std::ofstream os(trial_dir + "/record.txt");
        os << "trial " << rec.trial << "\n"
           << "lambda " << rec.hp.lambda << "\n"
           << "p_max_input " << rec.hp.p_max_input << "\n"
           << "p_max_intermediate " << rec.hp.p_max_intermediate << "\n"
           << "q_max_input " << rec.hp.q_max_input << "\n"
           << "q_max_intermediate " << rec.hp.q_max_intermediate << "\n"
           << "wall_time_s " << rec.wall_time_s << "\n";
        if (rec.failed) {
            os << "failed " << rec.error << "\n";
            continue;
        }
        for (std::size_t s = 0; s < rec.seeds.size(); ++s)
            os << "seed " << rec.seeds[s] << " target_val " << rec.target_acc_val[s]
               << " target_oracle " << rec.target_acc_oracle[s] << " in_domain "
               << rec.in_domain_acc[s] << "\n";
    }
}

int cmd_generate(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = generate_dataset(cfg);
    fs::create_directories(args.out_dir);
    const std::string path = args.out_dir + "/dataset.bin";
    save_dataset(ds, path);
    std::cout << "wrote " << path << " (" << ds.items.size() << " images, "
              << ds.num_classes << " classes, " << ds.num_domains << " domains)\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = resolve_dataset(cfg, args);
    const int target = resolve_target(args, ds);
    DomainSplits splits = DomainSplits::make(ds, target, cfg.data_seed);

    TrainResult tr = train(ds, splits, cfg.arch, cfg.train);
    fs::create_directories(args.out_dir);
    {
        std::ofstream os(args.out_dir + "/log.csv");
        write_log_csv(tr.log, os);
    }
    save_checkpoint(tr.model, args.out_dir + "/final.cmb");

    // also persist the checkpoint preferred by training-domain validation
    std::size_t best = 0;
    for (std::size_t i = 1; i < tr.checkpoints.size(); ++i)
        if (tr.checkpoints[i].source_val_accuracy >
            tr.checkpoints[best].source_val_accuracy)
            best = i;
    ModelGraph best_model = tr.model;
    best_model.set_parameters(tr.checkpoints[best].params);
    save_checkpoint(best_model, args.out_dir + "/best_val.cmb");

    EvalReport val = evaluate(tr, ds, splits, SelectionMethod::TrainDomainValidation);
    EvalReport oracle = evaluate(tr, ds, splits, SelectionMethod::Oracle);
    std::printf("target domain %d | val: acc %.4f (iter %d) | oracle: acc %.4f (iter %d)\n",
                target, val.target_accuracy, val.chosen_iteration, oracle.target_accuracy,
                oracle.chosen_iteration);
    std::cout << "wrote " << args.out_dir << "/log.csv, final.cmb, best_val.cmb\n";
    return 0;
}

int cmd_hpsearch(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = resolve_dataset(cfg, args);
    const int target = resolve_target(args, ds);
    SearchResult result = run_search(cfg, ds, target, cfg.search_trials, cfg.num_seeds);
    write_trial_files(result.records, args.out_dir);
    write_summary_file(result.summary, args.out_dir);
    write_summary_csv(result.summary, std::cout);
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& selection,
                 const std::string& checkpoint) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = resolve_dataset(cfg, args);
    const int target = resolve_target(args, ds);
    DomainSplits splits = DomainSplits::make(ds, target, cfg.data_seed);

    // by default pick the checkpoint a previous `train` run saved for the
    // requested selection method
    std::string path = checkpoint;
    if (path.empty())
        path = args.out_dir + (selection == "val" ? "/best_val.cmb" : "/final.cmb");
    ModelGraph model = load_checkpoint(path);
    const std::vector<std::size_t>& eval_set =
        selection == "val" ? splits.target_test : splits.target_val;
    const double acc = accuracy(model, ds, eval_set);
    std::printf("%s accuracy on domain %d: %.4f (%zu images, %s)\n", selection.c_str(),
                target, acc, eval_set.size(), path.c_str());
    return 0;
}

int cmd_attribute(const CommonArgs& args, const std::string& checkpoint,
                  std::vector<std::size_t> images, std::vector<std::string> methods) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = resolve_dataset(cfg, args);
    ModelGraph model = checkpoint.empty()
                           ? ModelGraph::build(cfg.arch.num_blocks, cfg.arch.channels,
                                               ds.num_classes,
                                               {ds.channels, ds.height, ds.width},
                                               hash_combine(cfg.train.seed, 0xC0DEB10C))
                           : load_checkpoint(checkpoint);
    if (images.empty()) images = {0};
    if (methods.empty())
        methods = {"saliency", "guided_backprop", "gradcam", "guidedgradcam"};
    for (std::size_t idx : images)
        if (idx >= ds.items.size())
            throw std::invalid_argument("image index " + std::to_string(idx) +
                                        " out of range");
    std::vector<std::string> written = export_heatmaps(model, ds, images, methods, args.out_dir);
    for (const std::string& path : written) std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_compare(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    Dataset ds = resolve_dataset(cfg, args);
    const int target = resolve_target(args, ds);
    SearchResult result = run_compare(cfg, ds, target, cfg.num_seeds);
    write_trial_files(result.records, args.out_dir);
    write_summary_file(result.summary, args.out_dir);
    write_summary_csv(result.summary, std::cout);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"corruption-based domain generalization toolkit"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, search_args, eval_args, attr_args, cmp_args;
    std::string selection = "val";
    std::string eval_checkpoint, attr_checkpoint;
    std::vector<std::size_t> attr_images;
    std::vector<std::string> attr_methods;

    CLI::App* generate = app.add_subcommand("generate", "render a synthetic dataset");
    add_common(generate, gen_args, false);

    CLI::App* train = app.add_subcommand("train", "train one model, leave-one-domain-out");
    add_common(train, train_args);

    CLI::App* hpsearch = app.add_subcommand("hpsearch", "random hyperparameter search");
    add_common(hpsearch, search_args);

    CLI::App* evaluate = app.add_subcommand("evaluate", "score a saved checkpoint");
    add_common(evaluate, eval_args);
    evaluate->add_option("--selection", selection, "model selection method")
        ->check(CLI::IsMember({"val", "oracle"}));
    evaluate->add_option("--checkpoint", eval_checkpoint, "checkpoint file (CMB1)");

    CLI::App* attribute = app.add_subcommand("attribute", "export attribution heatmaps");
    add_common(attribute, attr_args, false);
    attribute->add_option("--checkpoint", attr_checkpoint, "checkpoint file (CMB1)");
    attribute->add_option("--images", attr_images, "dataset image indices");
    attribute->add_option("--methods", attr_methods,
                          "saliency, guided_backprop, gradcam, guidedgradcam");

    CLI::App* compare = app.add_subcommand("compare", "baseline vs corruption training");
    add_common(compare, cmp_args);

    CLI11_PARSE(app, argc, argv);
    try {
        if (generate->parsed()) return cmd_generate(gen_args);
        if (train->parsed()) return cmd_train(train_args);
        if (hpsearch->parsed()) return cmd_hpsearch(search_args);
        if (evaluate->parsed()) return cmd_evaluate(eval_args, selection, eval_checkpoint);
        if (attribute->parsed())
            return cmd_attribute(attr_args, attr_checkpoint, attr_images, attr_methods);
        if (compare->parsed()) return cmd_compare(cmp_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
