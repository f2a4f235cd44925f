#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "canopyuq/trainer.hpp"
#include "cli_common.hpp"

namespace fs = std::filesystem;

namespace canopyuq::cli {

ModelConfig model_config_from(const Config& cfg) {
    ModelConfig m;
    m.in_channels = static_cast<int>(cfg.get_int("model.in_channels", m.in_channels));
    m.base_filters = static_cast<int>(cfg.get_int("model.base_filters", m.base_filters));
    m.depth = static_cast<int>(cfg.get_int("model.depth", m.depth));
    m.blocks_per_level =
        static_cast<int>(cfg.get_int("model.blocks_per_level", m.blocks_per_level));
    m.b_min = static_cast<float>(cfg.get_double("model.b_min", m.b_min));
    m.validate();
    return m;
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig t;
    t.lr0 = cfg.get_double("train.lr0", t.lr0);
    t.epochs = static_cast<int>(cfg.get_int("train.epochs", t.epochs));
    t.batch = static_cast<int>(cfg.get_int("train.batch", t.batch));
    t.clip_norm = cfg.get_double("train.clip_norm", t.clip_norm);
    t.weight_decay = cfg.get_double("train.weight_decay", t.weight_decay);
    t.beta1 = cfg.get_double("train.beta1", t.beta1);
    t.beta2 = cfg.get_double("train.beta2", t.beta2);
    t.eps = cfg.get_double("train.eps", t.eps);
    t.seed = static_cast<uint64_t>(cfg.get_int("train.seed", static_cast<int64_t>(t.seed)));
    t.normalize_by_valid = cfg.get_int("train.normalize_by_valid", 0) != 0;
    t.validate();
    return t;
}

namespace {

struct TrainArgs {
    std::string records_dir;
    int fold = 0;
    int subfold = 0;
    std::string model_config;
    std::string train_config;
    std::vector<std::string> overrides;
    std::string weights;
    std::string out;
    std::string log;
};

Config merged_config(const std::string& model_path, const std::string& train_path,
                     const std::vector<std::string>& overrides) {
    Config cfg;
    const auto merge = [&cfg](const Config& other) {
        for (const auto& [k, v] : other.all()) cfg.set(k, v);
    };
    if (!model_path.empty()) merge(Config::from_file(model_path));
    if (!train_path.empty()) merge(Config::from_file(train_path));
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ArgError("--set expects section.key=value");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void run_train(const TrainArgs& args) {
    const std::string prefix =
        (fs::path(args.records_dir) / ("fold" + std::to_string(args.fold))).string();
    const std::string sub = "_sub" + std::to_string(args.subfold);
    const auto train_records = read_records(prefix + sub + "_train.cuqr");
    const auto val_records = read_records(prefix + sub + "_val.cuqr");
    if (train_records.empty()) throw DataError("empty training split: " + prefix + sub);

    const Config cfg = merged_config(args.model_config, args.train_config, args.overrides);
    ModelConfig model_cfg = model_config_from(cfg);
    model_cfg.in_channels = train_records.front().c;
    TrainConfig train_cfg = train_config_from(cfg);
    if (!cfg.has("train.seed"))
        train_cfg.seed = 1000003ULL * static_cast<uint64_t>(args.fold + 1) +
                         static_cast<uint64_t>(args.subfold);

    std::unique_ptr<WeightFunction> wf;
    if (!args.weights.empty())
        wf = std::make_unique<WeightFunction>(WeightFunction::load(args.weights));

    std::ofstream log_os;
    if (!args.log.empty()) {
        log_os.open(args.log, std::ios::trunc);
        if (!log_os) throw DataError(args.log + ": cannot open for writing");
        log_os << "epoch,train_nll,val_nll,lr\n" << std::setprecision(10);
    }
    const auto on_epoch = [&](const EpochLog& e) {
        std::cout << "epoch " << e.epoch << ": train_nll " << e.train_nll << ", val_nll "
                  << e.val_nll << ", lr " << e.lr << "\n";
        if (log_os) log_os << e.epoch << "," << e.train_nll << "," << e.val_nll << ","
                           << e.lr << "\n";
    };

    const ResUNetF model = train_model<float>(train_records, val_records, model_cfg,
                                              train_cfg, wf.get(), nullptr, on_epoch);
    model.save(args.out);
    std::cout << "train: fold " << args.fold << " sub " << args.subfold << ", "
              << train_records.size() << "/" << val_records.size() << " patches, "
              << model.parameter_count() << " parameters -> " << args.out << "\n";
}

}  // namespace

void register_train(CLI::App& app) {
    auto args = std::make_shared<TrainArgs>();
    CLI::App* cmd =
        app.add_subcommand("train", "Train one model on one fold/sub-fold split");
    cmd->add_option("--records-dir", args->records_dir, "Directory from build-dataset")
        ->required();
    cmd->add_option("--fold", args->fold, "Fold id")->required();
    cmd->add_option("--subfold", args->subfold, "Sub-fold id")->required();
    cmd->add_option("--model-config", args->model_config, "key=value model config file");
    cmd->add_option("--train-config", args->train_config, "key=value train config file");
    cmd->add_option("--set", args->overrides, "Override, e.g. train.epochs=10");
    cmd->add_option("--weights", args->weights, "Weight table (CUQW) for the loss");
    cmd->add_option("--out", args->out, "Output checkpoint (CUQM)")->required();
    cmd->add_option("--log", args->log, "CSV epoch log");
    cmd->callback([args] { run_train(*args); });
}

}  // namespace canopyuq::cli
