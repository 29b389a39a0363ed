#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "arrest/attack.hpp"
#include "arrest/data.hpp"
#include "arrest/errors.hpp"
#include "arrest/kv.hpp"
#include "arrest/loss.hpp"
#include "arrest/model.hpp"
#include "arrest/tradeoff.hpp"
#include "arrest/train.hpp"

#ifndef ARREST_BUILD_ID
#define ARREST_BUILD_ID "unknown"
#endif

namespace arrest {

// ---------------------------------------------------------------------------
// Typed experiment configuration over the flat key=value surface. Unknown
// keys are rejected; to_map() emits the complete effective configuration.

struct ExperimentConfig {
    // dataset
    std::string dataset_kind = "synthetic";  // synthetic | mnist | cifar10
    std::string dataset_root;
    std::string dataset_path;    // cifar10 binary file
    std::string dataset_images;  // IDX images
    std::string dataset_labels;  // IDX labels
    int per_class = 50;
    int eval_per_class = 20;
    std::uint64_t dataset_seed = 0;
    int synthetic_classes = 10;
    double synthetic_noise = 0.2;

    // model
    std::string arch = "small-mlp";

    // training
    TrainSpec train;

    // command-specific
    std::string out_dir;
    std::string teacher_checkpoint;
    std::string eval_checkpoint;
    std::string embed_checkpoint;
    std::string embed_out;
    std::string ardist_points;
    std::string ardist_curve = "cifar10";
    std::string ardist_curve_name;
    bool ardist_fit = false;

    static ExperimentConfig from_map(const KvMap& kv);
    KvMap to_map() const;
};

namespace cli_detail {

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error("invalid number for " + key + ": '" + v + "'");
    }
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long d = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(d);
    } catch (const std::exception&) {
        throw config_error("invalid integer for " + key + ": '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error("invalid seed for " + key + ": '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error("invalid boolean for " + key + ": '" + v + "'");
}

inline std::string fmt(double v, int decimals) {
    if (std::isnan(v)) return "na";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

inline std::string fmt_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text_atomic(const std::string& text, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw io_error("cannot write '" + tmp.string() + "'");
        os << text;
        if (!os) throw io_error("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace cli_detail

inline ExperimentConfig ExperimentConfig::from_map(const KvMap& kv) {
    using namespace cli_detail;
    ExperimentConfig c;
    for (const auto& [key, v] : kv) {
        if (key == "dataset.kind") {
            if (v != "synthetic" && v != "mnist" && v != "cifar10")
                throw config_error("dataset.kind must be synthetic|mnist|cifar10, got '" + v + "'");
            c.dataset_kind = v;
        } else if (key == "dataset.root") c.dataset_root = v;
        else if (key == "dataset.path") c.dataset_path = v;
        else if (key == "dataset.images") c.dataset_images = v;
        else if (key == "dataset.labels") c.dataset_labels = v;
        else if (key == "dataset.per_class") c.per_class = parse_int(key, v);
        else if (key == "dataset.eval_per_class") c.eval_per_class = parse_int(key, v);
        else if (key == "dataset.seed") c.dataset_seed = parse_u64(key, v);
        else if (key == "dataset.classes") c.synthetic_classes = parse_int(key, v);
        else if (key == "dataset.noise") c.synthetic_noise = parse_double(key, v);
        else if (key == "model.arch") {
            if (!Model::is_registered(v)) throw config_error("model.arch: unknown architecture '" + v + "'");
            c.arch = v;
        }
        else if (key == "train.epochs") c.train.epochs = parse_int(key, v);
        else if (key == "train.batch_size") c.train.batch_size = parse_int(key, v);
        else if (key == "train.lr_kind") c.train.lr_kind = v;
        else if (key == "train.lr") c.train.lr = parse_double(key, v);
        else if (key == "train.momentum") c.train.momentum = parse_double(key, v);
        else if (key == "train.weight_decay") c.train.weight_decay = parse_double(key, v);
        else if (key == "train.lambda") c.train.lambda = parse_double(key, v);
        else if (key == "train.distance") c.train.distance = distance_from_string(v);
        else if (key == "train.kd_variant") c.train.kd_variant = kd_variant_from_string(v);
        else if (key == "train.phi_degrees") c.train.phi_degrees = parse_double(key, v);
        else if (key == "train.tau") c.train.tau_override = parse_double(key, v);
        else if (key == "train.nr_window") c.train.nr_window = parse_int(key, v);
        else if (key == "train.seed") c.train.seed = parse_u64(key, v);
        else if (key == "train.strict_nr") c.train.strict_nr = parse_bool(key, v);
        else if (key == "train.hflip") c.train.hflip = parse_bool(key, v);
        else if (key == "attack.epsilon") c.train.attack.epsilon = parse_double(key, v);
        else if (key == "attack.step_size") c.train.attack.step_size = parse_double(key, v);
        else if (key == "attack.steps") c.train.attack.steps = parse_int(key, v);
        else if (key == "attack.random_start") c.train.attack.random_start = parse_bool(key, v);
        else if (key == "attack.clamp_lo") c.train.attack.clamp_lo = parse_double(key, v);
        else if (key == "attack.clamp_hi") c.train.attack.clamp_hi = parse_double(key, v);
        else if (key == "out.dir") c.out_dir = v;
        else if (key == "finetune.teacher") c.teacher_checkpoint = v;
        else if (key == "eval.checkpoint") c.eval_checkpoint = v;
        else if (key == "embed.checkpoint") c.embed_checkpoint = v;
        else if (key == "embed.out") c.embed_out = v;
        else if (key == "ardist.points") c.ardist_points = v;
        else if (key == "ardist.curve") c.ardist_curve = v;
        else if (key == "ardist.curve_name") c.ardist_curve_name = v;
        else if (key == "ardist.fit") c.ardist_fit = parse_bool(key, v);
        else throw config_error("unknown config key '" + key + "'");
    }
    return c;
}

inline KvMap ExperimentConfig::to_map() const {
    using namespace cli_detail;
    KvMap kv;
    kv["dataset.kind"] = dataset_kind;
    kv["dataset.root"] = dataset_root;
    kv["dataset.path"] = dataset_path;
    kv["dataset.images"] = dataset_images;
    kv["dataset.labels"] = dataset_labels;
    kv["dataset.per_class"] = std::to_string(per_class);
    kv["dataset.eval_per_class"] = std::to_string(eval_per_class);
    kv["dataset.seed"] = std::to_string(dataset_seed);
    kv["dataset.classes"] = std::to_string(synthetic_classes);
    kv["dataset.noise"] = fmt_exact(synthetic_noise);
    kv["model.arch"] = arch;
    kv["train.epochs"] = std::to_string(train.epochs);
    kv["train.batch_size"] = std::to_string(train.batch_size);
    kv["train.lr_kind"] = train.lr_kind;
    kv["train.lr"] = fmt_exact(train.lr);
    kv["train.momentum"] = fmt_exact(train.momentum);
    kv["train.weight_decay"] = fmt_exact(train.weight_decay);
    kv["train.lambda"] = fmt_exact(train.lambda);
    kv["train.distance"] = to_string(train.distance);
    kv["train.kd_variant"] = to_string(train.kd_variant);
    kv["train.phi_degrees"] = fmt_exact(train.phi_degrees);
    kv["train.tau"] = fmt_exact(train.tau_override);
    kv["train.nr_window"] = std::to_string(train.nr_window);
    kv["train.seed"] = std::to_string(train.seed);
    kv["train.strict_nr"] = train.strict_nr ? "true" : "false";
    kv["train.hflip"] = train.hflip ? "true" : "false";
    kv["attack.epsilon"] = fmt_exact(train.attack.epsilon);
    kv["attack.step_size"] = fmt_exact(train.attack.step_size);
    kv["attack.steps"] = std::to_string(train.attack.steps);
    kv["attack.random_start"] = train.attack.random_start ? "true" : "false";
    kv["attack.clamp_lo"] = fmt_exact(train.attack.clamp_lo);
    kv["attack.clamp_hi"] = fmt_exact(train.attack.clamp_hi);
    kv["out.dir"] = out_dir;
    kv["finetune.teacher"] = teacher_checkpoint;
    kv["eval.checkpoint"] = eval_checkpoint;
    kv["embed.checkpoint"] = embed_checkpoint;
    kv["embed.out"] = embed_out;
    kv["ardist.points"] = ardist_points;
    kv["ardist.curve"] = ardist_curve;
    kv["ardist.curve_name"] = ardist_curve_name;
    kv["ardist.fit"] = ardist_fit ? "true" : "false";
    return kv;
}

// ---------------------------------------------------------------------------
// Dataset resolution

struct LoadedData {
    Dataset train;
    Dataset eval;
    bool has_eval = false;
};

inline std::string dataset_root_override() {
    const char* env = std::getenv("ARREST_DATA_ROOT");
    return env ? env : "";
}

inline std::filesystem::path resolve_data_path(const ExperimentConfig& cfg,
                                               const std::string& rel, const char* key) {
    if (rel.empty()) throw config_error(std::string(key) + " is required for dataset.kind=" +
                                        cfg.dataset_kind);
    std::filesystem::path p(rel);
    if (p.is_absolute()) return p;
    const std::string root = !dataset_root_override().empty() ? dataset_root_override()
                                                              : cfg.dataset_root;
    return root.empty() ? p : std::filesystem::path(root) / p;
}

inline LoadedData load_data(const ExperimentConfig& cfg) {
    Dataset pool;
    if (cfg.dataset_kind == "synthetic") {
        if (cfg.per_class < 1) throw config_error("synthetic data needs dataset.per_class >= 1");
        pool = make_synthetic_images(cfg.per_class + cfg.eval_per_class, cfg.synthetic_classes,
                                     1, 28, 28, cfg.dataset_seed, cfg.synthetic_noise);
    } else if (cfg.dataset_kind == "mnist") {
        pool = load_mnist_idx(resolve_data_path(cfg, cfg.dataset_images, "dataset.images"),
                              resolve_data_path(cfg, cfg.dataset_labels, "dataset.labels"));
    } else {
        pool = load_cifar10_binary(resolve_data_path(cfg, cfg.dataset_path, "dataset.path"));
    }
    pool.validate();

    LoadedData out;
    auto [train, eval] = split_per_class(pool, cfg.per_class, cfg.eval_per_class,
                                         cfg.dataset_seed);
    out.train = std::move(train);
    out.eval = std::move(eval);
    out.has_eval = cfg.eval_per_class > 0;
    return out;
}

// ---------------------------------------------------------------------------
// CSV helpers

inline std::string epoch_csv_header() {
    return "epoch,mean_loss,standard_acc,robust_acc,nr_switch_rate,mean_rep_distance\n";
}

inline std::string epoch_csv_row(const EpochReport& r) {
    using cli_detail::fmt;
    std::ostringstream os;
    os << r.epoch << ',' << fmt(r.mean_loss, 6) << ',' << fmt(r.standard_acc, 6) << ','
       << fmt(r.robust_acc, 6) << ',' << fmt(r.nr_switch_rate, 6) << ','
       << fmt(r.mean_rep_distance, 6) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands. Each returns 0 on success and writes outputs atomically.

namespace cli_detail {

inline int infer_channels(const ExperimentConfig& cfg) {
    return cfg.dataset_kind == "cifar10" ? 3 : 1;
}

inline int infer_classes(const ExperimentConfig& cfg) {
    return cfg.dataset_kind == "synthetic" ? cfg.synthetic_classes : 10;
}

inline std::filesystem::path require_out_dir(const ExperimentConfig& cfg) {
    if (cfg.out_dir.empty()) throw usage_error("out.dir is required for this command");
    std::filesystem::create_directories(cfg.out_dir);
    return cfg.out_dir;
}

struct RunOutputs {
    std::string epochs_csv;
    KvMap manifest;
};

inline void finish_run(const ExperimentConfig& cfg, const std::filesystem::path& out,
                       RunOutputs& ro, const Model& model, const LoadedData& data,
                       const char* command) {
    model.save(out / "checkpoint.bin");
    write_text_atomic(ro.epochs_csv, out / "epochs.csv");

    const Dataset& eval_on = data.has_eval ? data.eval : data.train;
    ro.manifest["run.command"] = command;
    ro.manifest["run.build"] = ARREST_BUILD_ID;
    ro.manifest["run.checkpoint"] = (out / "checkpoint.bin").string();
    ro.manifest["run.epoch_report"] = (out / "epochs.csv").string();
    ro.manifest["result.eval_split"] = data.has_eval ? "eval" : "train";
    ro.manifest["result.standard_acc"] = fmt_exact(standard_accuracy(model, eval_on));
    ro.manifest["result.robust_acc_pgd"] = fmt_exact(robust_accuracy(
        model, eval_on, cfg.train.attack, EvalAttack::pgd, cfg.train.seed));
    for (const auto& [k, v] : cfg.to_map()) ro.manifest["config." + k] = v;
    write_kv_atomic(ro.manifest, out / "manifest.kv");
}

}  // namespace cli_detail

inline int cmd_pretrain(const ExperimentConfig& cfg) {
    using namespace cli_detail;
    const auto out = require_out_dir(cfg);
    const LoadedData data = load_data(cfg);
    Model model = Model::build(cfg.arch, infer_classes(cfg), infer_channels(cfg), cfg.train.seed);

    RunOutputs ro;
    ro.epochs_csv = epoch_csv_header();
    TrainHooks hooks;
    hooks.on_epoch = [&ro](const EpochReport& r) { ro.epochs_csv += epoch_csv_row(r); };

    Model trained = standard_pretrain(std::move(model), data.train, cfg.train,
                                      data.has_eval ? &data.eval : nullptr, hooks);
    finish_run(cfg, out, ro, trained, data, "pretrain");
    return 0;
}

inline int cmd_finetune(const ExperimentConfig& cfg) {
    using namespace cli_detail;
    const auto out = require_out_dir(cfg);

    if (cfg.teacher_checkpoint.empty() && cfg.train.kd_variant != KdVariant::none)
        throw config_error("finetune.teacher is required unless train.kd_variant=none");
    if (cfg.train.kd_variant == KdVariant::attention && cfg.arch != "small-cnn")
        throw config_error("train.kd_variant=attention requires model.arch=small-cnn");

    const LoadedData data = load_data(cfg);

    RunOutputs ro;
    ro.epochs_csv = epoch_csv_header();
    std::vector<double> switch_rates;
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochReport& r) {
        ro.epochs_csv += epoch_csv_row(r);
        if (!std::isnan(r.nr_switch_rate)) switch_rates.push_back(r.nr_switch_rate);
    };

    Model trained;
    if (cfg.teacher_checkpoint.empty()) {
        // Plain adversarial training from scratch.
        Model model = Model::build(cfg.arch, infer_classes(cfg), infer_channels(cfg),
                                   cfg.train.seed);
        trained = adversarial_train(std::move(model), data.train, cfg.train,
                                    data.has_eval ? &data.eval : nullptr, hooks);
    } else {
        Model teacher = Model::load(cfg.teacher_checkpoint);
        if (teacher.arch().name != cfg.arch)
            throw model_error("teacher checkpoint is " + teacher.arch().name +
                              " but model.arch=" + cfg.arch);
        if (teacher.arch().num_classes != infer_classes(cfg))
            throw model_error("teacher checkpoint has " +
                              std::to_string(teacher.arch().num_classes) +
                              " classes, dataset has " + std::to_string(infer_classes(cfg)));
        trained = arrest_finetune(teacher, data.train, cfg.train,
                                  data.has_eval ? &data.eval : nullptr, hooks);
        ro.manifest["run.teacher"] = cfg.teacher_checkpoint;
        ro.manifest["result.tau"] = fmt_exact(cfg.train.tau());
        const Dataset& eval_on = data.has_eval ? data.eval : data.train;
        ro.manifest["result.mean_cosine_vs_teacher"] =
            fmt_exact(mean_cosine_similarity(trained, teacher, eval_on));
        std::string trace;
        for (std::size_t i = 0; i < switch_rates.size(); ++i) {
            if (i) trace += ';';
            trace += fmt(switch_rates[i], 6);
        }
        ro.manifest["result.nr_switch_trace"] = trace;
    }
    finish_run(cfg, out, ro, trained, data, "finetune");
    return 0;
}

inline int cmd_eval(const ExperimentConfig& cfg) {
    using namespace cli_detail;
    if (cfg.eval_checkpoint.empty()) throw usage_error("eval.checkpoint is required");
    const Model model = Model::load(cfg.eval_checkpoint);
    const LoadedData data = load_data(cfg);
    const Dataset& ds = data.has_eval ? data.eval : data.train;

    const AttackSpec& a = cfg.train.attack;
    std::ostringstream os;
    os << "attack,eps,steps,accuracy\n";
    os << "none," << fmt(0.0, 6) << ",0," << fmt(standard_accuracy(model, ds), 6) << '\n';
    os << "fgsm," << fmt(a.epsilon, 6) << ",1,"
       << fmt(robust_accuracy(model, ds, a, EvalAttack::fgsm, cfg.train.seed), 6) << '\n';
    os << "pgd," << fmt(a.epsilon, 6) << ',' << a.steps << ','
       << fmt(robust_accuracy(model, ds, a, EvalAttack::pgd, cfg.train.seed), 6) << '\n';

    if (cfg.out_dir.empty()) {
        std::cout << os.str();
    } else {
        std::filesystem::create_directories(cfg.out_dir);
        write_text_atomic(os.str(), std::filesystem::path(cfg.out_dir) / "eval.csv");
    }
    return 0;
}

// Points CSV: label,standard_acc,robust_acc (optional header line).
inline std::vector<TradeoffPoint> read_points_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open '" + path.string() + "'");
    std::vector<TradeoffPoint> pts;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (lineno == 1 && t.rfind("label", 0) == 0) continue;  // header
        std::istringstream ls(t);
        std::string label, s1, s2;
        if (!std::getline(ls, label, ',') || !std::getline(ls, s1, ',') ||
            !std::getline(ls, s2, ','))
            throw data_error(path.string() + ":" + std::to_string(lineno) +
                             ": expected label,standard_acc,robust_acc");
        TradeoffPoint p;
        p.label = detail::trim(label);
        try {
            p.standard_acc = std::stod(detail::trim(s1));
            p.robust_acc = std::stod(detail::trim(s2));
        } catch (const std::exception&) {
            throw data_error(path.string() + ":" + std::to_string(lineno) +
                             ": malformed numeric field");
        }
        pts.push_back(std::move(p));
    }
    if (pts.empty()) throw data_error(path.string() + ": no points");
    return pts;
}

inline TradeoffCurve resolve_curve(const ExperimentConfig& cfg) {
    if (cfg.ardist_curve == "cifar10") return cifar10_tradeoff_curve();
    if (cfg.ardist_curve == "cifar100") return cifar100_tradeoff_curve();
    // Otherwise a key=value fixture file: <name>.a3 .. <name>.a0
    const KvMap kv = load_kv(cfg.ardist_curve);
    std::string name = cfg.ardist_curve_name;
    if (name.empty()) {
        for (const auto& [k, v] : kv) {
            const auto dotpos = k.rfind('.');
            if (dotpos == std::string::npos) continue;
            const std::string n = k.substr(0, dotpos);
            if (name.empty()) name = n;
            else if (name != n)
                throw config_error("curve file has several datasets; set ardist.curve_name");
        }
        if (name.empty()) throw config_error("curve file has no <name>.a3..a0 keys");
    }
    TradeoffCurve c;
    auto coef = [&](const char* suffix) {
        const auto it = kv.find(name + "." + suffix);
        if (it == kv.end())
            throw config_error("curve file is missing key '" + name + "." + suffix + "'");
        return cli_detail::parse_double(it->first, it->second);
    };
    c.a3 = coef("a3");
    c.a2 = coef("a2");
    c.a1 = coef("a1");
    c.a0 = coef("a0");
    return c;
}

inline int cmd_ardist(const ExperimentConfig& cfg) {
    using namespace cli_detail;
    if (cfg.ardist_points.empty()) throw usage_error("ardist.points is required");
    const auto pts = read_points_csv(cfg.ardist_points);
    const TradeoffCurve curve = cfg.ardist_fit ? fit_curve(pts) : resolve_curve(cfg);

    std::ostringstream os;
    os << "label,standard_acc,robust_acc,sum,ardist\n";
    for (const auto& p : pts) {
        os << p.label << ',' << fmt(p.standard_acc, 3) << ',' << fmt(p.robust_acc, 3) << ','
           << fmt(sum_metric(p), 3) << ',' << fmt(ardist(p, curve), 3) << '\n';
    }
    if (cfg.out_dir.empty()) {
        std::cout << os.str();
    } else {
        std::filesystem::create_directories(cfg.out_dir);
        write_text_atomic(os.str(), std::filesystem::path(cfg.out_dir) / "ardist.csv");
    }
    return 0;
}

inline int cmd_embed(const ExperimentConfig& cfg) {
    using namespace cli_detail;
    if (cfg.embed_checkpoint.empty()) throw usage_error("embed.checkpoint is required");
    std::filesystem::path out_path;
    if (!cfg.embed_out.empty()) out_path = cfg.embed_out;
    else if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        out_path = std::filesystem::path(cfg.out_dir) / "embeddings.csv";
    } else throw usage_error("embed.out or out.dir is required");

    const Model model = Model::load(cfg.embed_checkpoint);
    const LoadedData data = load_data(cfg);
    const Dataset& ds = data.has_eval ? data.eval : data.train;

    std::ostringstream os;
    constexpr int kBatch = 256;
    for (int start = 0; start < ds.n(); start += kBatch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.n(), start + kBatch); ++i) idx.push_back(i);
        auto [x, y] = gather_batch(ds, idx);
        const Tensor rep = model.represent(Var::constant(std::move(x))).value();
        const int d = rep.dim(1);
        for (std::size_t r = 0; r < y.size(); ++r) {
            os << y[r];
            for (int j = 0; j < d; ++j) os << ',' << fmt(rep[static_cast<int>(r) * d + j], 6);
            os << '\n';
        }
    }
    write_text_atomic(os.str(), out_path);
    return 0;
}

// ---------------------------------------------------------------------------
// Argument handling: arrest <subcommand> [--config FILE] [--key=value ...]

inline const char* cli_usage() {
    return "usage: arrest <pretrain|finetune|eval|ardist|embed> [--config FILE] [--key=value ...]\n"
           "  keys mirror the configuration surface, e.g. --train.lambda=50 --out.dir=runs/a\n"
           "  dataset files resolve against $ARREST_DATA_ROOT when set\n";
}

inline KvMap parse_cli_overrides(const std::vector<std::string>& args, std::size_t start,
                                 std::string* config_path) {
    KvMap overrides;
    for (std::size_t i = start; i < args.size(); ++i) {
        std::string a = args[i];
        if (a.rfind("--", 0) != 0) throw usage_error("expected --key=value, got '" + a + "'");
        a = a.substr(2);
        std::string key, value;
        const auto eq = a.find('=');
        if (eq != std::string::npos) {
            key = a.substr(0, eq);
            value = a.substr(eq + 1);
        } else {
            key = a;
            if (i + 1 >= args.size()) throw usage_error("missing value for --" + key);
            value = args[++i];
        }
        if (key == "config") {
            *config_path = value;
            continue;
        }
        if (overrides.count(key)) throw usage_error("duplicate flag --" + key);
        overrides[key] = value;
    }
    return overrides;
}

inline ExperimentConfig config_from_cli(const std::vector<std::string>& args, std::size_t start) {
    std::string config_path;
    KvMap overrides = parse_cli_overrides(args, start, &config_path);
    KvMap merged;
    if (!config_path.empty()) {
        KvMap file = load_kv(config_path);
        // A manifest can stand in for its config: take the config.* snapshot.
        bool is_manifest = false;
        for (const auto& [k, v] : file)
            if (k.rfind("config.", 0) == 0) is_manifest = true;
        if (is_manifest) {
            for (const auto& [k, v] : file)
                if (k.rfind("config.", 0) == 0) merged[k.substr(7)] = v;
        } else {
            merged = file;
        }
    }
    for (const auto& [k, v] : overrides) merged[k] = v;
    return ExperimentConfig::from_map(merged);
}

inline int run_cli(const std::vector<std::string>& args) {
    try {
        if (args.empty()) {
            std::cerr << cli_usage();
            return 2;
        }
        const std::string& cmd = args[0];
        if (cmd == "help" || cmd == "--help" || cmd == "-h") {
            std::cout << cli_usage();
            return 0;
        }
        const ExperimentConfig cfg = config_from_cli(args, 1);
        if (cmd == "pretrain") return cmd_pretrain(cfg);
        if (cmd == "finetune") return cmd_finetune(cfg);
        if (cmd == "eval") return cmd_eval(cfg);
        if (cmd == "ardist") return cmd_ardist(cfg);
        if (cmd == "embed") return cmd_embed(cfg);
        throw usage_error("unknown subcommand '" + cmd + "'");
    } catch (const Error& e) {
        std::cerr << "error:" << e.category() << ": " << e.what() << '\n';
        return e.category() == "usage" ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error:internal: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace arrest
