#include "dcl/runner.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>

#include "json.hpp"

#include "dcl/error.hpp"
#include "dcl/eval.hpp"
#include "dcl/features.hpp"
#include "dcl/gradsuite.hpp"

namespace dcl::runner {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using config::Phase;
using config::RunConfig;

json config_json(const RunConfig& c) {
    json j = json::object();
    for (const auto& [k, v] : c.items()) j[k] = v;
    return j;
}

fs::path out_dir(const RunConfig& c) {
    const fs::path out = c.get("out");
    fs::create_directories(out);
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path.string());
    f << text;
    if (!f) throw FormatError("write failed: " + path.string());
}

void echo_config(const RunConfig& c, std::string_view command) {
    write_text(out_dir(c) / (std::string(command) + ".cfg"), "# resolved configuration\n" + c.echo());
}

// JSON lines to a file, optionally mirrored into the pipeline's combined log
// with a "phase" tag. The first line of every file is the resolved config.
class Jsonl {
public:
    Jsonl(const fs::path& path, const RunConfig& c, std::ofstream* mirror, std::string phase)
        : file_(path, std::ios::binary), mirror_(mirror), phase_(std::move(phase)) {
        if (!file_) throw FormatError("cannot write " + path.string());
        file_ << json{{"config", config_json(c)}}.dump() << '\n';
    }

    void write(const json& record) {
        file_ << record.dump() << '\n';
        if (mirror_) {
            json tagged{{"phase", phase_}};
            tagged.update(record);
            *mirror_ << tagged.dump() << '\n';
        }
    }

private:
    std::ofstream file_;
    std::ofstream* mirror_;
    std::string phase_;
};

std::optional<std::vector<std::uint32_t>> labels_if_any(const RunConfig& c) {
    const std::string path = c.get("labels");
    if (path == "none" || !fs::exists(path)) return std::nullopt;
    return data::read_labels(path);
}

void require_images(const RunConfig& c, std::string_view command) {
    if (!config::is_image_dataset(c.get("dataset")))
        throw ConfigError(std::string(command) + ": dataset '" + c.get("dataset") + "' has no images");
}

void cmd_synth(const RunConfig& c) {
    if (config::is_image_dataset(c.get("dataset")))
        throw ConfigError("synth-data: dataset '" + c.get("dataset") + "' is not synthetic (use dataset=gauss-3)");
    const auto s = data::synth_gaussians(synth_spec(c));
    data::write_features(c.get("features"), s.features);
    data::write_labels(c.get("labels"), s.labels);
    echo_config(c, "synth-data");
}

void cmd_train_gan(const RunConfig& c, std::ofstream* mirror) {
    require_images(c, "train-gan");
    const auto ds = load_dataset(c);
    gan::GanTrainer trainer(gan_config(c), ds.sample_shape());
    Jsonl log(out_dir(c) / "gan_log.jsonl", c, mirror, "gan");
    trainer.train(ds, [&](const gan::StepLosses& s) {
        log.write(json{{"iteration", s.iteration},
                       {"d_loss", s.d_loss},
                       {"g_loss", s.g_loss},
                       {"penalty", s.penalty},
                       {"d_real", s.d_real},
                       {"d_fake", s.d_fake},
                       {"m_abs_max", s.m_abs_max},
                       {"clamped", s.clamped}});
    });
    data::write_checkpoint(c.get("checkpoint"), trainer.checkpoint());
    echo_config(c, "train-gan");
}

void cmd_extract(const RunConfig& c) {
    require_images(c, "extract");
    const auto ds = load_dataset(c);
    auto d = gan::load_discriminator(gan_config(c), ds.sample_shape(), data::read_checkpoint(c.get("checkpoint")));
    const std::size_t batch = c.count("extract_batch");
    const std::uint64_t seed = c.integer("seed");
    data::write_features(c.get("features"),
                         features::extract_features(d, ds, 0.0, config::phase_seed(seed, Phase::extract_clean), batch));
    if (c.get("features_dropout") != "regenerate")
        data::write_features(c.get("features_dropout"),
                             features::extract_features(d, ds, c.real("feature_dropout"),
                                                        config::phase_seed(seed, Phase::extract_dropout), batch));
    if (!ds.labels.empty() && c.get("labels") != "none") data::write_labels(c.get("labels"), ds.labels);
    echo_config(c, "extract");
}

json breakdown_json(const cluster::LossBreakdown& b) {
    json heads = json::array();
    for (const auto& h : b.heads)
        heads.push_back(json{{"r_sat", h.r_sat}, {"l_d", h.l_d}, {"kl", h.kl}, {"cond_entropy", h.cond_entropy}, {"total", h.total}});
    return heads;
}

void cmd_cluster(const RunConfig& c, std::ofstream* mirror) {
    const auto m = data::read_features(c.get("features"));
    const auto labels = labels_if_any(c);
    if (labels && labels->size() != m.rows())
        throw ShapeError("cluster: " + std::to_string(labels->size()) + " labels for " + std::to_string(m.rows()) + " rows");
    std::optional<data::FeatureMatrix> fixed_prime;
    if (c.get("features_dropout") != "regenerate") {
        fixed_prime = data::read_features(c.get("features_dropout"));
        if (fixed_prime->values.shape() != m.values.shape()) throw ShapeError("cluster: m and m' differ in shape");
    }
    const double rate = c.real("feature_dropout");
    const std::uint64_t seed = config::phase_seed(c.integer("seed"), Phase::cluster);

    cluster::Trainer trainer(m.cols(), bank_config(c), train_config(c));
    Jsonl log(out_dir(c) / "cluster_log.jsonl", c, mirror, "cluster");
    cluster::FitOptions options;
    options.m_prime = [&](std::size_t epoch) {
        return fixed_prime ? *fixed_prime : cluster::feature_dropout(m, rate, derive_seed(seed, 1000 + epoch));
    };
    if (labels) options.score = [&](const std::vector<std::uint32_t>& a) { return eval::clustering_accuracy(a, *labels).acc; };
    options.on_epoch = [&](const cluster::EpochRecord& r) {
        json rec{{"epoch", r.epoch}, {"heads", breakdown_json(r.mean)}, {"best_head", r.best_head}};
        if (labels) rec["acc"] = r.acc;
        log.write(rec);
    };
    const auto result = cluster::fit(trainer, m, options);
    json final_rec{{"final", true}, {"heads", breakdown_json(result.final_pass)}, {"best_head", result.best_head}};
    if (labels) final_rec["acc"] = result.acc;
    log.write(final_rec);
    data::write_labels(c.get("assignments"), result.assignments);
    echo_config(c, "cluster");
}

void cmd_evaluate(const RunConfig& c, std::ofstream* mirror) {
    const auto pred = data::read_labels(c.get("assignments"));
    if (c.get("labels") == "none") throw ConfigError("evaluate: labels=none");
    const auto truth = data::read_labels(c.get("labels"));
    const auto report = eval::clustering_accuracy(pred, truth);
    json j = json::parse(eval::report_json(report));
    if (mirror) {
        json tagged{{"phase", "evaluate"}};
        tagged.update(j);
        *mirror << tagged.dump() << '\n';
    }
    j["config"] = config_json(c);
    write_text(out_dir(c) / "report.json", j.dump(2) + "\n");
    echo_config(c, "evaluate");
}

void cmd_grad_check(const RunConfig& c) {
    const auto r = gradsuite::run(c.integer("seed"));
    json cases = json::array();
    for (const auto& k : r.cases)
        cases.push_back(json{{"name", k.name}, {"double_error", k.double_error}, {"float_error", k.float_error}, {"passed", k.passed}});
    json j{{"passed", r.passed},
           {"max_double_error", r.max_double_error},
           {"max_float_error", r.max_float_error},
           {"double_tolerance", gradsuite::kDoubleTolerance},
           {"float_tolerance", gradsuite::kFloatTolerance},
           {"cases", cases},
           {"config", config_json(c)}};
    write_text(out_dir(c) / "gradcheck.json", j.dump(2) + "\n");
    std::printf("grad-check: max relative error %.3e (double), %.3e (single)\n", r.max_double_error, r.max_float_error);
    if (!r.passed) {
        std::string failing;
        for (const auto& k : r.cases)
            if (!k.passed) failing += (failing.empty() ? "" : ", ") + k.name;
        throw NumericError("gradient check failed: " + failing);
    }
}

void cmd_pipeline(const RunConfig& c) {
    const fs::path metrics = out_dir(c) / "metrics.jsonl";
    std::ofstream mirror(metrics, std::ios::binary);
    if (!mirror) throw FormatError("cannot write " + metrics.string());
    mirror << json{{"config", config_json(c)}}.dump() << '\n';
    if (config::is_image_dataset(c.get("dataset"))) {
        cmd_train_gan(c, &mirror);
        cmd_extract(c);
    } else {
        cmd_synth(c);
    }
    cmd_cluster(c, &mirror);
    if (c.get("labels") != "none" && fs::exists(c.get("labels"))) cmd_evaluate(c, &mirror);
    echo_config(c, "pipeline");
}

} // namespace

data::ImageDataset load_dataset(const RunConfig& c) {
    const std::string dataset = c.get("dataset");
    const fs::path dir = c.get("data_dir");
    if (dataset == "mnist-mini") return data::load_mnist_mini(dir);
    if (dataset == "mnist") {
        auto ds = data::load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
        return data::center_crop(ds, 24, 24);
    }
    if (dataset == "cifar10") {
        std::vector<fs::path> files;
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        files.push_back(dir / "test_batch.bin");
        return data::load_cifar_bin(files);
    }
    throw ConfigError("dataset '" + dataset + "' has no images");
}

gan::GanConfig gan_config(const RunConfig& c) {
    gan::GanConfig g;
    g.preset = c.get("arch");
    g.sobel = c.flag("sobel");
    g.latent_dim = c.count("latent_dim");
    g.batch_size = c.count("gan_batch");
    g.iterations = c.count("gan_iters");
    g.lr = c.real("gan_lr");
    g.beta1 = c.real("gan_beta1");
    g.init_std = c.real("gan_init_std");
    g.dropout_rate = c.real("d_dropout");
    g.tau = c.real("tau");
    g.leaky_slope = c.real("leaky_slope");
    g.seed = config::phase_seed(c.integer("seed"), Phase::gan);
    g.validate();
    return g;
}

cluster::BankConfig bank_config(const RunConfig& c) {
    auto b = cluster::default_bank(c.count("k"), c.count("primary_heads"), c.count("overcluster_heads"),
                                   c.count_list("hidden"), c.real("delta_scale"), c.real("overcluster_delta_scale"),
                                   c.count("overcluster_factor"));
    b.init_std = c.real("cluster_init_std");
    b.validate();
    return b;
}

cluster::TrainConfig train_config(const RunConfig& c) {
    cluster::TrainConfig t;
    t.epochs = c.count("cluster_epochs");
    t.batch_size = c.count("cluster_batch");
    t.lambda = c.real("lambda");
    t.lr = c.real("cluster_lr");
    t.beta1 = c.real("cluster_beta1");
    t.perturb.alpha_r = c.real("alpha_r");
    t.perturb.alpha_adv = c.real("alpha_adv");
    t.perturb.replicas = c.count("replicas");
    t.perturb.squared_norm = c.flag("squared_norm");
    t.perturb.select_sign = c.flag("vat_select_sign");
    t.seed = config::phase_seed(c.integer("seed"), Phase::cluster);
    t.validate();
    return t;
}

data::SynthSpec synth_spec(const RunConfig& c) {
    data::SynthSpec s;
    s.k = c.count("k");
    s.dim = c.count("synth_dim");
    s.n = c.count("synth_n");
    s.separation = c.real("synth_separation");
    s.stddev = c.real("synth_stddev");
    s.seed = config::phase_seed(c.integer("seed"), Phase::synth);
    const std::string w = c.get("synth_weights");
    if (w != "uniform") {
        std::string_view rest = w;
        while (true) {
            const auto comma = rest.find(',');
            const auto item = rest.substr(0, comma);
            double v = 0;
            const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
            if (ec != std::errc{} || p != item.data() + item.size() || item.empty())
                throw ConfigError("synth_weights: bad entry '" + std::string(item) + "'");
            s.weights.push_back(v);
            if (comma == std::string_view::npos) break;
            rest = rest.substr(comma + 1);
        }
        if (s.weights.size() != s.k)
            throw ConfigError("synth_weights has " + std::to_string(s.weights.size()) + " entries for k=" + std::to_string(s.k));
    }
    s.validate();
    return s;
}

void run(std::string_view command, const RunConfig& unresolved) {
    const RunConfig c = unresolved.resolved();
    if (command == "synth-data") return cmd_synth(c);
    if (command == "train-gan") return cmd_train_gan(c, nullptr);
    if (command == "extract") return cmd_extract(c);
    if (command == "cluster") return cmd_cluster(c, nullptr);
    if (command == "evaluate") return cmd_evaluate(c, nullptr);
    if (command == "pipeline") return cmd_pipeline(c);
    if (command == "grad-check") return cmd_grad_check(c);
    throw ConfigError("unknown command '" + std::string(command) + "'");
}

std::string error_record(std::string_view command, const std::exception& e) {
    std::string type = "Error";
    if (dynamic_cast<const ConfigError*>(&e)) type = "ConfigError";
    else if (dynamic_cast<const ShapeError*>(&e)) type = "ShapeError";
    else if (dynamic_cast<const NumericError*>(&e)) type = "NumericError";
    else if (dynamic_cast<const FormatError*>(&e)) type = "FormatError";
    else if (dynamic_cast<const TapeError*>(&e)) type = "TapeError";
    else if (dynamic_cast<const fs::filesystem_error*>(&e)) type = "FilesystemError";
    else if (!dynamic_cast<const dcl::Error*>(&e)) type = "InternalError";
    return json{{"error", {{"command", std::string(command)}, {"type", type}, {"message", e.what()}}}}.dump(
        -1, ' ', false, json::error_handler_t::replace);
}

int exit_code(const std::exception& e) { return dynamic_cast<const ConfigError*>(&e) ? 2 : 1; }

} // namespace dcl::runner
