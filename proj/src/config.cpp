#include "dcl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dcl/error.hpp"
#include "dcl/rng.hpp"

namespace dcl::config {

namespace {

const std::vector<KeyInfo> kKeys = {
    {"dataset", Kind::text, "mnist-mini", "mnist-mini, mnist, cifar10 or gauss-3"},
    {"data_dir", Kind::text, "auto", "dataset directory"},
    {"arch", Kind::text, "auto", "GAN architecture preset"},
    {"sobel", Kind::flag, "true", "Sobel front-end in the discriminator"},
    {"latent_dim", Kind::count, "100", "generator input width"},
    {"gan_iters", Kind::count, "1000", "GAN training iterations"},
    {"gan_batch", Kind::count, "128", "GAN mini-batch size"},
    {"gan_lr", Kind::real, "1e-4", "Adam learning rate for D and G"},
    {"gan_beta1", Kind::real, "0.5", "Adam beta1 for D and G"},
    {"gan_init_std", Kind::real, "0.02", "GAN weight init standard deviation"},
    {"d_dropout", Kind::real, "0.2", "discriminator dropout rate"},
    {"leaky_slope", Kind::real, "0.2", "Leaky ReLU slope"},
    {"tau", Kind::real, "20", "flatten penalty threshold on |M|"},
    {"extract_batch", Kind::count, "250", "feature extraction batch size"},
    {"feature_dropout", Kind::real, "0.1", "dropout rate for the m' view"},
    {"cluster_epochs", Kind::count, "1000", "auxiliary classifier epochs"},
    {"cluster_batch", Kind::count, "500", "auxiliary classifier mini-batch size"},
    {"cluster_lr", Kind::real, "1e-4", "auxiliary classifier Adam learning rate"},
    {"cluster_beta1", Kind::real, "0.5", "auxiliary classifier Adam beta1"},
    {"cluster_init_std", Kind::real, "auto", "auxiliary classifier init std (<= 0: He)"},
    {"hidden", Kind::count_list, "1024,1024", "auxiliary classifier hidden widths"},
    {"lambda", Kind::real, "0.2", "weight of the information term"},
    {"k", Kind::count, "auto", "number of clusters"},
    {"primary_heads", Kind::count, "5", "cluster heads with k outputs"},
    {"overcluster_heads", Kind::count, "1", "overcluster heads"},
    {"overcluster_factor", Kind::count, "5", "k' = factor * k"},
    {"delta_scale", Kind::real, "1e-4", "primary delta = scale * ln k"},
    {"overcluster_delta_scale", Kind::real, "1e-2", "overcluster delta = scale * ln k'"},
    {"alpha_r", Kind::real, "auto", "random perturbation radius factor"},
    {"alpha_adv", Kind::real, "auto", "adversarial perturbation radius factor"},
    {"replicas", Kind::count, "5", "adversarial replicas R per sample"},
    {"squared_norm", Kind::flag, "false", "radius from ||m||^2 instead of ||m||"},
    {"vat_select_sign", Kind::flag, "false", "keep whichever of +r_adv, -r_adv gives the larger KL"},
    {"synth_n", Kind::count, "3000", "gauss-3 sample count"},
    {"synth_dim", Kind::count, "10", "gauss-3 dimension"},
    {"synth_separation", Kind::real, "6", "gauss-3 pairwise mean distance in stddevs"},
    {"synth_stddev", Kind::real, "1", "gauss-3 component stddev"},
    {"synth_weights", Kind::text, "uniform", "gauss-3 class weights, comma separated"},
    {"seed", Kind::integer, "0", "master seed"},
    {"out", Kind::text, "out", "output directory"},
    {"checkpoint", Kind::text, "auto", "GAN checkpoint path"},
    {"features", Kind::text, "auto", "clean feature file m"},
    {"features_dropout", Kind::text, "auto", "m' feature file, or 'regenerate' for per-epoch feature dropout"},
    {"labels", Kind::text, "auto", "label file, or 'none'"},
    {"assignments", Kind::text, "auto", "cluster assignment file"},
};

const KeyInfo* find(std::string_view key) {
    for (const auto& k : kKeys)
        if (k.key == key) return &k;
    return nullptr;
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError("config key '" + std::string(key) + "': expected " + std::string(expected) + ", got '" +
                      std::string(value) + "'");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
    return out;
}

double parse_real(std::string_view key, std::string_view v) {
    double out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size() || v.empty() || !std::isfinite(out))
        bad_value(key, v, "a finite number");
    return out;
}

void check_kind(const KeyInfo& info, std::string_view v) {
    if (v == "auto" && info.default_value == "auto") return;
    switch (info.kind) {
    case Kind::text:
        if (v.empty()) bad_value(info.key, v, "a non-empty value");
        break;
    case Kind::real:
        parse_real(info.key, v);
        break;
    case Kind::count:
    case Kind::integer:
        parse_u64(info.key, v);
        break;
    case Kind::flag:
        if (v != "true" && v != "false") bad_value(info.key, v, "true or false");
        break;
    case Kind::count_list: {
        std::string_view rest = v;
        while (true) {
            const auto comma = rest.find(',');
            parse_u64(info.key, trim(rest.substr(0, comma)));
            if (comma == std::string_view::npos) break;
            rest = rest.substr(comma + 1);
        }
        break;
    }
    }
}

} // namespace

const std::vector<KeyInfo>& keys() { return kKeys; }

RunConfig::RunConfig() {
    for (const auto& k : kKeys) items_.emplace_back(std::string(k.key), std::string(k.default_value));
}

void RunConfig::set(std::string_view key, std::string_view value) {
    const KeyInfo* info = find(key);
    if (!info) throw ConfigError("unknown config key '" + std::string(key) + "'");
    const auto v = trim(value);
    check_kind(*info, v);
    for (auto& [k, val] : items_)
        if (k == key) val = std::string(v);
}

void RunConfig::assign(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_text(std::string_view text, std::string_view origin) {
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        try {
            assign(line);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void RunConfig::merge_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    merge_text(s.str(), path.string());
}

const std::string& RunConfig::get(std::string_view key) const {
    for (const auto& [k, v] : items_)
        if (k == key) return v;
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

double RunConfig::real(std::string_view key) const { return parse_real(key, get(key)); }

std::size_t RunConfig::count(std::string_view key) const { return static_cast<std::size_t>(parse_u64(key, get(key))); }

std::uint64_t RunConfig::integer(std::string_view key) const { return parse_u64(key, get(key)); }

bool RunConfig::flag(std::string_view key) const {
    const auto& v = get(key);
    if (v != "true" && v != "false") bad_value(key, v, "true or false");
    return v == "true";
}

std::vector<std::size_t> RunConfig::count_list(std::string_view key) const {
    std::vector<std::size_t> out;
    std::string_view rest = get(key);
    while (true) {
        const auto comma = rest.find(',');
        out.push_back(static_cast<std::size_t>(parse_u64(key, trim(rest.substr(0, comma)))));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
    }
    return out;
}

bool is_image_dataset(std::string_view dataset) { return dataset != "gauss-3"; }

RunConfig RunConfig::resolved() const {
    RunConfig r = *this;
    const std::string dataset = get("dataset");
    const bool mnist = dataset == "mnist-mini" || dataset == "mnist";
    if (dataset == "mnist-mini") {
        if (r.is_auto("data_dir")) r.set("data_dir", "data/mnist-mini");
        if (r.is_auto("arch")) r.set("arch", "toy-14");
        if (r.is_auto("k")) r.set("k", "3");
    } else if (dataset == "mnist") {
        if (r.is_auto("data_dir")) r.set("data_dir", "data/mnist");
        if (r.is_auto("arch")) r.set("arch", "mnist-24");
        if (r.is_auto("k")) r.set("k", "10");
    } else if (dataset == "cifar10") {
        if (r.is_auto("data_dir")) r.set("data_dir", "data/cifar-10-batches-bin");
        if (r.is_auto("arch")) r.set("arch", "cifar-32");
        if (r.is_auto("k")) r.set("k", "10");
    } else if (dataset == "gauss-3") {
        if (r.is_auto("data_dir")) r.set("data_dir", "none");
        if (r.is_auto("arch")) r.set("arch", "none");
        if (r.is_auto("k")) r.set("k", "3");
    } else {
        throw ConfigError("unknown dataset '" + dataset + "' (mnist-mini, mnist, cifar10, gauss-3)");
    }
    if (r.is_auto("cluster_init_std")) r.set("cluster_init_std", dataset == "cifar10" ? "1e-3" : "1e-2");
    if (r.is_auto("alpha_r")) r.set("alpha_r", mnist ? "1.0" : "0.3");
    if (r.is_auto("alpha_adv")) r.set("alpha_adv", mnist ? "0.2" : "0.15");
    const fs::path out = r.get("out");
    const auto path_default = [&](std::string_view key, const char* name) {
        if (r.is_auto(key)) r.set(key, (out / name).generic_string());
    };
    path_default("checkpoint", "gan.ckpt");
    path_default("features", "features.dcfm");
    if (r.is_auto("features_dropout")) {
        if (is_image_dataset(dataset))
            r.set("features_dropout", (out / "features_dropout.dcfm").generic_string());
        else
            r.set("features_dropout", "regenerate");
    }
    path_default("labels", "labels.dclb");
    path_default("assignments", "assignments.dclb");
    r.validate();
    return r;
}

void RunConfig::validate() const {
    for (const auto& k : kKeys) {
        const auto& v = get(k.key);
        if (v == "auto") throw ConfigError("config key '" + std::string(k.key) + "' is still 'auto'");
        check_kind(k, v);
    }
    const auto rate = [&](std::string_view key, bool allow_zero) {
        const double v = real(key);
        if (v < 0 || v >= 1 || (!allow_zero && v == 0)) bad_value(key, get(key), allow_zero ? "a rate in [0, 1)" : "a rate in (0, 1)");
    };
    rate("d_dropout", true);
    rate("feature_dropout", true);
    for (const char* key : {"gan_iters", "gan_batch", "latent_dim", "extract_batch", "cluster_epochs", "cluster_batch",
                            "primary_heads", "replicas", "synth_n", "synth_dim"})
        if (count(key) == 0) bad_value(key, get(key), "a positive integer");
    for (const char* key : {"gan_lr", "tau", "synth_stddev", "synth_separation"})
        if (real(key) <= 0) bad_value(key, get(key), "a positive number");
    for (const char* key : {"cluster_lr", "lambda", "delta_scale", "overcluster_delta_scale", "alpha_r", "alpha_adv"})
        if (real(key) < 0) bad_value(key, get(key), "a non-negative number");
    for (const char* key : {"gan_beta1", "cluster_beta1"})
        if (real(key) < 0 || real(key) >= 1) bad_value(key, get(key), "a value in [0, 1)");
    if (count("k") < 2) bad_value("k", get("k"), "at least 2");
    if (count("overcluster_heads") > 0 && count("overcluster_factor") < 2)
        bad_value("overcluster_factor", get("overcluster_factor"), "at least 2 when overcluster heads are used");
}

std::string RunConfig::echo() const {
    std::string s;
    for (const auto& [k, v] : items_) s += k + " = " + v + "\n";
    return s;
}

RunConfig load(const fs::path* file, const std::vector<std::string>& assignments) {
    RunConfig c;
    if (file) c.merge_file(*file);
    for (const auto& a : assignments) c.assign(a);
    return c;
}

std::uint64_t phase_seed(std::uint64_t master, Phase phase) {
    return derive_seed(master, static_cast<std::uint64_t>(phase));
}

} // namespace dcl::config
