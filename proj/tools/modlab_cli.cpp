#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "modlab/analytics.hpp"
#include "modlab/checkpoint.hpp"
#include "modlab/dataset_io.hpp"
#include "modlab/evaluator.hpp"
#include "modlab/model.hpp"
#include "modlab/sampling.hpp"
#include "modlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace modlab;

namespace {

constexpr const char* kToolVersion = "0.1.0";

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Grid coordinates such as r print short.
std::string axis(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

// Relative paths live under MODLAB_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
    const fs::path path(p);
    const char* root = std::getenv("MODLAB_OUTPUT_ROOT");
    if (path.is_absolute() || root == nullptr || *root == '\0') return fs::absolute(path);
    return fs::absolute(fs::path(root) / path);
}

fs::path input_path(const std::string& p) {
    const fs::path path(p);
    if (path.is_absolute() || fs::exists(path)) return fs::absolute(path);
    return output_path(p);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

// "2..10", "2..10:2", "4,5,7" or any comma-joined mix.
std::vector<std::int64_t> parse_int_list(const std::string& text, const std::string& flag) {
    std::vector<std::int64_t> out;
    try {
        for (const auto& item : split(text, ',')) {
            const auto dots = item.find("..");
            if (dots == std::string::npos) {
                out.push_back(std::stoll(item));
                continue;
            }
            const auto colon = item.find(':', dots);
            const std::int64_t lo = std::stoll(item.substr(0, dots));
            const std::int64_t hi = std::stoll(item.substr(dots + 2, colon - dots - 2));
            const std::int64_t step = colon == std::string::npos ? 1 : std::stoll(item.substr(colon + 1));
            if (step <= 0 || hi < lo) throw UsageError(flag + ": bad range '" + item + "'");
            for (std::int64_t v = lo; v <= hi; v += step) out.push_back(v);
        }
    } catch (const std::logic_error&) {
        throw UsageError(flag + ": cannot parse '" + text + "'");
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

// Reals use "lo..hi:step" (step defaults to 0.1); grid points are rounded to 12 digits.
std::vector<double> parse_real_list(const std::string& text, const std::string& flag) {
    std::vector<double> out;
    auto clean = [](double v) { return std::stod(axis(v)); };
    try {
        for (const auto& item : split(text, ',')) {
            const auto dots = item.find("..");
            if (dots == std::string::npos) {
                out.push_back(std::stod(item));
                continue;
            }
            const auto colon = item.find(':', dots);
            const double lo = std::stod(item.substr(0, dots));
            const double hi = std::stod(item.substr(dots + 2, colon - dots - 2));
            const double step = colon == std::string::npos ? 0.1 : std::stod(item.substr(colon + 1));
            if (!(step > 0) || hi < lo) throw UsageError(flag + ": bad range '" + item + "'");
            const auto n = static_cast<std::int64_t>(std::floor((hi - lo) / step + 1e-9));
            for (std::int64_t i = 0; i <= n; ++i) out.push_back(clean(lo + static_cast<double>(i) * step));
        }
    } catch (const std::logic_error&) {
        throw UsageError(flag + ": cannot parse '" + text + "'");
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

json rational_json(const analytics::Rational& r) {
    return {{"num", boost::multiprecision::numerator(r).str()}, {"den", boost::multiprecision::denominator(r).str()}};
}

std::string now_utc() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Manifest {
    json body;
    std::string hash;
};

// Output paths and wall-clock stay out of the hash: the same run written
// to two places produces identical files.
Manifest make_manifest(const std::string& subcommand, json config, std::optional<std::uint64_t> seed, json inputs,
                       json outputs) {
    Manifest m;
    m.body = {{"subcommand", subcommand},
              {"config", std::move(config)},
              {"seed", seed ? json(*seed) : json(nullptr)},
              {"tool_version", kToolVersion},
              {"inputs", std::move(inputs)}};
    m.hash = model::fnv1a_hex(m.body.dump());
    m.body["outputs"] = std::move(outputs);
    m.body["manifest_hash"] = m.hash;
    m.body["wall_clock"] = now_utc();
    return m;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_json(const fs::path& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
    const auto check = json::parse(read_text(path));
    if (check.is_discarded()) throw FormatError("invalid JSON written to " + path.string());
}

// CSV outputs carry their manifest hash on a leading comment line.
void write_csv(const fs::path& path, const std::string& body, const std::string& manifest_hash) {
    write_text(path, "# manifest_hash=" + manifest_hash + "\n" + body);
}

void write_manifest(const fs::path& path, const Manifest& m) { write_json(path, m.body); }

// --------------------------------------------------------------------- gen

struct GenFlags {
    std::int64_t n = 8;
    std::int64_t q = 31;
    std::string dist = "uniform";
    std::int64_t count = 100000;
    std::uint64_t seed = 0;
    bool strict = false;
    std::string out;
};

void add_gen(CLI::App& app, GenFlags& f) {
    auto* c = app.add_subcommand("gen", "Generate a labelled dataset file");
    c->add_option("--n", f.n, "Sequence length N [ref: 8 to 128]")->capture_default_str();
    c->add_option("--q", f.q, "Modulus q [ref: 31 to 257]")->capture_default_str();
    c->add_option("--dist", f.dist, "Input distribution [ref: uniform for training and test]")
        ->check(CLI::IsMember({"uniform", "sparse"}))
        ->capture_default_str();
    c->add_option("--count", f.count, "Number of examples [ref: 100000 for the search grid]")->capture_default_str();
    c->add_option("--seed", f.seed, "Generator seed [ref: none]")->capture_default_str();
    c->add_flag("--strict-nonzero", f.strict, "Sparse only: fill populated positions from 1..q-1 [ref: off]");
    c->add_option("--out", f.out, "Output dataset path [ref: none]")->required();
}

int run_gen(const GenFlags& f) {
    const fs::path out = output_path(f.out);
    const json config = {{"n", f.n}, {"q", f.q}, {"distribution", f.dist}, {"count", f.count},
                         {"strict_nonzero_fill", f.strict}};
    std::cerr << "gen: " << config.dump() << " seed " << f.seed << "\n";
    auto ds = sampling::generate_dataset(f.n, f.q, sampling::parse_distribution(f.dist), f.count, f.seed, f.strict);
    const auto m = make_manifest("gen", config, f.seed, json::array(), {out.string()});
    ds.meta.manifest_hash = m.hash;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_dataset(out, ds);
    const auto back = io::read_dataset(out);
    if (back.meta != ds.meta || back.examples.size() != ds.examples.size())
        throw FormatError("gen: written dataset does not read back");
    write_manifest(fs::path(out.string() + ".manifest.json"), m);
    std::cerr << "gen: wrote " << ds.size() << " rows to " << out << "\n";
    return 0;
}

// ----------------------------------------------------------------- analyze

struct AnalyzeFlags {
    std::string n;
    std::string q;
    std::string k = "5";
    std::string r = "0.2";
    std::int64_t mc = 0;
    std::uint64_t mc_seed = 1;
    int z_min = 1;
    std::string out;
};

void add_analyze(CLI::App& app, AnalyzeFlags& f) {
    auto* c = app.add_subcommand("analyze", "Closed-form wrap statistics and the generalization-gap prefactor");
    c->add_option("--n", f.n, "N values, list or range such as 8,16 or 8..32:8 [ref: none]")->required();
    c->add_option("--q", f.q, "q values, list or range [ref: none]")->required();
    c->add_option("--k", f.k, "K values (K = 1 gives wraps of q) [ref: 5 for N=8, q=31]")->capture_default_str();
    c->add_option("--r", f.r, "r values [ref: 0.2 for N=8, q=31]")->capture_default_str();
    c->add_option("--mc", f.mc, "Monte Carlo samples for a cross-check of E[D_Kq], 0 disables [ref: none]")
        ->capture_default_str();
    c->add_option("--mc-seed", f.mc_seed, "Monte Carlo seed [ref: none]")->capture_default_str();
    c->add_option("--z-min", f.z_min, "Lower end of z in the sparse count law for E[X2] [ref: 1 in sampling]")
        ->check(CLI::Range(0, 1))
        ->capture_default_str();
    c->add_option("--out", f.out, "Output prefix; writes <out>.csv and <out>.json (stdout CSV when empty) [ref: none]");
}

int run_analyze(const AnalyzeFlags& f) {
    const auto ns = parse_int_list(f.n, "--n");
    const auto qs = parse_int_list(f.q, "--q");
    const auto ks = parse_int_list(f.k, "--k");
    const auto rs = parse_real_list(f.r, "--r");
    const json config = {{"n", ns}, {"q", qs}, {"k", ks}, {"r", rs}, {"mc", f.mc}, {"z_min", f.z_min}};
    std::cerr << "analyze: " << config.dump() << "\n";

    std::ostringstream csv;
    csv << "n,q,k,r,e_x0,e_x1,e_x2,e_dkq_exact,e_dkq_lo,e_dkq_hi,p_dkq_zero,gap_prefactor,mode";
    if (f.mc > 0) csv << ",mc_e_dkq,mc_std_error,mc_samples,mc_seed";
    csv << "\n";
    json rows = json::array();
    for (auto n : ns)
        for (auto q : qs) {
            if (n < 1 || q < 2) throw UsageError("analyze: need N >= 1 and q >= 2");
            const bool exact = analytics::exact_mode_feasible(n, q);
            std::optional<analytics::ExactPMF> pmf;
            if (exact) pmf = analytics::exact_sum_pmf(n, q);
            else
                std::cerr << "warning: (N=" << n << ", q=" << q
                          << ") exceeds exact-mode limits; E[D_Kq] is estimated by Monte Carlo\n";
            const double e_x2 = analytics::expected_x2_exact(n, q, f.z_min);
            const auto e_x0 = analytics::expected_x0(n, q);
            const double prefactor = analytics::gap_lower_bound({q, n, 1.0, 0.0}).prefactor;
            for (auto k : ks)
                for (double r : rs) {
                    if (k < 1 || r < 0 || r > 1) throw UsageError("analyze: need K >= 1 and r in [0,1]");
                    const auto e_x1 = analytics::expected_x1(n, q, k, analytics::parse_decimal(fmt(r)));
                    const auto bounds = analytics::expected_wraps_bounds(n, q, k);
                    const auto p0 = analytics::prob_zero_wraps(n, q, k);
                    json row = {{"n", n},
                                {"q", q},
                                {"k", k},
                                {"r", r},
                                {"e_x0", rational_json(e_x0)},
                                {"e_x1", rational_json(e_x1)},
                                {"e_x2", e_x2},
                                {"e_dkq_lo", rational_json(bounds.lo)},
                                {"e_dkq_hi", rational_json(bounds.hi)},
                                {"p_dkq_zero", rational_json(p0)},
                                {"gap_prefactor", prefactor},
                                {"mode", exact ? "exact" : "monte_carlo"}};
                    std::string e_dkq;
                    if (pmf) {
                        const auto v = analytics::expected_wraps_exact(*pmf, k);
                        row["e_dkq_exact"] = rational_json(v);
                        e_dkq = fmt(analytics::to_double(v));
                    }
                    std::optional<analytics::MonteCarloEstimate> mc;
                    const std::int64_t samples = f.mc > 0 ? f.mc : (exact ? 0 : 1000000);
                    if (samples > 0) {
                        mc = analytics::monte_carlo_wraps(ProblemSpec{n, q, k, r}, samples, f.mc_seed);
                        row["mc"] = {{"mean", mc->mean}, {"std_error", mc->std_error}, {"samples", mc->samples},
                                     {"seed", mc->seed}};
                    }
                    csv << n << ',' << q << ',' << k << ',' << axis(r) << ',' << fmt(analytics::to_double(e_x0)) << ','
                        << fmt(analytics::to_double(e_x1)) << ',' << fmt(e_x2) << ','
                        << (pmf ? e_dkq : (mc ? fmt(mc->mean) : "")) << ',' << fmt(analytics::to_double(bounds.lo))
                        << ',' << fmt(analytics::to_double(bounds.hi)) << ',' << fmt(analytics::to_double(p0)) << ','
                        << fmt(prefactor) << ',' << (exact ? "exact" : "monte_carlo");
                    if (f.mc > 0)
                        csv << ',' << fmt(mc->mean) << ',' << fmt(mc->std_error) << ',' << mc->samples << ','
                            << mc->seed;
                    csv << "\n";
                    rows.push_back(std::move(row));
                }
        }
    if (f.out.empty()) {
        std::cout << csv.str();
        return 0;
    }
    const fs::path base = output_path(f.out);
    const fs::path csv_path = base.string() + ".csv", json_path = base.string() + ".json";
    const auto m = make_manifest("analyze", config, f.mc > 0 ? std::optional<std::uint64_t>(f.mc_seed) : std::nullopt,
                                 json::array(), {csv_path.string(), json_path.string()});
    write_csv(csv_path, csv.str(), m.hash);
    write_json(json_path, {{"manifest_hash", m.hash}, {"rows", rows}});
    write_manifest(base.string() + ".manifest.json", m);
    return 0;
}

// ----------------------------------------------------------------- heatmap

struct HeatmapFlags {
    std::string k_range = "2..10";
    std::string r_range = "0.1..0.9:0.1";
    std::string join;
    std::string out;
};

void add_heatmap(CLI::App& app, HeatmapFlags& f) {
    auto* c = app.add_subcommand("heatmap", "rho over a (K, r) grid, optionally joined with measured accuracies");
    c->add_option("--k-range", f.k_range, "K axis [ref: 2..10]")->capture_default_str();
    c->add_option("--r-range", f.r_range, "r axis [ref: 0.1..0.9 in steps of 0.1]")->capture_default_str();
    c->add_option("--join", f.join, "Directory searched recursively for metrics.json reports [ref: none]");
    c->add_option("--out", f.out, "Output prefix; writes <out>.csv and <out>.json (stdout CSV when empty) [ref: none]");
}

int run_heatmap(const HeatmapFlags& f) {
    const auto ks = parse_int_list(f.k_range, "--k-range");
    const auto rs = parse_real_list(f.r_range, "--r-range");
    const auto grid = analytics::rho_heatmap(ks, rs);
    std::cerr << "heatmap: " << ks.size() << " x " << rs.size() << " cells\n";

    struct Joined {
        double sum = 0;
        std::int64_t runs = 0;
    };
    std::map<std::pair<std::int64_t, std::int64_t>, Joined> joined;
    auto key = [](std::int64_t k, double r) { return std::make_pair(k, static_cast<std::int64_t>(std::llround(r * 1e9))); };
    json sources = json::array();
    if (!f.join.empty()) {
        const fs::path dir = input_path(f.join);
        if (!fs::is_directory(dir)) throw UsageError("heatmap: --join '" + dir.string() + "' is not a directory");
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            const auto j = json::parse(read_text(p));
            const auto& spec = j.at("meta").at("spec");
            auto& cell = joined[key(spec.at("k").get<std::int64_t>(), spec.at("r").get<double>())];
            cell.sum += j.at("match_accuracy").get<double>();
            ++cell.runs;
            sources.push_back(p.string());
        }
    }

    std::ostringstream csv;
    csv << "k,r,rho,in_band";
    if (!f.join.empty()) csv << ",match_accuracy,runs";
    csv << "\n";
    json cells = json::array();
    for (const auto& c : grid) {
        csv << c.k << ',' << axis(c.r) << ',' << fmt(c.rho) << ',' << (c.in_band ? 1 : 0);
        json cj = {{"k", c.k}, {"r", c.r}, {"rho", c.rho}, {"in_band", c.in_band}};
        if (!f.join.empty()) {
            const auto it = joined.find(key(c.k, c.r));
            if (it != joined.end()) {
                const double acc = it->second.sum / static_cast<double>(it->second.runs);
                csv << ',' << fmt(acc) << ',' << it->second.runs;
                cj["match_accuracy"] = acc;
                cj["runs"] = it->second.runs;
            } else {
                csv << ",,0";
            }
        }
        csv << "\n";
        cells.push_back(std::move(cj));
    }
    if (f.out.empty()) {
        std::cout << csv.str();
        return 0;
    }
    const fs::path base = output_path(f.out);
    const fs::path csv_path = base.string() + ".csv", json_path = base.string() + ".json";
    const auto m = make_manifest("heatmap", {{"k", ks}, {"r", rs}, {"join", f.join}}, std::nullopt, sources,
                                 {csv_path.string(), json_path.string()});
    write_csv(csv_path, csv.str(), m.hash);
    write_json(json_path, {{"manifest_hash", m.hash}, {"cells", cells}});
    write_manifest(base.string() + ".manifest.json", m);
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainFlags {
    std::string data;
    std::string embedding = "token";
    std::int64_t k = 5;
    double r = 0.2;
    std::int64_t layers = 4;
    std::int64_t heads = 4;
    std::int64_t d_model = 256;
    std::int64_t d_ffn = 2048;
    std::string norm = "pre";
    bool no_bias = false;
    std::string init = "default";
    double dropout = 0.0;
    std::string pooling = "mean";
    bool supervise_both = false;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 250;
    double lr = 3e-5;
    double warmup = 0.05;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::string precision = "f32";
    bool decay_norm_bias = false;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> model_seed;
    std::int64_t checkpoint_every = 1;
    std::string resume;
    std::string preset;
    std::string variant;
    std::string out;
};

// Model and optimiser flags shared by train and sweep.
void add_train_options(CLI::App* c, TrainFlags& f, bool with_cell) {
    if (with_cell) {
        c->add_option("--k", f.k, "Auxiliary factor K [ref: 5 for N=8, q=31]")->capture_default_str();
        c->add_option("--r", f.r, "Auxiliary mixing probability r; 0 is the no-auxiliary ablation [ref: 0.2 for N=8, q=31]")
            ->capture_default_str();
    }
    c->add_option("--embedding", f.embedding, "Input embedding [ref: token]")
        ->check(CLI::IsMember({"token", "angular"}))
        ->capture_default_str();
    c->add_option("--layers", f.layers, "Encoder layers [ref: 4]")->capture_default_str();
    c->add_option("--heads", f.heads, "Attention heads [ref: 4]")->capture_default_str();
    c->add_option("--d-model", f.d_model, "Model width [ref: 256]")->capture_default_str();
    c->add_option("--d-ffn", f.d_ffn, "Feed-forward width [ref: 2048]")->capture_default_str();
    c->add_option("--norm", f.norm, "Norm placement [ref: pre]")->check(CLI::IsMember({"pre", "post"}))->capture_default_str();
    c->add_flag("--no-bias", f.no_bias, "Drop every bias array [ref: biases on]");
    c->add_option("--init", f.init, "Weight initialisation [ref: default]")
        ->check(CLI::IsMember({"default", "sigma002"}))
        ->capture_default_str();
    c->add_option("--dropout", f.dropout, "Dropout rate [ref: 0.0]")->capture_default_str();
    c->add_option("--pooling", f.pooling, "Sequence pooling [ref: not stated; mean]")
        ->check(CLI::IsMember({"mean", "last"}))
        ->capture_default_str();
    c->add_flag("--supervise-both", f.supervise_both, "Angular only: auxiliary targets also supervise the q pair [ref: off]");
    c->add_option("--epochs", f.epochs, "Training epochs [ref: 10]")->capture_default_str();
    c->add_option("--batch-size", f.batch_size, "Batch size [ref: 250]")->capture_default_str();
    c->add_option("--lr", f.lr, "Peak learning rate [ref: 3e-5]")->capture_default_str();
    c->add_option("--warmup", f.warmup, "Warmup ratio [ref: 0.05]")->capture_default_str();
    c->add_option("--weight-decay", f.weight_decay, "AdamW weight decay [ref: 0.1]")->capture_default_str();
    c->add_option("--beta1", f.beta1, "AdamW beta1 [ref: 0.9]")->capture_default_str();
    c->add_option("--beta2", f.beta2, "AdamW beta2 [ref: 0.999]")->capture_default_str();
    c->add_option("--adam-eps", f.adam_eps, "AdamW epsilon [ref: not stated; 1e-8]")->capture_default_str();
    c->add_option("--precision", f.precision, "Floating-point precision [ref: not stated; f32]")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    c->add_flag("--decay-norm-bias", f.decay_norm_bias, "Also decay norm gains and biases [ref: not stated; off]");
    c->add_option("--seed", f.seed, "Training seed: shuffling, targets, dropout [ref: none]")->capture_default_str();
    c->add_option("--model-seed", f.model_seed, "Initialisation seed, defaults to --seed [ref: none]");
    c->add_option("--checkpoint-every", f.checkpoint_every, "Epochs between checkpoints, 0 disables [ref: none]")
        ->capture_default_str();
    c->add_option("--preset", f.preset, "Architecture preset; appendix-b selects the 16-configuration study [ref: none]")
        ->check(CLI::IsMember({"", "appendix-b"}));
    c->add_option("--variant", f.variant,
                  "Preset variant tokens: pre_norm|post_norm, bias|no_bias, default_init|sigma002, "
                  "dropout00|dropout01 [ref: pre_norm,bias,default_init,dropout00]");
}

void add_train(CLI::App& app, TrainFlags& f) {
    auto* c = app.add_subcommand("train", "Train a model on a dataset file");
    c->add_option("--data", f.data, "Training dataset file [ref: none]")->required();
    add_train_options(c, f, true);
    c->add_option("--resume", f.resume, "Resume from an epoch checkpoint of the same run [ref: none]");
    c->add_option("--out", f.out, "Output directory [ref: none]")->required();
}

void apply_preset(TrainFlags& f) {
    if (f.preset.empty()) {
        if (!f.variant.empty()) throw UsageError("--variant requires --preset");
        return;
    }
    f.embedding = "token";
    f.norm = "pre";
    f.no_bias = false;
    f.init = "default";
    f.dropout = 0.0;
    for (const auto& t : split(f.variant, ',')) {
        if (t == "pre_norm") f.norm = "pre";
        else if (t == "post_norm") f.norm = "post";
        else if (t == "bias") f.no_bias = false;
        else if (t == "no_bias") f.no_bias = true;
        else if (t == "default_init") f.init = "default";
        else if (t == "sigma002") f.init = "sigma002";
        else if (t == "dropout00") f.dropout = 0.0;
        else if (t == "dropout01") f.dropout = 0.1;
        else throw UsageError("--variant: unknown token '" + t + "'");
    }
}

model::ModelConfig model_config(const TrainFlags& f, std::int64_t n, std::int64_t q) {
    model::ModelConfig c;
    c.embedding_kind = f.embedding == "token" ? model::EmbeddingKind::token_extended : model::EmbeddingKind::dual_angular;
    c.layers = f.layers;
    c.heads = f.heads;
    c.d_model = f.d_model;
    c.d_ffn = f.d_ffn;
    c.norm_placement = f.norm == "pre" ? model::NormPlacement::pre : model::NormPlacement::post;
    c.bias = !f.no_bias;
    c.init_scheme = f.init == "default" ? model::InitScheme::default_kaiming : model::InitScheme::sigma_002;
    c.dropout = f.dropout;
    c.pooling = f.pooling == "mean" ? model::Pooling::mean : model::Pooling::last_token;
    c.supervise_both_pairs = f.supervise_both;
    c.spec = ProblemSpec{n, q, f.k, f.r};
    c.validate();
    return c;
}

trainer::TrainConfig train_config(const TrainFlags& f) {
    trainer::TrainConfig t;
    t.epochs = f.epochs;
    t.batch_size = f.batch_size;
    t.peak_lr = f.lr;
    t.warmup_ratio = f.warmup;
    t.weight_decay = f.weight_decay;
    t.beta1 = f.beta1;
    t.beta2 = f.beta2;
    t.adam_eps = f.adam_eps;
    t.seed = f.seed;
    t.precision = f.precision == "f32" ? trainer::Precision::f32 : trainer::Precision::f64;
    t.decay_norm_and_bias = f.decay_norm_bias;
    t.validate();
    return t;
}

void report_deviations(const model::ModelConfig& mc, const trainer::TrainConfig& tc) {
    const model::ModelConfig pm;
    const trainer::TrainConfig pt;
    std::vector<std::string> lines;
    auto check = [&](const char* name, const json& have, const json& ref) {
        if (have != ref) lines.push_back(std::string(name) + " = " + have.dump() + " (reference " + ref.dump() + ")");
    };
    check("layers", mc.layers, pm.layers);
    check("heads", mc.heads, pm.heads);
    check("d_model", mc.d_model, pm.d_model);
    check("d_ffn", mc.d_ffn, pm.d_ffn);
    check("dropout", mc.dropout, pm.dropout);
    check("epochs", tc.epochs, pt.epochs);
    check("batch_size", tc.batch_size, pt.batch_size);
    check("peak_lr", tc.peak_lr, pt.peak_lr);
    check("warmup_ratio", tc.warmup_ratio, pt.warmup_ratio);
    check("weight_decay", tc.weight_decay, pt.weight_decay);
    check("beta1", tc.beta1, pt.beta1);
    check("beta2", tc.beta2, pt.beta2);
    for (const auto& l : lines) std::cerr << "  deviates: " << l << "\n";
    if (mc.dropout != 0.0 && mc.dropout != 0.1)
        std::cerr << "  note: dropout " << mc.dropout << " is outside the studied values {0.0, 0.1}\n";
}

template <class T>
int train_with(const TrainFlags& f, const sampling::Dataset& data, const model::ModelConfig& mc,
               const trainer::TrainConfig& tc, const fs::path& data_path) {
    const fs::path out = output_path(f.out);
    fs::create_directories(out);
    const std::uint64_t model_seed = f.model_seed.value_or(f.seed);
    const json config = {{"model", mc}, {"train", tc}, {"model_seed", model_seed}, {"preset", f.preset},
                         {"variant", f.variant}};
    const fs::path ckpt = out / "model.ckpt", hist_csv = out / "history.csv", hist_json = out / "history.json";
    json inputs = {data_path.string()};
    if (!f.resume.empty()) inputs.push_back(input_path(f.resume).string());
    const auto m = make_manifest("train", config, f.seed, inputs,
                                 {ckpt.string(), hist_csv.string(), hist_json.string(), (out / "checkpoints").string()});

    model::Model<T> net(mc, model_seed);
    trainer::TrainOptions opt;
    if (f.checkpoint_every > 0) {
        opt.checkpoint_dir = out / "checkpoints";
        opt.checkpoint_every = f.checkpoint_every;
    }
    if (!f.resume.empty()) opt.resume_from = input_path(f.resume);
    opt.stamp = {{"manifest_hash", m.hash}};
    const auto t0 = std::chrono::steady_clock::now();
    opt.on_epoch = [&](const trainer::EpochRecord& e) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "epoch " << e.epoch << " loss " << fmt(e.mean_loss) << " lr " << fmt(e.lr_last) << " aux "
                  << fmt(e.aux_frequency) << " (" << std::lround(secs) << " s)\n";
    };
    const auto history = trainer::train(net, data, tc, opt);

    checkpoint::save_model(ckpt, net,
                           {{"manifest_hash", m.hash}, {"train_config", tc}, {"history", trainer::history_json(history)}});
    (void)checkpoint::read(ckpt);
    write_csv(hist_csv, trainer::history_csv(history), m.hash);
    json hj = trainer::history_json(history);
    hj["manifest_hash"] = m.hash;
    write_json(hist_json, hj);
    write_manifest(out / "manifest.json", m);
    std::cerr << "train: wrote " << ckpt << "\n";
    return 0;
}

int run_train(TrainFlags f) {
    apply_preset(f);
    const fs::path data_path = input_path(f.data);
    const auto data = io::read_dataset(data_path);
    const auto mc = model_config(f, data.meta.n, data.meta.q);
    const auto tc = train_config(f);
    std::cerr << "train: resolved configuration\n"
              << json({{"model", mc}, {"train", tc}}).dump(2) << "\n";
    report_deviations(mc, tc);
    if (f.preset == "appendix-b" && (data.meta.n != 8 || data.meta.q != 97))
        std::cerr << "  note: the appendix-b study uses N=8, q=97\n";
    if (tc.precision == trainer::Precision::f64) return train_with<double>(f, data, mc, tc, data_path);
    return train_with<float>(f, data, mc, tc, data_path);
}

// -------------------------------------------------------------------- eval

struct EvalFlags {
    std::string checkpoint;
    std::string test_data;
    std::string tau = "0.05,0.1";
    std::string expect_config_hash;
    std::string out;
};

void add_eval(CLI::App& app, EvalFlags& f) {
    auto* c = app.add_subcommand("eval", "Evaluate a checkpoint on a test set");
    c->add_option("--checkpoint", f.checkpoint, "Model checkpoint [ref: none]")->required();
    c->add_option("--test-data", f.test_data, "Test dataset file [ref: uniform test set]")->required();
    c->add_option("--tau", f.tau, "Comma-separated tau tolerances [ref: 0.05,0.1]")->capture_default_str();
    c->add_option("--expect-config-hash", f.expect_config_hash, "Refuse checkpoints with another config hash [ref: none]");
    c->add_option("--out", f.out, "Output directory for metrics.json and metrics.csv [ref: none]")->required();
}

template <class T>
evaluator::MetricsReport eval_with(const checkpoint::Contents& c, const sampling::Dataset& test,
                                   const std::vector<double>& taus) {
    model::Model<T> net(c.config);
    checkpoint::restore(net, c);
    return evaluator::evaluate(net, test, taus);
}

int run_eval(const EvalFlags& f) {
    const fs::path ckpt = input_path(f.checkpoint), test_path = input_path(f.test_data);
    const auto taus = parse_real_list(f.tau, "--tau");
    const auto c = checkpoint::read(ckpt);
    const auto hash = model::config_hash(c.config);
    if (!f.expect_config_hash.empty() && f.expect_config_hash != hash)
        throw InvalidArgument("eval: checkpoint config hash " + hash + " does not match expected " + f.expect_config_hash);
    const auto test = io::read_dataset(test_path);
    std::cerr << "eval: config " << hash << " on " << test.size() << " examples, tau " << json(taus).dump() << "\n";
    auto report = c.manifest.value("dtype", "f32") == "f64" ? eval_with<double>(c, test, taus)
                                                            : eval_with<float>(c, test, taus);
    if (!report.decomposition_holds()) throw Error("eval: stratified counts do not add up");

    const fs::path out = output_path(f.out);
    const fs::path mj = out / "metrics.json", mcsv = out / "metrics.csv";
    const auto m = make_manifest("eval", {{"model", c.config}, {"config_hash", hash}, {"taus", taus}}, std::nullopt,
                                 {ckpt.string(), test_path.string()}, {mj.string(), mcsv.string()});
    json j = evaluator::to_json(report);
    j["model_config"] = c.config;
    j["manifest_hash"] = m.hash;
    write_json(mj, j);
    write_csv(mcsv, evaluator::to_csv(report), m.hash);
    write_manifest(out / "manifest.json", m);
    std::cerr << "eval: match accuracy " << fmt(report.match_accuracy) << "\n";
    return 0;
}

// ------------------------------------------------------------------- sweep

struct SweepFlags {
    TrainFlags train;
    std::string test_data;
    std::string k_grid = "4..9";
    std::string r_grid = "0.1..0.4:0.1";
    std::string tau = "0.05,0.1";
    unsigned parallel = 1;
};

void add_sweep(CLI::App& app, SweepFlags& f) {
    auto* c = app.add_subcommand("sweep", "Train and evaluate every (K, r) cell of a grid");
    c->add_option("--data", f.train.data, "Training dataset file [ref: 100000 examples]")->required();
    c->add_option("--test-data", f.test_data, "Test dataset file [ref: none]")->required();
    c->add_option("--k-grid", f.k_grid, "K values [ref: 4..9]")->capture_default_str();
    c->add_option("--r-grid", f.r_grid, "r values [ref: 0.1..0.4 in steps of 0.1]")->capture_default_str();
    c->add_option("--tau", f.tau, "Comma-separated tau tolerances [ref: 0.05,0.1]")->capture_default_str();
    c->add_option("--parallel", f.parallel, "Concurrent cell runs [ref: none]")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    add_train_options(c, f.train, false);
    c->add_option("--out", f.train.out, "Output directory [ref: none]")->required();
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

std::vector<std::string> train_args(const TrainFlags& f) {
    std::vector<std::string> a = {"--embedding", f.embedding, "--k", std::to_string(f.k), "--r", fmt(f.r),
                                  "--layers", std::to_string(f.layers), "--heads", std::to_string(f.heads),
                                  "--d-model", std::to_string(f.d_model), "--d-ffn", std::to_string(f.d_ffn),
                                  "--norm", f.norm, "--init", f.init, "--dropout", fmt(f.dropout),
                                  "--pooling", f.pooling, "--epochs", std::to_string(f.epochs),
                                  "--batch-size", std::to_string(f.batch_size), "--lr", fmt(f.lr),
                                  "--warmup", fmt(f.warmup), "--weight-decay", fmt(f.weight_decay),
                                  "--beta1", fmt(f.beta1), "--beta2", fmt(f.beta2), "--adam-eps", fmt(f.adam_eps),
                                  "--precision", f.precision, "--seed", std::to_string(f.seed),
                                  "--checkpoint-every", std::to_string(f.checkpoint_every)};
    if (f.model_seed) a.insert(a.end(), {"--model-seed", std::to_string(*f.model_seed)});
    if (f.no_bias) a.push_back("--no-bias");
    if (f.supervise_both) a.push_back("--supervise-both");
    if (f.decay_norm_bias) a.push_back("--decay-norm-bias");
    return a;
}

fs::path self_exe() { return fs::read_symlink("/proc/self/exe"); }

int run_sweep(SweepFlags f) {
    apply_preset(f.train);
    f.train.preset.clear();
    f.train.variant.clear();
    const auto ks = parse_int_list(f.k_grid, "--k-grid");
    const auto rs = parse_real_list(f.r_grid, "--r-grid");
    const auto taus = parse_real_list(f.tau, "--tau");
    const fs::path out = output_path(f.train.out), data = input_path(f.train.data), test = input_path(f.test_data);
    fs::create_directories(out);

    struct Cell {
        std::int64_t k;
        double r;
        fs::path dir;
        int status = -1;
        std::optional<json> metrics;
    };
    std::vector<Cell> cells;
    for (auto k : ks)
        for (double r : rs) cells.push_back({k, r, out / ("cell_K" + std::to_string(k) + "_r" + axis(r)), -1, {}});
    std::cerr << "sweep: " << cells.size() << " cells, parallel " << f.parallel << "\n";

    const std::string exe = shell_quote(self_exe().string());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            auto& cell = cells[i];
            fs::create_directories(cell.dir);
            TrainFlags tf = f.train;
            tf.k = cell.k;
            tf.r = cell.r;
            std::string cmd = exe + " train --data " + shell_quote(data.string());
            for (const auto& a : train_args(tf)) cmd += " " + shell_quote(a);
            cmd += " --out " + shell_quote((cell.dir / "train").string());
            cmd += " > " + shell_quote((cell.dir / "log.txt").string()) + " 2>&1";
            cmd += " && " + exe + " eval --checkpoint " + shell_quote((cell.dir / "train" / "model.ckpt").string()) +
                   " --test-data " + shell_quote(test.string()) + " --tau " + shell_quote(f.tau) + " --out " +
                   shell_quote((cell.dir / "eval").string()) + " >> " + shell_quote((cell.dir / "log.txt").string()) +
                   " 2>&1";
            const int rc = std::system(cmd.c_str());
            cell.status = rc;
            const fs::path mj = cell.dir / "eval" / "metrics.json";
            if (rc == 0 && fs::exists(mj)) cell.metrics = json::parse(read_text(mj));
            std::lock_guard lock(log_mutex);
            std::cerr << "  cell K=" << cell.k << " r=" << axis(cell.r) << ": "
                      << (cell.metrics ? "match " + fmt(cell.metrics->at("match_accuracy").get<double>())
                                       : "FAILED (see " + (cell.dir / "log.txt").string() + ")")
                      << "\n";
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(f.parallel, cells.size()); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    const json config = {{"k_grid", ks}, {"r_grid", rs}, {"taus", taus}, {"train_args", train_args(f.train)},
                         {"parallel", f.parallel}};
    const fs::path cells_csv = out / "cells.csv", summary_csv = out / "summary.csv", summary_json = out / "summary.json";
    const auto m = make_manifest("sweep", config, f.train.seed, {data.string(), test.string()},
                                 {cells_csv.string(), summary_csv.string(), summary_json.string()});

    std::ostringstream cc;
    cc << "k,r,status,match_accuracy";
    for (double t : taus) cc << ",tau_accuracy@" << axis(t);
    cc << "\n";
    json cj = json::array();
    const Cell* best = nullptr;
    const Cell* worst = nullptr;
    double sum = 0;
    std::size_t ok = 0;
    for (const auto& c : cells) {
        cc << c.k << ',' << axis(c.r) << ',' << (c.metrics ? "ok" : "failed");
        json row = {{"k", c.k}, {"r", c.r}, {"status", c.metrics ? "ok" : "failed"}, {"exit_code", c.status}};
        if (c.metrics) {
            const double acc = c.metrics->at("match_accuracy").get<double>();
            cc << ',' << fmt(acc);
            for (const auto& t : c.metrics->at("tau_accuracy")) cc << ',' << fmt(t.at("accuracy").get<double>());
            row["match_accuracy"] = acc;
            row["tau_accuracy"] = c.metrics->at("tau_accuracy");
            sum += acc;
            ++ok;
            if (!best || acc > best->metrics->at("match_accuracy").get<double>()) best = &c;
            if (!worst || acc < worst->metrics->at("match_accuracy").get<double>()) worst = &c;
        } else {
            cc << ',';
            for (std::size_t i = 0; i < taus.size(); ++i) cc << ',';
        }
        cc << "\n";
        cj.push_back(std::move(row));
    }
    std::ostringstream sc;
    json sj = {{"manifest_hash", m.hash}, {"cells", cj}, {"completed", ok}, {"failed", cells.size() - ok}};
    sc << "statistic,match_accuracy,k,r\n";
    if (ok > 0) {
        auto acc = [](const Cell* c) { return c->metrics->at("match_accuracy").get<double>(); };
        sc << "Min," << fmt(acc(worst)) << ',' << worst->k << ',' << axis(worst->r) << "\n";
        sc << "Avg," << fmt(sum / static_cast<double>(ok)) << ",,\n";
        sc << "Max," << fmt(acc(best)) << ',' << best->k << ',' << axis(best->r) << "\n";
        sj["min"] = acc(worst);
        sj["avg"] = sum / static_cast<double>(ok);
        sj["max"] = acc(best);
        sj["best"] = {{"k", best->k}, {"r", best->r}};
    }
    write_csv(cells_csv, cc.str(), m.hash);
    write_csv(summary_csv, sc.str(), m.hash);
    write_json(summary_json, sj);
    write_manifest(out / "manifest.json", m);
    if (best) std::cerr << "sweep: best (K, r) = (" << best->k << ", " << axis(best->r) << ")\n";
    if (ok != cells.size()) {
        std::cerr << "sweep: " << cells.size() - ok << " cell(s) failed\n";
        return 3;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modlab: modular-addition learning with an auxiliary modulus"};
    app.footer(std::string("Version ") + kToolVersion +
               ". [ref: ...] marks the reference setting of the method. Relative output paths are placed "
               "under $MODLAB_OUTPUT_ROOT when it is set.");
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    GenFlags gen;
    AnalyzeFlags analyze;
    HeatmapFlags heatmap;
    TrainFlags train;
    EvalFlags eval;
    SweepFlags sweep;
    add_gen(app, gen);
    add_analyze(app, analyze);
    add_heatmap(app, heatmap);
    add_train(app, train);
    add_eval(app, eval);
    add_sweep(app, sweep);
    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("gen")) return run_gen(gen);
        if (app.got_subcommand("analyze")) return run_analyze(analyze);
        if (app.got_subcommand("heatmap")) return run_heatmap(heatmap);
        if (app.got_subcommand("train")) return run_train(train);
        if (app.got_subcommand("eval")) return run_eval(eval);
        if (app.got_subcommand("sweep")) return run_sweep(sweep);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
