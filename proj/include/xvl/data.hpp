#pragma once

// Synthetic multilingual multimodal benchmark.
//
// A latent concept z ~ N(0, I) is rendered as image features P_img z and, in
// language l, as text features P_txt (Q_l z + s_l). Q_l is a rotation that
// moves away from the identity as the language distance grows and s_l is a
// shift along latent directions the rotation does not touch. Labels are the
// argmax over class prototypes of <p_c, z>, decided before any noise.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvl/batch.hpp"
#include "xvl/error.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"
#include "xvl/tensor.hpp"

namespace xvl {

namespace fs = std::filesystem;

inline constexpr const char* kDatasetFormat = "xvl-dataset";
inline constexpr int kDatasetVersion = 1;

struct Example {
    std::string pair_id;
    std::string language;
    std::string split;
    std::vector<double> image;
    std::vector<double> text;
    std::optional<std::size_t> label;

    friend bool operator==(const Example&, const Example&) = default;
};

enum class LanguageRole { English, Auxiliary, Target };

inline std::string to_string(LanguageRole r) {
    switch (r) {
    case LanguageRole::English: return "english";
    case LanguageRole::Auxiliary: return "auxiliary";
    case LanguageRole::Target: return "target";
    }
    return "?";
}

inline LanguageRole parse_role(const std::string& s) {
    if (s == "english") return LanguageRole::English;
    if (s == "auxiliary") return LanguageRole::Auxiliary;
    if (s == "target") return LanguageRole::Target;
    throw ConfigError("unknown language role '" + s + "'");
}

struct LanguageEntry {
    std::string code;
    LanguageRole role = LanguageRole::Target;
    double distance = 0.0;
};

struct TaskSpec {
    std::string name;
    std::size_t classes = 3;
};

struct BenchmarkConfig {
    std::size_t latent_dim = 16;
    /// Trailing latent dimensions that carry the language shift; the rotation
    /// acts on the leading latent_dim - shift_dims dimensions.
    std::size_t shift_dims = 2;
    std::size_t image_dim = 32;
    std::size_t text_dim = 32;
    std::vector<TaskSpec> tasks{{"xvnli", 3}, {"marvl", 2}};
    std::vector<LanguageEntry> languages{
        {"en", LanguageRole::English, 0.0},   {"aux1", LanguageRole::Auxiliary, 0.3},
        {"aux2", LanguageRole::Auxiliary, 0.9}, {"tgt1", LanguageRole::Target, 0.4},
        {"tgt2", LanguageRole::Target, 0.55}, {"tgt3", LanguageRole::Target, 0.7},
        {"tgt4", LanguageRole::Target, 0.85}};
    std::size_t train_size = 2000;
    std::size_t dev_size = 500;
    std::size_t test_size = 500;
    std::vector<std::size_t> fewshot_sizes{1, 5, 10, 20, 48};
    /// Text feature noise.
    double noise = 0.1;
    /// Image feature noise; larger values make the text pathway matter.
    double image_noise = 0.6;
    /// Largest plane-rotation angle (radians) at distance 1.
    double rotation_scale = 2.5;
    /// Smallest plane-rotation angle as a fraction of rotation_scale.
    double rotation_spread = 0.5;
    /// Shift norm at distance 1.
    double shift_scale = 0.5;
    std::uint64_t seed = 7;

    void validate() const {
        if (latent_dim < 2) throw ConfigError("latent_dim must be >= 2");
        if (shift_dims >= latent_dim) throw ConfigError("shift_dims must be < latent_dim");
        if (image_dim < 1 || text_dim < 1) throw ConfigError("feature dims must be >= 1");
        if (tasks.empty()) throw ConfigError("at least one task is required");
        std::set<std::string> names;
        for (const auto& t : tasks) {
            if (t.classes < 2) throw ConfigError("task '" + t.name + "' needs at least 2 classes");
            if (t.classes > latent_dim) throw ConfigError("task '" + t.name + "' has more classes than latent dims");
            if (!names.insert(t.name).second) throw ConfigError("duplicate task '" + t.name + "'");
        }
        std::set<std::string> codes;
        double max_distance = 0.0;
        for (const auto& l : languages) {
            if (l.code.empty()) throw ConfigError("empty language code");
            if (!codes.insert(l.code).second) throw ConfigError("duplicate language '" + l.code + "'");
            if (!(l.distance >= 0.0)) throw ConfigError("language '" + l.code + "' has negative distance");
            if (l.role == LanguageRole::English && l.distance != 0.0)
                throw ConfigError("the English language must have distance 0");
            max_distance = std::max(max_distance, l.distance);
        }
        if (!codes.count("en")) throw ConfigError("benchmark needs an 'en' language");
        if (!(noise >= 0.0) || !(image_noise >= 0.0)) throw ConfigError("noise scale must be >= 0");
        if (!(rotation_scale >= 0.0) || rotation_scale * max_distance > std::numbers::pi + 1e-12)
            throw ConfigError("rotation_scale * max distance must lie in [0, pi]");
        if (!(rotation_spread >= 0.0 && rotation_spread <= 1.0))
            throw ConfigError("rotation_spread must lie in [0, 1]");
        if (!(shift_scale >= 0.0)) throw ConfigError("shift_scale must be >= 0");
        for (std::size_t i = 1; i < fewshot_sizes.size(); ++i)
            if (fewshot_sizes[i] <= fewshot_sizes[i - 1])
                throw ConfigError("few-shot sizes must be strictly increasing");
    }

    const LanguageEntry& language(const std::string& code) const {
        for (const auto& l : languages)
            if (l.code == code) return l;
        throw ConfigError("unknown language '" + code + "'");
    }
};

inline void to_json(nlohmann::ordered_json& j, const BenchmarkConfig& c) {
    j = nlohmann::ordered_json::object();
    j["latent_dim"] = c.latent_dim;
    j["shift_dims"] = c.shift_dims;
    j["image_dim"] = c.image_dim;
    j["text_dim"] = c.text_dim;
    j["tasks"] = nlohmann::ordered_json::array();
    for (const auto& t : c.tasks) j["tasks"].push_back({{"name", t.name}, {"classes", t.classes}});
    j["languages"] = nlohmann::ordered_json::array();
    for (const auto& l : c.languages)
        j["languages"].push_back({{"code", l.code}, {"role", to_string(l.role)}, {"distance", l.distance}});
    j["train_size"] = c.train_size;
    j["dev_size"] = c.dev_size;
    j["test_size"] = c.test_size;
    j["fewshot_sizes"] = c.fewshot_sizes;
    j["noise"] = c.noise;
    j["image_noise"] = c.image_noise;
    j["rotation_scale"] = c.rotation_scale;
    j["rotation_spread"] = c.rotation_spread;
    j["shift_scale"] = c.shift_scale;
    j["seed"] = c.seed;
}

/// Reads a benchmark config; absent keys keep their defaults.
inline BenchmarkConfig benchmark_config_from_json(const nlohmann::json& j) {
    BenchmarkConfig c;
    if (!j.is_object()) throw ConfigError("benchmark config must be an object");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get("latent_dim", c.latent_dim);
        get("shift_dims", c.shift_dims);
        get("image_dim", c.image_dim);
        get("text_dim", c.text_dim);
        if (j.contains("tasks")) {
            c.tasks.clear();
            for (const auto& t : j.at("tasks"))
                c.tasks.push_back({t.at("name").get<std::string>(), t.at("classes").get<std::size_t>()});
        }
        if (j.contains("languages")) {
            c.languages.clear();
            for (const auto& l : j.at("languages"))
                c.languages.push_back({l.at("code").get<std::string>(),
                                       parse_role(l.value("role", std::string("target"))),
                                       l.value("distance", 0.0)});
        }
        get("train_size", c.train_size);
        get("dev_size", c.dev_size);
        get("test_size", c.test_size);
        get("fewshot_sizes", c.fewshot_sizes);
        get("noise", c.noise);
        get("image_noise", c.image_noise);
        get("rotation_scale", c.rotation_scale);
        get("rotation_spread", c.rotation_spread);
        get("shift_scale", c.shift_scale);
        get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("benchmark config: ") + e.what());
    }
    c.validate();
    return c;
}

inline std::uint64_t config_hash(const nlohmann::ordered_json& j) { return fnv1a(j.dump()); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

// ---------------------------------------------------------------------------
// Generator

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace detail {

inline Mat gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    // Fill row-major so the draw order is independent of Eigen's storage order.
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

/// n x k matrix with orthonormal columns (Householder QR of a Gaussian draw).
inline Mat random_orthonormal(Rng& rng, Eigen::Index n, Eigen::Index k) {
    const Mat a = gaussian(rng, n, k);
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ() * Mat::Identity(n, k);
    // Fix column signs so the result is a deterministic function of `a`.
    const Mat r = qr.matrixQR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < k; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

} // namespace detail

/// The fixed random structure shared by every language and task.
class BenchmarkWorld {
public:
    explicit BenchmarkWorld(const BenchmarkConfig& config) : config_(config) {
        config_.validate();
        Rng rng(derive_seed(config_.seed, "world"));
        const auto L = static_cast<Eigen::Index>(config_.latent_dim);
        const auto R = static_cast<Eigen::Index>(config_.latent_dim - config_.shift_dims);
        const double sl = std::sqrt(static_cast<double>(config_.latent_dim));
        image_proj_ = detail::gaussian(rng, static_cast<Eigen::Index>(config_.image_dim), L) / sl;
        text_proj_ = detail::gaussian(rng, static_cast<Eigen::Index>(config_.text_dim), L) / sl;
        rotation_basis_ = detail::random_orthonormal(rng, R, R);
        const Eigen::Index planes = R / 2;
        angles_.resize(static_cast<std::size_t>(planes));
        const double hi = config_.rotation_scale;
        const double lo = hi * config_.rotation_spread;
        for (auto& a : angles_) a = rng.uniform(lo, hi);
        shift_dir_ = Vec::Zero(L);
        if (config_.shift_dims > 0) {
            Vec s(static_cast<Eigen::Index>(config_.shift_dims));
            for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = rng.normal();
            shift_dir_.tail(s.size()) = s.normalized();
        }
        for (const auto& task : config_.tasks) {
            Rng trng(derive_seed(config_.seed, "prototypes/" + task.name));
            prototypes_.emplace(task.name, simplex_prototypes(trng, task.classes));
        }
    }

    const BenchmarkConfig& config() const { return config_; }
    const Mat& image_projection() const { return image_proj_; }
    const Mat& text_projection() const { return text_proj_; }

    /// Orthogonal latent transform Q(d): block rotations by d * angle inside
    /// the rotation subspace, identity on the shift dimensions.
    Mat transform(double distance) const {
        const auto L = static_cast<Eigen::Index>(config_.latent_dim);
        const auto R = rotation_basis_.rows();
        Mat blocks = Mat::Identity(R, R);
        for (std::size_t k = 0; k < angles_.size(); ++k) {
            const auto i = static_cast<Eigen::Index>(2 * k);
            const double c = std::cos(distance * angles_[k]);
            const double s = std::sin(distance * angles_[k]);
            blocks(i, i) = c;
            blocks(i, i + 1) = -s;
            blocks(i + 1, i) = s;
            blocks(i + 1, i + 1) = c;
        }
        Mat q = Mat::Identity(L, L);
        q.topLeftCorner(R, R) = rotation_basis_ * blocks * rotation_basis_.transpose();
        return q;
    }

    Vec shift(double distance) const { return distance * config_.shift_scale * shift_dir_; }

    /// C x latent matrix of unit-norm class prototypes (a centred regular
    /// simplex in a random subspace, so classes are equiprobable under z ~ N(0, I)).
    const Mat& prototypes(const std::string& task) const {
        auto it = prototypes_.find(task);
        if (it == prototypes_.end()) throw ConfigError("unknown task '" + task + "'");
        return it->second;
    }

    std::size_t label(const std::string& task, const Vec& z) const {
        const Vec scores = prototypes(task) * z;
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < scores.size(); ++c)
            if (scores(c) > scores(best)) best = c;
        return static_cast<std::size_t>(best);
    }

private:
    Mat simplex_prototypes(Rng& rng, std::size_t classes) const {
        const auto C = static_cast<Eigen::Index>(classes);
        Mat simplex = Mat::Identity(C, C) - Mat::Constant(C, C, 1.0 / static_cast<double>(C));
        const Mat basis = detail::random_orthonormal(rng, static_cast<Eigen::Index>(config_.latent_dim), C);
        Mat protos = simplex * basis.transpose();
        for (Eigen::Index c = 0; c < C; ++c) protos.row(c).normalize();
        return protos;
    }

    BenchmarkConfig config_;
    Mat image_proj_;
    Mat text_proj_;
    Mat rotation_basis_;
    std::vector<double> angles_;
    Vec shift_dir_;
    std::map<std::string, Mat> prototypes_;
};

/// Generates the examples of one (task, language, split) deterministically.
inline std::vector<Example> generate_split(const BenchmarkWorld& world, const std::string& task,
                                           const std::string& language, const std::string& split,
                                           std::size_t count) {
    const auto& cfg = world.config();
    const auto& lang = cfg.language(language);
    const Mat q = world.transform(lang.distance);
    const Vec s = world.shift(lang.distance);
    Rng rng(derive_seed(cfg.seed, "examples/" + task + "/" + language + "/" + split));
    const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        Vec z(L);
        for (Eigen::Index i = 0; i < L; ++i) z(i) = rng.normal();
        Vec img = world.image_projection() * z;
        Vec txt = world.text_projection() * (q * z + s);
        for (Eigen::Index i = 0; i < img.size(); ++i) img(i) += cfg.image_noise * rng.normal();
        for (Eigen::Index i = 0; i < txt.size(); ++i) txt(i) += cfg.noise * rng.normal();
        char id[32];
        std::snprintf(id, sizeof id, "%06zu", n);
        Example ex;
        ex.pair_id = language + "-" + split + "-" + id;
        ex.language = language;
        ex.split = split;
        ex.image.assign(img.data(), img.data() + img.size());
        ex.text.assign(txt.data(), txt.data() + txt.size());
        ex.label = world.label(task, z);
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset and file format
//
// One JSON object per line. Line 1 is a header naming the task, language,
// split, dims and record count; every following line is a record with keys
// pair_id, lang, split, img, txt and an optional integer label.

struct DatasetHeader {
    std::string task;
    std::size_t image_dim = 0;
    std::size_t text_dim = 0;
    std::size_t classes = 0;
};

class Dataset {
public:
    Dataset() = default;
    explicit Dataset(DatasetHeader header) : header_(std::move(header)) {}

    const DatasetHeader& header() const { return header_; }
    DatasetHeader& header() { return header_; }

    void add(Example ex) {
        auto& bucket = data_[ex.language][ex.split];
        bucket.push_back(std::move(ex));
    }

    /// Registers an (empty) split so that it is reported as present.
    void touch(const std::string& language, const std::string& split) { data_[language][split]; }

    bool has_language(const std::string& language) const { return data_.count(language) > 0; }

    bool has_split(const std::string& language, const std::string& split) const {
        auto it = data_.find(language);
        return it != data_.end() && it->second.count(split) > 0;
    }

    std::vector<std::string> languages() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : data_) out.push_back(k);
        return out;
    }

    /// Examples of one split; throws DataError for an unknown language or split.
    const std::vector<Example>& split(const std::string& language, const std::string& split) const {
        auto it = data_.find(language);
        if (it == data_.end()) throw DataError("unknown language '" + language + "'");
        auto jt = it->second.find(split);
        if (jt == it->second.end())
            throw DataError("language '" + language + "' has no '" + split + "' split");
        return jt->second;
    }

    void merge(const Dataset& other) {
        for (const auto& [lang, splits] : other.data_)
            for (const auto& [split, examples] : splits) {
                auto& dst = data_[lang][split];
                dst.insert(dst.end(), examples.begin(), examples.end());
            }
    }

private:
    DatasetHeader header_;
    std::map<std::string, std::map<std::string, std::vector<Example>>> data_;
};

/// Packs examples into a batch. Labels are attached only if every example has one.
inline PairedBatch make_batch(const std::vector<const Example*>& examples, std::size_t image_dim,
                              std::size_t text_dim, const std::string& language) {
    Tensor img(examples.size(), image_dim);
    Tensor txt(examples.size(), text_dim);
    std::vector<std::size_t> labels;
    bool labelled = true;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const Example& e = *examples[i];
        if (e.image.size() != image_dim || e.text.size() != text_dim)
            throw ShapeError("example '" + e.pair_id + "' has the wrong feature width");
        std::copy(e.image.begin(), e.image.end(), &img(i, 0));
        std::copy(e.text.begin(), e.text.end(), &txt(i, 0));
        if (e.label) labels.push_back(*e.label);
        else labelled = false;
    }
    std::optional<std::vector<std::size_t>> lab;
    if (labelled) lab = std::move(labels);
    return PairedBatch(std::move(img), std::move(txt), std::move(lab), language);
}

inline PairedBatch make_batch(const std::vector<Example>& examples, std::size_t image_dim,
                              std::size_t text_dim, const std::string& language) {
    std::vector<const Example*> ptrs;
    ptrs.reserve(examples.size());
    for (const auto& e : examples) ptrs.push_back(&e);
    return make_batch(ptrs, image_dim, text_dim, language);
}

inline nlohmann::ordered_json example_to_json(const Example& e) {
    nlohmann::ordered_json j;
    j["pair_id"] = e.pair_id;
    j["lang"] = e.language;
    j["split"] = e.split;
    j["img"] = e.image;
    j["txt"] = e.text;
    if (e.label) j["label"] = *e.label;
    return j;
}

inline void write_split_file(const fs::path& path, const DatasetHeader& header, const std::string& language,
                             const std::string& split, const std::vector<Example>& examples) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    nlohmann::ordered_json h;
    h["format"] = kDatasetFormat;
    h["version"] = kDatasetVersion;
    h["task"] = header.task;
    h["lang"] = language;
    h["split"] = split;
    h["image_dim"] = header.image_dim;
    h["text_dim"] = header.text_dim;
    h["classes"] = header.classes;
    h["count"] = examples.size();
    os << h.dump() << '\n';
    for (const auto& e : examples) os << example_to_json(e).dump() << '\n';
    if (!os) throw IoError("write to '" + path.string() + "' failed");
}

/// Parses one split file into `into`. A zero-byte file is an empty split.
inline void load_split_file(const fs::path& path, Dataset& into) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    const std::string file = path.string();
    std::string line;
    std::size_t lineno = 0;
    std::optional<DatasetHeader> header;
    std::string lang, split;
    std::size_t declared = 0, seen = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(file, lineno, std::string("malformed record: ") + e.what());
        }
        try {
            if (!header) {
                if (j.value("format", std::string()) != kDatasetFormat)
                    throw DataError(file, lineno, "missing dataset header");
                if (j.at("version").get<int>() != kDatasetVersion)
                    throw DataError(file, lineno, "unsupported dataset version");
                DatasetHeader h{j.at("task").get<std::string>(), j.at("image_dim").get<std::size_t>(),
                                j.at("text_dim").get<std::size_t>(), j.at("classes").get<std::size_t>()};
                auto& cur = into.header();
                if (cur.image_dim == 0 && cur.text_dim == 0) {
                    cur = h;
                } else if (cur.image_dim != h.image_dim || cur.text_dim != h.text_dim ||
                           cur.classes != h.classes) {
                    throw DataError(file, lineno, "header dimensions differ from previously loaded files");
                }
                header = h;
                lang = j.at("lang").get<std::string>();
                split = j.at("split").get<std::string>();
                declared = j.at("count").get<std::size_t>();
                into.touch(lang, split);
                continue;
            }
            Example e;
            e.pair_id = j.at("pair_id").get<std::string>();
            e.language = j.at("lang").get<std::string>();
            e.split = j.at("split").get<std::string>();
            e.image = j.at("img").get<std::vector<double>>();
            e.text = j.at("txt").get<std::vector<double>>();
            if (j.contains("label") && !j.at("label").is_null()) e.label = j.at("label").get<std::size_t>();
            if (e.image.size() != header->image_dim)
                throw DataError(file, lineno, "img has " + std::to_string(e.image.size()) +
                                                  " values, header says " + std::to_string(header->image_dim));
            if (e.text.size() != header->text_dim)
                throw DataError(file, lineno, "txt has " + std::to_string(e.text.size()) +
                                                  " values, header says " + std::to_string(header->text_dim));
            if (e.label && *e.label >= header->classes)
                throw DataError(file, lineno, "label " + std::to_string(*e.label) + " out of range");
            if (e.language != lang || e.split != split)
                throw DataError(file, lineno, "record language/split differs from the header");
            into.add(std::move(e));
            ++seen;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(file, lineno, std::string("bad record: ") + e.what());
        }
    }
    if (header && seen != declared) {
        throw DataError(file, lineno, "header declares " + std::to_string(declared) + " records, found " +
                                          std::to_string(seen));
    }
}

/// Loads one split file as its own dataset.
inline Dataset load(const fs::path& path) {
    Dataset d;
    load_split_file(path, d);
    return d;
}

inline std::string split_file_name(const std::string& language, const std::string& split) {
    return language + "." + split + ".jsonl";
}

/// Writes every task/language/split plus manifest.json under `dir`.
/// Returns the paths written, manifest last.
inline std::vector<fs::path> generate(const BenchmarkConfig& config, const fs::path& dir) {
    config.validate();
    const BenchmarkWorld world(config);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    std::vector<fs::path> written;
    nlohmann::ordered_json manifest;
    nlohmann::ordered_json cfg_json = config;
    manifest["format"] = "xvl-benchmark";
    manifest["version"] = kDatasetVersion;
    manifest["seed"] = config.seed;
    manifest["config_hash"] = hex64(config_hash(cfg_json));
    manifest["latent_dim"] = config.latent_dim;
    manifest["image_dim"] = config.image_dim;
    manifest["text_dim"] = config.text_dim;
    manifest["languages"] = nlohmann::ordered_json::array();
    for (const auto& l : config.languages)
        manifest["languages"].push_back({{"code", l.code}, {"role", to_string(l.role)}, {"distance", l.distance}});
    manifest["counts"] = {{"train", config.train_size}, {"dev", config.dev_size}, {"test", config.test_size}};
    manifest["fewshot_sizes"] = config.fewshot_sizes;
    manifest["tasks"] = nlohmann::ordered_json::array();

    const std::pair<const char*, std::size_t> splits[] = {
        {"train", config.train_size}, {"dev", config.dev_size}, {"test", config.test_size}};
    for (const auto& task : config.tasks) {
        const fs::path tdir = dir / task.name;
        fs::create_directories(tdir, ec);
        if (ec) throw IoError("cannot create '" + tdir.string() + "': " + ec.message());
        DatasetHeader header{task.name, config.image_dim, config.text_dim, task.classes};
        nlohmann::ordered_json files = nlohmann::ordered_json::array();
        for (const auto& lang : config.languages) {
            for (const auto& [split, count] : splits) {
                const auto examples = generate_split(world, task.name, lang.code, split, count);
                const fs::path p = tdir / split_file_name(lang.code, split);
                write_split_file(p, header, lang.code, split, examples);
                written.push_back(p);
                files.push_back((fs::path(task.name) / split_file_name(lang.code, split)).generic_string());
            }
        }
        manifest["tasks"].push_back({{"name", task.name}, {"classes", task.classes}, {"files", files}});
    }
    manifest["config"] = cfg_json;

    const fs::path mpath = dir / "manifest.json";
    std::ofstream os(mpath, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + mpath.string() + "' for writing");
    os << manifest.dump(2) << '\n';
    written.push_back(mpath);
    return written;
}

/// The dataset of one task built in memory, identical to generating and loading it.
inline Dataset build_dataset(const BenchmarkConfig& config, const std::string& task) {
    config.validate();
    const BenchmarkWorld world(config);
    std::size_t classes = 0;
    for (const auto& t : config.tasks)
        if (t.name == task) classes = t.classes;
    if (classes == 0) throw ConfigError("unknown task '" + task + "'");
    Dataset d(DatasetHeader{task, config.image_dim, config.text_dim, classes});
    const std::pair<const char*, std::size_t> splits[] = {
        {"train", config.train_size}, {"dev", config.dev_size}, {"test", config.test_size}};
    for (const auto& lang : config.languages)
        for (const auto& [split, count] : splits) {
            d.touch(lang.code, split);
            for (auto& e : generate_split(world, task, lang.code, split, count)) d.add(std::move(e));
        }
    return d;
}

/// Benchmark description recovered from a generated directory's manifest.
struct BenchmarkManifest {
    BenchmarkConfig config;
    std::string config_hash;
    nlohmann::json raw;
};

inline BenchmarkManifest read_manifest(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw IoError("cannot open '" + mpath.string() + "' (generate the dataset first)");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(mpath.string() + ": " + e.what());
    }
    BenchmarkManifest m;
    m.config = benchmark_config_from_json(j.at("config"));
    m.config_hash = j.at("config_hash").get<std::string>();
    m.raw = std::move(j);
    return m;
}

/// Loads every split of one task from a generated benchmark directory.
inline Dataset load_task(const fs::path& dir, const std::string& task) {
    const auto m = read_manifest(dir);
    for (const auto& t : m.raw.at("tasks")) {
        if (t.at("name").get<std::string>() != task) continue;
        Dataset d;
        d.header().task = task;
        for (const auto& f : t.at("files")) load_split_file(dir / f.get<std::string>(), d);
        d.header().task = task;
        return d;
    }
    throw ConfigError("task '" + task + "' not found in " + (dir / "manifest.json").string());
}

// ---------------------------------------------------------------------------
// Few-shot subsets

/// Deterministic class-stratified subset of a language's train split.
///
/// Each class is shuffled independently, then classes are visited round-robin
/// (in a shuffled class order) taking one example at a time. The subset of
/// size k is the first k of this sequence, so subsets for growing k are nested.
inline std::vector<Example> fewshot_subset(const Dataset& dataset, const std::string& language,
                                           std::size_t k, std::uint64_t seed) {
    const auto& train = dataset.split(language, "train");
    if (k > train.size()) {
        throw DataError("language '" + language + "' has " + std::to_string(train.size()) +
                        " train examples, cannot draw " + std::to_string(k) + " shots");
    }
    // Order-independent: sort by pair id first.
    std::vector<const Example*> sorted;
    sorted.reserve(train.size());
    for (const auto& e : train) {
        if (!e.label) throw MissingLabelsError("few-shot subset needs labelled examples");
        sorted.push_back(&e);
    }
    std::sort(sorted.begin(), sorted.end(),
              [](const Example* a, const Example* b) { return a->pair_id < b->pair_id; });

    std::map<std::size_t, std::vector<const Example*>> by_class;
    for (const auto* e : sorted) by_class[*e->label].push_back(e);
    Rng rng(derive_seed(seed, "fewshot/" + language));
    std::vector<std::size_t> classes;
    for (auto& [c, members] : by_class) {
        classes.push_back(c);
        rng.shuffle(members);
    }
    rng.shuffle(classes);

    std::vector<Example> out;
    out.reserve(k);
    std::vector<std::size_t> cursor(classes.size(), 0);
    while (out.size() < k) {
        for (std::size_t ci = 0; ci < classes.size() && out.size() < k; ++ci) {
            auto& members = by_class[classes[ci]];
            if (cursor[ci] < members.size()) out.push_back(*members[cursor[ci]++]);
        }
    }
    return out;
}

} // namespace xvl
