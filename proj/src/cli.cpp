#include "dreg/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>

#include "dreg/field.hpp"
#include "dreg/io.hpp"
#include "dreg/latent.hpp"
#include "dreg/metrics.hpp"
#include "dreg/synth.hpp"

namespace dreg::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Configuration / usage problem; maps to exit code 2.
struct cli_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

double wall_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - t0)
        .count();
}

template <typename T, std::size_t N>
void read_int_array(const json& v, std::array<T, N>& out,
                    const std::string& key) {
    if (!v.is_array() || v.size() != N)
        throw cli_error("config key '" + key + "' must be an array of " +
                        std::to_string(N) + " integers");
    for (std::size_t i = 0; i < N; ++i) out[i] = v[i].get<T>();
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    if (!doc.is_object()) throw cli_error("config must be a JSON object");
    RunConfig cfg;
    std::vector<int> dims = cfg.model.grid.dims();
    std::vector<double> spacing = cfg.model.grid.spacing();
    for (const auto& [key, v] : doc.items()) {
        if (key == "grid_dims") {
            dims = v.get<std::vector<int>>();
        } else if (key == "grid_spacing") {
            spacing = v.get<std::vector<double>>();
        } else if (key == "latent_dim") {
            cfg.model.latent_dim = v.get<int>();
        } else if (key == "lambda") {
            cfg.model.lambda = v.get<double>();
        } else if (key == "sigma_s") {
            cfg.model.sigma_s = v.get<double>();
        } else if (key == "smooth_kernel") {
            cfg.model.smooth_kernel = v.get<int>();
        } else if (key == "squaring_steps") {
            cfg.model.squaring_steps = v.get<int>();
        } else if (key == "sigma_g") {
            cfg.model.lcc.sigma_g = v.get<double>();
        } else if (key == "lcc_kernel") {
            cfg.model.lcc.kernel_size = v.get<int>();
        } else if (key == "lcc_epsilon") {
            cfg.model.lcc.epsilon = v.get<double>();
        } else if (key == "encoder_widths") {
            read_int_array(v, cfg.model.encoder_widths, key);
        } else if (key == "decoder_widths") {
            read_int_array(v, cfg.model.decoder_widths, key);
        } else if (key == "decoder_conv_width") {
            cfg.model.decoder_conv_width = v.get<int>();
        } else if (key == "weight_decay") {
            cfg.model.weight_decay = v.get<double>();
            cfg.train.weight_decay = cfg.model.weight_decay;
        } else if (key == "learning_rate") {
            cfg.train.learning_rate = v.get<double>();
        } else if (key == "batch_size") {
            cfg.train.batch_size = v.get<int>();
        } else if (key == "epochs") {
            cfg.train.epochs = v.get<int>();
        } else if (key == "beta1") {
            cfg.train.beta1 = v.get<double>();
        } else if (key == "beta2") {
            cfg.train.beta2 = v.get<double>();
        } else if (key == "epsilon") {
            cfg.train.epsilon = v.get<double>();
        } else if (key == "shift_fraction") {
            cfg.train.shift_fraction = v.get<double>();
        } else if (key == "rotate_degrees") {
            cfg.train.rotate_degrees = v.get<double>();
        } else if (key == "scale_lo") {
            cfg.train.scale_lo = v.get<double>();
        } else if (key == "scale_hi") {
            cfg.train.scale_hi = v.get<double>();
        } else if (key == "mirror") {
            cfg.train.mirror = v.get<bool>();
        } else if (key == "seed") {
            cfg.train.seed = v.get<std::uint64_t>();
        } else if (key == "checkpoint_every") {
            cfg.train.checkpoint_every = v.get<long>();
        } else {
            throw cli_error("unknown config key: " + key);
        }
    }
    if (spacing.size() != dims.size())
        spacing.assign(dims.size(), 1.0);
    try {
        cfg.model.grid = Grid(dims, spacing);
        cfg.model.validate();
        cfg.train.validate();
    } catch (const std::exception& e) {
        throw cli_error(std::string("invalid config: ") + e.what());
    }
    return cfg;
}

json run_config_json(const RunConfig& cfg) {
    json doc;
    doc["grid_dims"] = cfg.model.grid.dims();
    doc["grid_spacing"] = cfg.model.grid.spacing();
    doc["latent_dim"] = cfg.model.latent_dim;
    doc["lambda"] = cfg.model.lambda;
    doc["sigma_s"] = cfg.model.sigma_s;
    doc["smooth_kernel"] = cfg.model.smooth_kernel;
    doc["squaring_steps"] = cfg.model.squaring_steps;
    doc["sigma_g"] = cfg.model.lcc.sigma_g;
    doc["lcc_kernel"] = cfg.model.lcc.kernel_size;
    doc["lcc_epsilon"] = cfg.model.lcc.epsilon;
    doc["encoder_widths"] = cfg.model.encoder_widths;
    doc["decoder_widths"] = cfg.model.decoder_widths;
    doc["decoder_conv_width"] = cfg.model.decoder_conv_width;
    doc["weight_decay"] = cfg.model.weight_decay;
    doc["learning_rate"] = cfg.train.learning_rate;
    doc["batch_size"] = cfg.train.batch_size;
    doc["epochs"] = cfg.train.epochs;
    doc["beta1"] = cfg.train.beta1;
    doc["beta2"] = cfg.train.beta2;
    doc["epsilon"] = cfg.train.epsilon;
    doc["shift_fraction"] = cfg.train.shift_fraction;
    doc["rotate_degrees"] = cfg.train.rotate_degrees;
    doc["scale_lo"] = cfg.train.scale_lo;
    doc["scale_hi"] = cfg.train.scale_hi;
    doc["mirror"] = cfg.train.mirror;
    doc["seed"] = cfg.train.seed;
    doc["checkpoint_every"] = cfg.train.checkpoint_every;
    return doc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cli_error("cannot open config file: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw cli_error("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_run_config(doc);
}

void write_image(const std::string& path, const ScalarImage& img) {
    json meta;
    meta["kind"] = "image";
    meta["spacing"] = img.grid().spacing();
    io::write_tensor(path, ad::Tensor(img.grid().dims(), img.values()),
                     io::Dtype::f64, meta);
}

ScalarImage read_image(const std::string& path) {
    io::LoadedTensor lt = io::read_tensor(path);
    std::vector<double> spacing;
    if (lt.meta.contains("spacing"))
        spacing = lt.meta["spacing"].get<std::vector<double>>();
    if (spacing.size() != lt.tensor.shape.size())
        spacing.assign(lt.tensor.shape.size(), 1.0);
    return ScalarImage(Grid(lt.tensor.shape, spacing),
                       std::move(lt.tensor.data));
}

void write_field(const std::string& path, const VectorField& f) {
    json meta;
    meta["kind"] =
        f.kind() == FieldKind::velocity ? "velocity" : "displacement";
    meta["spacing"] = f.grid().spacing();
    io::write_tensor(path, field_tensor(f), io::Dtype::f64, meta);
}

VectorField read_field(const std::string& path) {
    io::LoadedTensor lt = io::read_tensor(path);
    const auto& shape = lt.tensor.shape;
    if (shape.size() < 3 || shape[0] != static_cast<int>(shape.size()) - 1)
        throw cli_error("not a vector field container: " + path);
    std::vector<int> dims(shape.begin() + 1, shape.end());
    std::vector<double> spacing;
    if (lt.meta.contains("spacing"))
        spacing = lt.meta["spacing"].get<std::vector<double>>();
    if (spacing.size() != dims.size()) spacing.assign(dims.size(), 1.0);
    FieldKind kind = FieldKind::displacement;
    if (lt.meta.contains("kind") && lt.meta["kind"] == "velocity")
        kind = FieldKind::velocity;
    return field_from_tensor(Grid(dims, spacing), lt.tensor, kind);
}

namespace {

void write_zcode(const std::string& path, const std::vector<double>& z) {
    json meta;
    meta["kind"] = "zcode";
    io::write_tensor(path, ad::Tensor({static_cast<int>(z.size())}, z),
                     io::Dtype::f64, meta);
}

std::vector<double> read_zcode(const std::string& path) {
    io::LoadedTensor lt = io::read_tensor(path);
    if (lt.tensor.shape.size() != 1)
        throw cli_error("latent code container must be one-dimensional: " +
                        path);
    return lt.tensor.data;
}

// Rebuilds the image on the model grid so spacing recorded in a
// container cannot defeat the grid-equality checks downstream.
ScalarImage on_model_grid(const ScalarImage& img, const Grid& grid,
                          const std::string& what) {
    if (!img.grid().same_dims(grid))
        throw cli_error(what + ": grid " + [&] {
            std::string s;
            for (int d : img.grid().dims()) s += std::to_string(d) + " ";
            return s;
        }() + "does not match the model grid");
    return ScalarImage(grid, img.values());
}

struct LoadedModel {
    ModelParams params;
    RunConfig cfg;
};

LoadedModel load_model(const std::string& path) {
    io::Checkpoint ck = io::read_checkpoint(path);
    return {std::move(ck.params), parse_run_config(ck.config)};
}

struct ManifestEntry {
    ScalarImage moving;
    ScalarImage fixed;
    ScalarImage mask_moving;  // optional (empty grid when absent)
    ScalarImage mask_fixed;
    int label = -1;
    std::string split = "train";
};

std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cli_error("cannot open manifest: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw cli_error("manifest is not valid JSON: " +
                        std::string(e.what()));
    }
    if (!doc.is_array()) throw cli_error("manifest must be a JSON array");
    const fs::path base = fs::path(path).parent_path();
    std::vector<ManifestEntry> out;
    for (const auto& item : doc) {
        if (!item.contains("moving") || !item.contains("fixed"))
            throw cli_error("manifest entries need 'moving' and 'fixed'");
        ManifestEntry e;
        auto resolve = [&](const std::string& p) {
            return (base / p).string();
        };
        e.moving = read_image(resolve(item["moving"].get<std::string>()));
        e.fixed = read_image(resolve(item["fixed"].get<std::string>()));
        if (item.contains("label")) e.label = item["label"].get<int>();
        if (item.contains("split")) e.split = item["split"].get<std::string>();
        if (item.contains("mask_moving"))
            e.mask_moving =
                read_image(resolve(item["mask_moving"].get<std::string>()));
        if (item.contains("mask_fixed"))
            e.mask_fixed =
                read_image(resolve(item["mask_fixed"].get<std::string>()));
        out.push_back(std::move(e));
    }
    return out;
}

void write_registration_outputs(const fs::path& out,
                                const RegistrationResult& r,
                                const std::string& prefix = "") {
    write_image((out / (prefix + "warped.bin")).string(), r.warped);
    write_field((out / (prefix + "velocity.bin")).string(), r.velocity);
    write_field((out / (prefix + "displacement.bin")).string(),
                r.phi.displacement());
    write_image((out / (prefix + "jacobian.bin")).string(),
                jacobian_map(r.phi));
}

// --- subcommands ----------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir,
              std::optional<std::uint64_t> seed) {
    RunConfig cfg = load_run_config(config_path);
    if (seed) cfg.train.seed = *seed;

    std::vector<TrainPair> pairs;
    for (auto& e : load_manifest(data_path)) {
        if (e.split == "test") continue;
        pairs.push_back({on_model_grid(e.moving, cfg.model.grid, "train"),
                         on_model_grid(e.fixed, cfg.model.grid, "train")});
    }
    if (pairs.empty()) throw cli_error("no training pairs in manifest");

    fs::create_directories(out_dir);
    std::ofstream log(fs::path(out_dir) / "loss_log.txt", std::ios::trunc);
    if (!log) throw cli_error("cannot write loss log in " + out_dir);

    TrainCallbacks cb;
    cb.on_step = [&](const StepRecord& r) {
        log << format_step_record(r) << '\n';
        log.flush();
    };
    cb.on_checkpoint = [&](long step, const ModelParams& p) {
        io::write_checkpoint(
            (fs::path(out_dir) / checkpoint_filename(step)).string(), p,
            run_config_json(cfg));
    };

    try {
        TrainResult result = train(pairs, cfg.model, cfg.train, cb);
        io::write_checkpoint((fs::path(out_dir) / "model.bin").string(),
                             result.params, run_config_json(cfg));
    } catch (const numerical_error& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kExitNumericalAbort;
    }
    return kExitOk;
}

int cmd_register(const std::string& model_path, const std::string& moving_path,
                 const std::string& fixed_path, const std::string& out_dir,
                 bool stochastic, std::optional<std::uint64_t> seed,
                 const std::vector<std::string>& mask_args) {
    LoadedModel m = load_model(model_path);
    ScalarImage moving = on_model_grid(read_image(moving_path),
                                       m.cfg.model.grid, "register");
    ScalarImage fixed =
        on_model_grid(read_image(fixed_path), m.cfg.model.grid, "register");

    std::mt19937_64 rng;
    if (stochastic) {
        if (!seed)
            throw cli_error("--stochastic requires an explicit --seed");
        rng.seed(*seed);
    }

    const auto t0 = std::chrono::steady_clock::now();
    RegistrationResult r = register_pair(
        moving, fixed, m.params, m.cfg.model,
        stochastic ? RegisterMode::stochastic : RegisterMode::deterministic,
        stochastic ? &rng : nullptr);
    const double wall_ms = wall_since(t0);

    fs::create_directories(out_dir);
    write_registration_outputs(out_dir, r);
    write_zcode((fs::path(out_dir) / "zcode.bin").string(), r.latent.z);

    std::vector<std::pair<std::string, double>> report;
    report.emplace_back("rmse", r.metrics.at("rmse"));
    report.emplace_back("lcc", r.metrics.at("lcc"));
    for (const auto& arg : mask_args) {
        // NAME=MOVING_MASK:FIXED_MASK
        const auto eq = arg.find('=');
        const auto colon = arg.find(':', eq == std::string::npos ? 0 : eq);
        if (eq == std::string::npos || colon == std::string::npos)
            throw cli_error("--mask expects NAME=MOVING_PATH:FIXED_PATH");
        const std::string name = arg.substr(0, eq);
        ScalarImage mm = on_model_grid(
            read_image(arg.substr(eq + 1, colon - eq - 1)), m.cfg.model.grid,
            "mask " + name);
        ScalarImage mf = on_model_grid(read_image(arg.substr(colon + 1)),
                                       m.cfg.model.grid, "mask " + name);
        ScalarImage warped_mask = warp_image_nearest(mm, r.phi);
        report.emplace_back("dice_" + name, dice(warped_mask, mf));
        report.emplace_back("hd95_" + name, hausdorff95(warped_mask, mf));
    }
    report.emplace_back("mean_magnitude", r.metrics.at("mean_magnitude"));
    report.emplace_back("mean_gradient", r.metrics.at("mean_gradient"));
    report.emplace_back("neg_jac_fraction", r.metrics.at("neg_jac_fraction"));
    report.emplace_back("wall_ms", wall_ms);
    io::write_report((fs::path(out_dir) / "metrics.txt").string(), report);
    return kExitOk;
}

int cmd_exp(const std::string& velocity_path, std::optional<int> n,
            const std::string& out_dir) {
    VectorField v = read_field(velocity_path);
    v.set_kind(FieldKind::velocity);
    const int steps = n ? *n : choose_scaling_steps({v});
    if (steps < 0) throw cli_error("--n must be >= 0");

    Transform phi = exponentiate(v, steps);
    ScalarImage jac = jacobian_map(phi);

    fs::create_directories(out_dir);
    write_field((fs::path(out_dir) / "displacement.bin").string(),
                phi.displacement());
    write_image((fs::path(out_dir) / "jacobian.bin").string(), jac);

    double min_jac = jac.values().empty() ? 0.0 : jac.values()[0];
    for (double d : jac.values()) min_jac = std::min(min_jac, d);
    io::write_report(
        (fs::path(out_dir) / "exp_report.txt").string(),
        {{"squaring_steps", static_cast<double>(steps)},
         {"max_velocity", v.max_norm()},
         {"max_displacement", phi.displacement().max_norm()},
         {"min_jacobian", min_jac},
         {"neg_jac_fraction", negative_jacobian_fraction(phi)}});
    return kExitOk;
}

int cmd_sample(const std::string& model_path, const std::string& cond_path,
               int count, std::optional<std::uint64_t> seed,
               const std::string& out_dir) {
    if (count < 0) throw cli_error("--count must be >= 0");
    if (!seed) throw cli_error("sample requires an explicit --seed");
    LoadedModel m = load_model(model_path);
    ScalarImage cond =
        on_model_grid(read_image(cond_path), m.cfg.model.grid, "sample");

    fs::create_directories(out_dir);
    std::mt19937_64 rng(*seed);
    for (int i = 0; i < count; ++i) {
        RegistrationResult r =
            sample_deformation(cond, m.params, m.cfg.model, rng);
        const std::string prefix = "sample_" + std::to_string(i) + "_";
        write_registration_outputs(out_dir, r, prefix);
        write_zcode((fs::path(out_dir) / (prefix + "zcode.bin")).string(),
                    r.latent.z);
    }
    return kExitOk;
}

int cmd_transport(const std::string& model_path, const std::string& zcode_path,
                  const std::string& src_moving, const std::string& src_fixed,
                  const std::string& target_path, const std::string& out_dir) {
    const bool have_code = !zcode_path.empty();
    const bool have_pair = !src_moving.empty() || !src_fixed.empty();
    if (have_code == have_pair)
        throw cli_error(
            "transport needs either --zcode or both --source-moving and "
            "--source-fixed");
    if (have_pair && (src_moving.empty() || src_fixed.empty()))
        throw cli_error("transport needs both --source-moving and "
                        "--source-fixed");

    LoadedModel m = load_model(model_path);
    ScalarImage target = on_model_grid(read_image(target_path),
                                       m.cfg.model.grid, "transport");

    std::vector<double> z;
    if (have_code) {
        z = read_zcode(zcode_path);
    } else {
        ScalarImage sm = on_model_grid(read_image(src_moving),
                                       m.cfg.model.grid, "transport");
        ScalarImage sf = on_model_grid(read_image(src_fixed),
                                       m.cfg.model.grid, "transport");
        z = encode(sf, sm, m.params, m.cfg.model).mu;
    }
    if (static_cast<int>(z.size()) != m.cfg.model.latent_dim)
        throw cli_error("latent code length does not match the model");

    const auto t0 = std::chrono::steady_clock::now();
    RegistrationResult r = transport(z, target, m.params, m.cfg.model);
    const double wall_ms = wall_since(t0);

    fs::create_directories(out_dir);
    write_registration_outputs(out_dir, r);
    write_zcode((fs::path(out_dir) / "zcode.bin").string(), z);
    io::write_report(
        (fs::path(out_dir) / "metrics.txt").string(),
        {{"mean_magnitude", r.metrics.at("mean_magnitude")},
         {"mean_gradient", r.metrics.at("mean_gradient")},
         {"neg_jac_fraction", r.metrics.at("neg_jac_fraction")},
         {"wall_ms", wall_ms}});
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& manifest_path,
             const std::string& out_dir) {
    LoadedModel m = load_model(model_path);
    std::vector<ManifestEntry> entries = load_manifest(manifest_path);
    if (entries.empty()) throw cli_error("manifest is empty");

    // Aggregation is by manifest index, so a future parallel registration
    // loop cannot change the report.
    struct CaseResult {
        std::map<std::string, double> metrics;
        std::vector<double> mu;
        int label;
    };
    std::vector<CaseResult> cases(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const ManifestEntry& e = entries[i];
        ScalarImage moving =
            on_model_grid(e.moving, m.cfg.model.grid, "eval");
        ScalarImage fixed = on_model_grid(e.fixed, m.cfg.model.grid, "eval");
        RegistrationResult r =
            register_pair(moving, fixed, m.params, m.cfg.model,
                          RegisterMode::deterministic);
        cases[i].metrics = r.metrics;
        if (e.mask_moving.grid().ndim() > 0 &&
            e.mask_fixed.grid().ndim() > 0) {
            ScalarImage warped_mask = warp_image_nearest(
                on_model_grid(e.mask_moving, m.cfg.model.grid, "eval mask"),
                r.phi);
            ScalarImage mf =
                on_model_grid(e.mask_fixed, m.cfg.model.grid, "eval mask");
            cases[i].metrics["dice"] = dice(warped_mask, mf);
            cases[i].metrics["hd95"] = hausdorff95(warped_mask, mf);
        }
        cases[i].mu = r.latent.mu;
        cases[i].label = e.label;
    }

    // Mean and population variance per metric key, keys in sorted order.
    std::vector<std::pair<std::string, double>> report;
    report.emplace_back("cases", static_cast<double>(cases.size()));
    for (const auto& [key, unused] : cases[0].metrics) {
        double mean = 0.0;
        for (const auto& c : cases) mean += c.metrics.at(key);
        mean /= static_cast<double>(cases.size());
        double var = 0.0;
        for (const auto& c : cases) {
            const double d = c.metrics.at(key) - mean;
            var += d * d;
        }
        var /= static_cast<double>(cases.size());
        report.emplace_back("mean_" + key, mean);
        report.emplace_back("var_" + key, var);
    }

    fs::create_directories(out_dir);

    std::set<int> distinct;
    for (const auto& c : cases) distinct.insert(c.label);
    const bool labelled = distinct.size() >= 2 && !distinct.contains(-1);
    if (labelled) {
        std::vector<std::vector<double>> Z;
        std::vector<int> labels;
        for (const auto& c : cases) {
            Z.push_back(c.mu);
            labels.push_back(c.label);
        }
        const int comps =
            std::min(m.cfg.model.latent_dim,
                     static_cast<int>(distinct.size()) - 1);
        CcaModel cca = cca_fit(Z, labels, comps);
        ad::Tensor proj({static_cast<int>(Z.size()), comps});
        for (std::size_t i = 0; i < Z.size(); ++i) {
            std::vector<double> p = cca_project(cca, Z[i]);
            for (int c = 0; c < comps; ++c)
                proj.data[i * static_cast<std::size_t>(comps) +
                          static_cast<std::size_t>(c)] = p[static_cast<std::size_t>(c)];
        }
        json meta;
        meta["kind"] = "cca_projection";
        meta["labels"] = labels;
        io::write_tensor((fs::path(out_dir) / "projection.bin").string(),
                         proj, io::Dtype::f64, meta);
        for (int c = 0; c < comps; ++c)
            report.emplace_back("cca_correlation_" + std::to_string(c),
                                cca.correlations[static_cast<std::size_t>(c)]);
        // Cross-validation needs each fold's training set to outnumber the
        // classes; tiny manifests skip the accuracy field.
        const int n = static_cast<int>(Z.size());
        const int folds = std::min(10, n);
        if (n - (n + folds - 1) / folds > static_cast<int>(distinct.size()))
            report.emplace_back(
                "accuracy_10fold",
                cross_validated_accuracy(Z, labels, comps, folds));
    }

    io::write_report((fs::path(out_dir) / "eval_report.txt").string(),
                     report);
    return kExitOk;
}

int cmd_synth(const std::string& out_dir, int extent, int per_class,
              double noise_sigma, std::optional<std::uint64_t> seed) {
    if (!seed) throw cli_error("synth requires an explicit --seed");
    if (extent < 8 || extent % 8 != 0)
        throw cli_error("--extent must be a positive multiple of 8");
    if (per_class < 1) throw cli_error("--per-class must be >= 1");

    Grid grid({extent, extent});
    std::vector<SynthSpec> specs;
    for (int c = 0; c < kDeformClassCount; ++c) {
        SynthSpec s;
        s.grid = grid;
        s.cls = static_cast<DeformClass>(c);
        s.noise_sigma = noise_sigma;
        specs.push_back(s);
    }
    std::mt19937_64 rng(*seed);
    SynthDataset ds = generate_dataset(specs, per_class, rng);

    fs::create_directories(out_dir);
    json manifest = json::array();
    for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
        const SynthPair& p = ds.pairs[i];
        const std::string stem = "pair_" + std::to_string(i) + "_";
        write_image((fs::path(out_dir) / (stem + "moving.bin")).string(),
                    p.moving);
        write_image((fs::path(out_dir) / (stem + "fixed.bin")).string(),
                    p.fixed);
        write_image(
            (fs::path(out_dir) / (stem + "mask_moving.bin")).string(),
            p.inner_mask_m);
        write_image((fs::path(out_dir) / (stem + "mask_fixed.bin")).string(),
                    p.inner_mask_f);
        json entry;
        entry["moving"] = stem + "moving.bin";
        entry["fixed"] = stem + "fixed.bin";
        entry["mask_moving"] = stem + "mask_moving.bin";
        entry["mask_fixed"] = stem + "mask_fixed.bin";
        entry["label"] = static_cast<int>(p.cls);
        entry["class"] = deform_class_name(p.cls);
        entry["split"] = ds.is_test[i] ? "test" : "train";
        manifest.push_back(entry);
    }
    std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << '\n';
    if (!mf) throw cli_error("cannot write manifest in " + out_dir);
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{
        "dreg: diffeomorphic registration with a learned probabilistic "
        "deformation encoding"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_dir, model_path;
    std::string moving_path, fixed_path, velocity_path, cond_path;
    std::string zcode_path, src_moving, src_fixed, target_path, manifest_path;
    std::vector<std::string> mask_args;
    bool stochastic = false;
    int count = 0, exp_n = 0, extent = 64, per_class = 50;
    double noise_sigma = 0.02;
    std::uint64_t seed_value = 0;

    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", config_path, "Run config (JSON)")
        ->required();
    train_cmd->add_option("--data", data_path, "Dataset manifest (JSON)")
        ->required();
    train_cmd->add_option("--out", out_dir, "Output directory")->required();
    auto* train_seed = train_cmd->add_option(
        "--seed", seed_value, "Override the config's training seed");

    auto* reg_cmd = app.add_subcommand("register", "Register a pair");
    reg_cmd->add_option("--model", model_path, "Checkpoint")->required();
    reg_cmd->add_option("--moving", moving_path, "Moving image")->required();
    reg_cmd->add_option("--fixed", fixed_path, "Fixed image")->required();
    reg_cmd->add_option("--out", out_dir, "Output directory")->required();
    reg_cmd->add_flag("--stochastic", stochastic,
                      "Sample the posterior instead of using its mean");
    auto* reg_seed = reg_cmd->add_option("--seed", seed_value,
                                         "Seed for --stochastic");
    reg_cmd->add_option("--mask", mask_args,
                        "NAME=MOVING_PATH:FIXED_PATH label mask pair");

    auto* exp_cmd =
        app.add_subcommand("exp", "Exponentiate a velocity field");
    exp_cmd->add_option("--velocity", velocity_path, "Velocity container")
        ->required();
    auto* exp_n_opt = exp_cmd->add_option(
        "--n", exp_n, "Squaring steps (default: chosen from the field)");
    exp_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* sample_cmd =
        app.add_subcommand("sample", "Draw deformations from the prior");
    sample_cmd->add_option("--model", model_path, "Checkpoint")->required();
    sample_cmd
        ->add_option("--conditioning", cond_path, "Conditioning image")
        ->required();
    sample_cmd->add_option("--count", count, "Number of samples")->required();
    auto* sample_seed =
        sample_cmd->add_option("--seed", seed_value, "Sampling seed");
    sample_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* tr_cmd = app.add_subcommand(
        "transport", "Apply a latent code to a new conditioning image");
    tr_cmd->add_option("--model", model_path, "Checkpoint")->required();
    tr_cmd->add_option("--zcode", zcode_path, "Stored latent code");
    tr_cmd->add_option("--source-moving", src_moving,
                       "Moving image of the pair to encode");
    tr_cmd->add_option("--source-fixed", src_fixed,
                       "Fixed image of the pair to encode");
    tr_cmd->add_option("--target", target_path, "Target conditioning image")
        ->required();
    tr_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* eval_cmd =
        app.add_subcommand("eval", "Batch registration and latent analysis");
    eval_cmd->add_option("--model", model_path, "Checkpoint")->required();
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest")
        ->required();
    eval_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* synth_cmd =
        app.add_subcommand("synth", "Generate a synthetic dataset");
    synth_cmd->add_option("--out", out_dir, "Output directory")->required();
    synth_cmd->add_option("--extent", extent,
                          "Grid extent (multiple of 8, square)");
    synth_cmd->add_option("--per-class", per_class, "Pairs per class");
    synth_cmd->add_option("--noise", noise_sigma, "Intensity noise sigma");
    auto* synth_seed =
        synth_cmd->add_option("--seed", seed_value, "Generation seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    auto opt_seed = [&](const CLI::Option* o) {
        return o->count() > 0 ? std::optional<std::uint64_t>(seed_value)
                              : std::nullopt;
    };

    try {
        if (app.got_subcommand(train_cmd))
            return cmd_train(config_path, data_path, out_dir,
                             opt_seed(train_seed));
        if (app.got_subcommand(reg_cmd))
            return cmd_register(model_path, moving_path, fixed_path, out_dir,
                                stochastic, opt_seed(reg_seed), mask_args);
        if (app.got_subcommand(exp_cmd))
            return cmd_exp(velocity_path,
                           exp_n_opt->count() > 0 ? std::optional<int>(exp_n)
                                                  : std::nullopt,
                           out_dir);
        if (app.got_subcommand(sample_cmd))
            return cmd_sample(model_path, cond_path, count,
                              opt_seed(sample_seed), out_dir);
        if (app.got_subcommand(tr_cmd))
            return cmd_transport(model_path, zcode_path, src_moving,
                                 src_fixed, target_path, out_dir);
        if (app.got_subcommand(eval_cmd))
            return cmd_eval(model_path, manifest_path, out_dir);
        if (app.got_subcommand(synth_cmd))
            return cmd_synth(out_dir, extent, per_class, noise_sigma,
                             opt_seed(synth_seed));
    } catch (const numerical_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumericalAbort;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
    return kExitConfigError;
}

}  // namespace dreg::cli
