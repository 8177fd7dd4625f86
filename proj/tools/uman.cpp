// Command-line front end: synthetic data generation, training, evaluation,
// gradient checking and the ablation runner.
//
// Exit codes: 0 success, 1 usage/configuration/IO error, 2 numeric failure
// (non-finite loss or a failed gradient check).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "uman/uman.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw uman::IoError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw uman::IoError("write failed for '" + path + "'");
}

uman::RunConfig resolve_config(const std::string& config_path, const std::string& checkpoint_path) {
    if (!config_path.empty()) return uman::load_config(config_path);
    if (!checkpoint_path.empty()) {
        fs::path side = fs::path(checkpoint_path).parent_path() / "config.txt";
        if (fs::exists(side)) return uman::load_config(side.string());
    }
    return uman::RunConfig{};
}

int run(int argc, char** argv) {
    CLI::App app{"KAN-enhanced encoder-decoder segmentation workbench"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic segmentation dataset");
    std::size_t synth_n = 64, synth_size = 64;
    std::uint64_t synth_seed = 1;
    std::string synth_out, synth_family = "ellipse";
    double synth_noise = 0.05;
    synth->add_option("--n", synth_n, "number of samples");
    synth->add_option("--size", synth_size, "image side length");
    synth->add_option("--seed", synth_seed, "generation seed");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--family", synth_family, "shape family: ellipse|blob");
    synth->add_option("--noise", synth_noise, "gaussian noise sigma");

    // train
    auto* train_cmd = app.add_subcommand("train", "train on a dataset directory");
    std::string train_config, train_data, train_out;
    std::int64_t train_seed = -1;
    train_cmd->add_option("--config", train_config, "config file")->required();
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--seed", train_seed, "seed override");
    train_cmd->add_option("--out", train_out, "output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_config;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--config", eval_config,
                         "config file (default: config.txt beside the checkpoint)");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string grad_scope = "all";
    grad_cmd->add_option("--scope", grad_scope, "layer name or 'all'");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "train and compare component variants");
    std::string ablate_table, ablate_data, ablate_out, ablate_config;
    ablate_cmd->add_option("--table", ablate_table, "overall|man|pagf")->required();
    ablate_cmd->add_option("--data", ablate_data, "dataset directory")->required();
    ablate_cmd->add_option("--out", ablate_out, "output directory")->required();
    ablate_cmd->add_option("--config", ablate_config, "base config file (default: desk preset)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;  // 1 for every usage error, 0 for --help
    }

    if (synth->parsed()) {
        uman::DatasetSpec spec;
        spec.n_samples = synth_n;
        spec.size = synth_size;
        spec.seed = synth_seed;
        spec.noise_sigma = synth_noise;
        if (synth_family == "ellipse") {
            spec.family = uman::ShapeFamily::Ellipse;
        } else if (synth_family == "blob") {
            spec.family = uman::ShapeFamily::Blob;
        } else {
            throw uman::UsageError("synth: unknown family '" + synth_family + "'");
        }
        auto samples = uman::generate_dataset(spec);
        uman::save_dataset(synth_out, samples);
        std::cout << "wrote " << samples.size() << " samples (" << synth_size << "x" << synth_size
                  << ") to " << synth_out << "\n";
        return 0;
    }

    if (train_cmd->parsed()) {
        uman::RunConfig cfg = uman::load_config(train_config);
        if (train_seed >= 0) cfg.optim.seed = static_cast<std::uint64_t>(train_seed);
        auto data = uman::load_dataset(train_data);
        auto [train_set, val_set] =
            uman::split(data, 1.0 - cfg.optim.val_fraction, cfg.optim.seed);
        std::cout << "training on " << train_set.size() << " samples, validating on "
                  << val_set.size() << "\n";
        auto progress = [](std::size_t epoch, const uman::TrainReport& r) {
            std::printf("epoch %4zu  train_loss %.6f  val_loss %.6f  val_iou %.4f  val_f1 %.4f\n",
                        epoch, r.train_loss.back(), r.val_loss.back(), r.val_iou.back(),
                        r.val_f1.back());
        };
        uman::TrainResult result = uman::train(cfg, train_set, val_set, progress);

        fs::create_directories(train_out);
        std::string ckpt_path = (fs::path(train_out) / "checkpoint.uman").string();
        write_text(ckpt_path, result.checkpoint);
        write_text((fs::path(train_out) / "report.tsv").string(), result.report.to_tsv());
        write_text((fs::path(train_out) / "config.txt").string(), uman::config_to_text(cfg));
        std::printf("best epoch %zu; final val_loss %.6f val_iou %.4f val_f1 %.4f\n",
                    result.report.best_epoch, result.report.final_metrics.loss,
                    result.report.final_metrics.iou, result.report.final_metrics.f1);
        std::cout << "checkpoint: " << ckpt_path << "\n";
        return 0;
    }

    if (eval_cmd->parsed()) {
        uman::RunConfig cfg = resolve_config(eval_config, eval_ckpt);
        auto data = uman::load_dataset(eval_data);
        uman::EvalMetrics m = uman::evaluate_checkpoint(cfg.net, eval_ckpt, data);
        std::printf("samples %zu  loss %.6f  iou %.4f  f1 %.4f\n", data.size(), m.loss, m.iou,
                    m.f1);
        return 0;
    }

    if (grad_cmd->parsed()) {
        uman::GradCheckReport report = uman::gradcheck(grad_scope);
        std::cout << report.to_text();
        if (!report.all_pass()) {
            std::cout << "gradcheck FAILED\n";
            return 2;
        }
        std::cout << "gradcheck passed (" << report.entries.size() << " checks)\n";
        return 0;
    }

    if (ablate_cmd->parsed()) {
        uman::RunConfig base = resolve_config(ablate_config, "");
        if (ablate_config.empty()) base.net = uman::NetworkConfig::desk();
        auto data = uman::load_dataset(ablate_data);
        std::vector<uman::TrainReport> reports;
        uman::AblationTable table = uman::ablate(ablate_table, base, data, &reports);
        std::cout << table.to_text();
        fs::create_directories(ablate_out);
        write_text((fs::path(ablate_out) / "report.tsv").string(), table.to_tsv());
        for (std::size_t i = 0; i < reports.size(); ++i)
            write_text((fs::path(ablate_out) / ("arm_" + std::to_string(i) + ".tsv")).string(),
                       reports[i].to_tsv());
        std::cout << "wrote " << (fs::path(ablate_out) / "report.tsv").string() << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const uman::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const uman::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
