// vpm: command-line driver for synthesis, training, embedding, matching,
// evaluation, sweeps and region-map export.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "vpm/checkpoint.hpp"
#include "vpm/config.hpp"
#include "vpm/experiment.hpp"
#include "vpm/retrieval.hpp"
#include "vpm/training.hpp"

namespace fs = std::filesystem;
using namespace vpm;

namespace {

using AnyModel = std::variant<VpmModel, BaselineModel>;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  std::string strategy;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

RunConfig load_config(const Common& c, const fs::path& fallback_dir = {}) {
  RunConfig cfg;
  if (!c.config_path.empty()) {
    cfg = parse_config(read_file(c.config_path));
  } else if (!fallback_dir.empty() && fs::exists(fallback_dir / "config.ini")) {
    cfg = parse_config(read_file(fallback_dir / "config.ini"));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.ablation.empty()) {
    try {
      cfg.ablation = AblationFlags::from_name(c.ablation);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("ablation", e.what());
    }
  }
  if (!c.strategy.empty()) {
    try {
      cfg.crop.strategy = parse_crop_strategy(c.strategy);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("crop.strategy", e.what());
    }
  }
  cfg.validate();
  return cfg;
}

AnyModel make_model(const RunConfig& cfg, int num_identities) {
  VpmConfig mc = cfg.model_config();
  mc.num_identities = num_identities;
  Rng rng(cfg.init_seed());
  if (cfg.model == ModelKind::kBaseline) return AnyModel(std::in_place_type<BaselineModel>, mc, rng);
  return AnyModel(std::in_place_type<VpmModel>, mc, rng);
}

std::vector<Parameter*> parameters_of(AnyModel& m) {
  return std::visit([](auto& model) { return model.parameters(); }, m);
}

AnyModel load_model(const RunConfig& cfg, const fs::path& checkpoint) {
  const TensorMap tensors = [&] {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + checkpoint.string());
    return read_checkpoint(in);
  }();
  // The classifier width is recovered from the stored head.
  const std::string head = "head1.fc2.weight";
  const auto it = tensors.find(head);
  if (it == tensors.end()) throw FormatError("checkpoint " + checkpoint.string() + " has no " + head);
  AnyModel model = make_model(cfg, it->second.dim(0));
  auto params = parameters_of(model);
  restore(params, tensors);
  return model;
}

Dataset load_or_synthesize(const RunConfig& cfg, const std::string& data_dir, bool test_split) {
  if (data_dir.empty()) return synth_generate(test_split ? cfg.test_spec() : cfg.train_spec());
  LoadResult r = load_image_folder(data_dir, cfg.height, cfg.width);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return std::move(r.dataset);
}

std::string metrics_row(const Metrics& m) {
  std::ostringstream os;
  write_metrics_csv(os, m, false);
  std::string s = os.str();
  if (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

void train_model(AnyModel& model, const Dataset& data, const RunConfig& cfg, const fs::path& out_dir, bool verbose) {
  TrainOptions opt = cfg.train_options();
  if (cfg.checkpoint_every > 0) opt.checkpoint_dir = out_dir / "checkpoints";
  if (verbose) {
    opt.on_epoch = [](const EpochLog& e) {
      std::fprintf(stderr, "epoch %d (%s) lr=%g L_R=%.4f L_ID=%.4f L_tri=%.4f L=%.4f\n", e.epoch, e.stage.c_str(), e.lr,
                   e.region, e.identity, e.triplet, e.total);
    };
  }
  const auto log = std::visit([&](auto& m) { return vpm::train(m, data, opt); }, model);
  if (!out_dir.empty()) {
    std::ostringstream csv;
    write_loss_csv(csv, log);
    write_file(out_dir / "loss.csv", csv.str());
  }
}

// Label from a "<id>_<camera>_<index>" style name.
Label label_from_name(const std::string& name) {
  static const std::regex pattern(R"(^(\d+)_(\d+)(?:_.*)?$)");
  std::smatch m;
  const std::string stem = fs::path(name).stem().string();
  if (!std::regex_match(stem, m, pattern)) throw std::invalid_argument("cannot read identity/camera from name '" + name + "'");
  return {std::stoi(m[1]), std::stoi(m[2])};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vpm: region-visibility matching for partial re-identification"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Top-level seed (overrides the config)");
  };

  std::string out, data_dir, checkpoint, images, query_file, gallery_file, rankings_file;
  double gamma = 1.0;
  bool verbose = false, no_visibility = false;
  int camera = -1;
  std::vector<double> gammas{0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<int> ps{2, 3, 4, 6, 8};
  std::string split = "both";

  auto* synth = app.add_subcommand("make-synth", "Render the synthetic train/test sets as PPM folders");
  add_common(synth);
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--split", split, "train, test or both")->check(CLI::IsMember({"train", "test", "both"}));

  auto* train = app.add_subcommand("train", "Train a model; writes model.ckpt, loss.csv and config.ini");
  add_common(train);
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--data", data_dir, "PPM folder (default: synthesize from config)")->check(CLI::ExistingDirectory);
  train->add_option("--strategy", common.strategy, "Training crop strategy");
  train->add_option("--ablation", common.ablation, "none, mvpm1, mvpm2, mvpm3 or mvpm4");
  train->add_flag("-v,--verbose", verbose, "Print per-epoch losses");

  auto* embed = app.add_subcommand("embed", "Embed a PPM folder into a descriptor batch file");
  add_common(embed);
  embed->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  embed->add_option("--images", images, "PPM folder (default: synthesized test set)")->check(CLI::ExistingDirectory);
  embed->add_option("--out", out, "Descriptor file")->required();
  embed->add_option("--gamma", gamma, "Crop every image to this area ratio first")->check(CLI::Range(0.0, 1.0));
  embed->add_option("--strategy", common.strategy, "Crop strategy used with --gamma");
  embed->add_option("--camera", camera, "Keep only images from this camera (-1: all)");

  auto* match = app.add_subcommand("match", "Rank a gallery for every query; writes rankings CSV");
  add_common(match);
  match->add_option("--query", query_file, "Query descriptors")->required()->check(CLI::ExistingFile);
  match->add_option("--gallery", gallery_file, "Gallery descriptors")->required()->check(CLI::ExistingFile);
  match->add_option("--out", out, "Rankings CSV")->required();
  match->add_option("--ablation", common.ablation, "mvpm1 disables visibility weighting");
  match->add_flag("--no-visibility", no_visibility, "Weigh every region equally");
  int match_top_k = 0;
  match->add_option("--top-k", match_top_k, "Rows per query (0: full ranking)");

  auto* eval = app.add_subcommand("eval", "Score a rankings CSV; writes R1,R5,R10,mAP");
  add_common(eval);
  eval->add_option("--rankings", rankings_file, "Rankings CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Metrics CSV (default: stdout)");

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate over crop ratios and region counts");
  add_common(sweep);
  sweep->add_option("--out", out, "Output CSV")->required();
  sweep->add_option("--data", data_dir, "Training PPM folder (default: synthesize)")->check(CLI::ExistingDirectory);
  sweep->add_option("--test", images, "Test PPM folder (default: synthesize)")->check(CLI::ExistingDirectory);
  sweep->add_option("--strategy", common.strategy, "Crop strategy for training and queries");
  sweep->add_option("--gammas", gammas, "Query crop ratios");
  sweep->add_option("--ps", ps, "Region counts (m x 1 grids)");
  sweep->add_flag("-v,--verbose", verbose, "Print per-epoch losses");

  auto* maps = app.add_subcommand("export-maps", "Write color-coded region maps as PPM");
  add_common(maps);
  maps->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  maps->add_option("--images", images, "PPM folder (default: synthesized test set)")->check(CLI::ExistingDirectory);
  maps->add_option("--out", out, "Output directory")->required();
  maps->add_option("--gamma", gamma, "Crop every image to this area ratio first")->check(CLI::Range(0.0, 1.0));
  maps->add_option("--strategy", common.strategy, "Crop strategy used with --gamma");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (synth->parsed()) {
      const RunConfig cfg = load_config(common);
      if (split != "test") write_image_folder(fs::path(out) / "train", synth_generate(cfg.train_spec()));
      if (split != "train") write_image_folder(fs::path(out) / "test", synth_generate(cfg.test_spec()));
      write_file(fs::path(out) / "config.ini", serialize(cfg));
    } else if (train->parsed()) {
      const RunConfig cfg = load_config(common);
      const Dataset data = load_or_synthesize(cfg, data_dir, false);
      AnyModel model = make_model(cfg, data.num_identities());
      train_model(model, data, cfg, out, verbose);
      auto params = parameters_of(model);
      save_checkpoint(fs::path(out) / "model.ckpt", params);
      write_file(fs::path(out) / "config.ini", serialize(cfg));
    } else if (embed->parsed()) {
      const RunConfig cfg = load_config(common, fs::path(checkpoint).parent_path());
      const AnyModel model = load_model(cfg, checkpoint);
      Dataset data = load_or_synthesize(cfg, images, true);
      if (camera >= 0) std::erase_if(data.samples, [&](const Sample& s) { return s.camera != camera; });
      if (data.samples.empty()) throw std::runtime_error("no images to embed");
      if (gamma < 1.0) data = build_partial_queries(data, gamma, cfg.crop.strategy, cfg.stream(5));
      const auto descs = std::visit([&](const auto& m) { return embed_all(m, data); }, model);
      save_descriptors(out, descs);
    } else if (match->parsed()) {
      const RunConfig cfg = load_config(common);
      const bool use_vis = cfg.ablation.use_visibility_at_match && !no_visibility;
      const auto queries = load_descriptors(query_file);
      const GalleryIndex gallery(load_descriptors(gallery_file));
      std::vector<RankingResult> rankings;
      for (const auto& q : queries) rankings.push_back(rank_gallery(q, gallery, use_vis));
      std::ostringstream csv;
      write_rankings_csv(csv, queries, rankings, gallery, match_top_k);
      write_file(out, csv.str());
    } else if (eval->parsed()) {
      std::istringstream in(read_file(rankings_file));
      std::string line;
      if (!std::getline(in, line) || line.rfind("query_id,rank,gallery_id", 0) != 0) {
        throw FormatError(rankings_file + ": missing rankings header");
      }
      std::vector<std::string> query_names;
      std::map<std::string, int> gallery_ids;
      std::vector<Label> glabels;
      std::vector<RankingResult> rankings;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string q, rank, g, dist;
        if (!std::getline(row, q, ',') || !std::getline(row, rank, ',') || !std::getline(row, g, ',') ||
            !std::getline(row, dist)) {
          throw FormatError(rankings_file + ": malformed row '" + line + "'");
        }
        if (query_names.empty() || query_names.back() != q) {
          query_names.push_back(q);
          rankings.emplace_back();
        }
        auto [it, inserted] = gallery_ids.try_emplace(g, static_cast<int>(glabels.size()));
        if (inserted) glabels.push_back(label_from_name(g));
        rankings.back().order.push_back(it->second);
        rankings.back().distances.push_back(std::stod(dist));
      }
      std::vector<Label> qlabels;
      for (const auto& q : query_names) qlabels.push_back(label_from_name(q));
      const Metrics m = evaluate_rankings(rankings, qlabels, glabels);
      std::ostringstream csv;
      write_metrics_csv(csv, m);
      if (out.empty()) {
        std::cout << csv.str();
      } else {
        write_file(out, csv.str());
      }
    } else if (sweep->parsed()) {
      const RunConfig base = load_config(common);
      const Dataset train_set = load_or_synthesize(base, data_dir, false);
      const Dataset test_set = load_or_synthesize(base, images, true);
      const EvalSplit eval_split = make_eval_split(test_set);
      std::ostringstream csv;
      csv << "model,p,gamma,R1,R5,R10,mAP\n";
      auto run = [&](RunConfig cfg, const std::string& name) {
        cfg.validate();
        AnyModel model = make_model(cfg, train_set.num_identities());
        train_model(model, train_set, cfg, {}, verbose);
        std::visit(
            [&](const auto& m) {
              const Evaluator ev(m, eval_split);
              for (double g : gammas) {
                const Metrics r = ev.run(g, cfg.crop.strategy, cfg.ablation.use_visibility_at_match, cfg.stream(5));
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.2f", g);
                csv << name << ',' << m.regions() << ',' << buf << ',' << metrics_row(r) << '\n';
                std::cerr << name << " p=" << m.regions() << " gamma=" << buf << ' ' << metrics_row(r) << '\n';
              }
            },
            model);
      };
      for (int p : ps) {
        RunConfig cfg = base;
        cfg.model = ModelKind::kVpm;
        cfg.m = p;
        cfg.n = 1;
        run(cfg, "vpm");
      }
      RunConfig cfg = base;
      cfg.model = ModelKind::kBaseline;
      run(cfg, "baseline");
      write_file(out, csv.str());
    } else if (maps->parsed()) {
      const RunConfig cfg = load_config(common, fs::path(checkpoint).parent_path());
      if (cfg.model != ModelKind::kVpm) throw ConfigError("run.model", "region maps need a vpm model");
      const AnyModel model = load_model(cfg, checkpoint);
      Dataset data = load_or_synthesize(cfg, images, true);
      if (gamma < 1.0) data = build_partial_queries(data, gamma, cfg.crop.strategy, cfg.stream(5));
      fs::create_directories(out);
      std::ostringstream csv;
      csv << "name,region_map\n";
      for (const Sample& s : data.samples) {
        const auto argmax = export_region_maps(s.image, std::get<VpmModel>(model), fs::path(out) / (s.name + "_map.ppm"));
        write_ppm(fs::path(out) / (s.name + "_input.ppm"), s.image);
        csv << s.name << ',';
        for (std::size_t i = 0; i < argmax.size(); ++i) csv << (i ? " " : "") << argmax[i];
        csv << '\n';
      }
      write_file(fs::path(out) / "maps.csv", csv.str());
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}
