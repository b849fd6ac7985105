// lics — train/attack/eval/transfer/ablate/grid driver for the LiCS
// adversarial-robustness library.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lics/config.hpp"
#include "lics/datapipe.hpp"
#include "lics/harness.hpp"
#include "lics/png_io.hpp"

namespace {

using namespace lics;
using F = float;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data_root;
  bool download = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required) {
  auto* opt = cmd->add_option("--config", flags.config_path,
                              "JSON run configuration");
  if (config_required) opt->required();
  cmd->add_option_function<std::string>(
      "--seed",
      [&flags](const std::string& v) { flags.seed = std::stoull(v); },
      "Seed for all stochastic components (overrides the config)");
  cmd->add_option("--out", flags.out, "Output directory (overrides the config)");
  cmd->add_option("--data-root", flags.data_root,
                  "Dataset root (overrides config and LICS_DATA_ROOT)");
  cmd->add_flag("--download", flags.download,
                "Consent to fetching raw dataset archives");
}

RunConfig resolve(const CommonFlags& flags) {
  RunConfig cfg = flags.config_path.empty()
                      ? RunConfig{}
                      : load_run_config(flags.config_path);
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  if (!flags.data_root.empty()) cfg.dataset.root = flags.data_root;
  if (flags.download) cfg.dataset.download = true;
  auto plan = resolve_seed(cfg, flags.seed);
  if (plan.generated)
    std::cerr << "[lics] no seed given; selected seed " << plan.value << "\n";
  cfg.seed = plan.value;
  cfg.model.seed = plan.value;
  cfg.train.seed = plan.value;
  return cfg;
}

ImageBatch<F> load_split(const RunConfig& cfg, const std::string& split,
                         int limit) {
  DatasetSpec spec = cfg.dataset;
  spec.split = split;
  auto ds = load_dataset<F>(spec);
  if (limit > 0 && ds.data.size() > limit) ds.data = ds.data.slice(0, limit);
  return std::move(ds.data);
}

void write_reports(const fs::path& dir, const nlohmann::ordered_json& j,
                   const std::string& csv,
                   const std::vector<std::string>& formats) {
  for (const auto& f : formats) {
    if (f == "json") atomic_write(dir / "report.json", j.dump(2) + "\n");
    if (f == "csv") atomic_write(dir / "report.csv", csv);
  }
}

void write_pixels_bin(const fs::path& path, const Tensor<F>& px) {
  atomic_write(path, px.data(),
               static_cast<std::size_t>(px.numel()) * sizeof(float));
}

int cmd_train(const CommonFlags& flags) {
  RunConfig cfg = resolve(flags);
  auto train = load_split(cfg, "train", cfg.train_limit);
  auto val = load_split(cfg, "test", 0);
  LicsNet<F> model(cfg.model);
  std::cerr << "[lics] training " << model.params().numel()
            << " parameters for " << cfg.train.epochs << " epochs on "
            << train.size() << " samples\n";
  auto log = csat_train(model, train, val, cfg.train, cfg.out_dir);
  for (const auto& e : log.epochs)
    std::cerr << "[lics] epoch " << e.epoch << " total " << e.total
              << " clean " << e.clean_acc << " adv " << e.adv_acc << " ("
              << e.wall_seconds << "s)\n";
  std::cout << (cfg.out_dir / "final").string() << "\n";
  return 0;
}

int cmd_attack(const CommonFlags& flags, const std::string& ckpt,
               const std::string& kind, const std::string& preset,
               int count) {
  RunConfig cfg = resolve(flags);
  auto model = load_checkpoint<F>(ckpt);
  auto data = load_split(cfg, "test", count > 0 ? count : cfg.eval_limit);
  fs::create_directories(cfg.out_dir);

  nlohmann::ordered_json meta{
      {"kind", kind},
      {"dataset", cfg.dataset.name},
      {"split", "test"},
      {"count", data.size()},
      {"shape",
       Shape{data.pixels.dim(1), data.pixels.dim(2), data.pixels.dim(3)}},
      {"checkpoint", ckpt}};

  std::ostringstream records;
  nlohmann::ordered_json summary;
  Tensor<F> adv_pixels;

  if (kind == "pgd") {
    PgdConfig pc = cfg.attack_pgd;
    if (!preset.empty()) pc = pgd_preset(preset);
    if (cfg.seed) pc.seed = *cfg.seed;
    auto adv = pgd_attack(ce_attack_loss(model), data, pc);
    adv_pixels = adv.pixels;
    auto preds_clean = predict_chunked(model, data);
    auto preds_adv = predict_chunked(model, adv);
    int still_correct = 0;
    std::int64_t stride = data.pixels.numel() / data.size();
    for (int i = 0; i < data.size(); ++i) {
      F linf = 0;
      for (std::int64_t k = 0; k < stride; ++k)
        linf = std::max(linf, std::abs(adv.pixels[i * stride + k] -
                                       data.pixels[i * stride + k]));
      if (preds_adv[static_cast<std::size_t>(i)] ==
          data.labels[static_cast<std::size_t>(i)])
        ++still_correct;
      records << nlohmann::ordered_json{
                     {"index", i},
                     {"label", data.labels[static_cast<std::size_t>(i)]},
                     {"pred_clean", preds_clean[static_cast<std::size_t>(i)]},
                     {"pred_adv", preds_adv[static_cast<std::size_t>(i)]},
                     {"linf", linf}}
                     .dump()
              << "\n";
    }
    meta["config"] = {{"epsilon", pc.epsilon},
                      {"steps", pc.steps},
                      {"step_size", pc.step_size},
                      {"random_start", pc.random_start}};
    summary = {{"adversarial_accuracy",
                static_cast<double>(still_correct) / data.size()},
               {"count", data.size()}};
  } else if (kind == "aig") {
    AigConfig ac = cfg.attack_aig;
    auto res = aig_liir(model, data, ac);
    adv_pixels = Tensor<F>(data.pixels.shape());
    std::int64_t stride = data.pixels.numel() / data.size();
    for (const auto& s : res.samples) {
      std::copy(s.x_adv.data(), s.x_adv.data() + stride,
                adv_pixels.data() + s.sample * stride);
      nlohmann::ordered_json rec{
          {"index", s.sample},
          {"label", s.label},
          {"source_pred", s.source_pred},
          {"status", to_string(s.status)},
          {"flipped", s.flipped},
          {"concept_iterations", s.concept_iterations},
          {"inversion_iterations", s.inversion_iterations},
          {"concept_shift_norm", s.concept_shift_norm},
          {"pixel_l2", s.pixel_l2},
          {"final_concept_dist", s.final_concept_dist}};
      if (s.error) rec["error"] = *s.error;
      records << rec.dump() << "\n";
    }
    meta["config"] = {{"overshoot", ac.overshoot},
                      {"max_concept_iters", ac.max_concept_iters},
                      {"inversion",
                       {{"step_size", ac.inversion.step_size},
                        {"max_iters", ac.inversion.max_iters},
                        {"epsilon_l2", ac.inversion.epsilon_l2},
                        {"concept_tol", ac.inversion.concept_tol}}}};
    summary = {{"success_rate", res.success_rate},
               {"flipped", res.flipped_count},
               {"errors", res.error_count},
               {"count", data.size()}};
  } else {
    throw ConfigError("attack: kind must be pgd or aig");
  }

  nlohmann::ordered_json labels = nlohmann::ordered_json::array();
  for (int y : data.labels) labels.push_back(y);
  meta["labels"] = labels;
  write_pixels_bin(cfg.out_dir / "src.bin", data.pixels);
  write_pixels_bin(cfg.out_dir / "adv.bin", adv_pixels);
  atomic_write(cfg.out_dir / "meta.json", meta.dump(2));
  atomic_write(cfg.out_dir / "records.jsonl", records.str());
  atomic_write(cfg.out_dir / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt,
             const std::string& attack_kind, const std::string& preset,
             int cap) {
  RunConfig cfg = resolve(flags);
  auto model = load_checkpoint<F>(ckpt);
  auto data = load_split(cfg, "test", 0);
  AttackDescriptor att;
  if (attack_kind == "none") {
    att.kind = AttackDescriptor::Kind::none;
  } else if (attack_kind == "pgd") {
    att.kind = AttackDescriptor::Kind::pgd;
    att.pgd = preset.empty() ? cfg.attack_pgd : pgd_preset(preset);
  } else if (attack_kind == "aig") {
    att.kind = AttackDescriptor::Kind::aig;
    att.aig = cfg.attack_aig;
  } else {
    throw ConfigError("eval: attack must be none, pgd or aig");
  }
  int effective_cap = cap > 0 ? cap : cfg.eval_limit;
  auto rep = evaluate(model, data, att, model.config().num_classes, ckpt,
                      cfg.dataset.name, "test", effective_cap);
  fs::create_directories(cfg.out_dir);
  write_reports(cfg.out_dir, rep.to_json(),
                EvalReport::csv_header() + "\n" + rep.csv_row() + "\n",
                cfg.report_formats);
  std::cout << rep.to_json().dump() << "\n";
  return 0;
}

int cmd_transfer(const CommonFlags& flags, const std::string& ckpt, int cap,
                 int target_epochs) {
  RunConfig cfg = resolve(flags);
  auto source = load_checkpoint<F>(ckpt);
  auto train = load_split(cfg, "train", cfg.train_limit);
  auto test = load_split(cfg, "test", 0);
  fs::create_directories(cfg.out_dir);

  const auto& ic = source.config().input_shape;
  TargetConfig conv_cfg{TargetArch::conv_pool, source.config().num_classes,
                        ic, 64, (cfg.seed ? *cfg.seed : 0) + 101};
  TargetConfig mlp_cfg{TargetArch::net3fc, source.config().num_classes, ic,
                       128, (cfg.seed ? *cfg.seed : 0) + 202};
  TargetNet<F> conv_net(conv_cfg);
  TargetNet<F> mlp_net(mlp_cfg);
  TargetTrainConfig tt{target_epochs, 128, 1e-3,
                       cfg.seed ? *cfg.seed : 0};
  std::cerr << "[lics] training clean targets (" << target_epochs
            << " epochs)\n";
  train_target(conv_net, train, tt);
  train_target(mlp_net, train, tt);
  save_target_checkpoint(conv_net, cfg.out_dir / "targets" / "conv_pool");
  save_target_checkpoint(mlp_net, cfg.out_dir / "targets" / "net3fc");

  std::vector<TargetHandle<F>> targets;
  targets.push_back({"conv_pool", [&](const ImageBatch<F>& b) {
                       return predict_chunked(conv_net, b);
                     }});
  targets.push_back({"net3fc", [&](const ImageBatch<F>& b) {
                       return predict_chunked(mlp_net, b);
                     }});
  targets.push_back({"source", [&](const ImageBatch<F>& b) {
                       return predict_chunked(source, b);
                     }});

  auto rep = transfer_eval(source, targets, test, cfg.attack_aig, ckpt, cap);

  // side-by-side comparison on the same capped subset: clean vs AIG vs PGD
  ImageBatch<F> subset =
      (cap > 0 && test.size() > cap) ? test.slice(0, cap) : test;
  auto gen = aig_liir(source, subset, cfg.attack_aig);
  ImageBatch<F> aig_all = subset;
  std::int64_t stride = subset.pixels.numel() / subset.size();
  for (const auto& s : gen.samples)
    std::copy(s.x_adv.data(), s.x_adv.data() + stride,
              aig_all.pixels.data() + s.sample * stride);
  auto pgd_all = pgd_attack(ce_attack_loss(source), subset, cfg.attack_pgd);
  nlohmann::ordered_json comparison = nlohmann::ordered_json::array();
  for (const auto& t : targets) {
    auto acc = [&](const ImageBatch<F>& b) {
      auto p = t.predict(b);
      int ok = 0;
      for (int i = 0; i < b.size(); ++i)
        if (p[static_cast<std::size_t>(i)] ==
            b.labels[static_cast<std::size_t>(i)])
          ++ok;
      return static_cast<double>(ok) / b.size();
    };
    double c = acc(subset), aa = acc(aig_all), pp = acc(pgd_all);
    comparison.push_back({{"target", t.id},
                          {"clean", c},
                          {"aig_liir", aa},
                          {"pgd", pp},
                          {"aig_drop", c - aa},
                          {"pgd_drop", c - pp}});
  }

  auto j = rep.to_json();
  j["full_subset_comparison"] = comparison;
  std::string csv = TransferReport::csv_header() + "\n";
  for (const auto& row : rep.csv_rows()) csv += row + "\n";
  write_reports(cfg.out_dir, j, csv, cfg.report_formats);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& presets_csv,
               const std::string& seeds_csv) {
  RunConfig cfg = resolve(flags);
  std::vector<std::string> presets;
  {
    std::stringstream ss(presets_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) presets.push_back(tok);
  }
  std::vector<std::uint64_t> seeds;
  {
    std::stringstream ss(seeds_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok));
  }
  auto train = load_split(cfg, "train", cfg.train_limit);
  auto test = load_split(cfg, "test", 0);
  auto rep = ablation_sweep(train, test, test, presets, seeds, cfg.model,
                            cfg.train, cfg.eval_limit, cfg.out_dir);
  fs::create_directories(cfg.out_dir);
  std::string csv = AblationReport::csv_header() + "\n";
  for (const auto& row : rep.csv_rows()) csv += row + "\n";
  write_reports(cfg.out_dir, rep.to_json(), csv, cfg.report_formats);
  std::cout << rep.to_json().dump(2) << "\n";
  return rep.any_failed() ? 1 : 0;
}

int cmd_grid(const std::string& archive, const std::string& out,
             int page_size, int pages) {
  fs::path dir = archive;
  auto meta = nlohmann::ordered_json::parse(read_file_text(dir / "meta.json"));
  int count = meta.at("count").get<int>();
  Shape chw = meta.at("shape").get<Shape>();
  std::int64_t stride = static_cast<std::int64_t>(chw[0]) * chw[1] * chw[2];

  auto load_bin = [&](const std::string& name) {
    auto bytes = read_file_bytes(dir / name);
    if (static_cast<std::int64_t>(bytes.size()) !=
        count * stride * static_cast<std::int64_t>(sizeof(float)))
      throw IoError("grid: " + name + " size mismatch in " + dir.string());
    Tensor<F> t({count, chw[0], chw[1], chw[2]});
    std::memcpy(t.data(), bytes.data(), bytes.size());
    return t;
  };
  auto src = load_bin("src.bin");
  auto adv = load_bin("adv.bin");

  std::vector<int> preds(static_cast<std::size_t>(count), -1);
  std::vector<int> labels(static_cast<std::size_t>(count), -1);
  if (fs::exists(dir / "records.jsonl")) {
    std::istringstream in(read_file_text(dir / "records.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto r = nlohmann::ordered_json::parse(line);
      int i = r.at("index").get<int>();
      labels[static_cast<std::size_t>(i)] = r.value("label", -1);
      if (r.contains("pred_adv"))
        preds[static_cast<std::size_t>(i)] = r.at("pred_adv").get<int>();
      else if (r.contains("source_pred"))
        preds[static_cast<std::size_t>(i)] = r.at("source_pred").get<int>();
    }
  }

  fs::path out_dir = out;
  fs::create_directories(out_dir);
  if (page_size < 1) throw ConfigError("grid: page-size must be >= 1");
  int total_pages = (count + page_size - 1) / page_size;
  if (pages > 0) total_pages = std::min(total_pages, pages);
  for (int pg = 0; pg < total_pages; ++pg) {
    std::vector<GridPair<F>> pairs;
    for (int i = pg * page_size; i < std::min(count, (pg + 1) * page_size);
         ++i) {
      GridPair<F> p;
      p.source = Tensor<F>({chw[0], chw[1], chw[2]});
      p.adversarial = p.source;
      std::copy(src.data() + i * stride, src.data() + (i + 1) * stride,
                p.source.data());
      std::copy(adv.data() + i * stride, adv.data() + (i + 1) * stride,
                p.adversarial.data());
      p.true_label = labels[static_cast<std::size_t>(i)];
      p.pred_label = preds[static_cast<std::size_t>(i)];
      pairs.push_back(std::move(p));
    }
    char name[32];
    std::snprintf(name, sizeof name, "grid_page%03d.png", pg);
    export_grid(pairs, out_dir / name);
  }
  std::cout << total_pages << " page(s) written to " << out_dir.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiCS: linearity-constrained robust classifier tooling"};
  app.require_subcommand(1);

  CommonFlags train_flags, attack_flags, eval_flags, transfer_flags,
      ablate_flags;
  std::string ckpt, kind = "pgd", preset, attack_mode = "pgd";
  std::string presets_csv = "BASE,L2C", seeds_csv = "1,2,3";
  std::string archive, grid_out = "grids";
  int count = 0, cap = 0, target_epochs = 5, page_size = 8, pages = 0;

  auto* t = app.add_subcommand("train", "CSAT training run");
  add_common(t, train_flags, true);

  auto* a = app.add_subcommand("attack", "generate an adversarial archive");
  add_common(a, attack_flags, true);
  a->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  a->add_option("--kind", kind, "pgd | aig");
  a->add_option("--preset", preset, "PGD preset: mnist | cifar10 | svhn");
  a->add_option("--count", count, "number of samples to attack");

  auto* e = app.add_subcommand("eval", "clean/adversarial accuracy report");
  add_common(e, eval_flags, true);
  e->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  e->add_option("--attack", attack_mode, "none | pgd | aig");
  e->add_option("--preset", preset, "PGD preset overriding the config");
  e->add_option("--cap", cap, "evaluation subset cap");

  auto* tr = app.add_subcommand("transfer", "transferability matrix");
  add_common(tr, transfer_flags, true);
  tr->add_option("--ckpt", ckpt, "source checkpoint directory")->required();
  tr->add_option("--cap", cap, "generation subset cap");
  tr->add_option("--target-epochs", target_epochs,
                 "clean training epochs for the targets");

  auto* ab = app.add_subcommand("ablate", "objective ablation sweep");
  add_common(ab, ablate_flags, true);
  ab->add_option("--presets", presets_csv, "comma-separated preset names");
  ab->add_option("--seeds", seeds_csv, "comma-separated seeds");

  auto* g = app.add_subcommand("grid", "render source/adversarial pair pages");
  g->add_option("--archive", archive, "attack archive directory")->required();
  g->add_option("--out", grid_out, "output directory for the pages");
  g->add_option("--page-size", page_size, "pairs per page");
  g->add_option("--pages", pages, "max pages (0 = all)");

  try {
    app.parse(argc, argv);
    if (t->parsed()) return cmd_train(train_flags);
    if (a->parsed()) return cmd_attack(attack_flags, ckpt, kind, preset, count);
    if (e->parsed()) return cmd_eval(eval_flags, ckpt, attack_mode, preset, cap);
    if (tr->parsed())
      return cmd_transfer(transfer_flags, ckpt, cap, target_epochs);
    if (ab->parsed()) return cmd_ablate(ablate_flags, presets_csv, seeds_csv);
    if (g->parsed()) return cmd_grid(archive, grid_out, page_size, pages);
    return 2;
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 2;
  } catch (const lics::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const lics::IoError& err) {
    std::cerr << "io error: " << err.what() << "\n";
    return 2;
  } catch (const lics::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}
