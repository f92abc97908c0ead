// Command-line driver for the enrichment pipeline and the generation service.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "maskdiff/genservice.hpp"
#include "maskdiff/hash.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/png_io.hpp"
#include "maskdiff/sampler.hpp"

namespace fs = std::filesystem;
using namespace maskdiff;

namespace {

struct Globals {
  std::string config;
  std::string profile;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void require_out(const Globals& g) {
  if (g.out.empty()) throw ValidationError("--out <dir> is required");
}

// Config precedence: --config file, else the run directory's config.json,
// else the --profile defaults. --seed overrides any of them.
Pipeline open_pipeline(const Globals& g) {
  require_out(g);
  const fs::path dir = g.out;
  std::optional<ExperimentConfig> cfg;
  if (!g.config.empty()) {
    cfg = load_config(g.config);
  } else if (fs::exists(dir / "config.json")) {
    cfg = load_config(dir / "config.json");
  } else if (!g.profile.empty()) {
    cfg = parse_profile(g.profile) == Profile::desk ? ExperimentConfig::desk() : ExperimentConfig::paper();
  } else {
    throw ValidationError("--config <file> is required (no config.json in " + dir.string() + ")");
  }
  if (!g.profile.empty() && parse_profile(g.profile) != cfg->profile) {
    throw ValidationError("--profile " + g.profile + " conflicts with the configuration's profile " +
                          to_string(cfg->profile));
  }
  if (g.seed) cfg->seed = *g.seed;
  Pipeline p(dir, *cfg);
  p.set_logger([](const std::string& m) { std::cerr << "[maskdiff] " << m << std::endl; });
  return p;
}

int run(int argc, char** argv) {
  CLI::App app{"Mask-conditioned diffusion data enrichment for segmentation", "maskdiff"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Experiment configuration (JSON)");
  app.add_option("--profile", g.profile, "Profile defaults: desk or paper");
  app.add_option("--out", g.out, "Run directory (or output directory for toygen)");
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { g.seed = s; }, "Master seed");

  auto* toygen = app.add_subcommand("toygen", "Write a procedural pseudo-histology dataset");
  int toy_n = 32, toy_res = 32, toy_classes = 4, toy_val = 0, toy_test = 0;
  toygen->add_option("--n", toy_n, "Number of records")->check(CLI::NonNegativeNumber);
  toygen->add_option("--resolution", toy_res, "Image side in pixels");
  toygen->add_option("--classes", toy_classes, "Class count including background");
  toygen->add_option("--val", toy_val, "Records assigned to the val split");
  toygen->add_option("--test", toy_test, "Records assigned to the test split");

  auto* pretrain = app.add_subcommand("pretrain", "Train the unconditional cascade");
  auto* finetune = app.add_subcommand("finetune-cond", "Fine-tune the cascade on labelled masks");
  auto* train_seg = app.add_subcommand("train-seg", "Train a segmentation variant (default: 1, real data)");
  std::string seg_variant = "1";
  train_seg->add_option("--variant", seg_variant, "Variant id: 1, 1a, 2, 3, 4 or 5");
  auto* build_d1 = app.add_subcommand("build-d1", "Generate d1 with the unconditional cascade and M_theta masks");
  auto* build_d2 = app.add_subcommand("build-d2", "Generate d2 from d1 masks with the conditional cascade");
  auto* variants = app.add_subcommand("run-variants", "Train and evaluate the requested variants");
  auto* all = app.add_subcommand("run", "Run every stage");
  auto* report = app.add_subcommand("report", "Print the evaluation table of a run");
  bool csv = false;
  report->add_flag("--csv", csv, "Print CSV instead of the text table");

  auto* sample = app.add_subcommand("sample", "Sample images from a trained cascade");
  std::string cascade_name = "dxi", mask_path, output = "sample.png", trace_dir;
  std::optional<double> guidance;
  sample->add_option("--cascade", cascade_name, "dphi (unconditional) or dxi (mask-conditioned)");
  sample->add_option("--mask", mask_path, "Indexed PNG mask; empty mask when omitted");
  sample->add_option("--output", output, "Output PNG path");
  sample->add_option_function<double>("--guidance", [&](double w) { guidance = w; }, "Guidance weight override");
  sample->add_option("--trace", trace_dir, "Write each stage's output into this directory");

  auto* serve = app.add_subcommand("serve", "Run the HTTP generation service");
  ServiceOptions so;
  serve->add_option("--port", so.port, "TCP port");
  serve->add_option("--host", so.host, "Bind address");
  serve->add_option("--queue", so.queue_bound, "Maximum queued jobs");
  serve->add_option("--workers", so.workers, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  if (*toygen) {
    require_out(g);
    ToySpec spec{toy_n, toy_res, toy_classes, g.seed.value_or(0), toy_val, toy_test};
    const auto m = make_toy_dataset(spec, g.out);
    std::cout << "wrote " << m.records.size() << " records to " << g.out << " (manifest sha256 "
              << file_sha256(fs::path(g.out) / "manifest.json") << ")\n";
    return 0;
  }
  if (*serve) {
    if (!g.out.empty()) {
      so.run_dir = g.out;
    } else if (const char* env = std::getenv("MASKDIFF_RUN_DIR")) {
      so.run_dir = env;
    } else {
      throw ValidationError("set MASKDIFF_RUN_DIR or pass --out <run dir>");
    }
    GenerationService service(so);
    std::cerr << "[maskdiff] serving " << so.run_dir << " on http://" << so.host << ":" << so.port << std::endl;
    if (!service.listen()) throw Error("could not bind " + so.host + ":" + std::to_string(so.port));
    return 0;
  }
  if (*report) {
    require_out(g);
    Pipeline p = Pipeline::open(g.out);
    const fs::path file = p.path(csv ? "reports/table.csv" : "reports/table.txt");
    if (fs::exists(file)) {
      std::ifstream in(file);
      std::cout << in.rdbuf();
      return 0;
    }
    const auto reps = p.reports();
    if (reps.empty()) throw ValidationError("run " + g.out + " has no trained variants to report");
    std::cout << (csv ? render_csv(reps) : render_table(reps, p.real_manifest().class_names));
    return 0;
  }

  Pipeline p = open_pipeline(g);
  if (*pretrain) p.pretrain_unconditional();
  if (*finetune) p.finetune_conditional();
  if (*train_seg) {
    if (!is_known_variant(seg_variant)) throw ValidationError("unknown variant: " + seg_variant);
    if (seg_variant == "1") {
      p.train_real_segmenter();
    } else {
      auto cfg = p.config();
      if (std::find(cfg.variants.begin(), cfg.variants.end(), seg_variant) == cfg.variants.end()) {
        throw ValidationError("variant " + seg_variant + " is not in the configured variant list");
      }
      p.run_variants();
    }
  }
  if (*build_d1) p.build_d1();
  if (*build_d2) p.build_d2();
  if (*variants || *all) {
    if (*all) p.run_all();
    p.run_variants();
    std::ifstream in(p.path("reports/table.txt"));
    std::cout << in.rdbuf();
  }
  if (*sample) {
    const LoadedCascade cascade = load_cascade(p.cascade_path(cascade_name));
    std::vector<CascadeStage<Denoiser<float>>> stages = cascade.stages;
    if (guidance)
      for (auto& s : stages) s.guidance_weight = *guidance;
    const int res = cascade.resolution();
    const int scalar_dim = cascade.models.front().config().scalar_dim;
    ConditioningBundle<float> cond;
    if (mask_path.empty()) {
      cond = empty_bundle<float>(1, cascade.num_classes(), res, scalar_dim);
    } else {
      const LabelMap masks[1] = {read_mask(mask_path)};
      if (masks[0].max_label() >= cascade.num_classes()) {
        throw ValidationError("mask class index " + std::to_string(masks[0].max_label()) + " >= " +
                              std::to_string(cascade.num_classes()));
      }
      cond = mask_bundle<float>(masks, cascade.num_classes(), scalar_dim);
    }
    std::vector<Tensor<float>> trace;
    const auto image = cascade_sample<float>(std::span<const CascadeStage<Denoiser<float>>>(stages), Schedule{}, cond,
                                             p.config().seed, trace_dir.empty() ? nullptr : &trace);
    write_image(output, image);
    for (std::size_t i = 0; i < trace.size(); ++i) {
      write_image(fs::path(trace_dir) / ("stage" + std::to_string(i) + ".png"), trace[i]);
    }
    std::cout << output << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
}
