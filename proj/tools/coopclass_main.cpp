// coopclass command-line front end.

#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "coopclass/error.hpp"
#include "coopclass/pipeline.hpp"
#include "coopclass/service.hpp"

namespace {

using namespace coopclass;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "coopclass-out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Pipeline config (JSON); defaults to the built-in simulation");
  cmd->add_option("--seed", c.seed, "Override the master seed");
  cmd->add_option("--out", c.out, "Output directory");
}

PipelineConfig resolve(const Common& c) {
  PipelineConfig config = c.config_path.empty() ? PipelineConfig{} : load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  config.validate();
  return config;
}

void print_summary(const std::filesystem::path& out) {
  const auto agg = load_aggregate(out);
  const auto& a = agg.at("aggregate");
  std::cout << "K=" << agg.at("K") << " users=" << agg.at("test_users") << " accepted=" << agg.at("accepted") << " I=" << a.at("I")
            << " M=" << a.at("M") << " NI=" << a.at("NI") << " original=" << a.at("original_accuracy").get<double>()
            << " post=" << a.at("post_accuracy").get<double>() << " A+=" << a.at("a_plus").get<double>()
            << " A-=" << a.at("a_minus").get<double>() << '\n';
}

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learning-to-complement pipeline with annotator profiles"};
  app.require_subcommand(1);

  Common common;
  struct StageCmd {
    const char* name;
    Stage stage;
    const char* help;
  };
  const StageCmd stage_cmds[] = {
      {"simulate", Stage::data, "Generate (or ingest) the dataset"},
      {"consensus", Stage::consensus, "Estimate consensus labels and split annotators"},
      {"profiles", Stage::profiles, "Discover annotator profiles"},
      {"augment", Stage::augment, "Estimate profile matrices and augment labels"},
      {"train", Stage::train, "Train the per-profile cooperative models"},
      {"onboard", Stage::onboard, "Profile test users and apply the entry condition"},
      {"evaluate", Stage::evaluate, "Evaluate test users and write reports"},
      {"run", Stage::evaluate, "Run the full pipeline"},
  };
  std::vector<std::pair<CLI::App*, Stage>> stage_apps;
  for (const auto& s : stage_cmds) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, common);
    stage_apps.emplace_back(cmd, s.stage);
  }

  std::string knob;
  std::vector<std::string> values;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  add_common(ablate, common);
  ablate->add_option("knob", knob, "components | G | K | lambda | svm_error | noise_rate | assignment")->required();
  ablate->add_option("--values", values, "Grid values (default: the standard grid)")->delimiter(',');

  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve onboarding and cooperation sessions over HTTP");
  add_common(serve, common);
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  auto* show = app.add_subcommand("config", "Print the effective config");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorKind::configuration);
  }

  try {
    for (const auto& [cmd, stage] : stage_apps) {
      if (!cmd->parsed()) continue;
      const auto config = resolve(common);
      const auto manifest = run_pipeline(config, common.out, stage);
      std::cerr << "stages recomputed: " << manifest.stages_recomputed << '\n';
      if (stage == Stage::evaluate) print_summary(common.out);
      return 0;
    }
    if (ablate->parsed()) {
      const auto config = resolve(common);
      for (const auto& p : run_ablation(config, knob, common.out, values)) {
        const auto& a = p.aggregate;
        std::cout << knob << '=' << p.value << " users=" << a.users << " I=" << a.improved << " M=" << a.maintained
                  << " NI=" << a.not_improved << " original=" << a.original_accuracy << " post=" << a.post_accuracy
                  << " A+=" << a.a_plus << " A-=" << a.a_minus << '\n';
      }
      return 0;
    }
    if (serve->parsed()) {
      std::optional<ServiceArtifacts> artifacts;
      try {
        artifacts = load_service_artifacts(common.out);
      } catch (const Error& e) {
        std::cerr << "warning: " << e.what() << "\nserving without models (session calls answer 503)\n";
      }
      CoopService service(std::move(artifacts), std::filesystem::path(common.out) / "sessions");
      HttpServer server(service);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << host << ':' << port << '\n';
      server.listen(host, port);
      return 0;
    }
    if (show->parsed()) {
      std::cout << resolve(common).to_json().dump(2) << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
