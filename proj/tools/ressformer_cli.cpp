#include <boost/program_options.hpp>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "ressformer/ressformer.hpp"

namespace po = boost::program_options;
using namespace ressformer;

namespace {

const char* kUsage =
    "usage: ressformer_cli <verb> [options]\n"
    "\n"
    "verbs:\n"
    "  train         fit a model; writes checkpoint.bin, metrics.jsonl, resolved.cfg\n"
    "  eval          score a checkpoint on a split; prints metrics JSON\n"
    "  gradcheck     compare every op's backward against finite differences\n"
    "  bench         time attention modes across sequence lengths\n"
    "  ablate        paired full-vs-ablated training comparison\n"
    "  export-graph  run one forward and write the latent structure as DOT\n"
    "\n"
    "run `ressformer_cli <verb> --help` for verb options\n";

std::vector<long> parse_longs(const std::string& csv) {
  std::vector<long> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(detail::to_long("lengths", item));
  }
  if (out.empty()) throw ConfigError("expected a comma-separated list of integers");
  return out;
}

std::vector<std::string> parse_names(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// --config file, then --set overrides, then seed (flag beats SEED env).
RunConfig resolve_config(const po::variables_map& vm) {
  RunConfig rc;
  if (vm.count("config")) load_config_file(rc, vm["config"].as<std::string>());
  if (vm.count("set"))
    for (const auto& kv : vm["set"].as<std::vector<std::string>>()) {
      size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_config_kv(rc, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
  if (vm.count("seed")) {
    rc.seed = vm["seed"].as<uint64_t>();
  } else if (const char* env = std::getenv("SEED")) {
    rc.seed = (uint64_t)detail::to_long("SEED", env);
  }
  rc.validate();
  return rc;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

int cmd_train(const po::variables_map& vm) {
  RunConfig rc = resolve_config(vm);
  std::string out_dir = vm["out"].as<std::string>();
  ensure_dir(out_dir);
  TaskData td = gen_task(rc.task, rc.seed);
  RunConfig resolved = rc;
  resolved.model.vocab_size = td.vocab_size;
  {
    std::ofstream f(out_dir + "/resolved.cfg", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out_dir + "/resolved.cfg");
    f << serialize_config(resolved);
  }
  TrainResult tr = train_loop(rc, td, out_dir, {}, &std::cerr);
  ModelConfig cfg = rc.model;
  cfg.vocab_size = td.vocab_size;
  Metrics test = evaluate(tr.params, cfg, td.test, rc.train.batch_size);
  nlohmann::json j = metrics_json(tr.best_step, "test", test);
  j["stop_reason"] = tr.stop_reason;
  j["steps_run"] = tr.steps_run;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_eval(const po::variables_map& vm) {
  Checkpoint ck = load_checkpoint(vm["checkpoint"].as<std::string>());
  RunConfig rc = ck.config;
  if (vm.count("set"))
    for (const auto& kv : vm["set"].as<std::vector<std::string>>()) {
      size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_config_kv(rc, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
  if (vm.count("task")) rc.task.kind = task_from_name(vm["task"].as<std::string>());
  rc.validate();
  TaskData td = gen_task(rc.task, rc.seed);
  if (td.vocab_size != ck.vocab_size)
    throw ConfigError("checkpoint was trained with vocab " + std::to_string(ck.vocab_size) +
                      " but the requested task yields vocab " + std::to_string(td.vocab_size));
  ModelConfig cfg = rc.model;
  cfg.vocab_size = td.vocab_size;

  std::string split = vm["split"].as<std::string>();
  const Dataset* ds = split == "train" ? &td.train
                      : split == "dev" ? &td.dev
                      : split == "test" ? &td.test
                                        : nullptr;
  if (!ds) throw ConfigError("unknown split '" + split + "' (expected train, dev, or test)");

  Metrics m = evaluate(ck.params, cfg, *ds, rc.train.batch_size);
  nlohmann::json j = metrics_json(0, split, m);
  j.erase("step");
  std::cout << j.dump() << "\n";

  if (vm.count("lengths")) {
    auto lengths = parse_longs(vm["lengths"].as<std::string>());
    auto pts = length_sweep(rc, ck.params, lengths);
    write_length_csv(vm["out"].as<std::string>(), pts);
  }
  return 0;
}

int cmd_gradcheck(const po::variables_map& vm) {
  bool corrupt = vm.count("corrupt-fixture") > 0;
  auto failing = run_gradcheck(std::cout, 1e-4, corrupt);
  if (failing.empty()) return 0;
  std::cout << "failing:";
  for (const auto& name : failing) std::cout << " " << name;
  std::cout << "\n";
  return 1;
}

int cmd_bench(const po::variables_map& vm) {
  auto lengths = parse_longs(vm["lengths"].as<std::string>());
  auto modes = parse_names(vm["mode"].as<std::string>());
  if (modes.empty()) throw ConfigError("--mode needs at least one of dense, exact, bucketed");
  for (const auto& m : modes)
    if (m != "dense" && m != "exact" && m != "bucketed")
      throw ConfigError("unknown mode '" + m + "' (expected dense, exact, or bucketed)");
  long k_top = vm["k-top"].as<long>();
  long trials = vm["trials"].as<long>();
  BenchSummary s = run_bench(modes, lengths, k_top, trials, 64, 4, Phi::entmax15, &std::cerr);
  write_bench_csv(vm["out"].as<std::string>(), s);
  for (const auto& [mode, exp] : s.exponent)
    std::cout << "exponent " << mode << " = " << exp << "\n";
  return 0;
}

int cmd_ablate(const po::variables_map& vm) {
  std::string which = vm["disable"].as<std::string>();
  std::vector<Ablation> abls;
  if (which == "all") {
    abls = {Ablation::r2mu, Ablation::asam, Ablation::soes};
  } else {
    try {
      abls = {ablation_from_name(which)};
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  RunConfig rc = resolve_config(vm);
  std::vector<long> seeds = parse_longs(vm["seeds"].as<std::string>());

  bool lm = rc.task.kind == TaskKind::char_lm;
  auto metric = [lm](const Metrics& m) { return lm ? m.bpc : m.token_acc; };
  auto run_one = [&](const ModelConfig& mcfg, long seed) {
    RunConfig r = rc;
    r.model = mcfg;
    r.seed = (uint64_t)seed;
    TaskData td = gen_task(r.task, r.seed);
    TrainResult tr = train_loop(r, td, "", {}, nullptr);
    ModelConfig cfg = mcfg;
    cfg.vocab_size = td.vocab_size;
    return metric(evaluate(tr.params, cfg, td.test, r.train.batch_size));
  };

  double full = 0;
  for (long s : seeds) full += run_one(rc.model, s);
  full /= (double)seeds.size();

  std::string metric_name = lm ? "bpc" : "token_acc";
  std::cout << "variant," << metric_name << ",relative_change\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "Full,%.6f,0\n", full);
  std::cout << buf;
  for (Ablation a : abls) {
    double v = 0;
    for (long s : seeds) v += run_one(ablate(rc.model, a), s);
    v /= (double)seeds.size();
    std::string label = ablation_name(a);
    for (char& ch : label) ch = (char)std::toupper((unsigned char)ch);
    std::snprintf(buf, sizeof(buf), "w/o %s,%.6f,%.6f\n", label.c_str(), v, (v - full) / full);
    std::cout << buf;
  }
  return 0;
}

int cmd_export_graph(const po::variables_map& vm) {
  Checkpoint ck = load_checkpoint(vm["checkpoint"].as<std::string>());
  RunConfig rc = ck.config;
  ModelConfig cfg = rc.model;
  cfg.vocab_size = ck.vocab_size;

  std::string text = vm["input-text"].as<std::string>();
  std::vector<int> ids;
  std::vector<std::string> labels;
  if (rc.task.kind == TaskKind::char_lm) {
    detail::Corpus corpus = detail::load_corpus(rc.task.corpus);
    int id_of[256];
    for (int i = 0; i < 256; ++i) id_of[i] = -1;
    for (size_t i = 0; i < corpus.alphabet.size(); ++i)
      id_of[(unsigned char)corpus.alphabet[i]] = (int)i;
    for (unsigned char c : text) {
      if (id_of[c] < 0)
        throw ConfigError(std::string("character '") + (char)c + "' not in the model alphabet");
      ids.push_back(id_of[c]);
      labels.push_back(std::string(1, (char)c));
    }
  } else {
    std::stringstream ss(text);
    std::string tok;
    while (ss >> tok) {
      ids.push_back((int)detail::to_long("input-text", tok));
      labels.push_back(tok);
    }
  }
  if (ids.empty()) throw ConfigError("--input-text produced no tokens");

  TraceOptions topt;
  topt.enabled = true;
  ForwardResult fr = forward({ids}, ck.params, cfg, topt);
  fr.traces[0].token_text = labels;
  export_graph(fr.traces[0], vm["out"].as<std::string>());
  std::cout << "wrote " << vm["out"].as<std::string>() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  std::string verb = argv[1];
  std::vector<std::string> rest(argv + 2, argv + argc);

  po::options_description opts("options");
  auto add = opts.add_options();
  add("help,h", "show help");
  if (verb == "train" || verb == "ablate") {
    add("config", po::value<std::string>(), "config file (key = value lines)");
    add("set", po::value<std::vector<std::string>>()->composing(), "override key=value");
    add("seed", po::value<uint64_t>(), "RNG seed (SEED env used when absent)");
  }
  if (verb == "train") add("out", po::value<std::string>()->required(), "output directory");
  if (verb == "eval" || verb == "export-graph")
    add("checkpoint", po::value<std::string>()->required(), "checkpoint.bin path");
  if (verb == "eval") {
    add("task", po::value<std::string>(), "override task kind");
    add("set", po::value<std::vector<std::string>>()->composing(), "override key=value");
    add("split", po::value<std::string>()->default_value("test"), "train|dev|test");
    add("lengths", po::value<std::string>(), "comma-separated eval lengths (writes CSV)");
    add("out", po::value<std::string>()->default_value("length_sweep.csv"), "sweep CSV path");
  }
  if (verb == "gradcheck") {
    add("preset", po::value<std::string>(), "accepted for symmetry; checks are fixed-size");
    add("corrupt-fixture", "include the deliberately broken backward rule");
  }
  if (verb == "bench") {
    add("lengths", po::value<std::string>()->default_value("256,512,1024,2048"),
        "comma-separated lengths");
    add("k-top", po::value<long>()->default_value(32), "keys kept per query");
    add("mode", po::value<std::string>()->default_value("dense,exact,bucketed"),
        "comma-separated: dense, exact, bucketed");
    add("trials", po::value<long>()->default_value(5), "timed trials per point (>= 5)");
    add("out", po::value<std::string>()->default_value("bench.csv"), "CSV path");
  }
  if (verb == "ablate") {
    add("disable", po::value<std::string>()->required(), "r2mu|asam|soes|all");
    add("seeds", po::value<std::string>()->default_value("1,2,3"), "comma-separated seeds");
  }
  if (verb == "export-graph") {
    add("input-text", po::value<std::string>()->required(),
        "chars (char_lm) or whitespace-separated token ids");
    add("out", po::value<std::string>()->required(), "DOT output path");
  }

  try {
    po::variables_map vm;
    po::store(po::command_line_parser(rest).options(opts).run(), vm);
    if (vm.count("help")) {
      std::cout << "ressformer_cli " << verb << "\n" << opts << "\n";
      return 0;
    }
    po::notify(vm);

    if (verb == "train") return cmd_train(vm);
    if (verb == "eval") return cmd_eval(vm);
    if (verb == "gradcheck") return cmd_gradcheck(vm);
    if (verb == "bench") return cmd_bench(vm);
    if (verb == "ablate") return cmd_ablate(vm);
    if (verb == "export-graph") return cmd_export_graph(vm);
    std::cerr << "unknown verb '" << verb << "'\n\n" << kUsage;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const po::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
